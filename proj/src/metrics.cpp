#include "decaps/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <thread>

#include "json.hpp"

namespace decaps {

using nlohmann::json;

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size() || scores.empty()) {
    throw ContractError("roc_auc: scores/labels size mismatch");
  }
  int64_t n_pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw ContractError("roc_auc: labels must be 0/1");
    n_pos += l;
  }
  const int64_t n_neg = static_cast<int64_t>(labels.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw ContractError("roc_auc: undefined metric, both classes must be present");
  }

  // Mann-Whitney via average ranks; ties share the mean rank (count 0.5).
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return scores[a] < scores[b]; });
  std::vector<double> rank(scores.size());
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (size_t k = i; k <= j; ++k) rank[order[k]] = avg_rank;
    i = j + 1;
  }
  double rank_sum_pos = 0.0;
  for (size_t k = 0; k < labels.size(); ++k) {
    if (labels[k] == 1) rank_sum_pos += rank[k];
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * (n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double iou(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) throw ContractError("iou: invalid box");
  const int64_t inter = intersection_area(a, b);
  const int64_t uni = a.area() + b.area() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

ApCounts match_detections(const std::vector<Detection>& preds,
                          const std::vector<Box>& truths, double iou_thr) {
  std::vector<int> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return preds[a].score > preds[b].score;
  });

  std::vector<bool> used(truths.size(), false);
  ApCounts counts;
  for (int p : order) {
    int best = -1;
    double best_iou = 0.0;
    for (size_t t = 0; t < truths.size(); ++t) {
      if (used[t]) continue;
      const double v = iou(preds[p].box, truths[t]);
      if (v >= iou_thr && v > best_iou) {
        best_iou = v;
        best = static_cast<int>(t);
      }
    }
    if (best >= 0) {
      used[best] = true;
      ++counts.tp;
    } else {
      ++counts.fp;
    }
  }
  for (bool u : used) {
    if (!u) ++counts.fn;
  }
  return counts;
}

double average_precision(const std::vector<std::vector<Detection>>& preds_per_sample,
                         const std::vector<std::vector<Box>>& truths_per_sample,
                         double iou_thr) {
  if (preds_per_sample.size() != truths_per_sample.size()) {
    throw ContractError("average_precision: sample count mismatch");
  }
  ApCounts total;
  for (size_t s = 0; s < preds_per_sample.size(); ++s) {
    total += match_detections(preds_per_sample[s], truths_per_sample[s], iou_thr);
  }
  const int64_t denom = total.tp + total.fp + total.fn;
  return denom == 0 ? 1.0 : static_cast<double>(total.tp) / static_cast<double>(denom);
}

std::vector<Detection> extract_detections(const Tensor& class_ham, double score,
                                          double theta_c, int stride, int level) {
  if (class_ham.rank() != 2) throw ShapeError("extract_detections: expected [h,w]");
  Tensor norm = normalize_ham(class_ham);
  const int h = norm.dim(0), w = norm.dim(1);
  const auto v = norm.data();

  std::vector<int> component(static_cast<size_t>(h) * w, -1);
  std::vector<Box> comp_boxes;
  std::vector<int> queue;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const int idx = r * w + c;
      if (v[idx] < theta_c || component[idx] >= 0) continue;
      const int comp = static_cast<int>(comp_boxes.size());
      Box box{r, c, r, c};
      component[idx] = comp;
      queue.assign(1, idx);
      while (!queue.empty()) {
        const int cur = queue.back();
        queue.pop_back();
        const int cr = cur / w, cc = cur % w;
        box.r0 = std::min(box.r0, cr);
        box.c0 = std::min(box.c0, cc);
        box.r1 = std::max(box.r1, cr);
        box.c1 = std::max(box.c1, cc);
        const int neighbors[4][2] = {{cr - 1, cc}, {cr + 1, cc}, {cr, cc - 1}, {cr, cc + 1}};
        for (const auto& nb : neighbors) {
          if (nb[0] < 0 || nb[0] >= h || nb[1] < 0 || nb[1] >= w) continue;
          const int nidx = nb[0] * w + nb[1];
          if (v[nidx] >= theta_c && component[nidx] < 0) {
            component[nidx] = comp;
            queue.push_back(nidx);
          }
        }
      }
      comp_boxes.push_back(box);
    }
  }

  if (comp_boxes.empty()) {
    // fallback: the argmax cell
    const auto mx = std::max_element(v.begin(), v.end());
    const int idx = static_cast<int>(mx - v.begin());
    comp_boxes.push_back(Box{idx / w, idx % w, idx / w, idx % w});
  }

  std::vector<Detection> dets;
  dets.reserve(comp_boxes.size());
  for (const Box& b : comp_boxes) {
    Box pixel{b.r0 * stride, b.c0 * stride, (b.r1 + 1) * stride - 1,
              (b.c1 + 1) * stride - 1};
    dets.push_back({/*cls=*/0, pixel, score, level});
  }
  return dets;
}

// --- evaluation -----------------------------------------------------------------

namespace {

struct SampleEval {
  std::vector<double> distilled;
  std::vector<Detection> dets_l1, dets_l2;
};

// Maps a box in resized-crop coordinates back into image coordinates.
Box crop_to_image(const Box& in_crop, const Box& crop, int net_input, int image_size) {
  const double sy = static_cast<double>(crop.height()) / net_input;
  const double sx = static_cast<double>(crop.width()) / net_input;
  Box out{crop.r0 + static_cast<int>(std::floor(in_crop.r0 * sy)),
          crop.c0 + static_cast<int>(std::floor(in_crop.c0 * sx)),
          crop.r0 + static_cast<int>(std::ceil((in_crop.r1 + 1) * sy)) - 1,
          crop.c0 + static_cast<int>(std::ceil((in_crop.c1 + 1) * sx)) - 1};
  out = out.clamped(image_size, image_size);
  if (!out.valid()) out = in_crop.clamped(image_size, image_size);
  return out;
}

SampleEval eval_one(const CapsNet& model, const Sample& sample, const EvalConfig& cfg) {
  const auto& mc = model.config();
  DistillPrediction pred = distill_predict(sample.image, model, cfg.peekaboo);

  SampleEval out;
  out.distilled = pred.distilled;
  for (int j = 0; j < mc.classes; ++j) {
    if (pred.coarse[j] >= cfg.decision_threshold) {
      auto dets = extract_detections(pred.class_hams[j], pred.coarse[j],
                                     cfg.peekaboo.theta_c, mc.total_stride(), 1);
      for (Detection& d : dets) {
        d.cls = j;
        d.box = d.box.clamped(mc.input_size, mc.input_size);
        out.dets_l1.push_back(d);
      }
    }
    if (cfg.peekaboo.distill && pred.fine[j] >= cfg.decision_threshold) {
      auto dets = extract_detections(pred.fine_class_hams[j], pred.fine[j],
                                     cfg.peekaboo.theta_c, mc.total_stride(), 2);
      for (Detection& d : dets) {
        d.cls = j;
        d.box = crop_to_image(d.box.clamped(mc.input_size, mc.input_size),
                              pred.crop_boxes[j], mc.input_size, mc.input_size);
        out.dets_l2.push_back(d);
      }
    }
  }
  if (!cfg.peekaboo.distill) out.dets_l2 = out.dets_l1;
  return out;
}

MeanStd miou_over_truths(const std::vector<SampleEval>& evals,
                         const std::vector<Sample>& dataset, int level) {
  std::vector<double> values;
  for (size_t s = 0; s < dataset.size(); ++s) {
    const auto& dets = level == 1 ? evals[s].dets_l1 : evals[s].dets_l2;
    for (const auto& [cls, truth] : dataset[s].boxes) {
      double best = 0.0;
      for (const Detection& d : dets) {
        if (d.cls != cls) continue;
        best = std::max(best, iou(d.box, truth));
      }
      values.push_back(best);
    }
  }
  MeanStd ms;
  if (values.empty()) return ms;
  for (double v : values) ms.mean += v;
  ms.mean /= static_cast<double>(values.size());
  for (double v : values) ms.std_dev += (v - ms.mean) * (v - ms.mean);
  ms.std_dev = std::sqrt(ms.std_dev / static_cast<double>(values.size()));
  return ms;
}

double ap_at(const std::vector<SampleEval>& evals, const std::vector<Sample>& dataset,
             int level, int num_classes, double thr) {
  ApCounts total;
  for (size_t s = 0; s < dataset.size(); ++s) {
    const auto& dets = level == 1 ? evals[s].dets_l1 : evals[s].dets_l2;
    for (int j = 0; j < num_classes; ++j) {
      std::vector<Detection> preds;
      std::vector<Box> truths;
      for (const Detection& d : dets) {
        if (d.cls == j) preds.push_back(d);
      }
      for (const auto& [cls, b] : dataset[s].boxes) {
        if (cls == j) truths.push_back(b);
      }
      total += match_detections(preds, truths, thr);
    }
  }
  const int64_t denom = total.tp + total.fp + total.fn;
  return denom == 0 ? 1.0 : static_cast<double>(total.tp) / static_cast<double>(denom);
}

}  // namespace

EvalReport evaluate(const CapsNet& model, const std::vector<Sample>& dataset,
                    const EvalConfig& cfg) {
  if (dataset.empty()) throw DataError("evaluate: empty dataset");
  const int J = model.config().classes;
  for (const Sample& s : dataset) {
    if (static_cast<int>(s.labels.size()) != J) {
      throw DataError("evaluate: sample label count does not match the model");
    }
  }

  std::vector<SampleEval> evals(dataset.size());
  const int threads = cfg.threads > 0
                          ? cfg.threads
                          : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  const int workers = std::min<int>(threads, static_cast<int>(dataset.size()));
  if (workers <= 1) {
    for (size_t s = 0; s < dataset.size(); ++s) evals[s] = eval_one(model, dataset[s], cfg);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) {
      pool.emplace_back([&, t] {
        for (size_t s = t; s < dataset.size(); s += workers) {
          evals[s] = eval_one(model, dataset[s], cfg);
        }
      });
    }
    for (auto& th : pool) th.join();
  }

  EvalReport report;
  report.num_samples = static_cast<int64_t>(dataset.size());

  for (int j = 0; j < J; ++j) {
    std::vector<double> scores(dataset.size());
    std::vector<int> labels(dataset.size());
    for (size_t s = 0; s < dataset.size(); ++s) {
      scores[s] = evals[s].distilled[j];
      labels[s] = dataset[s].labels[j];
    }
    report.auc_per_class.push_back(roc_auc(scores, labels));
  }
  report.mean_auc =
      std::accumulate(report.auc_per_class.begin(), report.auc_per_class.end(), 0.0) /
      static_cast<double>(J);

  report.miou_level1 = miou_over_truths(evals, dataset, 1);
  report.miou_level2 = miou_over_truths(evals, dataset, 2);
  for (double thr : kApThresholds) {
    report.ap_level1.push_back(ap_at(evals, dataset, 1, J, thr));
    report.ap_level2.push_back(ap_at(evals, dataset, 2, J, thr));
  }

  int64_t exact = 0, correct = 0;
  for (size_t s = 0; s < dataset.size(); ++s) {
    bool all_right = true;
    for (int j = 0; j < J; ++j) {
      const int predicted = evals[s].distilled[j] >= cfg.decision_threshold ? 1 : 0;
      if (predicted == dataset[s].labels[j]) {
        ++correct;
      } else {
        all_right = false;
      }
    }
    if (all_right) ++exact;
  }
  report.accuracy_exact_match = static_cast<double>(exact) / dataset.size();
  report.accuracy_per_class =
      static_cast<double>(correct) / (static_cast<double>(dataset.size()) * J);
  return report;
}

std::string eval_report_json(const EvalReport& r) {
  json j;
  j["num_samples"] = r.num_samples;
  j["auc"]["per_class"] = r.auc_per_class;
  j["auc"]["mean"] = r.mean_auc;
  j["miou"]["level1"] = {{"mean", r.miou_level1.mean}, {"std", r.miou_level1.std_dev}};
  j["miou"]["level2"] = {{"mean", r.miou_level2.mean}, {"std", r.miou_level2.std_dev}};
  json ap1 = json::object(), ap2 = json::object();
  for (size_t k = 0; k < std::size(kApThresholds); ++k) {
    char key[8];
    std::snprintf(key, sizeof(key), "%.1f", kApThresholds[k]);
    ap1[key] = r.ap_level1[k];
    ap2[key] = r.ap_level2[k];
  }
  j["ap"]["level1"] = ap1;
  j["ap"]["level2"] = ap2;
  j["accuracy"]["exact_match"] = r.accuracy_exact_match;
  j["accuracy"]["per_class"] = r.accuracy_per_class;
  j["config_echo"] = r.config_echo;
  j["manifest_hash"] = r.manifest_hash;
  return j.dump(2) + "\n";
}

EvalReport eval_report_from_json(const std::string& text) {
  EvalReport r;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("eval report: parse error: ") + e.what());
  }
  r.num_samples = j.at("num_samples").get<int64_t>();
  r.auc_per_class = j.at("auc").at("per_class").get<std::vector<double>>();
  r.mean_auc = j.at("auc").at("mean").get<double>();
  r.miou_level1 = {j.at("miou").at("level1").at("mean").get<double>(),
                   j.at("miou").at("level1").at("std").get<double>()};
  r.miou_level2 = {j.at("miou").at("level2").at("mean").get<double>(),
                   j.at("miou").at("level2").at("std").get<double>()};
  for (size_t k = 0; k < std::size(kApThresholds); ++k) {
    char key[8];
    std::snprintf(key, sizeof(key), "%.1f", kApThresholds[k]);
    r.ap_level1.push_back(j.at("ap").at("level1").at(key).get<double>());
    r.ap_level2.push_back(j.at("ap").at("level2").at(key).get<double>());
  }
  r.accuracy_exact_match = j.at("accuracy").at("exact_match").get<double>();
  r.accuracy_per_class = j.at("accuracy").at("per_class").get<double>();
  r.config_echo = j.value("config_echo", "");
  r.manifest_hash = j.value("manifest_hash", "");
  return r;
}

SampleVisualization visualize_sample(const CapsNet& model, const Sample& sample,
                                     const EvalConfig& cfg) {
  DistillPrediction pred = distill_predict(sample.image, model, cfg.peekaboo);
  SampleEval ev = eval_one(model, sample, cfg);
  SampleVisualization vis;
  vis.sample_id = sample.id;
  vis.coarse_scores = pred.coarse;
  vis.fine_scores = pred.fine;
  vis.distilled_scores = pred.distilled;
  vis.coarse_hams = pred.coarse_hams;
  vis.detections_level1 = ev.dets_l1;
  vis.detections_level2 = ev.dets_l2;
  return vis;
}

void write_pgm(const std::filesystem::path& path, const Tensor& map) {
  if (map.rank() != 2) throw ShapeError("write_pgm: expected [h,w]");
  const int h = map.dim(0), w = map.dim(1);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("write_pgm: cannot write " + path.string());
  out << "P5\n" << w << ' ' << h << "\n255\n";
  const auto v = map.data();
  std::vector<unsigned char> bytes(v.size());
  for (size_t i = 0; i < v.size(); ++i) {
    bytes[i] = static_cast<unsigned char>(
        std::lround(std::clamp(v[i], 0.0, 1.0) * 255.0));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write_pgm: write failed for " + path.string());
}

}  // namespace decaps
