#include "decaps/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <thread>

namespace decaps {

namespace {

constexpr double kNormEpsilon = 1e-12;

double vec_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

TemplateBank::TemplateBank(int heads, int classes, int d)
    : heads_(heads), classes_(classes), d_(d),
      values_(static_cast<size_t>(heads) * classes * d, 0.0) {
  if (heads < 1 || classes < 1 || d < 1) {
    throw ConfigError("template bank: dimensions must be >= 1");
  }
}

std::span<const double> TemplateBank::at(int head, int cls) const {
  if (head < 0 || head >= heads_ || cls < 0 || cls >= classes_) {
    throw ShapeError("template bank: (head, class) out of range");
  }
  return {values_.data() + (static_cast<size_t>(head) * classes_ + cls) * d_,
          static_cast<size_t>(d_)};
}

std::span<double> TemplateBank::at(int head, int cls) {
  auto view = std::as_const(*this).at(head, cls);
  return {const_cast<double*>(view.data()), view.size()};
}

// --- losses --------------------------------------------------------------

Tensor margin_loss(const Tensor& scores, const std::vector<int>& labels,
                   double m_plus, double m_minus, double lambda,
                   std::vector<double>* per_class) {
  const int j = static_cast<int>(labels.size());
  if (scores.rank() != 1 || scores.dim(0) != j) {
    throw ShapeError("margin_loss: scores " + shape_str(scores.shape()) +
                     " vs " + std::to_string(j) + " labels");
  }
  std::vector<double> pos(j), neg(j);
  for (int c = 0; c < j; ++c) {
    if (labels[c] != 0 && labels[c] != 1) {
      throw ContractError("margin_loss: labels must be 0 or 1");
    }
    pos[c] = static_cast<double>(labels[c]);
    neg[c] = lambda * (1.0 - labels[c]);
  }
  Tensor t_pos = Tensor::from_data({j}, std::move(pos));
  Tensor t_neg = Tensor::from_data({j}, std::move(neg));
  Tensor m_hi = Tensor::constant({1}, m_plus);
  Tensor m_lo = Tensor::constant({1}, m_minus);

  Tensor present = mul(t_pos, square(relu(sub(m_hi, scores))));
  Tensor absent = mul(t_neg, square(relu(sub(scores, m_lo))));
  Tensor per_class_terms = add(present, absent);
  if (per_class) {
    per_class->assign(per_class_terms.data().begin(), per_class_terms.data().end());
  }
  return reduce_sum(per_class_terms, {0});
}

Tensor semantic_features(const Tensor& weighted_votes) {
  if (weighted_votes.rank() != 5) {
    throw ShapeError("semantic_features: expected [I,J,h,w,d]");
  }
  return reduce_mean(weighted_votes, {2, 3});
}

Tensor har_loss(const Tensor& features, const TemplateBank& bank) {
  if (features.rank() != 3 || features.dim(0) != bank.heads() ||
      features.dim(1) != bank.classes() || features.dim(2) != bank.d()) {
    throw ShapeError("har_loss: features do not match the template bank");
  }
  const int I = bank.heads(), J = bank.classes(), d = bank.d();

  // Template tensor and per-(i,j) validity mask: a zero template pins its
  // term to the constant 1 (cosine-with-zero convention).
  std::vector<double> tdata(bank.raw());
  std::vector<double> live(static_cast<size_t>(I) * J, 0.0);
  std::vector<double> dead(static_cast<size_t>(I) * J, 0.0);
  for (int i = 0; i < I; ++i) {
    for (int c = 0; c < J; ++c) {
      const bool nonzero = vec_norm(bank.at(i, c)) >= kNormEpsilon;
      live[static_cast<size_t>(i) * J + c] = nonzero ? 1.0 : 0.0;
      dead[static_cast<size_t>(i) * J + c] = nonzero ? 0.0 : 1.0;
    }
  }
  Tensor templates = Tensor::from_data({I, J, d}, std::move(tdata));
  Tensor live_mask = Tensor::from_data({I, J}, std::move(live));
  Tensor dead_mask = Tensor::from_data({I, J}, std::move(dead));

  Tensor dot = reduce_sum(mul(features, templates), {2});       // [I,J]
  Tensor f_norm = capsule_length(features);                     // [I,J]
  Tensor t_norm = capsule_length(templates);                    // [I,J]
  Tensor denom = mul(add_scalar(f_norm, kNormEpsilon), add_scalar(t_norm, kNormEpsilon));
  Tensor cosine = mul(dot, reciprocal_clamped(denom, kNormEpsilon));
  Tensor term = add(mul(live_mask, sub(Tensor::constant({1}, 1.0), cosine)), dead_mask);
  return reduce_mean(term, {0, 1});
}

void update_templates(TemplateBank& bank,
                      const std::vector<std::vector<double>>& features,
                      const std::vector<std::vector<int>>& labels, double gamma) {
  if (features.size() != labels.size()) {
    throw ContractError("update_templates: features/labels size mismatch");
  }
  const int I = bank.heads(), J = bank.classes(), d = bank.d();
  const size_t block = static_cast<size_t>(I) * J * d;
  for (const auto& f : features) {
    if (f.size() != block) throw ShapeError("update_templates: bad feature block");
  }

  for (int c = 0; c < J; ++c) {
    // Batch-mean feature over samples where this class is present.
    std::vector<double> mean(static_cast<size_t>(I) * d, 0.0);
    int count = 0;
    for (size_t s = 0; s < features.size(); ++s) {
      if (static_cast<int>(labels[s].size()) != J) {
        throw ShapeError("update_templates: bad label vector");
      }
      if (labels[s][c] != 1) continue;
      ++count;
      for (int i = 0; i < I; ++i) {
        const double* src =
            features[s].data() + (static_cast<size_t>(i) * J + c) * d;
        double* dst = mean.data() + static_cast<size_t>(i) * d;
        for (int k = 0; k < d; ++k) dst[k] += src[k];
      }
    }
    if (count == 0) continue;
    for (double& v : mean) v /= count;

    for (int i = 0; i < I; ++i) {
      std::span<double> t = bank.at(i, c);
      const double* f = mean.data() + static_cast<size_t>(i) * d;
      const double fn = vec_norm({f, static_cast<size_t>(d)});
      const double tn = vec_norm(t);
      // Normalized zero stays zero, so the first update moves t by gamma*f_hat.
      for (int k = 0; k < d; ++k) {
        const double f_hat = fn >= kNormEpsilon ? f[k] / fn : 0.0;
        const double t_hat = tn >= kNormEpsilon ? t[k] / tn : 0.0;
        t[k] += gamma * (f_hat - t_hat);
      }
    }
  }
}

// --- activation-guided image ops -------------------------------------------

Tensor normalize_ham(const Tensor& ham) {
  if (ham.rank() != 2) throw ShapeError("normalize_ham: expected [h,w]");
  const auto v = ham.data();
  const auto [mn_it, mx_it] = std::minmax_element(v.begin(), v.end());
  const double mn = *mn_it, mx = *mx_it;
  const double range = mx - mn;
  std::vector<double> out(v.size(), 0.0);
  if (range > 0.0) {
    // per-element division so the extremes map to exactly 0 and 1
    for (size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - mn) / range;
  }
  // constant maps carry no localization signal and normalize to zero
  return Tensor::from_data(ham.shape(), std::move(out));
}

CropMask crop_mask_and_bbox(const Tensor& norm_ham, double theta_c) {
  if (norm_ham.rank() != 2) throw ShapeError("crop_mask_and_bbox: expected [h,w]");
  if (theta_c < 0.0 || theta_c > 1.0) {
    throw ConfigError("crop_mask_and_bbox: theta_c must lie in [0,1]");
  }
  const int h = norm_ham.dim(0), w = norm_ham.dim(1);
  const auto v = norm_ham.data();
  std::vector<double> mask(v.size(), 0.0);
  Box box{h, w, -1, -1};
  bool any = false;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (v[static_cast<size_t>(r) * w + c] >= theta_c) {
        mask[static_cast<size_t>(r) * w + c] = 1.0;
        any = true;
        box.r0 = std::min(box.r0, r);
        box.c0 = std::min(box.c0, c);
        box.r1 = std::max(box.r1, r);
        box.c1 = std::max(box.c1, c);
      }
    }
  }
  if (!any) {
    // fallback: the argmax cell, so cropping is always defined
    const auto mx = std::max_element(v.begin(), v.end());
    const int idx = static_cast<int>(mx - v.begin());
    box = Box{idx / w, idx % w, idx / w, idx % w};
  }
  return {Tensor::from_data(norm_ham.shape(), std::move(mask)), box};
}

Box feature_box_to_image(const Box& feature_box, int stride, int image_h, int image_w) {
  if (stride < 1) throw ConfigError("feature_box_to_image: stride must be >= 1");
  Box img{feature_box.r0 * stride, feature_box.c0 * stride,
          (feature_box.r1 + 1) * stride - 1, (feature_box.c1 + 1) * stride - 1};
  img = img.clamped(image_h, image_w);
  if (!img.valid()) {
    // degenerate after clamping: fall back to a stride x stride corner patch
    const int r = std::clamp(feature_box.r0 * stride, 0, image_h - stride);
    const int c = std::clamp(feature_box.c0 * stride, 0, image_w - stride);
    img = Box{r, c, r + stride - 1, c + stride - 1};
  }
  return img;
}

Tensor crop_and_upsample(const Tensor& image, const Box& feature_box, int stride,
                         int target) {
  if (image.rank() != 3) throw ShapeError("crop_and_upsample: image must be [c,h,w]");
  if (target < 1) throw ConfigError("crop_and_upsample: target must be >= 1");
  const int ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  const Box img_box = feature_box_to_image(feature_box, stride, h, w);
  const int ph = img_box.height(), pw = img_box.width();
  const auto src = image.data();

  std::vector<double> out(static_cast<size_t>(ch) * target * target);
  const double sy = static_cast<double>(ph) / target;
  const double sx = static_cast<double>(pw) / target;
  for (int c = 0; c < ch; ++c) {
    const double* plane = src.data() + static_cast<size_t>(c) * h * w +
                          static_cast<size_t>(img_box.r0) * w + img_box.c0;
    // plane has logical extent ph x pw with row stride w
    for (int oy = 0; oy < target; ++oy) {
      const double yy = (oy + 0.5) * sy - 0.5;
      for (int ox = 0; ox < target; ++ox) {
        const double xx = (ox + 0.5) * sx - 0.5;
        // clamped bilinear over the cropped window
        const int y0 = std::clamp(static_cast<int>(std::floor(yy)), 0, ph - 1);
        const int x0 = std::clamp(static_cast<int>(std::floor(xx)), 0, pw - 1);
        const int y1 = std::min(y0 + 1, ph - 1);
        const int x1 = std::min(x0 + 1, pw - 1);
        const double fy = std::clamp(yy - y0, 0.0, 1.0);
        const double fx = std::clamp(xx - x0, 0.0, 1.0);
        const double a = plane[static_cast<size_t>(y0) * w + x0];
        const double b = plane[static_cast<size_t>(y0) * w + x1];
        const double cc = plane[static_cast<size_t>(y1) * w + x0];
        const double dd = plane[static_cast<size_t>(y1) * w + x1];
        out[(static_cast<size_t>(c) * target + oy) * target + ox] =
            a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + cc * fy * (1 - fx) +
            dd * fy * fx;
      }
    }
  }
  return Tensor::from_data({ch, target, target}, std::move(out));
}

Tensor drop_patch(const Tensor& image, const Tensor& norm_ham, double theta_d,
                  int stride) {
  if (image.rank() != 3) throw ShapeError("drop_patch: image must be [c,h,w]");
  if (norm_ham.rank() != 2) throw ShapeError("drop_patch: map must be [h,w]");
  if (theta_d < 0.0 || theta_d > 1.0) {
    throw ConfigError("drop_patch: theta_d must lie in [0,1]");
  }
  const int ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  const int gh = norm_ham.dim(0), gw = norm_ham.dim(1);
  const auto src = image.data();
  const auto map = norm_ham.data();

  std::vector<double> out(src.begin(), src.end());
  for (int y = 0; y < h; ++y) {
    const int gy = std::min(y / stride, gh - 1);
    for (int x = 0; x < w; ++x) {
      const int gx = std::min(x / stride, gw - 1);
      if (map[static_cast<size_t>(gy) * gw + gx] >= theta_d) {
        for (int c = 0; c < ch; ++c) {
          out[(static_cast<size_t>(c) * h + y) * w + x] = 0.0;
        }
      }
    }
  }
  return Tensor::from_data(image.shape(), std::move(out));
}

// --- trainer ------------------------------------------------------------------

PeekabooTrainer::PeekabooTrainer(CapsNet& model, TemplateBank& bank,
                                 AdamState& optimizer, LossConfig loss,
                                 PeekabooConfig peekaboo, uint64_t seed, int threads)
    : model_(model), bank_(bank), optimizer_(optimizer), loss_(loss),
      peekaboo_(peekaboo), seed_(seed),
      threads_(threads > 0 ? threads
                           : std::max(1u, std::thread::hardware_concurrency())) {
  if (bank_.heads() != model.config().heads ||
      bank_.classes() != model.config().classes ||
      bank_.d() != model.config().d_out) {
    throw ConfigError("trainer: template bank does not match the model");
  }
}

namespace {

struct SampleOutcome {
  GradStore grads;
  double margin = 0.0;   // mean over passes
  double har = 0.0;      // weighted mean over passes
  std::vector<double> per_class_margin;
  std::vector<double> raw_features;  // detached f_ij block
};

struct PassLoss {
  Tensor loss;  // margin + w * har
  double margin_value = 0.0;
  double har_value = 0.0;  // weighted
};

}  // namespace

LossBreakdown PeekabooTrainer::train_step(const std::vector<TrainItem>& batch,
                                          int epoch) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  const auto& mc = model_.config();
  const int num_heads = mc.heads;
  const int stride = mc.total_stride();

  std::vector<SampleOutcome> outcomes(batch.size());
  const double seed_scale = 1.0 / static_cast<double>(batch.size());

  auto run_sample = [&](size_t s) {
    const TrainItem& item = batch[s];
    SampleOutcome& out = outcomes[s];
    Rng sample_rng =
        Rng(seed_).split(70).split(static_cast<uint64_t>(epoch)).split(
            static_cast<uint64_t>(item.sample_index));

    std::vector<PassLoss> passes;
    auto eval_pass = [&](const Tensor& input, bool record_per_class) {
      ForwardResult fwd = model_.forward(input);
      PassLoss pl;
      Tensor margin =
          margin_loss(fwd.scores, item.labels, loss_.m_plus, loss_.m_minus,
                      loss_.lambda, record_per_class ? &out.per_class_margin : nullptr);
      Tensor features = semantic_features(fwd.routing.weighted_votes);
      Tensor har = har_loss(features, bank_);
      pl.loss = add(margin, mul_scalar(har, loss_.har_weight));
      pl.margin_value = margin.scalar();
      pl.har_value = loss_.har_weight * har.scalar();
      if (record_per_class) {
        Tensor f = detach(features);
        out.raw_features.assign(f.data().begin(), f.data().end());
      }
      return std::make_pair(pl, fwd);
    };

    auto [raw_pass, raw_fwd] = eval_pass(item.image, /*record_per_class=*/true);
    passes.push_back(raw_pass);

    if (peekaboo_.crop || peekaboo_.drop) {
      Tensor hams = detach(raw_fwd.routing.hams);  // [I, J, h, w]
      const int gh = hams.dim(2), gw = hams.dim(3);
      std::vector<PassLoss> crop_losses, drop_losses;
      for (int j = 0; j < static_cast<int>(item.labels.size()); ++j) {
        if (item.labels[j] != 1) continue;
        Tensor selected;  // [h, w]
        if (peekaboo_.head_select == HeadSelect::kRandom) {
          const int i = sample_rng.uniform_int(0, num_heads - 1);
          Tensor flat = reshape(hams, {num_heads * static_cast<int>(item.labels.size()),
                                       gh, gw});
          selected = reshape(
              narrow0(flat, i * static_cast<int>(item.labels.size()) + j, 1), {gh, gw});
        } else {
          Tensor per_class = narrow0(permute(hams, {1, 0, 2, 3}), j, 1);
          selected = reshape(reduce_mean(per_class, {0, 1}), {gh, gw});
        }
        Tensor norm = normalize_ham(selected);
        if (peekaboo_.crop) {
          CropMask cm = crop_mask_and_bbox(norm, peekaboo_.theta_c);
          Tensor patch = crop_and_upsample(item.image, cm.box, stride, mc.input_size);
          crop_losses.push_back(eval_pass(patch, false).first);
        }
        if (peekaboo_.drop) {
          Tensor dropped = drop_patch(item.image, norm, peekaboo_.theta_d, stride);
          drop_losses.push_back(eval_pass(dropped, false).first);
        }
      }
      auto fold = [&](std::vector<PassLoss>& parts) {
        if (parts.empty()) return;
        Tensor sum = parts[0].loss;
        double margin_sum = parts[0].margin_value, har_sum = parts[0].har_value;
        for (size_t k = 1; k < parts.size(); ++k) {
          sum = add(sum, parts[k].loss);
          margin_sum += parts[k].margin_value;
          har_sum += parts[k].har_value;
        }
        const double inv = 1.0 / static_cast<double>(parts.size());
        passes.push_back(
            {mul_scalar(sum, inv), margin_sum * inv, har_sum * inv});
      };
      fold(crop_losses);
      fold(drop_losses);
    }

    Tensor total = passes[0].loss;
    for (size_t k = 1; k < passes.size(); ++k) total = add(total, passes[k].loss);
    const double inv_passes = 1.0 / static_cast<double>(passes.size());
    total = mul_scalar(total, inv_passes);
    for (const PassLoss& pl : passes) {
      out.margin += pl.margin_value * inv_passes;
      out.har += pl.har_value * inv_passes;
    }
    backward(total, seed_scale, out.grads);
  };

  const int workers = std::min<int>(threads_, static_cast<int>(batch.size()));
  if (workers <= 1) {
    for (size_t s = 0; s < batch.size(); ++s) run_sample(s);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int t = 0; t < workers; ++t) {
      pool.emplace_back([&, t] {
        for (size_t s = t; s < batch.size(); s += workers) run_sample(s);
      });
    }
    for (auto& th : pool) th.join();
  }

  // Deterministic reduction in sample order, independent of thread count.
  GradStore grads = std::move(outcomes[0].grads);
  for (size_t s = 1; s < outcomes.size(); ++s) grads.add_from(outcomes[s].grads);
  optimizer_.step(grads);

  std::vector<std::vector<double>> features;
  std::vector<std::vector<int>> labels;
  features.reserve(batch.size());
  labels.reserve(batch.size());
  for (size_t s = 0; s < batch.size(); ++s) {
    features.push_back(std::move(outcomes[s].raw_features));
    labels.push_back(batch[s].labels);
  }
  update_templates(bank_, features, labels, loss_.gamma);

  LossBreakdown breakdown;
  for (const auto& out : outcomes) {
    breakdown.margin += out.margin;
    breakdown.har += out.har;
  }
  breakdown.margin /= static_cast<double>(batch.size());
  breakdown.har /= static_cast<double>(batch.size());
  breakdown.total = breakdown.margin + breakdown.har;
  breakdown.per_class_margin = outcomes[0].per_class_margin;
  ++global_step_;
  return breakdown;
}

// --- distillation inference ----------------------------------------------------

DistillPrediction distill_predict(const Tensor& image, const CapsNet& model,
                                  const PeekabooConfig& cfg) {
  const auto& mc = model.config();
  DistillPrediction pred;

  ForwardResult coarse = model.forward(image);
  pred.coarse.assign(coarse.scores.data().begin(), coarse.scores.data().end());
  pred.coarse_hams = detach(coarse.routing.hams);

  const int J = mc.classes;
  const int gh = pred.coarse_hams.dim(2), gw = pred.coarse_hams.dim(3);
  Tensor by_class = permute(pred.coarse_hams, {1, 0, 2, 3});  // [J, I, h, w]
  for (int j = 0; j < J; ++j) {
    Tensor avg = reshape(reduce_mean(narrow0(by_class, j, 1), {0, 1}), {gh, gw});
    pred.class_hams.push_back(detach(avg));
  }

  if (!cfg.distill) {
    pred.fine = pred.coarse;
    pred.distilled = pred.coarse;
    return pred;
  }

  pred.fine.resize(J);
  pred.distilled.resize(J);
  for (int j = 0; j < J; ++j) {
    Tensor norm = normalize_ham(pred.class_hams[j]);
    CropMask cm = crop_mask_and_bbox(norm, cfg.theta_c);
    pred.crop_boxes.push_back(
        feature_box_to_image(cm.box, mc.total_stride(), mc.input_size, mc.input_size));
    Tensor patch = crop_and_upsample(image, cm.box, mc.total_stride(), mc.input_size);
    ForwardResult fine = model.forward(patch);
    pred.fine[j] = fine.scores[j];

    Tensor fine_by_class = permute(fine.routing.hams, {1, 0, 2, 3});
    Tensor fine_avg =
        reshape(reduce_mean(narrow0(fine_by_class, j, 1), {0, 1}), {gh, gw});
    pred.fine_class_hams.push_back(detach(fine_avg));

    pred.distilled[j] = 0.5 * (pred.coarse[j] + pred.fine[j]);
  }
  return pred;
}

// --- checkpoint I/O --------------------------------------------------------------

namespace {

void write_bytes(std::ostream& out, const void* p, size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void write_pod(std::ostream& out, T v) {
  write_bytes(out, &v, sizeof(T));
}

void write_string(std::ostream& out, const std::string& s) {
  write_pod<uint64_t>(out, s.size());
  write_bytes(out, s.data(), s.size());
}

void write_doubles(std::ostream& out, std::span<const double> v) {
  write_pod<uint64_t>(out, v.size());
  write_bytes(out, v.data(), v.size() * sizeof(double));
}

void read_bytes(std::istream& in, void* p, size_t n) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!in) throw DataError("checkpoint: truncated file");
}

template <typename T>
T read_pod(std::istream& in) {
  T v;
  read_bytes(in, &v, sizeof(T));
  return v;
}

std::string read_string(std::istream& in) {
  const uint64_t n = read_pod<uint64_t>(in);
  if (n > (1ull << 32)) throw DataError("checkpoint: implausible string length");
  std::string s(n, '\0');
  read_bytes(in, s.data(), n);
  return s;
}

std::vector<double> read_doubles(std::istream& in) {
  const uint64_t n = read_pod<uint64_t>(in);
  if (n > (1ull << 32)) throw DataError("checkpoint: implausible buffer length");
  std::vector<double> v(n);
  read_bytes(in, v.data(), n * sizeof(double));
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("checkpoint: cannot write " + path.string());
  write_bytes(out, kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
  write_pod<uint32_t>(out, kCheckpointVersion);
  write_string(out, ckpt.config_echo);

  write_pod<uint32_t>(out, static_cast<uint32_t>(ckpt.params.size()));
  for (const auto& [name, tensor] : ckpt.params) {
    write_string(out, name);
    const Shape& s = tensor.shape();
    write_pod<uint32_t>(out, static_cast<uint32_t>(s.size()));
    for (int d : s) write_pod<int32_t>(out, d);
    write_doubles(out, tensor.data());
  }

  write_pod<int32_t>(out, ckpt.bank.heads());
  write_pod<int32_t>(out, ckpt.bank.classes());
  write_pod<int32_t>(out, ckpt.bank.d());
  write_doubles(out, ckpt.bank.raw());

  write_pod<double>(out, ckpt.adam_lr);
  write_pod<double>(out, ckpt.adam_beta1);
  write_pod<double>(out, ckpt.adam_beta2);
  write_pod<double>(out, ckpt.adam_eps);
  write_pod<int64_t>(out, ckpt.adam_step_count);
  write_pod<uint32_t>(out, static_cast<uint32_t>(ckpt.adam_m.size()));
  for (const auto& m : ckpt.adam_m) write_doubles(out, m);
  for (const auto& v : ckpt.adam_v) write_doubles(out, v);

  write_pod<int64_t>(out, ckpt.epochs_done);
  write_pod<int64_t>(out, ckpt.global_step);
  write_string(out, ckpt.rng_state);
  if (!out) throw DataError("checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path.string());
  char magic[sizeof(kCheckpointMagic) - 1];
  read_bytes(in, magic, sizeof(magic));
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw DataError("checkpoint: bad magic in " + path.string());
  }
  const uint32_t version = read_pod<uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }

  Checkpoint ckpt;
  ckpt.config_echo = read_string(in);
  const uint32_t n_params = read_pod<uint32_t>(in);
  for (uint32_t k = 0; k < n_params; ++k) {
    std::string name = read_string(in);
    const uint32_t rank = read_pod<uint32_t>(in);
    Shape shape(rank);
    for (uint32_t r = 0; r < rank; ++r) shape[r] = read_pod<int32_t>(in);
    std::vector<double> data = read_doubles(in);
    ckpt.params.emplace_back(std::move(name),
                             Tensor::from_data(std::move(shape), std::move(data)));
  }

  const int I = read_pod<int32_t>(in);
  const int J = read_pod<int32_t>(in);
  const int d = read_pod<int32_t>(in);
  ckpt.bank = TemplateBank(I, J, d);
  ckpt.bank.raw() = read_doubles(in);
  if (ckpt.bank.raw().size() != static_cast<size_t>(I) * J * d) {
    throw DataError("checkpoint: template bank size mismatch");
  }

  ckpt.adam_lr = read_pod<double>(in);
  ckpt.adam_beta1 = read_pod<double>(in);
  ckpt.adam_beta2 = read_pod<double>(in);
  ckpt.adam_eps = read_pod<double>(in);
  ckpt.adam_step_count = read_pod<int64_t>(in);
  const uint32_t n_moments = read_pod<uint32_t>(in);
  for (uint32_t k = 0; k < n_moments; ++k) ckpt.adam_m.push_back(read_doubles(in));
  for (uint32_t k = 0; k < n_moments; ++k) ckpt.adam_v.push_back(read_doubles(in));

  ckpt.epochs_done = read_pod<int64_t>(in);
  ckpt.global_step = read_pod<int64_t>(in);
  ckpt.rng_state = read_string(in);
  return ckpt;
}

void restore_model(const Checkpoint& ckpt, CapsNet& model, TemplateBank& bank,
                   AdamState& optimizer) {
  auto named = model.named_params();
  if (named.size() != ckpt.params.size()) {
    throw DataError("checkpoint v" + std::to_string(kCheckpointVersion) +
                    ": parameter count mismatch (model " +
                    std::to_string(named.size()) + ", file " +
                    std::to_string(ckpt.params.size()) + ")");
  }
  for (size_t k = 0; k < named.size(); ++k) {
    auto& [name, live] = named[k];
    const auto& [file_name, stored] = ckpt.params[k];
    if (name != file_name || live.shape() != stored.shape()) {
      throw DataError("checkpoint v" + std::to_string(kCheckpointVersion) +
                      ": shape/name mismatch at '" + name + "' vs '" + file_name +
                      "' " + shape_str(stored.shape()));
    }
    auto dst = live.mutable_data();
    std::copy(stored.data().begin(), stored.data().end(), dst.begin());
  }
  if (bank.heads() != ckpt.bank.heads() || bank.classes() != ckpt.bank.classes() ||
      bank.d() != ckpt.bank.d()) {
    throw DataError("checkpoint: template bank shape mismatch");
  }
  bank.raw() = ckpt.bank.raw();
  optimizer.restore(ckpt.adam_step_count, ckpt.adam_m, ckpt.adam_v);
}

}  // namespace decaps
