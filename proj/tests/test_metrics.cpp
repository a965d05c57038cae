#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "decaps/metrics.hpp"

using namespace decaps;

namespace {

// All-pairs Mann-Whitney count, the brute-force oracle.
double auc_brute_force(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0.0;
  int64_t pairs = 0;
  for (size_t p = 0; p < scores.size(); ++p) {
    if (labels[p] != 1) continue;
    for (size_t q = 0; q < scores.size(); ++q) {
      if (labels[q] != 0) continue;
      ++pairs;
      if (scores[p] > scores[q]) wins += 1.0;
      else if (scores[p] == scores[q]) wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

int64_t pixel_count_intersection(const Box& a, const Box& b, int field) {
  int64_t n = 0;
  for (int r = 0; r < field; ++r) {
    for (int c = 0; c < field; ++c) {
      const bool in_a = r >= a.r0 && r <= a.r1 && c >= a.c0 && c <= a.c1;
      const bool in_b = r >= b.r0 && r <= b.r1 && c >= b.c0 && c <= b.c1;
      if (in_a && in_b) ++n;
    }
  }
  return n;
}

int64_t pixel_count_union(const Box& a, const Box& b, int field) {
  int64_t n = 0;
  for (int r = 0; r < field; ++r) {
    for (int c = 0; c < field; ++c) {
      const bool in_a = r >= a.r0 && r <= a.r1 && c >= a.c0 && c <= a.c1;
      const bool in_b = r >= b.r0 && r <= b.r1 && c >= b.c0 && c <= b.c1;
      if (in_a || in_b) ++n;
    }
  }
  return n;
}

Box random_box(Rng& rng, int field) {
  const int r0 = rng.uniform_int(0, field - 2);
  const int c0 = rng.uniform_int(0, field - 2);
  return Box{r0, c0, rng.uniform_int(r0, field - 1), rng.uniform_int(c0, field - 1)};
}

}  // namespace

TEST_CASE("roc_auc basics") {
  CHECK(roc_auc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}) == 1.0);
  CHECK(roc_auc({0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1}) == 0.5);
  CHECK(roc_auc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}) == doctest::Approx(0.75));
  CHECK_THROWS_AS(roc_auc({0.1, 0.2}, {1, 1}), ContractError);
}

TEST_CASE("roc_auc matches the all-pairs oracle and is rank-invariant") {
  Rng rng(3);
  for (int rep = 0; rep < 200; ++rep) {
    const int n = rng.uniform_int(4, 40);
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    int pos = 0;
    for (int i = 0; i < n; ++i) {
      // quantized scores so ties actually occur
      scores[i] = rng.uniform_int(0, 9) / 9.0;
      labels[i] = rng.uniform_int(0, 1);
      pos += labels[i];
    }
    if (pos == 0 || pos == n) continue;
    const double fast = roc_auc(scores, labels);
    const double slow = auc_brute_force(scores, labels);
    CHECK(fast == doctest::Approx(slow).epsilon(1e-12));

    // strictly monotone transforms leave the ranking unchanged
    std::vector<double> warped(n);
    for (int i = 0; i < n; ++i) warped[i] = std::exp(3.0 * scores[i]) - 2.0;
    CHECK(roc_auc(warped, labels) == doctest::Approx(fast).epsilon(1e-12));
  }
}

TEST_CASE("iou pixel conventions") {
  const Box a{0, 0, 1, 1};
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, Box{5, 5, 6, 6}) == 0.0);
  CHECK(iou(a, Box{1, 1, 2, 2}) == doctest::Approx(1.0 / 7.0).epsilon(1e-12));

  Rng rng(7);
  for (int rep = 0; rep < 100; ++rep) {
    const Box x = random_box(rng, 12);
    const Box y = random_box(rng, 12);
    CHECK(iou(x, y) == doctest::Approx(iou(y, x)).epsilon(1e-12));
    const int64_t inter = pixel_count_intersection(x, y, 12);
    const int64_t uni = pixel_count_union(x, y, 12);
    CHECK(iou(x, y) == doctest::Approx(static_cast<double>(inter) / uni).epsilon(1e-12));
  }
}

TEST_CASE("average precision spot cases") {
  // one prediction matching one truth at IoU 0.6 with threshold 0.5
  const Box truth{0, 0, 9, 9};
  const Box pred{0, 0, 9, 5};  // IoU = 60/100
  REQUIRE(iou(pred, truth) == doctest::Approx(0.6));
  CHECK(average_precision({{Detection{0, pred, 0.9, 1}}}, {{truth}}, 0.5) == 1.0);
  CHECK(average_precision({{Detection{0, pred, 0.9, 1}}}, {{truth}}, 0.7) == 0.0);

  // two truths, one matched prediction: 1 / (1 + 0 + 1)
  const Box t2{20, 20, 25, 25};
  CHECK(average_precision({{Detection{0, truth, 0.9, 1}}}, {{truth, t2}}, 0.5) == 0.5);

  // no predictions and no truths: vacuous perfection
  CHECK(average_precision({{}}, {{}}, 0.5) == 1.0);
}

TEST_CASE("greedy matcher agrees with independent re-implementations") {
  Rng rng(11);
  for (int rep = 0; rep < 300; ++rep) {
    const int np = rng.uniform_int(0, 6), nt = rng.uniform_int(0, 6);
    std::vector<Detection> preds;
    std::vector<Box> truths;
    for (int i = 0; i < np; ++i) {
      preds.push_back({0, random_box(rng, 20), rng.uniform(0.0, 1.0), 1});
    }
    for (int i = 0; i < nt; ++i) truths.push_back(random_box(rng, 20));
    const double thr = 0.3 + 0.1 * rng.uniform_int(0, 3);

    const ApCounts got = match_detections(preds, truths, thr);

    // straight-line greedy re-implementation: walk predictions by score,
    // scanning every truth each time
    std::vector<int> order(preds.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return preds[a].score > preds[b].score; });
    std::vector<bool> taken(truths.size(), false);
    int64_t tp = 0, fp = 0;
    for (int p : order) {
      int best = -1;
      double best_v = 0.0;
      for (size_t t = 0; t < truths.size(); ++t) {
        if (taken[t]) continue;
        const int64_t inter = pixel_count_intersection(preds[p].box, truths[t], 20);
        const int64_t uni = pixel_count_union(preds[p].box, truths[t], 20);
        const double v = static_cast<double>(inter) / static_cast<double>(uni);
        if (v >= thr && v > best_v) {
          best_v = v;
          best = static_cast<int>(t);
        }
      }
      if (best >= 0) {
        taken[best] = true;
        ++tp;
      } else {
        ++fp;
      }
    }
    const int64_t fn = static_cast<int64_t>(truths.size()) - tp;
    CHECK(got.tp == tp);
    CHECK(got.fp == fp);
    CHECK(got.fn == fn);

    // the greedy matching never beats the exhaustive optimal assignment
    std::vector<int> t_idx(truths.size());
    std::iota(t_idx.begin(), t_idx.end(), 0);
    int64_t best_tp = 0;
    std::vector<int> p_idx(preds.size());
    std::iota(p_idx.begin(), p_idx.end(), 0);
    std::sort(p_idx.begin(), p_idx.end());
    // enumerate assignments truth-permutation-wise (fields are <= 6)
    std::sort(t_idx.begin(), t_idx.end());
    do {
      int64_t count = 0;
      std::vector<bool> used_pred(preds.size(), false);
      for (size_t t = 0; t < t_idx.size(); ++t) {
        for (size_t p = 0; p < preds.size(); ++p) {
          if (used_pred[p]) continue;
          if (iou(preds[p].box, truths[t_idx[t]]) >= thr) {
            used_pred[p] = true;
            ++count;
            break;
          }
        }
      }
      best_tp = std::max(best_tp, count);
    } while (std::next_permutation(t_idx.begin(), t_idx.end()));
    CHECK(got.tp <= best_tp);
  }
}

TEST_CASE("AP is monotone non-increasing in the IoU threshold") {
  Rng rng(13);
  std::vector<std::vector<Detection>> preds(8);
  std::vector<std::vector<Box>> truths(8);
  for (int s = 0; s < 8; ++s) {
    for (int i = 0, n = rng.uniform_int(0, 4); i < n; ++i) {
      preds[s].push_back({0, random_box(rng, 24), rng.uniform(0.0, 1.0), 1});
    }
    for (int i = 0, n = rng.uniform_int(0, 4); i < n; ++i) {
      truths[s].push_back(random_box(rng, 24));
    }
  }
  double prev = 2.0;
  for (double thr : {0.3, 0.4, 0.5, 0.6}) {
    const double ap = average_precision(preds, truths, thr);
    CHECK(ap <= prev + 1e-12);
    prev = ap;
  }
}

TEST_CASE("detection extraction from activation maps") {
  // a single blob above threshold
  std::vector<double> m(8 * 8, 0.0);
  for (int r = 2; r <= 4; ++r) {
    for (int c = 5; c <= 6; ++c) m[r * 8 + c] = 1.0;
  }
  m[0] = 0.2;  // below threshold after normalization
  auto dets = extract_detections(Tensor::from_data({8, 8}, m), 0.7, 0.5, 4, 1);
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].box == Box{8, 20, 19, 27});
  CHECK(dets[0].score == 0.7);
  CHECK(dets[0].level == 1);

  // a constant map normalizes to zeros: argmax-cell fallback
  auto fallback = extract_detections(Tensor::constant({4, 4}, 0.3), 0.4, 0.5, 2, 2);
  REQUIRE(fallback.size() == 1);
  CHECK(fallback[0].box == Box{0, 0, 1, 1});
  CHECK(fallback[0].level == 2);

  // two disjoint blobs produce two detections
  std::vector<double> two(10 * 10, 0.0);
  two[1 * 10 + 1] = 1.0;
  two[1 * 10 + 2] = 0.9;
  two[7 * 10 + 8] = 0.8;
  auto pair = extract_detections(Tensor::from_data({10, 10}, two), 0.6, 0.5, 4, 1);
  REQUIRE(pair.size() == 2);
  CHECK(pair[0].box == Box{4, 4, 7, 11});
  CHECK(pair[1].box == Box{28, 32, 31, 35});

  // boxes always intersect the above-threshold support
  Rng rng(17);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> field(6 * 6);
    for (double& x : field) x = rng.uniform(0.0, 1.0);
    Tensor map = Tensor::from_data({6, 6}, field);
    Tensor norm = normalize_ham(map);
    auto found = extract_detections(map, 0.5, 0.5, 3, 1);
    for (const Detection& d : found) {
      bool touches = false;
      for (int r = 0; r < 6 && !touches; ++r) {
        for (int c = 0; c < 6 && !touches; ++c) {
          if (norm[r * 6 + c] < 0.5) continue;
          const Box cell{r * 3, c * 3, r * 3 + 2, c * 3 + 2};
          touches = intersection_area(d.box, cell) > 0;
        }
      }
      // fallback boxes touch the argmax cell instead
      if (!found.empty() && !touches) {
        double mx = -1.0;
        int arg = 0;
        for (int i = 0; i < 36; ++i) {
          if (norm[i] > mx) {
            mx = norm[i];
            arg = i;
          }
        }
        const Box cell{(arg / 6) * 3, (arg % 6) * 3, (arg / 6) * 3 + 2, (arg % 6) * 3 + 2};
        touches = intersection_area(d.box, cell) > 0;
      }
      CHECK(touches);
    }
  }
}

TEST_CASE("evaluate on untrained models reports chance-level AUC in range") {
  DatasetSpec spec;
  spec.num_samples = 100;
  spec.classes = 3;
  spec.noise = 0.02;
  // one object per image: class identity carries no confound (an untrained
  // net scores multi-object images higher for every class at once)
  spec.min_objects = 1;
  spec.max_objects = 1;

  ModelConfig mc;
  mc.input_size = 64;
  mc.channels = {16, 16, 32, 64};
  mc.heads = 2;
  mc.d_l = 32;
  mc.d_out = 8;
  mc.classes = 3;

  for (uint64_t seed : {1, 2, 3, 4, 5}) {
    spec.seed = 100 + seed;
    auto samples = generate(spec);
    CapsNet model(mc, Rng(seed).split(1));
    EvalConfig cfg;
    cfg.peekaboo.distill = (seed % 2 == 0);  // both inference paths covered
    cfg.threads = 2;
    EvalReport report = evaluate(model, samples, cfg);

    CHECK(report.mean_auc >= 0.35);
    CHECK(report.mean_auc <= 0.65);

    // all report fields live in [0,1]
    for (double v : report.auc_per_class) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    for (double v : report.ap_level1) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    for (double v : report.ap_level2) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    CHECK(report.miou_level1.mean >= 0.0);
    CHECK(report.miou_level1.mean <= 1.0);
    CHECK(report.miou_level2.mean >= 0.0);
    CHECK(report.miou_level2.mean <= 1.0);
    CHECK(report.accuracy_exact_match >= 0.0);
    CHECK(report.accuracy_exact_match <= 1.0);
    CHECK(report.accuracy_per_class >= 0.0);
    CHECK(report.accuracy_per_class <= 1.0);

    // report serialization round trips
    EvalReport back = eval_report_from_json(eval_report_json(report));
    CHECK(back.mean_auc == doctest::Approx(report.mean_auc).epsilon(1e-12));
    CHECK(back.ap_level2[3] == doctest::Approx(report.ap_level2[3]).epsilon(1e-12));
    CHECK(back.num_samples == report.num_samples);
  }
}

TEST_CASE("perfect detections give perfect localization metrics") {
  Rng rng(23);
  std::vector<std::vector<Detection>> preds(10);
  std::vector<std::vector<Box>> truths(10);
  for (int s = 0; s < 10; ++s) {
    const int n = rng.uniform_int(1, 3);
    for (int i = 0; i < n; ++i) {
      const Box b = random_box(rng, 30);
      truths[s].push_back(b);
      preds[s].push_back({0, b, 1.0, 2});
    }
  }
  for (double thr : {0.3, 0.4, 0.5, 0.6}) {
    CHECK(average_precision(preds, truths, thr) == 1.0);
  }
  // and every truth is matched at IoU exactly 1
  for (int s = 0; s < 10; ++s) {
    for (const Box& t : truths[s]) {
      double best = 0.0;
      for (const Detection& d : preds[s]) best = std::max(best, iou(d.box, t));
      CHECK(best == 1.0);
    }
  }
}
