#pragma once

#include <string>
#include <vector>

#include "decaps/box.hpp"
#include "decaps/data.hpp"
#include "decaps/training.hpp"

namespace decaps {

struct Detection {
  int cls = 0;
  Box box;
  double score = 0.0;
  int level = 1;  // 1 = coarse (whole image), 2 = fine (cropped ROI)
};

// Probability that a random positive outscores a random negative; ties 0.5.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

// Inclusive pixel-area convention.
double iou(const Box& a, const Box& b);

struct ApCounts {
  int64_t tp = 0, fp = 0, fn = 0;
  void operator+=(const ApCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
  }
};

// Greedy one-to-one matching by descending score (best remaining IoU >= thr),
// for one class within one sample.
ApCounts match_detections(const std::vector<Detection>& preds,
                          const std::vector<Box>& truths, double iou_thr);

// Set-level AP = TP / (TP + FP + FN), counts aggregated over all samples.
double average_precision(const std::vector<std::vector<Detection>>& preds_per_sample,
                         const std::vector<std::vector<Box>>& truths_per_sample,
                         double iou_thr);

// Normalize, threshold at theta_c, split into 4-connected components, and
// emit one detection per component with boxes mapped to pixels by `stride`.
// An all-below-threshold map falls back to the argmax cell.
std::vector<Detection> extract_detections(const Tensor& class_ham, double score,
                                          double theta_c, int stride, int level);

struct MeanStd {
  double mean = 0.0;
  double std_dev = 0.0;
};

inline constexpr double kApThresholds[] = {0.3, 0.4, 0.5, 0.6};

struct EvalReport {
  std::vector<double> auc_per_class;
  double mean_auc = 0.0;
  MeanStd miou_level1, miou_level2;
  std::vector<double> ap_level1, ap_level2;  // at kApThresholds
  double accuracy_exact_match = 0.0;         // all classes right, per image
  double accuracy_per_class = 0.0;           // mean over (image, class)
  int64_t num_samples = 0;
  std::string config_echo;
  std::string manifest_hash;
};

struct EvalConfig {
  PeekabooConfig peekaboo;
  double decision_threshold = 0.5;  // margin-loss midpoint
  int threads = 0;
};

// Per-sample distillation predictions, then classification + localization
// metrics over the whole set.
EvalReport evaluate(const CapsNet& model, const std::vector<Sample>& dataset,
                    const EvalConfig& cfg);

std::string eval_report_json(const EvalReport& report);
EvalReport eval_report_from_json(const std::string& text);

// Per-sample artifacts for --dump-hams.
struct SampleVisualization {
  std::string sample_id;
  std::vector<double> coarse_scores, fine_scores, distilled_scores;
  Tensor coarse_hams;  // [I, J, h, w]
  std::vector<Detection> detections_level1, detections_level2;
};

SampleVisualization visualize_sample(const CapsNet& model, const Sample& sample,
                                     const EvalConfig& cfg);

// Grayscale PGM (P5, maxval 255) of a [h,w] map scaled to [0,255].
void write_pgm(const std::filesystem::path& path, const Tensor& map);

}  // namespace decaps
