#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "decaps/box.hpp"
#include "decaps/capsnet.hpp"
#include "decaps/optim.hpp"

namespace decaps {

struct LossConfig {
  double m_plus = 0.9;
  double m_minus = 0.1;
  double lambda = 0.5;
  double har_weight = 1.0;
  double gamma = 1e-4;  // template moving-average step
};

enum class HeadSelect { kRandom, kAverage };

struct PeekabooConfig {
  double theta_c = 0.5;
  double theta_d = 0.3;
  bool crop = true;
  bool drop = true;
  bool distill = true;
  HeadSelect head_select = HeadSelect::kRandom;  // train-time map choice
};

// Moving-average feature templates t_ij, one d_out vector per (head, class).
// Zero-initialized; plain data, never part of the gradient graph.
class TemplateBank {
 public:
  TemplateBank() = default;
  TemplateBank(int heads, int classes, int d);

  int heads() const { return heads_; }
  int classes() const { return classes_; }
  int d() const { return d_; }
  std::span<const double> at(int head, int cls) const;
  std::span<double> at(int head, int cls);
  const std::vector<double>& raw() const { return values_; }
  std::vector<double>& raw() { return values_; }

 private:
  int heads_ = 0, classes_ = 0, d_ = 0;
  std::vector<double> values_;
};

struct LossBreakdown {
  double margin = 0.0;
  double har = 0.0;  // already scaled by har_weight
  double total = 0.0;
  std::vector<double> per_class_margin;  // raw-pass terms
};

// --- losses -------------------------------------------------------------

// Eq of the margin objective: sum_j [T_j max(0, m+ - s_j)^2 +
// lambda (1-T_j) max(0, s_j - m-)^2]. Labels must be 0/1.
Tensor margin_loss(const Tensor& scores, const std::vector<int>& labels,
                   double m_plus, double m_minus, double lambda,
                   std::vector<double>* per_class = nullptr);

// f_ij = spatial mean of the weighted votes: [I,J,h,w,d] -> [I,J,d].
Tensor semantic_features(const Tensor& weighted_votes);

// Mean over (i,j) of (1 - cosine(f_ij, t_ij)); templates are constants.
// Cosine against a zero vector is defined as 0 (maximum penalty 1).
Tensor har_loss(const Tensor& features, const TemplateBank& bank);

// t_ij += gamma * (normalized(batch-mean f_ij) - normalized(t_ij)), applied
// only for classes present in the batch. `features` holds one detached
// [I,J,d] block per sample; `labels` the matching 0/1 vectors.
void update_templates(TemplateBank& bank,
                      const std::vector<std::vector<double>>& features,
                      const std::vector<std::vector<int>>& labels, double gamma);

// --- activation-guided image ops (plain data, no gradients) ---------------

// (A - min) / (max - min); a constant map normalizes to all zeros.
Tensor normalize_ham(const Tensor& ham);

struct CropMask {
  Tensor mask;  // [h, w] of 0/1
  Box box;      // feature coordinates
};

// mask = A* >= theta_c; box = smallest box covering the mask (argmax cell
// when the mask is empty).
CropMask crop_mask_and_bbox(const Tensor& norm_ham, double theta_c);

Box feature_box_to_image(const Box& feature_box, int stride, int image_h, int image_w);

// Maps the feature box to pixels by the backbone stride, crops, and
// bilinearly resizes to target x target.
Tensor crop_and_upsample(const Tensor& image, const Box& feature_box, int stride,
                         int target);

// Zeroes pixels whose (nearest) feature cell has A* >= theta_d.
Tensor drop_patch(const Tensor& image, const Tensor& norm_ham, double theta_d,
                  int stride);

// --- training loop ---------------------------------------------------------

struct TrainItem {
  Tensor image;             // [c, H, W]
  std::vector<int> labels;  // 0/1 per class
  int64_t sample_index = 0; // dataset position; seeds per-sample randomness
};

class PeekabooTrainer {
 public:
  PeekabooTrainer(CapsNet& model, TemplateBank& bank, AdamState& optimizer,
                  LossConfig loss, PeekabooConfig peekaboo, uint64_t seed,
                  int threads = 0);

  // One optimizer update over the batch; also applies the template update.
  LossBreakdown train_step(const std::vector<TrainItem>& batch, int epoch);

  int64_t global_step() const { return global_step_; }
  void set_global_step(int64_t s) { global_step_ = s; }
  uint64_t seed() const { return seed_; }
  CapsNet& model() { return model_; }
  TemplateBank& bank() { return bank_; }
  AdamState& optimizer() { return optimizer_; }
  const LossConfig& loss_config() const { return loss_; }
  const PeekabooConfig& peekaboo_config() const { return peekaboo_; }

 private:
  CapsNet& model_;
  TemplateBank& bank_;
  AdamState& optimizer_;
  LossConfig loss_;
  PeekabooConfig peekaboo_;
  uint64_t seed_;
  int threads_;
  int64_t global_step_ = 0;
};

// --- two-stage inference -----------------------------------------------------

struct DistillPrediction {
  std::vector<double> coarse;     // p^c
  std::vector<double> fine;      // p^f (equals coarse when distillation off)
  std::vector<double> distilled;  // p^d = (p^c + p^f) / 2
  Tensor coarse_hams;             // [I, J, h, w], detached
  std::vector<Tensor> class_hams;     // per class: head-averaged coarse HAM [h, w]
  std::vector<Box> crop_boxes;        // per class, image coordinates
  std::vector<Tensor> fine_class_hams;  // per class, from the fine pass (may be empty)
};

DistillPrediction distill_predict(const Tensor& image, const CapsNet& model,
                                  const PeekabooConfig& cfg);

// --- checkpointing -----------------------------------------------------------

inline constexpr char kCheckpointMagic[] = "DECAPS1";
inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string config_echo;
  std::vector<std::pair<std::string, Tensor>> params;
  TemplateBank bank;
  double adam_lr = 0, adam_beta1 = 0, adam_beta2 = 0, adam_eps = 0;
  int64_t adam_step_count = 0;
  std::vector<std::vector<double>> adam_m, adam_v;
  int64_t epochs_done = 0;
  int64_t global_step = 0;
  std::string rng_state;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies checkpoint state into live objects; shape mismatches raise a
// versioned DataError.
void restore_model(const Checkpoint& ckpt, CapsNet& model, TemplateBank& bank,
                   AdamState& optimizer);

}  // namespace decaps
