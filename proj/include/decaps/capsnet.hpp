#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "decaps/tensor.hpp"

namespace decaps {

enum class RoutingMode { kInverted, kBottomUp };

// A head's squashed pose grid: every grid position holds one d_l-dim capsule.
struct HeadPose {
  int head = 0;
  Tensor pose;  // [h, w, d_l]
};

struct VoteTensor {
  int head = 0;
  int cls = 0;
  Tensor votes;  // [h, w, d_out]
  bool coordinate_added = false;
};

// One transformation matrix per (head, class) pair, shared across all spatial
// positions of the head; parameter count is independent of the grid size.
struct TransformBank {
  int heads = 0;
  int classes = 0;
  int d_in = 0;
  int d_out = 0;
  Tensor weights;  // [heads, classes, d_in, d_out]

  Tensor matrix(int head, int cls) const;  // [d_in, d_out], graph-connected
  int64_t parameter_count() const {
    return static_cast<int64_t>(heads) * classes * d_in * d_out;
  }
};

struct RoutingResult {
  Tensor parent_poses;    // [J, d_out]
  Tensor routing_maps;    // [I, J, h, w]; last iteration
  Tensor weighted_votes;  // [I, J, h, w, d_out]
  Tensor hams;            // [I, J, h, w]
  Tensor class_scores;    // [J], norm of each parent pose
  // Per-iteration routing maps / parent poses, recorded when tracing.
  std::vector<Tensor> routing_trace;
  std::vector<Tensor> pose_trace;
};

// squash(v) = (|v|^2 / (1 + |v|^2)) * v / (|v| + eps), over the last axis.
Tensor squash(const Tensor& t);
inline constexpr double kSquashEpsilon = 1e-8;

// Norm over the last axis.
Tensor capsule_length(const Tensor& t);

// Channel-sliced heads from the backbone maps, squashed per capsule.
std::vector<HeadPose> split_heads(const Tensor& features, int num_heads, int d_l);

std::vector<VoteTensor> compute_votes(const HeadPose& head, const TransformBank& bank,
                                      bool coord_add);

// Inverted dynamic routing: spatial positions within a head compete for each
// parent (softmax over positions per (head, class)).
RoutingResult idr_route(const std::vector<std::vector<Tensor>>& votes, int n_iter,
                        bool trace = false);

// Original bottom-up routing for ablation: parents compete for each child
// position (softmax over classes per (head, position)).
RoutingResult dynamic_route_baseline(const std::vector<std::vector<Tensor>>& votes,
                                     int n_iter, bool trace = false);

// A_ij = sqrt(sum_d weighted_votes^2): [I,J,h,w,d] -> [I,J,h,w].
Tensor compute_ham(const Tensor& weighted_votes);

struct ModelConfig {
  int input_size = 64;
  int input_channels = 3;
  std::array<int, 4> channels{32, 64, 128, 256};
  int heads = 4;
  int d_l = 64;
  int d_out = 16;
  int classes = 3;
  int n_iter = 3;
  bool coord_add = true;
  RoutingMode routing = RoutingMode::kInverted;

  // Conv stack: kernels (3,3,3,1), strides (2,2,1,1), pads (1,0,0,0).
  // 64 -> 32 -> 15 -> 13 -> 13; total stride 4.
  int grid_size() const;
  int total_stride() const { return 4; }
  void validate() const;
};

struct ForwardResult {
  RoutingResult routing;
  Tensor scores;  // [J]
};

class CapsNet {
 public:
  CapsNet(ModelConfig cfg, Rng init_rng);

  const ModelConfig& config() const { return cfg_; }

  Tensor backbone_forward(const Tensor& image) const;
  ForwardResult forward(const Tensor& image, bool trace = false) const;

  std::vector<std::pair<std::string, Tensor>> named_params() const;
  std::vector<Tensor> params() const;
  const TransformBank& bank() const { return bank_; }
  int64_t parameter_count() const;

 private:
  ModelConfig cfg_;
  std::vector<Tensor> conv_w_;
  std::vector<Tensor> conv_b_;
  TransformBank bank_;
};

}  // namespace decaps
