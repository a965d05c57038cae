#include "decaps/capsnet.hpp"

#include <cmath>

namespace decaps {

Tensor TransformBank::matrix(int head, int cls) const {
  if (head < 0 || head >= heads || cls < 0 || cls >= classes) {
    throw ShapeError("transform bank: (head, class) out of range");
  }
  Tensor flat = reshape(weights, {heads * classes, d_in, d_out});
  return reshape(narrow0(flat, head * classes + cls, 1), {d_in, d_out});
}

Tensor squash(const Tensor& t) {
  const int last = t.rank() - 1;
  Tensor norm_sq = reduce_sum(square(t), {last});
  Tensor norm = sqrt_elem(norm_sq);
  // |v|^2 / ((1 + |v|^2) * (|v| + eps))
  Tensor denom = mul(add_scalar(norm_sq, 1.0), add_scalar(norm, kSquashEpsilon));
  Tensor factor = divide(norm_sq, denom);
  return mul(factor, t);
}

Tensor capsule_length(const Tensor& t) {
  return sqrt_elem(reduce_sum(square(t), {t.rank() - 1}));
}

std::vector<HeadPose> split_heads(const Tensor& features, int num_heads, int d_l) {
  if (features.rank() != 3) throw ShapeError("split_heads: features must be [c,h,w]");
  const int c = features.dim(0);
  if (num_heads < 1 || d_l < 1 || c != num_heads * d_l) {
    throw ConfigError("split_heads: channel count " + std::to_string(c) +
                      " != heads*d_l = " + std::to_string(num_heads) + "*" +
                      std::to_string(d_l));
  }
  std::vector<HeadPose> heads;
  heads.reserve(num_heads);
  for (int i = 0; i < num_heads; ++i) {
    Tensor slab = narrow0(features, i * d_l, d_l);      // [d_l, h, w]
    Tensor grid = permute(slab, {1, 2, 0});             // [h, w, d_l]
    heads.push_back({i, squash(grid)});
  }
  return heads;
}

namespace {

// Constant [h, w, d] tensor whose last two channels hold the relative (row,
// col) coordinates of each grid position, scaled to [0,1].
Tensor coord_lattice(int h, int w, int d) {
  std::vector<double> values(static_cast<int64_t>(h) * w * d, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double* cell = values.data() + (static_cast<int64_t>(y) * w + x) * d;
      cell[d - 2] = h > 1 ? static_cast<double>(y) / (h - 1) : 0.0;
      cell[d - 1] = w > 1 ? static_cast<double>(x) / (w - 1) : 0.0;
    }
  }
  return Tensor::from_data({h, w, d}, std::move(values));
}

}  // namespace

std::vector<VoteTensor> compute_votes(const HeadPose& head, const TransformBank& bank,
                                      bool coord_add) {
  const Tensor& pose = head.pose;
  if (pose.rank() != 3 || pose.dim(2) != bank.d_in) {
    throw ShapeError("compute_votes: pose " + shape_str(pose.shape()) +
                     " incompatible with bank d_in " + std::to_string(bank.d_in));
  }
  if (bank.d_out < 2 && coord_add) {
    throw ShapeError("compute_votes: coordinate addition needs d_out >= 2");
  }
  const int h = pose.dim(0), w = pose.dim(1);
  Tensor pose2d = reshape(pose, {h * w, bank.d_in});
  Tensor lattice;
  if (coord_add) lattice = coord_lattice(h, w, bank.d_out);

  std::vector<VoteTensor> votes;
  votes.reserve(bank.classes);
  for (int j = 0; j < bank.classes; ++j) {
    Tensor v = reshape(matmul(pose2d, bank.matrix(head.head, j)), {h, w, bank.d_out});
    if (coord_add) v = add(v, lattice);
    votes.push_back({head.head, j, v, coord_add});
  }
  return votes;
}

namespace {

struct VoteGrid {
  int num_heads, num_classes, h, w, d;
  Tensor stacked;                           // [I, J, h, w, d]
  std::vector<std::vector<Tensor>> flat2d;  // [hw, d] per (i, j)
};

VoteGrid collect_votes(const std::vector<std::vector<Tensor>>& votes) {
  if (votes.empty() || votes[0].empty()) {
    throw ContractError("routing: empty vote set");
  }
  VoteGrid g;
  g.num_heads = static_cast<int>(votes.size());
  g.num_classes = static_cast<int>(votes[0].size());
  const Shape& s0 = votes[0][0].shape();
  if (s0.size() != 3) throw ShapeError("routing: votes must be [h,w,d]");
  g.h = s0[0];
  g.w = s0[1];
  g.d = s0[2];

  std::vector<Tensor> parts;
  parts.reserve(static_cast<size_t>(g.num_heads) * g.num_classes);
  g.flat2d.resize(g.num_heads);
  for (int i = 0; i < g.num_heads; ++i) {
    if (static_cast<int>(votes[i].size()) != g.num_classes) {
      throw ShapeError("routing: ragged vote set");
    }
    g.flat2d[i].reserve(g.num_classes);
    for (int j = 0; j < g.num_classes; ++j) {
      if (votes[i][j].shape() != s0) throw ShapeError("routing: mismatched vote shapes");
      parts.push_back(votes[i][j]);
      g.flat2d[i].push_back(reshape(votes[i][j], {g.h * g.w, g.d}));
    }
  }
  g.stacked = reshape(stack0(parts), {g.num_heads, g.num_classes, g.h, g.w, g.d});
  return g;
}

RoutingResult route(const std::vector<std::vector<Tensor>>& votes, int n_iter,
                    RoutingMode mode, bool trace) {
  if (n_iter < 1) throw ContractError("routing: n_iter must be >= 1");
  VoteGrid g = collect_votes(votes);
  const int I = g.num_heads, J = g.num_classes, hw = g.h * g.w;

  Tensor votes4 = reshape(g.stacked, {I, J, hw, g.d});
  Tensor r_pre = Tensor::zeros({I, J, hw});

  RoutingResult result;
  Tensor routing, weighted, poses;
  for (int it = 0; it < n_iter; ++it) {
    // IDR: positions within a head compete per parent (softmax over hw).
    // Bottom-up baseline: parents compete per position (softmax over J).
    routing = mode == RoutingMode::kInverted ? softmax(r_pre, 2) : softmax(r_pre, 1);
    weighted = mul(routing, votes4);                          // [I, J, hw, d]
    poses = squash(reduce_sum(weighted, {0, 2}));             // [J, d]
    if (trace) {
      result.routing_trace.push_back(reshape(routing, {I, J, g.h, g.w}));
      result.pose_trace.push_back(poses);
    }
    if (it + 1 == n_iter) break;  // final agreement update never consumed
    std::vector<Tensor> dots;
    dots.reserve(static_cast<size_t>(I) * J);
    for (int i = 0; i < I; ++i) {
      for (int j = 0; j < J; ++j) {
        Tensor pj = reshape(narrow0(poses, j, 1), {g.d, 1});
        dots.push_back(matmul(g.flat2d[i][j], pj));  // [hw, 1]
      }
    }
    r_pre = add(r_pre, reshape(stack0(dots), {I, J, hw}));
  }

  result.routing_maps = reshape(routing, {I, J, g.h, g.w});
  result.weighted_votes = reshape(weighted, {I, J, g.h, g.w, g.d});
  result.hams = compute_ham(result.weighted_votes);
  result.parent_poses = poses;
  result.class_scores = capsule_length(poses);
  return result;
}

}  // namespace

RoutingResult idr_route(const std::vector<std::vector<Tensor>>& votes, int n_iter,
                        bool trace) {
  return route(votes, n_iter, RoutingMode::kInverted, trace);
}

RoutingResult dynamic_route_baseline(const std::vector<std::vector<Tensor>>& votes,
                                     int n_iter, bool trace) {
  return route(votes, n_iter, RoutingMode::kBottomUp, trace);
}

Tensor compute_ham(const Tensor& weighted_votes) {
  if (weighted_votes.rank() != 5) {
    throw ShapeError("compute_ham: expected [I,J,h,w,d]");
  }
  return sqrt_elem(reduce_sum(square(weighted_votes), {4}));
}

// --- model -------------------------------------------------------------------

namespace {

constexpr std::array<int, 4> kKernels{3, 3, 3, 1};
constexpr std::array<int, 4> kStrides{2, 2, 1, 1};
constexpr std::array<int, 4> kPads{1, 0, 0, 0};

int conv_out(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

}  // namespace

int ModelConfig::grid_size() const {
  int g = input_size;
  for (int b = 0; b < 4; ++b) g = conv_out(g, kKernels[b], kStrides[b], kPads[b]);
  return g;
}

void ModelConfig::validate() const {
  if (input_size < 16) throw ConfigError("model: input_size must be >= 16");
  if (input_channels < 1) throw ConfigError("model: input_channels must be >= 1");
  if (heads < 1 || d_l < 1 || d_out < 2 || classes < 1) {
    throw ConfigError("model: heads/d_l/classes must be >= 1, d_out >= 2");
  }
  if (channels[3] != heads * d_l) {
    throw ConfigError("model: final channel count " + std::to_string(channels[3]) +
                      " != heads*d_l = " + std::to_string(heads * d_l));
  }
  if (n_iter < 1) throw ConfigError("model: n_iter must be >= 1");
  if (grid_size() < 1) throw ConfigError("model: input too small for the conv stack");
}

CapsNet::CapsNet(ModelConfig cfg, Rng init_rng) : cfg_(cfg) {
  cfg_.validate();
  int c_in = cfg_.input_channels;
  for (int b = 0; b < 4; ++b) {
    const int c_out = cfg_.channels[b];
    const int k = kKernels[b];
    const double he = std::sqrt(2.0 / (static_cast<double>(c_in) * k * k));
    Rng layer_rng = init_rng.split(100 + b);
    conv_w_.push_back(
        Tensor::gaussian({c_out, c_in, k, k}, 0.0, he, layer_rng, true));
    conv_b_.push_back(Tensor::zeros({c_out}, true));
    c_in = c_out;
  }
  Rng bank_rng = init_rng.split(200);
  bank_.heads = cfg_.heads;
  bank_.classes = cfg_.classes;
  bank_.d_in = cfg_.d_l;
  bank_.d_out = cfg_.d_out;
  bank_.weights = Tensor::gaussian({cfg_.heads, cfg_.classes, cfg_.d_l, cfg_.d_out},
                                   0.0, 0.25, bank_rng, true);
}

Tensor CapsNet::backbone_forward(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != cfg_.input_channels ||
      image.dim(1) != cfg_.input_size || image.dim(2) != cfg_.input_size) {
    throw ShapeError("backbone: image " + shape_str(image.shape()) +
                     " does not match configured input [" +
                     std::to_string(cfg_.input_channels) + "," +
                     std::to_string(cfg_.input_size) + "," +
                     std::to_string(cfg_.input_size) + "]");
  }
  Tensor x = image;
  for (int b = 0; b < 4; ++b) {
    x = relu(conv2d(x, conv_w_[b], conv_b_[b], kStrides[b], kPads[b]));
  }
  return x;
}

ForwardResult CapsNet::forward(const Tensor& image, bool trace) const {
  Tensor features = backbone_forward(image);
  std::vector<HeadPose> heads = split_heads(features, cfg_.heads, cfg_.d_l);

  std::vector<std::vector<Tensor>> votes(cfg_.heads);
  for (int i = 0; i < cfg_.heads; ++i) {
    auto head_votes = compute_votes(heads[i], bank_, cfg_.coord_add);
    votes[i].reserve(head_votes.size());
    for (auto& v : head_votes) votes[i].push_back(v.votes);
  }

  ForwardResult out;
  out.routing = cfg_.routing == RoutingMode::kInverted
                    ? idr_route(votes, cfg_.n_iter, trace)
                    : dynamic_route_baseline(votes, cfg_.n_iter, trace);
  out.scores = out.routing.class_scores;
  return out;
}

std::vector<std::pair<std::string, Tensor>> CapsNet::named_params() const {
  std::vector<std::pair<std::string, Tensor>> named;
  for (int b = 0; b < 4; ++b) {
    named.emplace_back("conv" + std::to_string(b + 1) + "_w", conv_w_[b]);
    named.emplace_back("conv" + std::to_string(b + 1) + "_b", conv_b_[b]);
  }
  named.emplace_back("transform_bank", bank_.weights);
  return named;
}

std::vector<Tensor> CapsNet::params() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_params()) out.push_back(t);
  return out;
}

int64_t CapsNet::parameter_count() const {
  int64_t n = 0;
  for (const Tensor& p : params()) n += p.size();
  return n;
}

}  // namespace decaps
