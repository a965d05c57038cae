#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "decaps/box.hpp"
#include "decaps/tensor.hpp"

namespace decaps {

struct Sample {
  std::string id;
  Tensor image;             // [3, H, W], values in [0,1]
  std::vector<int> labels;  // 0/1 per class
  std::vector<std::pair<int, Box>> boxes;  // (class, tight pixel box)
};

// Shape classes, in class-index order.
enum class ShapeKind { kDisc, kSquare, kTriangle, kCross };
inline constexpr int kMaxShapeClasses = 4;
const char* shape_name(ShapeKind kind);

struct DatasetSpec {
  int num_samples = 2000;
  int image_size = 64;
  int classes = 3;        // <= kMaxShapeClasses, each a distinct geometry
  int min_objects = 1;    // objects per image; classes never repeat in an image
  int max_objects = 3;
  int min_size = 7;       // shape half-extent, pixels
  int max_size = 13;
  double noise = 0.02;    // gaussian sigma, clamped to [0,1]
  uint64_t seed = 1;

  void validate() const;
};

// Pure function of the spec: same spec -> identical samples.
std::vector<Sample> generate(const DatasetSpec& spec);

// Rasterizes one shape mask; exposed for the tight-box oracle in tests.
std::vector<uint8_t> rasterize_shape(ShapeKind kind, int image_size, int center_r,
                                     int center_c, int half_extent);

// Binary PPM (P6, maxval 255).
void write_ppm(const std::filesystem::path& path, const Tensor& image);
Tensor read_ppm(const std::filesystem::path& path);

// Manifest: UTF-8 newline-delimited JSON records; image paths relative to the
// manifest's directory, images under images/ as PPM.
void save_manifest(const std::filesystem::path& manifest_path,
                   const std::vector<Sample>& samples);
std::vector<Sample> load_manifest(const std::filesystem::path& manifest_path);

// Epoch-deterministic shuffled batches; the final partial batch is included.
std::vector<std::vector<int>> batch_indices(int num_samples, int batch_size,
                                            uint64_t shuffle_seed);

// FNV-1a over a file's bytes; used to stamp reports with the manifest identity.
std::string file_hash_hex(const std::filesystem::path& path);

}  // namespace decaps
