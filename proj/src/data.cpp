#include "decaps/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "decaps/rng.hpp"
#include "json.hpp"

namespace decaps {

using nlohmann::json;

const char* shape_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::kDisc: return "disc";
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kTriangle: return "triangle";
    case ShapeKind::kCross: return "cross";
  }
  return "?";
}

void DatasetSpec::validate() const {
  if (num_samples < 0) throw ConfigError("dataset: num_samples must be >= 0");
  if (image_size < 8) throw ConfigError("dataset: image_size must be >= 8");
  if (classes < 1 || classes > kMaxShapeClasses) {
    throw ConfigError("dataset: classes must lie in [1," +
                      std::to_string(kMaxShapeClasses) + "]");
  }
  if (min_objects < 1 || max_objects < min_objects || max_objects > classes) {
    throw ConfigError("dataset: objects-per-image range invalid (classes do not repeat)");
  }
  if (min_size < 2 || max_size < min_size) {
    throw ConfigError("dataset: size range invalid");
  }
  if (2 * max_size + 3 > image_size) {
    throw ConfigError("dataset: max shape size does not fit the image");
  }
  if (noise < 0.0) throw ConfigError("dataset: noise must be >= 0");
}

std::vector<uint8_t> rasterize_shape(ShapeKind kind, int image_size, int center_r,
                                     int center_c, int half_extent) {
  std::vector<uint8_t> mask(static_cast<size_t>(image_size) * image_size, 0);
  const int s = half_extent;
  const int arm = std::max(1, (s + 2) / 3);
  for (int r = -s; r <= s; ++r) {
    for (int c = -s; c <= s; ++c) {
      bool inside = false;
      switch (kind) {
        case ShapeKind::kDisc:
          inside = r * r + c * c <= s * s;
          break;
        case ShapeKind::kSquare:
          inside = true;  // the loop bounds are the square
          break;
        case ShapeKind::kTriangle:
          // apex at the top row, base at the bottom
          inside = 2 * std::abs(c) <= (r + s);
          break;
        case ShapeKind::kCross:
          inside = std::abs(c) <= arm || std::abs(r) <= arm;
          break;
      }
      if (!inside) continue;
      const int rr = center_r + r, cc = center_c + c;
      if (rr < 0 || rr >= image_size || cc < 0 || cc >= image_size) continue;
      mask[static_cast<size_t>(rr) * image_size + cc] = 1;
    }
  }
  return mask;
}

namespace {

Box mask_bounds(const std::vector<uint8_t>& mask, int image_size) {
  Box box{image_size, image_size, -1, -1};
  for (int r = 0; r < image_size; ++r) {
    for (int c = 0; c < image_size; ++c) {
      if (!mask[static_cast<size_t>(r) * image_size + c]) continue;
      box.r0 = std::min(box.r0, r);
      box.c0 = std::min(box.c0, c);
      box.r1 = std::max(box.r1, r);
      box.c1 = std::max(box.c1, c);
    }
  }
  if (!box.valid()) throw ContractError("rasterizer produced an empty mask");
  return box;
}

std::string sample_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "sample_%05d", index);
  return buf;
}

}  // namespace

std::vector<Sample> generate(const DatasetSpec& spec) {
  spec.validate();
  std::vector<Sample> samples;
  samples.reserve(spec.num_samples);
  const int n = spec.image_size;

  for (int idx = 0; idx < spec.num_samples; ++idx) {
    Rng rng = Rng(spec.seed).split(1000).split(static_cast<uint64_t>(idx));
    Sample sample;
    sample.id = sample_id(idx);
    sample.labels.assign(spec.classes, 0);

    const int count = rng.uniform_int(spec.min_objects, spec.max_objects);
    std::vector<int> class_pool(spec.classes);
    for (int j = 0; j < spec.classes; ++j) class_pool[j] = j;
    rng.shuffle(class_pool);
    class_pool.resize(count);
    std::sort(class_pool.begin(), class_pool.end());

    std::vector<double> gray(static_cast<size_t>(n) * n, 0.0);
    std::vector<Box> placed;
    for (int cls : class_pool) {
      const int s = rng.uniform_int(spec.min_size, spec.max_size);
      int cr = 0, cc = 0;
      // avoid box overlap where the layout allows it
      for (int attempt = 0; attempt < 50; ++attempt) {
        cr = rng.uniform_int(s + 1, n - 2 - s);
        cc = rng.uniform_int(s + 1, n - 2 - s);
        const Box probe{cr - s - 1, cc - s - 1, cr + s + 1, cc + s + 1};
        bool clash = false;
        for (const Box& other : placed) {
          if (intersection_area(probe, other) > 0) {
            clash = true;
            break;
          }
        }
        if (!clash) break;
      }
      const double intensity = rng.uniform(0.55, 0.95);
      const auto mask = rasterize_shape(static_cast<ShapeKind>(cls), n, cr, cc, s);
      for (size_t p = 0; p < mask.size(); ++p) {
        if (mask[p]) gray[p] = std::max(gray[p], intensity);
      }
      const Box box = mask_bounds(mask, n);
      placed.push_back(box);
      sample.labels[cls] = 1;
      sample.boxes.emplace_back(cls, box);
    }

    if (spec.noise > 0.0) {
      for (double& v : gray) {
        v = std::clamp(v + rng.gaussian(0.0, spec.noise), 0.0, 1.0);
      }
    }

    std::vector<double> rgb(gray.size() * 3);
    for (int ch = 0; ch < 3; ++ch) {
      std::copy(gray.begin(), gray.end(), rgb.begin() + ch * gray.size());
    }
    sample.image = Tensor::from_data({3, n, n}, std::move(rgb));
    samples.push_back(std::move(sample));
  }
  return samples;
}

// --- PPM ------------------------------------------------------------------

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("write_ppm: image must be [3,h,w]");
  }
  const int h = image.dim(1), w = image.dim(2);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("write_ppm: cannot write " + path.string());
  out << "P6\n" << w << ' ' << h << "\n255\n";
  const auto v = image.data();
  std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
  const int64_t plane = static_cast<int64_t>(h) * w;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      for (int ch = 0; ch < 3; ++ch) {
        const double x = v[ch * plane + static_cast<int64_t>(r) * w + c];
        const int q = static_cast<int>(std::lround(std::clamp(x, 0.0, 1.0) * 255.0));
        row[static_cast<size_t>(c) * 3 + ch] = static_cast<unsigned char>(q);
      }
    }
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw DataError("write_ppm: write failed for " + path.string());
}

namespace {

int read_ppm_token(std::istream& in, const std::string& path) {
  // skips whitespace and '#' comment lines
  while (true) {
    const int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  int value;
  if (!(in >> value)) throw DataError("read_ppm: malformed header in " + path);
  return value;
}

}  // namespace

Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("read_ppm: cannot open " + path.string());
  char m0 = 0, m1 = 0;
  in.get(m0).get(m1);
  if (m0 != 'P' || m1 != '6') throw DataError("read_ppm: not a P6 file: " + path.string());
  const int w = read_ppm_token(in, path.string());
  const int h = read_ppm_token(in, path.string());
  const int maxval = read_ppm_token(in, path.string());
  if (w < 1 || h < 1 || maxval != 255) {
    throw DataError("read_ppm: unsupported header in " + path.string());
  }
  in.get();  // single whitespace after maxval
  std::vector<unsigned char> raw(static_cast<size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw DataError("read_ppm: truncated pixel data in " + path.string());

  std::vector<double> values(raw.size());
  const int64_t plane = static_cast<int64_t>(h) * w;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      for (int ch = 0; ch < 3; ++ch) {
        values[ch * plane + static_cast<int64_t>(r) * w + c] =
            raw[(static_cast<size_t>(r) * w + c) * 3 + ch] / 255.0;
      }
    }
  }
  return Tensor::from_data({3, h, w}, std::move(values));
}

// --- manifest ---------------------------------------------------------------

void save_manifest(const std::filesystem::path& manifest_path,
                   const std::vector<Sample>& samples) {
  const auto dir = manifest_path.parent_path();
  if (!dir.empty()) std::filesystem::create_directories(dir);
  std::filesystem::create_directories(dir / "images");

  std::ofstream out(manifest_path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("save_manifest: cannot write " + manifest_path.string());
  for (const Sample& s : samples) {
    const std::string rel = "images/" + s.id + ".ppm";
    write_ppm(dir / rel, s.image);
    json record;
    record["id"] = s.id;
    record["image"] = rel;
    record["labels"] = s.labels;
    json boxes = json::array();
    for (const auto& [cls, b] : s.boxes) {
      boxes.push_back({cls, b.r0, b.c0, b.r1, b.c1});
    }
    record["boxes"] = boxes;
    out << record.dump() << '\n';
  }
  if (!out) throw DataError("save_manifest: write failed");
}

std::vector<Sample> load_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) throw DataError("load_manifest: cannot open " + manifest_path.string());
  const auto dir = manifest_path.parent_path();

  std::vector<Sample> samples;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = manifest_path.string() + ":" + std::to_string(line_no);
    json record;
    try {
      record = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError("load_manifest: parse error at " + where + ": " + e.what());
    }
    try {
      Sample s;
      s.id = record.at("id").get<std::string>();
      const std::string rel = record.at("image").get<std::string>();
      const auto image_path = dir / rel;
      if (!std::filesystem::exists(image_path)) {
        throw DataError("load_manifest: missing image file " + image_path.string() +
                        " (" + where + ")");
      }
      s.image = read_ppm(image_path);
      s.labels = record.at("labels").get<std::vector<int>>();
      for (int l : s.labels) {
        if (l != 0 && l != 1) {
          throw DataError("load_manifest: labels must be 0/1 at " + where);
        }
      }
      const int h = s.image.dim(1), w = s.image.dim(2);
      std::vector<int> covered(s.labels.size(), 0);
      for (const auto& jb : record.at("boxes")) {
        if (!jb.is_array() || jb.size() != 5) {
          throw DataError("load_manifest: box must be [class,r0,c0,r1,c1] at " + where);
        }
        const int cls = jb[0].get<int>();
        Box b{jb[1].get<int>(), jb[2].get<int>(), jb[3].get<int>(), jb[4].get<int>()};
        if (cls < 0 || cls >= static_cast<int>(s.labels.size())) {
          throw DataError("load_manifest: box class out of range at " + where);
        }
        if (s.labels[cls] != 1) {
          throw DataError("load_manifest: box for absent class at " + where);
        }
        if (!b.valid() || b.r0 < 0 || b.c0 < 0 || b.r1 >= h || b.c1 >= w) {
          throw DataError("load_manifest: box outside image at " + where);
        }
        covered[cls] = 1;
        s.boxes.emplace_back(cls, b);
      }
      for (size_t j = 0; j < s.labels.size(); ++j) {
        if (s.labels[j] == 1 && !covered[j]) {
          throw DataError("load_manifest: positive label without a box at " + where);
        }
      }
      samples.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw DataError("load_manifest: bad record at " + where + ": " + e.what());
    }
  }
  return samples;
}

std::vector<std::vector<int>> batch_indices(int num_samples, int batch_size,
                                            uint64_t shuffle_seed) {
  if (batch_size < 1) throw ConfigError("batch_indices: batch_size must be >= 1");
  std::vector<int> order(num_samples);
  for (int i = 0; i < num_samples; ++i) order[i] = i;
  Rng rng(shuffle_seed);
  rng.shuffle(order);
  std::vector<std::vector<int>> batches;
  for (int start = 0; start < num_samples; start += batch_size) {
    const int end = std::min(num_samples, start + batch_size);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

std::string file_hash_hex(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("file_hash_hex: cannot open " + path.string());
  uint64_t h = 1469598103934665603ULL;  // FNV-1a 64
  char buf[4096];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    const std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
    if (!in) break;
  }
  std::ostringstream out;
  out << std::hex << h;
  return out.str();
}

}  // namespace decaps
