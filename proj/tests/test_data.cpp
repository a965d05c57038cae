#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <set>

#include "decaps/data.hpp"

using namespace decaps;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / ("decaps_data_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("single noiseless disc matches the rasterization oracle") {
  DatasetSpec spec;
  spec.num_samples = 8;
  spec.image_size = 32;
  spec.classes = 1;  // disc only
  spec.min_objects = 1;
  spec.max_objects = 1;
  spec.min_size = 5;
  spec.max_size = 8;
  spec.noise = 0.0;
  spec.seed = 3;

  for (const Sample& s : generate(spec)) {
    REQUIRE(s.labels == std::vector<int>{1});
    REQUIRE(s.boxes.size() == 1);
    const Box& box = s.boxes[0].second;

    // exactly one intensity level above background; the foreground is a disc
    std::set<double> values;
    const auto img = s.image.data();
    const int n = spec.image_size;
    for (int i = 0; i < n * n; ++i) values.insert(img[i]);
    REQUIRE(values.size() == 2);  // background 0 + one intensity
    const double fg = *values.rbegin();
    CHECK(*values.begin() == 0.0);

    // reconstruct the disc parameters from the tight box and check per pixel
    const int cr = (box.r0 + box.r1) / 2;
    const int cc = (box.c0 + box.c1) / 2;
    const int radius = (box.r1 - box.r0) / 2;
    auto mask = rasterize_shape(ShapeKind::kDisc, n, cr, cc, radius);
    for (int i = 0; i < n * n; ++i) {
      CHECK(img[i] == (mask[i] ? fg : 0.0));
    }
    // channels replicate the gray content
    for (int i = 0; i < n * n; ++i) {
      CHECK(img[i] == img[n * n + i]);
      CHECK(img[i] == img[2 * n * n + i]);
    }
  }
}

TEST_CASE("generation is a pure function of the spec") {
  DatasetSpec spec;
  spec.num_samples = 12;
  spec.classes = 3;
  spec.seed = 1;
  auto a = generate(spec);
  auto b = generate(spec);
  REQUIRE(a.size() == b.size());
  for (size_t s = 0; s < a.size(); ++s) {
    CHECK(a[s].id == b[s].id);
    CHECK(a[s].labels == b[s].labels);
    REQUIRE(a[s].boxes.size() == b[s].boxes.size());
    for (size_t k = 0; k < a[s].boxes.size(); ++k) {
      CHECK(a[s].boxes[k].first == b[s].boxes[k].first);
      CHECK(a[s].boxes[k].second == b[s].boxes[k].second);
    }
    for (int64_t i = 0; i < a[s].image.size(); ++i) {
      REQUIRE(a[s].image[i] == b[s].image[i]);
    }
  }

  DatasetSpec other = spec;
  other.seed = 2;
  auto c = generate(other);
  bool differs = false;
  for (int64_t i = 0; i < a[0].image.size() && !differs; ++i) {
    differs = a[0].image[i] != c[0].image[i];
  }
  CHECK(differs);
}

TEST_CASE("class marginals stay in a teachable band") {
  DatasetSpec spec;
  spec.num_samples = 1000;
  spec.seed = 17;
  auto samples = generate(spec);
  std::vector<int> counts(spec.classes, 0);
  for (const Sample& s : samples) {
    for (int j = 0; j < spec.classes; ++j) counts[j] += s.labels[j];
  }
  for (int j = 0; j < spec.classes; ++j) {
    const double freq = counts[j] / 1000.0;
    CHECK(freq >= 0.2);
    CHECK(freq <= 0.8);
  }
}

TEST_CASE("boxes are tight around their shapes") {
  Rng rng(9);
  for (int rep = 0; rep < 40; ++rep) {
    const auto kind = static_cast<ShapeKind>(rng.uniform_int(0, 3));
    const int n = 40;
    const int s = rng.uniform_int(3, 9);
    const int cr = rng.uniform_int(s + 1, n - s - 2);
    const int cc = rng.uniform_int(s + 1, n - s - 2);
    auto mask = rasterize_shape(kind, n, cr, cc, s);

    Box box{n, n, -1, -1};
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < n; ++c) {
        if (!mask[r * n + c]) continue;
        box.r0 = std::min(box.r0, r);
        box.c0 = std::min(box.c0, c);
        box.r1 = std::max(box.r1, r);
        box.c1 = std::max(box.c1, c);
      }
    }
    REQUIRE(box.valid());
    // shrinking any side excludes at least one foreground pixel
    auto row_has = [&](int r) {
      for (int c = box.c0; c <= box.c1; ++c) {
        if (mask[r * n + c]) return true;
      }
      return false;
    };
    auto col_has = [&](int c) {
      for (int r = box.r0; r <= box.r1; ++r) {
        if (mask[r * n + c]) return true;
      }
      return false;
    };
    CHECK(row_has(box.r0));
    CHECK(row_has(box.r1));
    CHECK(col_has(box.c0));
    CHECK(col_has(box.c1));
  }
}

TEST_CASE("pixels stay in range under noise") {
  DatasetSpec spec;
  spec.num_samples = 6;
  spec.noise = 0.4;
  spec.seed = 23;
  for (const Sample& s : generate(spec)) {
    for (int64_t i = 0; i < s.image.size(); ++i) {
      CHECK(s.image[i] >= 0.0);
      CHECK(s.image[i] <= 1.0);
    }
  }
}

TEST_CASE("manifest round trip preserves every field") {
  const fs::path dir = temp_dir("roundtrip");
  DatasetSpec spec;
  spec.num_samples = 10;
  spec.seed = 31;
  spec.noise = 0.05;
  auto samples = generate(spec);
  save_manifest(dir / "manifest.jsonl", samples);
  auto loaded = load_manifest(dir / "manifest.jsonl");

  REQUIRE(loaded.size() == samples.size());
  for (size_t s = 0; s < samples.size(); ++s) {
    CHECK(loaded[s].id == samples[s].id);
    CHECK(loaded[s].labels == samples[s].labels);
    REQUIRE(loaded[s].boxes.size() == samples[s].boxes.size());
    for (size_t k = 0; k < samples[s].boxes.size(); ++k) {
      CHECK(loaded[s].boxes[k].first == samples[s].boxes[k].first);
      CHECK(loaded[s].boxes[k].second == samples[s].boxes[k].second);
    }
    REQUIRE(loaded[s].image.shape() == samples[s].image.shape());
    for (int64_t i = 0; i < samples[s].image.size(); ++i) {
      CHECK(std::abs(loaded[s].image[i] - samples[s].image[i]) <= 0.5 / 255.0 + 1e-12);
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("empty dataset round trips to an empty manifest") {
  const fs::path dir = temp_dir("empty");
  save_manifest(dir / "manifest.jsonl", {});
  CHECK(fs::exists(dir / "manifest.jsonl"));
  CHECK(load_manifest(dir / "manifest.jsonl").empty());
  fs::remove_all(dir);
}

TEST_CASE("malformed manifests are rejected with the line number") {
  const fs::path dir = temp_dir("bad");
  DatasetSpec spec;
  spec.num_samples = 1;
  spec.seed = 7;
  auto samples = generate(spec);
  save_manifest(dir / "manifest.jsonl", samples);

  // read the valid record, then append one with a box outside the image
  std::ifstream in(dir / "manifest.jsonl");
  std::string good;
  std::getline(in, good);
  in.close();
  {
    std::ofstream out(dir / "manifest.jsonl", std::ios::app);
    out << R"({"id":"sample_xxxxx","image":"images/sample_00000.ppm",)"
        << R"("labels":[1,0,0],"boxes":[[0,0,0,999,10]]})" << "\n";
  }
  try {
    load_manifest(dir / "manifest.jsonl");
    FAIL("expected a DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(":2") != std::string::npos);
    CHECK(std::string(e.what()).find("outside image") != std::string::npos);
  }

  // missing image file names the path
  {
    std::ofstream out(dir / "manifest.jsonl", std::ios::trunc);
    out << R"({"id":"a","image":"images/gone.ppm","labels":[1],"boxes":[[0,0,0,1,1]]})"
        << "\n";
  }
  try {
    load_manifest(dir / "manifest.jsonl");
    FAIL("expected a DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("gone.ppm") != std::string::npos);
  }

  // non-JSON garbage reports its line
  {
    std::ofstream out(dir / "manifest.jsonl", std::ios::trunc);
    out << good << "\n" << "not json at all\n";
  }
  try {
    load_manifest(dir / "manifest.jsonl");
    FAIL("expected a DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(":2") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("ppm round trip stays within one quantization step") {
  const fs::path dir = temp_dir("ppm");
  Rng rng(41);
  Tensor img = Tensor::uniform({3, 9, 7}, 0.0, 1.0, rng);
  write_ppm(dir / "x.ppm", img);
  Tensor back = read_ppm(dir / "x.ppm");
  REQUIRE(back.shape() == img.shape());
  for (int64_t i = 0; i < img.size(); ++i) {
    CHECK(std::abs(back[i] - img[i]) <= 0.5 / 255.0 + 1e-12);
  }
  // bytes are stable across rewrites
  write_ppm(dir / "y.ppm", img);
  CHECK(file_hash_hex(dir / "x.ppm") == file_hash_hex(dir / "y.ppm"));
  fs::remove_all(dir);
}

TEST_CASE("batch iteration shuffles deterministically and partitions") {
  auto batches = batch_indices(10, 4, 99);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].size() == 4);
  CHECK(batches[1].size() == 4);
  CHECK(batches[2].size() == 2);

  auto again = batch_indices(10, 4, 99);
  CHECK(batches == again);
  CHECK(batch_indices(10, 4, 100) != batches);

  std::set<int> seen;
  for (const auto& b : batches) {
    for (int idx : b) CHECK(seen.insert(idx).second);
  }
  CHECK(seen.size() == 10);
  CHECK(*seen.begin() == 0);
  CHECK(*seen.rbegin() == 9);

  CHECK_THROWS_AS(batch_indices(10, 0, 1), ConfigError);
}
