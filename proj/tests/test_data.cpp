#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "rfat/data.hpp"
#include "rfat/errors.hpp"

using namespace rfat;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("rfat_test_data_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Scene, Deterministic) {
  SceneSpec spec;
  Xoshiro256pp a(spec.seed), b(spec.seed);
  for (int i = 0; i < 5; ++i) {
    auto s1 = generate_scene(a, spec), s2 = generate_scene(b, spec);
    ASSERT_EQ(s1.labels.size(), s2.labels.size());
    for (std::size_t j = 0; j < s1.image.numel(); ++j)
      ASSERT_EQ(s1.image.data()[j], s2.image.data()[j]);
    for (std::size_t j = 0; j < s1.labels.size(); ++j) {
      EXPECT_EQ(s1.labels[j].box.x1, s2.labels[j].box.x1);
      EXPECT_EQ(s1.labels[j].class_id, s2.labels[j].class_id);
    }
  }
}

TEST(Scene, PlacementArithmetic) {
  Tensor<float> img(Shape{3, 32, 32}, 0.4f);
  ObjectSpec obj;
  obj.class_id = kVehicle;
  obj.x0 = 5;
  obj.y0 = 7;
  obj.w = 20;
  obj.h = 12;
  auto g = paint_object(img, obj);
  EXPECT_EQ(g.box.x1, 5);
  EXPECT_EQ(g.box.y1, 7);
  EXPECT_EQ(g.box.x2, 25);
  EXPECT_EQ(g.box.y2, 19);
  EXPECT_EQ(img.data()[7 * 32 + 5], 1.0f);    // red channel, top-left corner
  EXPECT_EQ(img.data()[18 * 32 + 24], 1.0f);  // bottom-right corner
  EXPECT_EQ(img.data()[19 * 32 + 24], 0.4f);  // just outside
}

TEST(Scene, LabelsInsideImageWithMinimumSide) {
  SceneSpec spec;
  Xoshiro256pp rng(3);
  for (int i = 0; i < 200; ++i) {
    auto s = generate_scene(rng, spec);
    EXPECT_GE(s.labels.size(), 0u);
    EXPECT_LE(s.labels.size(), spec.max_objects);
    for (const auto& g : s.labels) {
      EXPECT_GE(g.box.x1, 0);
      EXPECT_GE(g.box.y1, 0);
      EXPECT_LE(g.box.x2, 64);
      EXPECT_LE(g.box.y2, 64);
      EXPECT_GE(g.box.width(), 3);
      EXPECT_GE(g.box.height(), 3);
    }
    for (float v : s.image.data()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Scene, SmallObjectQuota) {
  SceneSpec spec;
  Xoshiro256pp rng(4);
  std::size_t total = 0, small = 0;
  while (total < 500) {
    for (const auto& g : generate_scene(rng, spec).labels) {
      ++total;
      if (std::sqrt(g.box.area()) < 16) ++small;
    }
  }
  EXPECT_GE(static_cast<double>(small) / total, 0.30);
}

TEST(Scene, ObjectsStandOutFromBackground) {
  SceneSpec spec;
  Xoshiro256pp rng(5);
  for (int i = 0; i < 100; ++i) {
    auto s = generate_scene(rng, spec);
    const std::size_t S = spec.img_size;
    // Background statistics from pixels outside every labeled box.
    double bg[3] = {0, 0, 0};
    std::size_t free_pixels = 0;
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        const bool covered = std::any_of(s.labels.begin(), s.labels.end(), [&](const auto& g) {
          return x >= g.box.x1 && x < g.box.x2 && y >= g.box.y1 && y < g.box.y2;
        });
        if (covered) continue;
        ++free_pixels;
        for (std::size_t c = 0; c < 3; ++c) bg[c] += s.image.data()[(c * S + y) * S + x];
      }
    if (free_pixels == 0) continue;
    for (double& v : bg) v /= free_pixels;
    for (const auto& g : s.labels) {
      double inside[3] = {0, 0, 0};
      for (std::size_t c = 0; c < 3; ++c) {
        for (auto y = std::size_t(g.box.y1); y < std::size_t(g.box.y2); ++y)
          for (auto x = std::size_t(g.box.x1); x < std::size_t(g.box.x2); ++x)
            inside[c] += s.image.data()[(c * S + y) * S + x];
        inside[c] /= g.box.area();
      }
      double margin = 0;
      for (std::size_t c = 0; c < 3; ++c) margin = std::max(margin, std::abs(inside[c] - bg[c]));
      EXPECT_GE(margin, 0.2);
    }
  }
}

TEST(Dataset, RoundTrip) {
  const auto dir = scratch("roundtrip");
  SceneSpec spec;
  spec.seed = 11;
  auto m = write_dataset(dir, spec, 6, 3);
  EXPECT_EQ(m.spec.seed, 11u);

  // Regenerate the samples in memory to compare against what was loaded.
  Xoshiro256pp rng(spec.seed);
  auto ds = load_dataset(dir);
  EXPECT_TRUE(ds.checksum_ok);
  EXPECT_EQ(ds.manifest.spec.seed, 11u);
  EXPECT_EQ(ds.manifest.checksum, m.checksum);
  ASSERT_EQ(ds.train.size(), 6u);
  ASSERT_EQ(ds.val.size(), 3u);
  for (const auto& loaded : ds.train) {
    auto s = generate_scene(rng, spec);
    ASSERT_EQ(loaded.labels.size(), s.labels.size());
    for (std::size_t j = 0; j < s.labels.size(); ++j) {
      EXPECT_EQ(loaded.labels[j].class_id, s.labels[j].class_id);
      EXPECT_NEAR(loaded.labels[j].box.x1, s.labels[j].box.x1, 1e-6);
      EXPECT_NEAR(loaded.labels[j].box.y1, s.labels[j].box.y1, 1e-6);
      EXPECT_NEAR(loaded.labels[j].box.x2, s.labels[j].box.x2, 1e-6);
      EXPECT_NEAR(loaded.labels[j].box.y2, s.labels[j].box.y2, 1e-6);
    }
    for (std::size_t j = 0; j < s.image.numel(); ++j)
      EXPECT_LE(std::abs(loaded.image.data()[j] - s.image.data()[j]), 1.0f / 255.0f);
  }
  fs::remove_all(dir);
}

TEST(Dataset, RewriteIsByteIdenticalAndSeedsDiffer) {
  const auto dir = scratch("rewrite");
  SceneSpec spec;
  auto m1 = write_dataset(dir, spec, 4, 2);
  const std::string first = slurp(dir / "train" / "000003.ppm");
  auto m2 = write_dataset(dir, spec, 4, 2);
  EXPECT_EQ(first, slurp(dir / "train" / "000003.ppm"));
  EXPECT_EQ(m1.checksum, m2.checksum);
  spec.seed += 1;
  EXPECT_NE(write_dataset(dir, spec, 4, 2).checksum, m1.checksum);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) files += e.is_regular_file();
  EXPECT_EQ(files, 13u);
  fs::remove_all(dir);
}

TEST(Dataset, ErrorsNameTheFile) {
  const auto dir = scratch("errors");
  fs::create_directories(dir);
  EXPECT_THROW(load_dataset(dir), IoError);

  write_dataset(dir, SceneSpec{}, 2, 1);
  {
    std::ofstream(dir / "train" / "000001.txt") << "0 0.5 0.5 oops\n";
  }
  try {
    load_dataset(dir);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("000001.txt"), std::string::npos);
  }

  write_dataset(dir, SceneSpec{}, 2, 1);
  {
    std::ofstream(dir / "val" / "000000.txt", std::ios::app) << "1 0.5 0.5 0.1 0.1\n";
  }
  auto ds = load_dataset(dir);
  EXPECT_FALSE(ds.checksum_ok);
  EXPECT_EQ(ds.warnings.size(), 1u);

  fs::remove(dir / "val" / "000000.ppm");
  EXPECT_THROW(load_dataset(dir), IoError);
  fs::remove_all(dir);
}

TEST(Ppm, RoundTripQuantization) {
  const auto dir = scratch("ppm");
  fs::create_directories(dir);
  Tensor<float> img(Shape{3, 2, 3}, {0.0f, 0.1f, 0.2f, 0.3f, 0.4f, 0.5f, 0.6f, 0.7f, 0.8f,
                                     0.9f, 1.0f, 0.25f, 0.33f, 0.66f, 0.01f, 0.99f, 0.5f, 0.123f});
  write_ppm(dir / "a.ppm", img);
  auto back = read_ppm(dir / "a.ppm");
  ASSERT_EQ(back.shape(), img.shape());
  for (std::size_t i = 0; i < img.numel(); ++i)
    EXPECT_LE(std::abs(back.data()[i] - img.data()[i]), 0.5f / 255.0f + 1e-7f);
  fs::remove_all(dir);
}
