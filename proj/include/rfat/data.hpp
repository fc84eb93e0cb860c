#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rfat/metrics.hpp"
#include "rfat/random.hpp"
#include "rfat/tensor.hpp"

// Synthetic "driving scene" generator and its on-disk format.

namespace rfat {

enum SceneClass : int { kVehicle = 0, kPedestrian = 1, kSign = 2 };
constexpr int kSceneClassCount = 3;

struct SceneSpec {
  std::size_t img_size = 64;
  std::size_t min_objects = 1;
  std::size_t max_objects = 6;
  double small_fraction = 0.5;  // share of objects drawn from the small size range
  double noise = 0.1;           // per-pixel background noise amplitude
  std::uint64_t seed = 7;
};

struct Sample {
  Tensor<float> image;  // (3, S, S), values in [0, 1]
  std::vector<GroundTruth> labels;
};

/// One object to paint. Boxes are [x0, x0 + w) x [y0, y0 + h) in pixels.
struct ObjectSpec {
  int class_id = kVehicle;
  std::size_t x0 = 0, y0 = 0, w = 0, h = 0;
  float color[3] = {1, 0, 0};
};

struct SceneStats {
  std::size_t objects = 0;
  std::size_t dropped = 0;  // placements abandoned after 100 tries
};

/// Paints the object over `image` (later objects on top) and returns its
/// label (x0, y0, x0 + w, y0 + h).
GroundTruth paint_object(Tensor<float>& image, const ObjectSpec& obj);

Sample generate_scene(Xoshiro256pp& rng, const SceneSpec& spec, SceneStats* stats = nullptr);

struct Manifest {
  std::string format = "rfat-synth 1";
  SceneSpec spec;
  std::size_t n_train = 0, n_val = 0;
  std::size_t dropped = 0;
  std::string checksum;  // FNV-1a 64 over every image and label file, hex
  std::vector<std::string> train, val;  // stems relative to the dataset root
};

struct Dataset {
  Manifest manifest;
  std::vector<Sample> train, val;
  bool checksum_ok = true;
  std::vector<std::string> warnings;
};

/// Writes train/NNNNNN.{ppm,txt}, val/NNNNNN.{ppm,txt} and manifest.txt.
/// The train and val splits each draw from their own stream derived from
/// spec.seed, so the val set does not depend on the train count.
Manifest write_dataset(const std::filesystem::path& dir, const SceneSpec& spec,
                       std::size_t n_train, std::size_t n_val);

/// Throws IoError naming the file on missing or malformed content; a checksum
/// mismatch only records a warning.
Dataset load_dataset(const std::filesystem::path& dir);

// Single-file formats, exposed for tests and tools.
void write_ppm(const std::filesystem::path& file, const Tensor<float>& image);
Tensor<float> read_ppm(const std::filesystem::path& file);
std::string format_labels(const std::vector<GroundTruth>& labels, std::size_t img_size);
std::vector<GroundTruth> parse_labels(const std::string& text, std::size_t img_size,
                                      const std::string& where);

}  // namespace rfat
