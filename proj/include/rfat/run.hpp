#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "rfat/detector.hpp"
#include "rfat/train.hpp"

// Run configuration files and checkpoints.

namespace rfat {

struct RunConfig {
  ModelConfig model;
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t warmup_steps = 20;
  double conf_thresh = 0.001;  // mAP ranks the whole list; 0.25 is a deployment cut
  double nms_iou = 0.5;
  std::string data_dir = "data";
  std::string out_dir = "runs/default";
  std::size_t eval_every = 0;  // epochs between evaluations; 0 = final only

  /// Throws ConfigError naming the first invalid field.
  void validate() const;
  TrainOptions train_options() const;
  EvalOptions eval_options() const;
};

/// Parses flat `key = value` lines; `#` starts a comment. Unknown keys,
/// duplicates and malformed values raise ConfigError("<source>:<line>: ...").
/// Keys not present keep their defaults.
RunConfig parse_run_config(const std::string& text, const std::string& source = "<config>");
RunConfig load_run_config(const std::filesystem::path& file);

/// Every key in a fixed order; parse_run_config(snapshot(c)) reproduces c.
std::string run_config_snapshot(const RunConfig& cfg);

/// The key names parse_run_config accepts, in snapshot order.
const std::vector<std::string>& run_config_keys();

// --- checkpoints ----------------------------------------------------------
//
// "RFAT", u32 version, u32 tensor count, then per tensor: u32 name length,
// name bytes, u32 rank, u32 extents, f32 data; finally the u64 FNV-1a of all
// preceding bytes. Integers and floats are little-endian.

constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;

std::string encode_checkpoint(const ParamList<float>& params);
/// Throws IoError on bad magic, version, truncation, checksum or duplicate names.
NamedTensors decode_checkpoint(const std::string& bytes, const std::string& source);

void save_checkpoint(const std::filesystem::path& file, const ParamList<float>& params);
NamedTensors load_checkpoint(const std::filesystem::path& file);

/// Copies checkpoint values into the model's tensors. Any missing, extra or
/// shape-mismatched tensor is listed in one ConfigError.
void apply_checkpoint(const NamedTensors& ckpt, const ParamList<float>& params);

}  // namespace rfat
