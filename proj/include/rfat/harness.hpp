#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "rfat/gradcheck.hpp"
#include "rfat/metrics.hpp"
#include "rfat/run.hpp"

// The command implementations behind the CLI, usable from tests.

namespace rfat {

// --- report formats -----------------------------------------------------------

std::string metrics_csv_header();
std::string metrics_csv_row(const StepRecord& rec);

/// "step,map50,map50_95,ap50_c0,..." (without the step column when with_step
/// is false). Classes without ground truth print "nan".
std::string eval_csv_header(int num_classes, bool with_step);
std::string eval_csv_row(const Evaluation& ev, bool with_step, std::size_t step = 0);

/// recall,precision,score — one row per ranked detection.
std::string pr_csv(const PrCurve& curve);
/// Precision (y) against recall (x) on [0,1]^2, one polyline per curve.
std::string pr_svg(const std::vector<PrCurve>& curves);

// --- commands -------------------------------------------------------------------

struct TrainRun {
  std::vector<StepRecord> steps;
  Evaluation eval;  // on the val split after the last epoch
  double seconds = 0;  // training only, excluding evaluation
  std::size_t params = 0;
};

/// Writes config.snapshot, metrics.csv, eval.csv, model_e<epoch>.ckpt every
/// eval_every epochs and model.ckpt at the end into `run_dir`.
TrainRun run_training(const RunConfig& cfg, const std::filesystem::path& run_dir,
                      std::ostream& log);

struct EvalRequest {
  std::filesystem::path checkpoint;
  std::filesystem::path data_dir;
  std::filesystem::path out_dir;
  double conf_thresh = 0.001;  // mAP ranks the whole list; 0.25 is a deployment cut
  double nms_iou = 0.5;
  bool oracle = false;  // ground truth injected as detections
};

/// The model config comes from config.snapshot beside the checkpoint. Writes
/// eval.csv, pr_class<k>.csv and pr.svg for the val split.
Evaluation run_evaluation(const EvalRequest& req, std::ostream& log);

/// Trains and evaluates both configs (which must share data_dir) into
/// out/a and out/b and writes out/compare.csv: a row per variant and a
/// delta row (b - a).
void run_compare(const RunConfig& a, const RunConfig& b, const std::filesystem::path& out,
                 std::ostream& log);

// --- gradient suite ---------------------------------------------------------------

struct GradCase {
  std::string name;
  /// Multiplier on the suite tolerance (the whole-detector composite is
  /// allowed 10x).
  double tolerance_scale = 1.0;
  std::function<GradCheckReport(std::uint64_t seed)> run;
};

/// Every differentiable op and block at 64-bit; with `include_fault` a
/// deliberately wrong backward rule is appended as "fault_fixture".
std::vector<GradCase> gradient_suite(bool include_fault = false);

struct GradOutcome {
  std::string name;
  GradCheckReport report;
  double tolerance = 0;
  bool passed = false;
  double seconds = 0;
};

/// Runs the suite (or only `module`; ConfigError if unknown), printing one
/// line per case.
std::vector<GradOutcome> run_gradient_suite(const std::string& module, double tol,
                                            std::uint64_t seed, bool inject_fault,
                                            std::ostream& log);

}  // namespace rfat
