// rfat: data generation, training, evaluation, gradient checks and A/B runs.
//
// Exit codes: 0 ok, 1 gradient check failure, 2 config error, 3 numerical
// failure, 4 I/O error.

#include <CLI11.hpp>

#include <iostream>

#include "rfat/data.hpp"
#include "rfat/errors.hpp"
#include "rfat/harness.hpp"
#include "rfat/run.hpp"

namespace {

enum Exit : int { kOk = 0, kCheckFailed = 1, kConfig = 2, kNumerical = 3, kIo = 4 };

int gen_data(const std::string& out, std::size_t n_train, std::size_t n_val,
             std::uint64_t seed, std::size_t img_size) {
  rfat::SceneSpec spec;
  spec.seed = seed;
  spec.img_size = img_size;
  const auto m = rfat::write_dataset(out, spec, n_train, n_val);
  std::cout << "wrote " << out << ": " << m.n_train << " train, " << m.n_val << " val, "
            << m.spec.img_size << "px, seed " << m.spec.seed << ", dropped " << m.dropped
            << ", checksum " << m.checksum << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RFAConv / Triplet-attention toy detector"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset");
  std::string gen_out;
  std::size_t n_train = 200, n_val = 50, img_size = 64;
  std::uint64_t gen_seed = 7;
  gen->add_option("--out", gen_out, "Dataset directory")->required();
  gen->add_option("--train", n_train, "Training images");
  gen->add_option("--val", n_val, "Validation images");
  gen->add_option("--seed", gen_seed, "Generator seed");
  gen->add_option("--img-size", img_size, "Square image side in pixels");

  auto* tr = app.add_subcommand("train", "Train one config");
  std::string tr_config, tr_out;
  tr->add_option("--config", tr_config, "key = value config file")->required();
  tr->add_option("--out", tr_out, "Run directory (default: out_dir from the config)");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the val split");
  rfat::EvalRequest req;
  std::string ev_ckpt, ev_data, ev_out;
  ev->add_option("--checkpoint", ev_ckpt, "model.ckpt (config.snapshot must sit beside it)")
      ->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--out", ev_out, "Output directory")->required();
  ev->add_option("--conf", req.conf_thresh, "Score threshold");
  ev->add_option("--nms", req.nms_iou, "NMS IoU threshold");
  ev->add_flag("--oracle", req.oracle, "Score the ground truth itself (upper bound)");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  std::string gc_module;
  double gc_tol = 1e-4;
  std::uint64_t gc_seed = 1;
  bool gc_fault = false;
  gc->add_option("--module", gc_module, "Run only this case");
  gc->add_option("--tol", gc_tol, "Max relative error");
  gc->add_option("--seed", gc_seed, "Input seed");
  gc->add_flag("--inject-fault", gc_fault)->group("");  // harness self-test

  auto* cmp = app.add_subcommand("compare", "Train and evaluate two configs on the same data");
  std::string cfg_a, cfg_b, cmp_out;
  cmp->add_option("--config-a", cfg_a, "Baseline config")->required();
  cmp->add_option("--config-b", cfg_b, "Variant config")->required();
  cmp->add_option("--out", cmp_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*gen) return gen_data(gen_out, n_train, n_val, gen_seed, img_size);
    if (*tr) {
      const auto cfg = rfat::load_run_config(tr_config);
      rfat::run_training(cfg, tr_out.empty() ? cfg.out_dir : tr_out, std::cout);
      return kOk;
    }
    if (*ev) {
      req.checkpoint = ev_ckpt;
      req.data_dir = ev_data;
      req.out_dir = ev_out;
      rfat::run_evaluation(req, std::cout);
      return kOk;
    }
    if (*gc) {
      const auto results = rfat::run_gradient_suite(gc_module, gc_tol, gc_seed, gc_fault, std::cout);
      std::size_t failed = 0;
      for (const auto& r : results) failed += r.passed ? 0 : 1;
      std::cout << (results.size() - failed) << "/" << results.size() << " passed\n";
      return failed ? kCheckFailed : kOk;
    }
    if (*cmp) {
      rfat::run_compare(rfat::load_run_config(cfg_a), rfat::load_run_config(cfg_b), cmp_out,
                        std::cout);
      return kOk;
    }
  } catch (const rfat::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const rfat::ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const rfat::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const rfat::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  }
  return kOk;
}
