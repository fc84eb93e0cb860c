#include "rfat/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "rfat/data.hpp"
#include "rfat/errors.hpp"
#include "rfat/io.hpp"

namespace fs = std::filesystem;

namespace rfat {

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

Dataset load_checked(const fs::path& dir, std::size_t img_size, std::ostream& log) {
  Dataset ds = load_dataset(dir);
  for (const auto& w : ds.warnings) log << "warning: " << w << "\n";
  if (ds.manifest.spec.img_size != img_size) {
    throw ConfigError("dataset " + dir.string() + " has img_size " +
                      std::to_string(ds.manifest.spec.img_size) + " but the model expects " +
                      std::to_string(img_size));
  }
  if (ds.val.empty()) throw ConfigError("dataset " + dir.string() + " has no val images");
  return ds;
}

class CsvFile {
 public:
  CsvFile(const fs::path& file, const std::string& header) : out_(file), file_(file) {
    if (!out_) throw IoError("cannot write " + file.string());
    line(header);
  }
  void line(const std::string& row) {
    out_ << row << "\n";
    out_.flush();
    if (!out_) throw IoError("short write to " + file_.string());
  }

 private:
  std::ofstream out_;
  fs::path file_;
};

}  // namespace

// --- report formats -----------------------------------------------------------

std::string metrics_csv_header() { return "step,loss,loss_box,loss_obj,loss_cls,lr"; }

std::string metrics_csv_row(const StepRecord& r) {
  return std::to_string(r.step) + "," + num(r.loss.total) + "," + num(r.loss.box) + "," +
         num(r.loss.obj) + "," + num(r.loss.cls) + "," + num(r.lr);
}

std::string eval_csv_header(int num_classes, bool with_step) {
  std::string h = with_step ? "step,map50,map50_95" : "map50,map50_95";
  for (int c = 0; c < num_classes; ++c) h += ",ap50_c" + std::to_string(c);
  return h;
}

std::string eval_csv_row(const Evaluation& ev, bool with_step, std::size_t step) {
  std::string r = with_step ? std::to_string(step) + "," : "";
  r += num(ev.map50) + "," + num(ev.map50_95);
  for (double ap : ev.ap50) r += "," + num(ap);
  return r;
}

std::string pr_csv(const PrCurve& curve) {
  std::string out = "recall,precision,score\n";
  for (const auto& p : curve.points) {
    out += num(p.recall) + "," + num(p.precision) + "," + num(p.score) + "\n";
  }
  return out;
}

std::string pr_svg(const std::vector<PrCurve>& curves) {
  // 400x400 plot area offset by a 50px margin; y grows downwards in SVG.
  constexpr double kSize = 400, kMargin = 50;
  static const char* kColors[] = {"#d62728", "#1f77b4", "#2ca02c", "#ff7f0e",
                                  "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };
  auto px = [&](double r) { return fmt(kMargin + r * kSize); };
  auto py = [&](double p) { return fmt(kMargin + (1 - p) * kSize); };
  std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"500\" height=\"500\" "
       "viewBox=\"0 0 500 500\">\n";
  s += "<rect x=\"50\" y=\"50\" width=\"400\" height=\"400\" fill=\"none\" stroke=\"black\"/>\n";
  s += "<text x=\"250\" y=\"485\" text-anchor=\"middle\" font-size=\"14\">recall</text>\n";
  s += "<text x=\"15\" y=\"250\" text-anchor=\"middle\" font-size=\"14\" "
       "transform=\"rotate(-90 15 250)\">precision</text>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = t / 4.0;
    s += "<text x=\"" + px(v) + "\" y=\"468\" text-anchor=\"middle\" font-size=\"10\">" +
         fmt(v) + "</text>\n";
    s += "<text x=\"44\" y=\"" + py(v) + "\" text-anchor=\"end\" font-size=\"10\">" + fmt(v) +
         "</text>\n";
  }
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const auto& c = curves[i];
    std::string pts;
    for (const auto& p : c.points) {
      if (!pts.empty()) pts += ' ';
      pts += px(p.recall) + "," + py(p.precision);
    }
    s += "<polyline class=\"pr\" data-class=\"" + std::to_string(c.class_id) +
         "\" fill=\"none\" stroke=\"" + kColors[i % 8] + "\" points=\"" + pts + "\"/>\n";
  }
  s += "</svg>\n";
  return s;
}

// --- commands -------------------------------------------------------------------

TrainRun run_training(const RunConfig& cfg, const fs::path& run_dir, std::ostream& log) {
  cfg.validate();
  make_dir(run_dir);
  RunConfig snap = cfg;
  snap.out_dir = run_dir.string();
  write_file(run_dir / "config.snapshot", run_config_snapshot(snap));

  const Dataset ds = load_checked(cfg.data_dir, cfg.model.img_size, log);
  DetectorModel<float> model = build_model<float>(cfg.model);
  const auto params = model.parameters();
  TrainRun run;
  run.params = count_scalars(params);
  log << "model: " << run.params << " parameters, " << ds.train.size() << " train / "
      << ds.val.size() << " val images\n";

  CsvFile metrics(run_dir / "metrics.csv", metrics_csv_header());
  CsvFile evals(run_dir / "eval.csv", eval_csv_header(cfg.model.num_classes, true));
  const TrainOptions topt = cfg.train_options();
  const EvalOptions eopt = cfg.eval_options();
  double eval_seconds = 0;
  std::size_t step = 0;
  double epoch_loss = 0;
  std::size_t epoch_steps = 0;

  const auto t0 = std::chrono::steady_clock::now();
  run.steps = train(
      model, ds.train, topt,
      [&](const StepRecord& r) {
        metrics.line(metrics_csv_row(r));
        step = r.step;
        epoch_loss += r.loss.total;
        ++epoch_steps;
      },
      [&](std::size_t epoch) {
        log << "epoch " << epoch << "/" << topt.epochs << "  mean loss "
            << num(epoch_loss / static_cast<double>(std::max<std::size_t>(epoch_steps, 1)))
            << "  step " << step << "\n";
        epoch_loss = 0;
        epoch_steps = 0;
        if (cfg.eval_every == 0 || epoch % cfg.eval_every != 0 || epoch == topt.epochs) return;
        const auto te = std::chrono::steady_clock::now();
        const Evaluation ev = evaluate_model(model, ds.val, eopt);
        evals.line(eval_csv_row(ev, true, step));
        save_checkpoint(run_dir / ("model_e" + std::to_string(epoch) + ".ckpt"), params);
        log << "  val map50 " << num(ev.map50) << "  map50_95 " << num(ev.map50_95) << "\n";
        eval_seconds += seconds_since(te);
      });
  run.seconds = seconds_since(t0) - eval_seconds;

  run.eval = evaluate_model(model, ds.val, eopt);
  evals.line(eval_csv_row(run.eval, true, step));
  save_checkpoint(run_dir / "model.ckpt", params);
  log << "final val map50 " << num(run.eval.map50) << "  map50_95 " << num(run.eval.map50_95)
      << "  (" << num(run.seconds) << " s training)\n";
  return run;
}

Evaluation run_evaluation(const EvalRequest& req, std::ostream& log) {
  const fs::path snapshot = req.checkpoint.parent_path() / "config.snapshot";
  if (!fs::exists(snapshot)) {
    throw IoError("no config.snapshot beside checkpoint " + req.checkpoint.string());
  }
  const RunConfig cfg = load_run_config(snapshot);
  if (!(req.conf_thresh >= 0 && req.conf_thresh <= 1)) {
    throw ConfigError("--conf must be in [0, 1]");
  }
  if (!(req.nms_iou > 0 && req.nms_iou <= 1)) throw ConfigError("--nms must be in (0, 1]");
  const Dataset ds = load_checked(req.data_dir, cfg.model.img_size, log);
  const auto gts = ground_truth(ds.val);

  std::vector<Detection> dets;
  if (req.oracle) {
    for (const auto& g : gts) dets.push_back(Detection{g.box, g.class_id, 1.0, g.image_id});
  } else {
    DetectorModel<float> model = build_model<float>(cfg.model);
    apply_checkpoint(load_checkpoint(req.checkpoint), model.parameters());
    EvalOptions eopt;
    eopt.conf_thresh = req.conf_thresh;
    eopt.nms_iou = req.nms_iou;
    dets = predict(model, ds.val, eopt);
  }
  const Evaluation ev = evaluate(dets, gts, cfg.model.num_classes);

  make_dir(req.out_dir);
  write_file(req.out_dir / "eval.csv", eval_csv_header(cfg.model.num_classes, false) + "\n" +
                                           eval_csv_row(ev, false) + "\n");
  for (const auto& c : ev.curves) {
    write_file(req.out_dir / ("pr_class" + std::to_string(c.class_id) + ".csv"), pr_csv(c));
  }
  write_file(req.out_dir / "pr.svg", pr_svg(ev.curves));
  log << "map50 " << num(ev.map50) << "  map50_95 " << num(ev.map50_95);
  for (std::size_t c = 0; c < ev.ap50.size(); ++c) log << "  ap50_c" << c << " " << num(ev.ap50[c]);
  log << "\n";
  return ev;
}

void run_compare(const RunConfig& a, const RunConfig& b, const fs::path& out, std::ostream& log) {
  if (fs::path(a.data_dir).lexically_normal() != fs::path(b.data_dir).lexically_normal()) {
    throw ConfigError("compare: configs use different data_dir ('" + a.data_dir + "' vs '" +
                      b.data_dir + "'); both variants must share the dataset");
  }
  if (a.model.num_classes != b.model.num_classes) {
    throw ConfigError("compare: configs disagree on num_classes");
  }
  make_dir(out);
  log << "== variant a\n";
  const TrainRun ra = run_training(a, out / "a", log);
  log << "== variant b\n";
  const TrainRun rb = run_training(b, out / "b", log);

  std::string csv = "variant,map50,map50_95";
  for (int c = 0; c < a.model.num_classes; ++c) csv += ",ap50_c" + std::to_string(c);
  csv += ",params,train_seconds\n";
  auto row = [&](const char* name, const TrainRun& r) {
    csv += std::string(name) + "," + num(r.eval.map50) + "," + num(r.eval.map50_95);
    for (double ap : r.eval.ap50) csv += "," + num(ap);
    csv += "," + std::to_string(r.params) + "," + num(r.seconds) + "\n";
  };
  row("a", ra);
  row("b", rb);
  // Wall-clock time is not reproducible, so its delta is left empty.
  csv += "delta," + num(rb.eval.map50 - ra.eval.map50) + "," +
         num(rb.eval.map50_95 - ra.eval.map50_95);
  for (std::size_t c = 0; c < ra.eval.ap50.size(); ++c) {
    csv += "," + num(rb.eval.ap50[c] - ra.eval.ap50[c]);
  }
  csv += "," + std::to_string(static_cast<long long>(rb.params) - static_cast<long long>(ra.params)) +
         ",\n";
  write_file(out / "compare.csv", csv);
  log << "delta map50 " << num(rb.eval.map50 - ra.eval.map50) << "  delta map50_95 "
      << num(rb.eval.map50_95 - ra.eval.map50_95) << "  params " << ra.params << " -> "
      << rb.params << "\n";
}

// --- gradient suite ---------------------------------------------------------------

std::vector<GradOutcome> run_gradient_suite(const std::string& module, double tol,
                                            std::uint64_t seed, bool inject_fault,
                                            std::ostream& log) {
  if (!(tol > 0)) throw ConfigError("--tol must be positive");
  auto suite = gradient_suite(inject_fault);
  if (!module.empty()) {
    std::vector<GradCase> picked;
    for (auto& c : suite)
      if (c.name == module) picked.push_back(c);
    if (picked.empty()) {
      std::string known;
      for (const auto& c : suite) known += (known.empty() ? "" : ", ") + c.name;
      throw ConfigError("unknown module '" + module + "' (known: " + known + ")");
    }
    suite = std::move(picked);
  }
  std::vector<GradOutcome> out;
  for (const auto& c : suite) {
    GradOutcome o;
    o.name = c.name;
    o.tolerance = tol * c.tolerance_scale;
    const auto t0 = std::chrono::steady_clock::now();
    o.report = c.run(seed);
    o.seconds = seconds_since(t0);
    o.passed = o.report.passed(o.tolerance);
    char line[200];
    std::snprintf(line, sizeof line, "%-4s %-20s max_rel_err %.3e  tol %.0e  coords %zu  %.2fs",
                  o.passed ? "ok" : "FAIL", o.name.c_str(), o.report.max_rel_error, o.tolerance,
                  o.report.coords_checked, o.seconds);
    log << line << "\n";
    out.push_back(std::move(o));
  }
  return out;
}

}  // namespace rfat
