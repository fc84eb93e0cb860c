#include "rfat/detector.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>

#include "rfat/autograd.hpp"
#include "rfat/errors.hpp"

namespace rfat {

// --- configuration ------------------------------------------------------------

void ModelConfig::validate() const {
  auto fail = [](const std::string& why) { throw ConfigError("model config: " + why); };
  if (img_size < 32 || img_size % 32 != 0) fail("img_size must be a positive multiple of 32");
  if (base_width < 2 || base_width % 2 != 0) fail("base_width must be even and >= 2");
  if (depth < 1) fail("depth must be >= 1");
  if (num_classes < 1) fail("num_classes must be >= 1");
  if (triplet_k < 1 || triplet_k % 2 == 0) fail("triplet_k must be odd");
}

std::vector<std::size_t> ModelConfig::strides() const {
  if (use_p2) return {4, 8, 16, 32};
  return {8, 16, 32};
}

namespace {

template <typename T>
BottleneckKind kind_for(const ModelConfig& cfg) {
  if (!cfg.use_rfaconv) return BottleneckKind::kConv;
  return cfg.rfa_single_conv ? BottleneckKind::kRfaSingle : BottleneckKind::kRfa;
}

template <typename T>
C2fParams<T> make_c2f(std::size_t c_in, std::size_t c_out, const ModelConfig& cfg,
                      Xoshiro256pp& rng) {
  return C2fParams<T>::init(c_in, c_out, cfg.depth, kind_for<T>(cfg), true,
                            cfg.share_attention_across_channels, rng);
}

template <typename T>
Tensor<T> run_c2f(const Tensor<T>& x, const C2fParams<T>& p) {
  return p.kind == BottleneckKind::kConv ? c2f(x, p) : c2f_rfaconv(x, p);
}

template <typename T>
HeadParams<T> make_head(std::size_t width, std::size_t stride, int num_classes,
                        Xoshiro256pp& rng) {
  HeadParams<T> h;
  h.stride = stride;
  h.cv1 = ConvBlockParams<T>::init(width, width, 3, 1, rng);
  h.cv2 = ConvBlockParams<T>::init(width, width, 3, 1, rng);
  const auto nc = static_cast<std::size_t>(num_classes);
  h.box_kernel = kaiming_uniform<T>({4, width, 1, 1}, rng);
  h.box_bias = Tensor<T>(Shape{4});
  h.obj_kernel = kaiming_uniform<T>({1, width, 1, 1}, rng);
  h.obj_bias = Tensor<T>(Shape{1});
  h.cls_kernel = kaiming_uniform<T>({nc, width, 1, 1}, rng);
  h.cls_bias = Tensor<T>(Shape{nc});
  return h;
}

constexpr ConvSpec kPointwise{1, 1, 0, 1};

double sigmoid_d(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

// Numerically stable binary cross-entropy on a logit.
double bce_logit(double z, double y) { return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z))); }

struct IouGrad {
  double iou = 0;
  double d_cx = 0, d_cy = 0, d_w = 0, d_h = 0;  // dIoU / d(pred)
};

// IoU of center-size boxes and its gradient with respect to the first box.
IouGrad iou_with_grad(double cx, double cy, double w, double h, double tcx, double tcy,
                      double tw, double th) {
  IouGrad r;
  const double x1 = cx - w / 2, x2 = cx + w / 2, y1 = cy - h / 2, y2 = cy + h / 2;
  const double X1 = tcx - tw / 2, X2 = tcx + tw / 2, Y1 = tcy - th / 2, Y2 = tcy + th / 2;
  const double iw = std::min(x2, X2) - std::max(x1, X1);
  const double ih = std::min(y2, Y2) - std::max(y1, Y1);
  const double area = w * h;
  if (iw <= 0 || ih <= 0) return r;  // no overlap: IoU is locally flat at 0
  const double inter = iw * ih;
  const double uni = area + tw * th - inter;
  r.iou = inter / uni;
  // d inter / d corner: only the corner that defines the overlap edge moves it.
  const double di_x1 = x1 > X1 ? -ih : 0.0, di_x2 = x2 < X2 ? ih : 0.0;
  const double di_y1 = y1 > Y1 ? -iw : 0.0, di_y2 = y2 < Y2 ? iw : 0.0;
  const double a = 1.0 / uni + inter / (uni * uni);  // dIoU/dinter (incl. union)
  const double b = -inter / (uni * uni);             // dIoU/d(pred area)
  r.d_cx = a * (di_x1 + di_x2);
  r.d_cy = a * (di_y1 + di_y2);
  r.d_w = a * 0.5 * (di_x2 - di_x1) + b * h;
  r.d_h = a * 0.5 * (di_y2 - di_y1) + b * w;
  return r;
}

template <typename T>
std::string level_summary(const std::vector<HeadOutput<T>>& outputs) {
  std::ostringstream os;
  for (const auto& o : outputs) {
    for (auto [name, t] : {std::pair{"box", &o.box}, std::pair{"obj", &o.obj},
                           std::pair{"cls", &o.cls}}) {
      double lo = INFINITY, hi = -INFINITY;
      std::size_t bad = 0;
      for (T v : t->data()) {
        if (!std::isfinite(v)) {
          ++bad;
          continue;
        }
        lo = std::min(lo, double(v));
        hi = std::max(hi, double(v));
      }
      os << "\n  stride " << o.stride << " " << name << " " << shape_str(t->shape())
         << " min=" << lo << " max=" << hi << " non-finite=" << bad;
    }
  }
  return os.str();
}

}  // namespace

// --- model ----------------------------------------------------------------------

template <typename T>
ParamList<T> DetectorModel<T>::parameters() const {
  ParamList<T> out;
  stem.collect(out, "stem");
  for (int i = 0; i < 4; ++i) {
    const std::string p = "stage" + std::to_string(i + 2);
    stages[i].down.collect(out, p + ".down");
    stages[i].c2f.collect(out, p + ".c2f");
    if (cfg.use_triplet) stages[i].triplet.collect(out, p + ".triplet");
  }
  sppf.collect(out, "sppf");
  neck_p4.collect(out, "neck.p4");
  neck_p3.collect(out, "neck.p3");
  if (cfg.use_p2) neck_p2.collect(out, "neck.p2");
  for (const auto& h : heads) {
    const std::string p = "head.s" + std::to_string(h.stride);
    h.cv1.collect(out, p + ".cv1");
    h.cv2.collect(out, p + ".cv2");
    out.push_back({p + ".box.kernel", h.box_kernel, ParamRole::kWeight});
    out.push_back({p + ".box.bias", h.box_bias, ParamRole::kBias});
    out.push_back({p + ".obj.kernel", h.obj_kernel, ParamRole::kWeight});
    out.push_back({p + ".obj.bias", h.obj_bias, ParamRole::kBias});
    out.push_back({p + ".cls.kernel", h.cls_kernel, ParamRole::kWeight});
    out.push_back({p + ".cls.bias", h.cls_bias, ParamRole::kBias});
  }
  return out;
}

template <typename T>
DetectorModel<T> build_model(const ModelConfig& cfg) {
  cfg.validate();
  Xoshiro256pp rng(cfg.seed);
  DetectorModel<T> m;
  m.cfg = cfg;
  const std::size_t c0 = cfg.base_width;
  const std::size_t widths[4] = {c0, 2 * c0, 4 * c0, 8 * c0};
  m.stem = ConvBlockParams<T>::init(3, c0, 3, 2, rng);
  std::size_t prev = c0;
  for (int i = 0; i < 4; ++i) {
    m.stages[i].down = ConvBlockParams<T>::init(prev, widths[i], 3, 2, rng);
    m.stages[i].c2f = make_c2f<T>(widths[i], widths[i], cfg, rng);
    // Always drawn so that toggling triplet attention leaves every other
    // tensor's initial values unchanged.
    m.stages[i].triplet = TripletAttentionParams<T>::init(cfg.triplet_k, rng);
    prev = widths[i];
  }
  m.sppf = SPPFParams<T>::init(widths[3], widths[3], rng);
  m.neck_p4 = make_c2f<T>(widths[3] + widths[2], widths[2], cfg, rng);
  m.neck_p3 = make_c2f<T>(widths[2] + widths[1], widths[1], cfg, rng);
  if (cfg.use_p2) m.neck_p2 = make_c2f<T>(widths[1] + widths[0], widths[0], cfg, rng);
  const std::size_t first = cfg.use_p2 ? 0 : 1;
  for (std::size_t l = first; l < 4; ++l) {
    m.heads.push_back(make_head<T>(widths[l], std::size_t{4} << l, cfg.num_classes, rng));
  }
  return m;
}

template <typename T>
std::vector<HeadOutput<T>> forward(const DetectorModel<T>& model, const Tensor<T>& images) {
  const auto& cfg = model.cfg;
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != cfg.img_size ||
      images.dim(3) != cfg.img_size) {
    throw ShapeError("forward: expected (N, 3, " + std::to_string(cfg.img_size) + ", " +
                     std::to_string(cfg.img_size) + ") images, got " + shape_str(images.shape()));
  }
  Tensor<T> x = conv_block(images, model.stem);
  Tensor<T> feats[4];
  for (int i = 0; i < 4; ++i) {
    const auto& st = model.stages[i];
    x = run_c2f(conv_block(x, st.down), st.c2f);
    x = attach_triplet(x, st.triplet, cfg.use_triplet);
    feats[i] = x;
  }
  Tensor<T> levels[4];
  levels[3] = sppf(feats[3], model.sppf);
  levels[2] = run_c2f(concat<T>({upsample_nearest2x(levels[3]), feats[2]}, 1), model.neck_p4);
  levels[1] = run_c2f(concat<T>({upsample_nearest2x(levels[2]), feats[1]}, 1), model.neck_p3);
  if (cfg.use_p2) {
    levels[0] = run_c2f(concat<T>({upsample_nearest2x(levels[1]), feats[0]}, 1), model.neck_p2);
  }
  std::vector<HeadOutput<T>> out;
  const std::size_t first = cfg.use_p2 ? 0 : 1;
  for (std::size_t l = first; l < 4; ++l) {
    const auto& h = model.heads[l - first];
    const auto f = conv_block(conv_block(levels[l], h.cv1), h.cv2);
    HeadOutput<T> o;
    o.box = conv2d(f, h.box_kernel, h.box_bias, kPointwise);
    o.obj = conv2d(f, h.obj_kernel, h.obj_bias, kPointwise);
    o.cls = conv2d(f, h.cls_kernel, h.cls_bias, kPointwise);
    o.stride = h.stride;
    out.push_back(std::move(o));
  }
  return out;
}

// --- targets --------------------------------------------------------------------

std::size_t level_for_box(const BBox& box, const ModelConfig& cfg) {
  const double side = std::sqrt(std::max(box.area(), 0.0));
  std::size_t level;  // 0 = P2, ..., 3 = P5
  if (side < 16) {
    level = cfg.use_p2 ? 0 : 1;
  } else if (side < 32) {
    level = 1;
  } else if (side < 64) {
    level = 2;
  } else {
    level = 3;
  }
  return cfg.use_p2 ? level : level - 1;
}

Targets assign_targets(const std::vector<std::vector<GroundTruth>>& gts, const ModelConfig& cfg) {
  Targets t;
  t.batch = gts.size();
  for (std::size_t s : cfg.strides()) {
    LevelTargets lt;
    lt.stride = s;
    lt.grid = cfg.img_size / s;
    t.levels.push_back(lt);
  }
  // Cell occupancy per level: index into positives, or -1.
  std::vector<std::vector<long>> owner(t.levels.size());
  for (std::size_t l = 0; l < t.levels.size(); ++l) {
    owner[l].assign(t.batch * t.levels[l].grid * t.levels[l].grid, -1);
  }
  for (std::size_t n = 0; n < gts.size(); ++n) {
    for (const auto& g : gts[n]) {
      if (g.box.width() <= 1.0 || g.box.height() <= 1.0) {
        ++t.skipped;
        continue;
      }
      const std::size_t l = level_for_box(g.box, cfg);
      auto& lt = t.levels[l];
      const double s = static_cast<double>(lt.stride);
      const double cx = (g.box.x1 + g.box.x2) / 2 / s, cy = (g.box.y1 + g.box.y2) / 2 / s;
      const auto last = static_cast<double>(lt.grid - 1);
      const double gx = std::clamp(std::floor(cx), 0.0, last);
      const double gy = std::clamp(std::floor(cy), 0.0, last);
      PositiveTarget p;
      p.image = n;
      p.gx = static_cast<std::size_t>(gx);
      p.gy = static_cast<std::size_t>(gy);
      p.tx = std::clamp(cx - gx, 0.0, 1.0);
      p.ty = std::clamp(cy - gy, 0.0, 1.0);
      p.tw = g.box.width() / s;
      p.th = g.box.height() / s;
      p.class_id = g.class_id;
      long& slot = owner[l][(n * lt.grid + p.gy) * lt.grid + p.gx];
      if (slot >= 0) {
        ++t.collisions;
        lt.positives[static_cast<std::size_t>(slot)] = p;
      } else {
        slot = static_cast<long>(lt.positives.size());
        lt.positives.push_back(p);
      }
    }
  }
  return t;
}

// --- loss -----------------------------------------------------------------------

template <typename T>
Tensor<T> detection_loss(const std::vector<HeadOutput<T>>& outputs, const Targets& targets,
                         LossReport* report, const LossWeights& weights) {
  if (outputs.size() != targets.levels.size()) {
    throw ShapeError("detection_loss: " + std::to_string(outputs.size()) + " output levels but " +
                     std::to_string(targets.levels.size()) + " target levels");
  }
  std::size_t npos = 0;
  for (const auto& lt : targets.levels) npos += lt.positives.size();
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(npos, 1));

  // The loss is a closed-form function of the head outputs, so its gradient
  // is computed alongside the value and replayed scaled by the upstream grad.
  struct LevelGrad {
    std::vector<T> box, obj, cls;
  };
  auto grads = std::make_shared<std::vector<LevelGrad>>(outputs.size());
  double box_sum = 0, obj_sum = 0, cls_sum = 0;
  for (std::size_t l = 0; l < outputs.size(); ++l) {
    const auto& o = outputs[l];
    const auto& lt = targets.levels[l];
    const std::size_t N = targets.batch, G = lt.grid, cells = G * G;
    const std::size_t nc = o.cls.dim(1);
    if (o.box.shape() != Shape{N, 4, G, G} || o.obj.shape() != Shape{N, 1, G, G} ||
        o.cls.dim(0) != N || o.cls.dim(2) != G || o.cls.dim(3) != G) {
      throw ShapeError("detection_loss: level with stride " + std::to_string(lt.stride) +
                       " does not match its targets");
    }
    auto& lg = (*grads)[l];
    lg.box.assign(o.box.numel(), T(0));
    lg.obj.assign(o.obj.numel(), T(0));
    lg.cls.assign(o.cls.numel(), T(0));
    const auto box = o.box.data(), obj = o.obj.data(), cls = o.cls.data();

    std::vector<unsigned char> hot(N * cells, 0);
    for (const auto& p : lt.positives) hot[p.image * cells + p.gy * G + p.gx] = 1;
    for (std::size_t i = 0; i < N * cells; ++i) {
      const double z = obj[i], y = hot[i];
      obj_sum += bce_logit(z, y);
      lg.obj[i] = static_cast<T>(weights.obj * norm * (sigmoid_d(z) - y));
    }
    for (const auto& p : lt.positives) {
      if (p.class_id < 0 || static_cast<std::size_t>(p.class_id) >= nc) {
        throw ConfigError("detection_loss: class id " + std::to_string(p.class_id) +
                          " outside the head's " + std::to_string(nc) + " classes");
      }
      const std::size_t cell = p.gy * G + p.gx;
      auto at = [&](std::size_t ch, std::size_t C) { return (p.image * C + ch) * cells + cell; };
      const double t0 = box[at(0, 4)], t1 = box[at(1, 4)], t2 = box[at(2, 4)], t3 = box[at(3, 4)];
      const double sx = sigmoid_d(t0), sy = sigmoid_d(t1);
      const double w = std::exp(std::min(t2, kMaxLogSize)), h = std::exp(std::min(t3, kMaxLogSize));
      const auto ig = iou_with_grad(p.gx + sx, p.gy + sy, w, h, p.gx + p.tx, p.gy + p.ty, p.tw, p.th);
      box_sum += 1.0 - ig.iou;
      const double k = -weights.box * norm;  // d(1 - IoU) = -dIoU
      lg.box[at(0, 4)] = static_cast<T>(k * ig.d_cx * sx * (1 - sx));
      lg.box[at(1, 4)] = static_cast<T>(k * ig.d_cy * sy * (1 - sy));
      lg.box[at(2, 4)] = static_cast<T>(t2 < kMaxLogSize ? k * ig.d_w * w : 0.0);
      lg.box[at(3, 4)] = static_cast<T>(t3 < kMaxLogSize ? k * ig.d_h * h : 0.0);
      for (std::size_t c = 0; c < nc; ++c) {
        const double z = cls[at(c, nc)], y = static_cast<int>(c) == p.class_id ? 1.0 : 0.0;
        cls_sum += bce_logit(z, y);
        lg.cls[at(c, nc)] = static_cast<T>(weights.cls * norm * (sigmoid_d(z) - y));
      }
    }
  }
  LossReport r;
  r.box = weights.box * box_sum * norm;
  r.obj = weights.obj * obj_sum * norm;
  r.cls = weights.cls * cls_sum * norm;
  r.total = r.box + r.obj + r.cls;
  r.positives = npos;
  if (!std::isfinite(r.total)) {
    throw NumericalError("detection_loss: non-finite loss (box " + std::to_string(r.box) +
                         ", obj " + std::to_string(r.obj) + ", cls " + std::to_string(r.cls) +
                         ")" + level_summary(outputs));
  }
  if (report) *report = r;

  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(r.total));
  bool any = false;
  for (const auto& o : outputs)
    any = any || o.box.requires_grad() || o.obj.requires_grad() || o.cls.requires_grad();
  Tape* tape = Tape::active();
  if (tape && any) {
    out.set_requires_grad(true);
    out.ensure_grad();
    for (const auto& o : outputs)
      for (const Tensor<T>* t : {&o.box, &o.obj, &o.cls})
        if (t->requires_grad()) t->ensure_grad();
    tape->record("detection_loss", [out, outputs, grads]() {
      const T up = out.grad()[0];
      for (std::size_t l = 0; l < outputs.size(); ++l) {
        const auto& o = outputs[l];
        const auto& lg = (*grads)[l];
        auto accumulate = [up](const Tensor<T>& t, const std::vector<T>& g) {
          if (!t.requires_grad()) return;
          auto dst = t.grad();
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += up * g[i];
        };
        accumulate(o.box, lg.box);
        accumulate(o.obj, lg.obj);
        accumulate(o.cls, lg.cls);
      }
    });
  }
  return out;
}

// --- decoding -------------------------------------------------------------------

template <typename T>
std::vector<std::vector<Detection>> decode_predictions(const std::vector<HeadOutput<T>>& outputs,
                                                       std::size_t img_size, double conf_thresh,
                                                       double nms_iou) {
  if (outputs.empty()) return {};
  const std::size_t N = outputs[0].obj.dim(0);
  const double S = static_cast<double>(img_size);
  std::vector<std::vector<Detection>> raw(N);
  for (const auto& o : outputs) {
    const std::size_t G = o.obj.dim(2), cells = G * G, nc = o.cls.dim(1);
    const double s = static_cast<double>(o.stride);
    const auto box = o.box.data(), obj = o.obj.data(), cls = o.cls.data();
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t cell = 0; cell < cells; ++cell) {
        const double so = sigmoid_d(obj[n * cells + cell]);
        if (so < conf_thresh) continue;  // score <= sigmoid(obj)
        int best = 0;
        double best_p = -1;
        for (std::size_t c = 0; c < nc; ++c) {
          const double pc = sigmoid_d(cls[(n * nc + c) * cells + cell]);
          if (pc > best_p) {
            best_p = pc;
            best = static_cast<int>(c);
          }
        }
        const double score = so * best_p;
        if (score < conf_thresh) continue;
        auto at = [&](std::size_t ch) { return double(box[(n * 4 + ch) * cells + cell]); };
        const double gx = static_cast<double>(cell % G), gy = static_cast<double>(cell / G);
        const double cx = (gx + sigmoid_d(at(0))) * s, cy = (gy + sigmoid_d(at(1))) * s;
        const double w = std::exp(std::min(at(2), kMaxLogSize)) * s;
        const double h = std::exp(std::min(at(3), kMaxLogSize)) * s;
        Detection d;
        d.box = BBox{std::clamp(cx - w / 2, 0.0, S), std::clamp(cy - h / 2, 0.0, S),
                     std::clamp(cx + w / 2, 0.0, S), std::clamp(cy + h / 2, 0.0, S)};
        d.class_id = best;
        d.score = score;
        d.image_id = n;
        raw[n].push_back(d);
      }
    }
  }
  std::vector<std::vector<Detection>> out(N);
  for (std::size_t n = 0; n < N; ++n) out[n] = nms(raw[n], nms_iou);
  return out;
}

// --- optimization -------------------------------------------------------------

TrainState::TrainState(ParamList<float> p) : params(std::move(p)) {
  for (const auto& np : params) velocity.emplace_back(np.tensor.numel(), 0.0f);
}

double learning_rate(const SgdOptions& opt, std::size_t step) {
  if (opt.warmup_steps == 0 || step >= opt.warmup_steps) return opt.lr;
  return opt.lr * static_cast<double>(step + 1) / static_cast<double>(opt.warmup_steps);
}

void sgd_step(TrainState& state, double lr, double momentum, double weight_decay) {
  for (std::size_t i = 0; i < state.params.size(); ++i) {
    auto& np = state.params[i];
    auto w = np.tensor.data();
    auto& v = state.velocity[i];
    const bool has = np.tensor.has_grad();
    const auto g = has ? np.tensor.grad() : std::span<float>();
    const double wd = np.role == ParamRole::kWeight ? weight_decay : 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = has ? g[j] : 0.0;
      v[j] = static_cast<float>(momentum * v[j] + gj + wd * w[j]);
      w[j] = static_cast<float>(w[j] - lr * v[j]);
    }
    np.tensor.drop_grad();
  }
  ++state.step;
}

#define RFAT_INSTANTIATE_DETECTOR(T)                                                         \
  template struct DetectorModel<T>;                                                          \
  template DetectorModel<T> build_model<T>(const ModelConfig&);                              \
  template std::vector<HeadOutput<T>> forward<T>(const DetectorModel<T>&, const Tensor<T>&); \
  template Tensor<T> detection_loss<T>(const std::vector<HeadOutput<T>>&, const Targets&,    \
                                       LossReport*, const LossWeights&);                     \
  template std::vector<std::vector<Detection>> decode_predictions<T>(                        \
      const std::vector<HeadOutput<T>>&, std::size_t, double, double);

RFAT_INSTANTIATE_DETECTOR(float)
RFAT_INSTANTIATE_DETECTOR(double)

}  // namespace rfat
