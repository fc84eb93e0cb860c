// Finite-difference registry: every differentiable op and block, 64-bit.

#include <random>

#include "rfat/attention.hpp"
#include "rfat/autograd.hpp"
#include "rfat/blocks.hpp"
#include "rfat/detector.hpp"
#include "rfat/harness.hpp"
#include "rfat/ops.hpp"
#include "rfat/rfaconv.hpp"

namespace rfat {

namespace {

using Fn = std::function<Tensor<double>()>;

// With the five-point stencil truncation is ~eps^4; a larger step keeps
// summation roundoff in the projected scalar (~1e-15 / eps) negligible.
constexpr double kEps = 1e-4;

Tensor<double> uniform(Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<double> t(std::move(shape));
  for (double& v : t.data()) v = d(rng);
  return t;
}

// Scalarizes f through a fixed random projection of its output.
GradCheckReport check(const Fn& f, std::vector<Tensor<double>> inputs, std::uint64_t seed,
                      std::size_t coords = 64) {
  Shape out_shape;
  {
    NoGradScope guard;
    out_shape = f().shape();
  }
  std::mt19937_64 rng(seed ^ 0xA5A5A5A5ULL);
  const Tensor<double> proj = uniform(out_shape, rng);
  GradCheckOptions opt;
  opt.seed = seed;
  opt.coords_per_tensor = coords;
  opt.fourth_order = true;
  opt.eps = kEps;
  return grad_check([&] { return sum(mul(f(), proj)); }, std::move(inputs), opt);
}

template <typename P>
std::vector<Tensor<double>> with_params(Tensor<double> x, const P& params) {
  ParamList<double> list;
  params.collect(list, "p");
  std::vector<Tensor<double>> out{std::move(x)};
  for (auto& p : list) out.push_back(p.tensor);
  return out;
}

// y = 2x with a backward rule that reports 2.2x: the harness must flag it.
Tensor<double> faulty_double(const Tensor<double>& x) {
  Tensor<double> out = x.clone();
  for (double& v : out.data()) v *= 2;
  if (Tape* tape = Tape::active(); tape && x.requires_grad()) {
    out.set_requires_grad(true);
    out.ensure_grad();
    x.ensure_grad();
    tape->record("faulty_double", [out, x]() {
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += 2.2 * go[i];
    });
  }
  return out;
}

ModelConfig tiny_model(bool improved) {
  ModelConfig c;
  c.img_size = 32;
  c.base_width = 8;
  c.depth = 1;
  c.num_classes = 2;
  c.triplet_k = 3;
  c.use_rfaconv = c.use_triplet = c.use_p2 = improved;
  return c;
}

GradCheckReport detector_case(bool improved, std::uint64_t seed) {
  const ModelConfig cfg = tiny_model(improved);
  auto model = build_model<double>(cfg);
  std::mt19937_64 rng(seed);
  auto x = uniform({1, 3, 32, 32}, rng, 0, 1);
  std::vector<Tensor<double>> inputs{x};
  for (auto& p : model.parameters()) inputs.push_back(p.tensor);
  auto f = [&] {
    std::vector<Tensor<double>> parts;
    for (const auto& o : forward(model, x)) {
      parts.push_back(reshape(o.box, {o.box.numel()}));
      parts.push_back(reshape(o.obj, {o.obj.numel()}));
      parts.push_back(reshape(o.cls, {o.cls.numel()}));
    }
    return concat(parts, 0);
  };
  return check(f, inputs, seed, 4);
}

}  // namespace

std::vector<GradCase> gradient_suite(bool include_fault) {
  std::vector<GradCase> s;
  auto add = [&](std::string name, std::function<GradCheckReport(std::uint64_t)> fn,
                 double scale = 1.0) { s.push_back(GradCase{std::move(name), scale, std::move(fn)}); };

  add("conv2d", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto x = uniform({2, 4, 6, 5}, rng);
    auto w = uniform({6, 2, 3, 3}, rng), b = uniform({6}, rng);
    ConvSpec spec{3, 2, 1, 2};
    return check([&] { return conv2d(x, w, b, spec); }, {x, w, b}, seed);
  });
  add("maxpool2d", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto x = uniform({2, 3, 7, 7}, rng);
    return check([&] { return maxpool2d(x, ConvSpec{3, 2, 1}); }, {x}, seed);
  });
  add("avgpool2d", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto x = uniform({2, 3, 7, 6}, rng);
    return check([&] { return avgpool2d(x, ConvSpec{3, 2, 1}); }, {x}, seed);
  });
  add("softmax", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto x = uniform({3, 5, 4}, rng, -3, 3);
    return check([&] { return softmax(x, 1); }, {x}, seed);
  });
  add("layer_norm", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto x = uniform({2, 4, 3, 3}, rng);
    auto g = uniform({1, 4, 1, 1}, rng), b = uniform({1, 4, 1, 1}, rng);
    return check([&] { return layer_norm(x, g, b, {1, 2, 3}); }, {x, g, b}, seed);
  });
  add("z_pool", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto x = uniform({2, 5, 4, 3}, rng);
    return check([&] { return z_pool(x, 1); }, {x}, seed);
  });
  add("triplet_attention", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Xoshiro256pp prng(seed);
    auto p = TripletAttentionParams<double>::init(3, prng);
    auto x = uniform({2, 4, 5, 6}, rng);
    return check([&] { return triplet_attention(x, p); }, with_params(x, p), seed);
  });
  add("se", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Xoshiro256pp prng(seed);
    auto p = SEParams<double>::init(8, 4, prng);
    auto x = uniform({2, 8, 4, 4}, rng);
    return check([&] { return se_forward(x, p); }, with_params(x, p), seed);
  });
  add("cbam", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Xoshiro256pp prng(seed);
    auto p = CBAMParams<double>::init(8, 4, prng);
    auto x = uniform({2, 8, 5, 5}, rng);
    return check([&] { return cbam_forward(x, p); }, with_params(x, p), seed);
  });
  add("gc", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Xoshiro256pp prng(seed);
    auto p = GCParams<double>::init(8, 4, prng);
    auto x = uniform({2, 8, 4, 5}, rng);
    return check([&] { return gc_forward(x, p); }, with_params(x, p), seed);
  });
  add("rfa_attention", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Xoshiro256pp prng(seed);
    auto p = RfaConvParams<double>::init(3, 4, 3, 2, true, false, prng);
    auto x = uniform({2, 3, 6, 6}, rng);
    return check([&] { return rfa_attention(x, p); }, with_params(x, p), seed);
  });
  add("rfa_conv", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Xoshiro256pp prng(seed);
    auto p = RfaConvParams<double>::init(3, 4, 3, 1, true, false, prng);
    auto x = uniform({2, 3, 5, 6}, rng);
    return check([&] { return rfa_conv(x, p); }, with_params(x, p), seed);
  });
  add("conv_block", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Xoshiro256pp prng(seed);
    auto p = ConvBlockParams<double>::init(3, 4, 3, 2, prng);
    auto x = uniform({2, 3, 6, 6}, rng);
    return check([&] { return conv_block(x, p); }, with_params(x, p), seed);
  });
  add("bottleneck", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Xoshiro256pp prng(seed);
    auto p = BottleneckParams<double>::init(4, BottleneckKind::kConv, true, false, prng);
    auto x = uniform({2, 4, 5, 5}, rng);
    return check([&] { return bottleneck(x, p); }, with_params(x, p), seed);
  });
  add("c2f", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Xoshiro256pp prng(seed);
    auto p = C2fParams<double>::init(4, 6, 2, BottleneckKind::kConv, true, false, prng);
    auto x = uniform({2, 4, 5, 5}, rng);
    return check([&] { return c2f(x, p); }, with_params(x, p), seed);
  });
  add("c2f_rfaconv", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Xoshiro256pp prng(seed);
    auto p = C2fParams<double>::init(4, 6, 1, BottleneckKind::kRfa, true, false, prng);
    auto x = uniform({2, 4, 5, 5}, rng);
    return check([&] { return c2f_rfaconv(x, p); }, with_params(x, p), seed);
  });
  add("sppf", [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Xoshiro256pp prng(seed);
    auto p = SPPFParams<double>::init(4, 6, prng);
    auto x = uniform({2, 4, 6, 6}, rng);
    return check([&] { return sppf(x, p); }, with_params(x, p), seed);
  });
  add("detector", [](std::uint64_t seed) { return detector_case(false, seed); }, 10.0);
  add("detector_improved", [](std::uint64_t seed) { return detector_case(true, seed); }, 10.0);
  add("detection_loss", [](std::uint64_t seed) {
    const ModelConfig cfg = tiny_model(true);
    std::mt19937_64 rng(seed);
    auto box = [](double x1, double y1, double x2, double y2, int c) {
      GroundTruth g;
      g.box = BBox{x1, y1, x2, y2};
      g.class_id = c;
      return g;
    };
    const Targets t = assign_targets(
        {{box(2.5, 3.1, 9.2, 10.7, 0), box(14.3, 1.2, 30.9, 29.1, 1)},
         {box(5.2, 6.9, 20.4, 25.8, 1), box(20.1, 18.3, 26.2, 30.6, 0)}},
        cfg);
    std::vector<HeadOutput<double>> outs;
    std::vector<Tensor<double>> inputs;
    for (const auto& lt : t.levels) {
      HeadOutput<double> o;
      o.stride = lt.stride;
      o.box = uniform({2, 4, lt.grid, lt.grid}, rng);
      o.obj = uniform({2, 1, lt.grid, lt.grid}, rng, -3, 3);
      o.cls = uniform({2, 2, lt.grid, lt.grid}, rng, -3, 3);
      inputs.insert(inputs.end(), {o.box, o.obj, o.cls});
      outs.push_back(o);
    }
    GradCheckOptions opt;
    opt.seed = seed;
    opt.coords_per_tensor = 1024;  // every coordinate
    opt.fourth_order = true;
    opt.eps = kEps;
    return grad_check([&] { return detection_loss(outs, t); }, inputs, opt);
  });
  if (include_fault) {
    add("fault_fixture", [](std::uint64_t seed) {
      std::mt19937_64 rng(seed);
      auto x = uniform({3, 4}, rng);
      return check([&] { return faulty_double(x); }, {x}, seed);
    });
  }
  return s;
}

}  // namespace rfat
