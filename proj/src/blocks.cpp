#include "rfat/blocks.hpp"

#include "rfat/errors.hpp"

namespace rfat {

namespace {

template <typename T>
Tensor<T> affine_act(const Tensor<T>& y, const Tensor<T>& gain, const Tensor<T>& beta,
                     Activation act) {
  auto z = add(mul(y, gain), beta);
  return act == Activation::kSilu ? silu(z) : z;
}

template <typename T>
Tensor<T> run_unit(const Tensor<T>& x, const UnitParams<T>& u) {
  return u.rfa ? rfa_block(x, u.rfa_block) : conv_block(x, u.conv);
}

template <typename T>
Tensor<T> c2f_impl(const Tensor<T>& x, const C2fParams<T>& p) {
  const std::size_t h = p.hidden;
  if (p.m.empty() || p.cv1.out_channels() != 2 * h ||
      p.cv2.in_channels() != (2 + p.m.size()) * h) {
    throw ConfigError("c2f: inconsistent channel arithmetic");
  }
  const auto u = conv_block(x, p.cv1);
  auto halves = split(u, {h, h}, 1);
  std::vector<Tensor<T>> chunks{halves[0], halves[1]};
  Tensor<T> cur = halves[1];
  for (const auto& b : p.m) {
    cur = bottleneck(cur, b);
    chunks.push_back(cur);
  }
  return conv_block(concat(chunks, 1), p.cv2);
}

template <typename T>
UnitParams<T> make_unit(std::size_t width, bool rfa, bool share, Xoshiro256pp* rng) {
  UnitParams<T> u;
  u.rfa = rfa;
  if (rfa) {
    u.rfa_block = rng ? RfaBlockParams<T>::init(width, width, 3, share, *rng)
                      : RfaBlockParams<T>::zeros(width, width, 3, share);
  } else {
    u.conv = rng ? ConvBlockParams<T>::init(width, width, 3, 1, *rng)
                 : ConvBlockParams<T>::zeros(width, width, 3);
  }
  return u;
}

template <typename T>
BottleneckParams<T> make_bottleneck(std::size_t width, BottleneckKind kind, bool residual,
                                    bool share, Xoshiro256pp* rng) {
  BottleneckParams<T> p;
  p.residual = residual;
  p.cv_a = make_unit<T>(width, kind == BottleneckKind::kRfa, share, rng);
  p.cv_b = make_unit<T>(width, kind != BottleneckKind::kConv, share, rng);
  return p;
}

}  // namespace

// --- parameter records ------------------------------------------------------

template <typename T>
ConvBlockParams<T> ConvBlockParams<T>::zeros(std::size_t c_in, std::size_t c_out, std::size_t k,
                                             std::size_t stride, Activation act) {
  if (k % 2 == 0 || c_in == 0 || c_out == 0) {
    throw ConfigError("conv_block: need odd k and positive widths");
  }
  ConvBlockParams p;
  p.kernel = Tensor<T>(Shape{c_out, c_in, k, k});
  p.gain = Tensor<T>(Shape{1, c_out, 1, 1}, T(1));
  p.beta = Tensor<T>(Shape{1, c_out, 1, 1});
  p.spec = ConvSpec::same(k, stride);
  p.act = act;
  return p;
}

template <typename T>
ConvBlockParams<T> ConvBlockParams<T>::init(std::size_t c_in, std::size_t c_out, std::size_t k,
                                            std::size_t stride, Xoshiro256pp& rng,
                                            Activation act) {
  auto p = zeros(c_in, c_out, k, stride, act);
  p.kernel = kaiming_uniform<T>(p.kernel.shape(), rng, kGainSilu);
  return p;
}

template <typename T>
void ConvBlockParams<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".kernel", kernel, ParamRole::kWeight});
  out.push_back({prefix + ".gain", gain, ParamRole::kAffine});
  out.push_back({prefix + ".beta", beta, ParamRole::kAffine});
}

template <typename T>
RfaBlockParams<T> RfaBlockParams<T>::zeros(std::size_t c_in, std::size_t c_out, std::size_t k,
                                           bool share_attention) {
  RfaBlockParams p;
  p.conv = RfaConvParams<T>::zeros(c_in, c_out, k, 1, false, share_attention);
  p.gain = Tensor<T>(Shape{1, c_out, 1, 1}, T(1));
  p.beta = Tensor<T>(Shape{1, c_out, 1, 1});
  return p;
}

template <typename T>
RfaBlockParams<T> RfaBlockParams<T>::init(std::size_t c_in, std::size_t c_out, std::size_t k,
                                          bool share_attention, Xoshiro256pp& rng) {
  auto p = zeros(c_in, c_out, k, share_attention);
  p.conv = RfaConvParams<T>::init(c_in, c_out, k, 1, false, share_attention, rng);
  return p;
}

template <typename T>
void RfaBlockParams<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  conv.collect(out, prefix + ".rfa");
  out.push_back({prefix + ".gain", gain, ParamRole::kAffine});
  out.push_back({prefix + ".beta", beta, ParamRole::kAffine});
}

template <typename T>
void UnitParams<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  if (rfa) {
    rfa_block.collect(out, prefix);
  } else {
    conv.collect(out, prefix);
  }
}

template <typename T>
BottleneckParams<T> BottleneckParams<T>::zeros(std::size_t width, BottleneckKind kind,
                                               bool residual, bool share_attention) {
  return make_bottleneck<T>(width, kind, residual, share_attention, nullptr);
}

template <typename T>
BottleneckParams<T> BottleneckParams<T>::init(std::size_t width, BottleneckKind kind,
                                              bool residual, bool share_attention,
                                              Xoshiro256pp& rng) {
  return make_bottleneck<T>(width, kind, residual, share_attention, &rng);
}

template <typename T>
void BottleneckParams<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  cv_a.collect(out, prefix + ".cv_a");
  cv_b.collect(out, prefix + ".cv_b");
}

template <typename T>
C2fParams<T> C2fParams<T>::init(std::size_t c_in, std::size_t c_out, std::size_t n,
                                BottleneckKind kind, bool residual, bool share_attention,
                                Xoshiro256pp& rng) {
  if (n == 0) throw ConfigError("c2f: need at least one bottleneck");
  if (c_out < 2 || c_out % 2 != 0) {
    throw ConfigError("c2f: output width " + std::to_string(c_out) +
                      " cannot be split into two equal halves");
  }
  C2fParams p;
  p.hidden = c_out / 2;
  p.kind = kind;
  p.cv1 = ConvBlockParams<T>::init(c_in, 2 * p.hidden, 1, 1, rng);
  for (std::size_t i = 0; i < n; ++i) {
    p.m.push_back(BottleneckParams<T>::init(p.hidden, kind, residual, share_attention, rng));
  }
  p.cv2 = ConvBlockParams<T>::init((2 + n) * p.hidden, c_out, 1, 1, rng);
  return p;
}

template <typename T>
void C2fParams<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  cv1.collect(out, prefix + ".cv1");
  for (std::size_t i = 0; i < m.size(); ++i) m[i].collect(out, prefix + ".m" + std::to_string(i));
  cv2.collect(out, prefix + ".cv2");
}

template <typename T>
SPPFParams<T> SPPFParams<T>::init(std::size_t c_in, std::size_t c_out, Xoshiro256pp& rng) {
  if (c_in < 2 || c_in % 2 != 0) throw ConfigError("sppf: input width must be even");
  SPPFParams p;
  p.cv1 = ConvBlockParams<T>::init(c_in, c_in / 2, 1, 1, rng);
  p.cv2 = ConvBlockParams<T>::init(2 * c_in, c_out, 1, 1, rng);
  return p;
}

template <typename T>
void SPPFParams<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  cv1.collect(out, prefix + ".cv1");
  cv2.collect(out, prefix + ".cv2");
}

// --- forward ----------------------------------------------------------------

template <typename T>
Tensor<T> conv_block(const Tensor<T>& x, const ConvBlockParams<T>& p) {
  return affine_act(conv2d(x, p.kernel, Tensor<T>(), p.spec), p.gain, p.beta, p.act);
}

template <typename T>
Tensor<T> rfa_block(const Tensor<T>& x, const RfaBlockParams<T>& p) {
  return affine_act(rfa_conv(x, p.conv), p.gain, p.beta, p.act);
}

template <typename T>
Tensor<T> bottleneck(const Tensor<T>& x, const BottleneckParams<T>& p) {
  auto y = run_unit(run_unit(x, p.cv_a), p.cv_b);
  if (p.residual && y.shape() == x.shape()) y = add(y, x);
  return y;
}

template <typename T>
Tensor<T> c2f(const Tensor<T>& x, const C2fParams<T>& p) {
  if (p.kind != BottleneckKind::kConv) throw ConfigError("c2f: given RFAConv bottlenecks");
  return c2f_impl(x, p);
}

template <typename T>
Tensor<T> c2f_rfaconv(const Tensor<T>& x, const C2fParams<T>& p) {
  if (p.kind == BottleneckKind::kConv) throw ConfigError("c2f_rfaconv: given conv bottlenecks");
  return c2f_impl(x, p);
}

template <typename T>
Tensor<T> sppf(const Tensor<T>& x, const SPPFParams<T>& p) {
  const ConvSpec pool = ConvSpec::same(p.pool_k);
  const auto y0 = conv_block(x, p.cv1);
  const auto y1 = maxpool2d(y0, pool);
  const auto y2 = maxpool2d(y1, pool);
  const auto y3 = maxpool2d(y2, pool);
  return conv_block(concat<T>({y0, y1, y2, y3}, 1), p.cv2);
}

template <typename T>
Tensor<T> attach_triplet(const Tensor<T>& x, const TripletAttentionParams<T>& p, bool enabled) {
  return enabled ? triplet_attention(x, p) : x;
}

#define RFAT_INSTANTIATE_BLOCKS(T)                                                         \
  template struct ConvBlockParams<T>;                                                      \
  template struct RfaBlockParams<T>;                                                       \
  template struct UnitParams<T>;                                                           \
  template struct BottleneckParams<T>;                                                     \
  template struct C2fParams<T>;                                                            \
  template struct SPPFParams<T>;                                                           \
  template Tensor<T> conv_block<T>(const Tensor<T>&, const ConvBlockParams<T>&);           \
  template Tensor<T> rfa_block<T>(const Tensor<T>&, const RfaBlockParams<T>&);             \
  template Tensor<T> bottleneck<T>(const Tensor<T>&, const BottleneckParams<T>&);          \
  template Tensor<T> c2f<T>(const Tensor<T>&, const C2fParams<T>&);                        \
  template Tensor<T> c2f_rfaconv<T>(const Tensor<T>&, const C2fParams<T>&);                \
  template Tensor<T> sppf<T>(const Tensor<T>&, const SPPFParams<T>&);                      \
  template Tensor<T> attach_triplet<T>(const Tensor<T>&, const TripletAttentionParams<T>&, \
                                       bool);

RFAT_INSTANTIATE_BLOCKS(float)
RFAT_INSTANTIATE_BLOCKS(double)

}  // namespace rfat
