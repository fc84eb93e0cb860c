#include "rfat/attention.hpp"

#include "rfat/errors.hpp"
#include "rfat/ops.hpp"

namespace rfat {

namespace {

std::size_t reduced_width(std::size_t channels, std::size_t ratio, const char* what) {
  if (ratio == 0 || channels % ratio != 0 || channels / ratio < 1) {
    throw ConfigError(std::string(what) + ": ratio " + std::to_string(ratio) +
                      " must divide " + std::to_string(channels) + " channels");
  }
  return channels / ratio;
}

void require_odd(std::size_t k) {
  if (k == 0 || k % 2 == 0) {
    throw ConfigError("attention kernel size must be odd, got " + std::to_string(k));
  }
}

template <typename T>
void add_param(ParamList<T>& out, const std::string& name, const Tensor<T>& t, ParamRole role) {
  out.push_back(NamedParam<T>{name, t, role});
}

template <typename T>
Tensor<T> gated_branch(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                       std::size_t k) {
  const auto gate = sigmoid(conv2d(z_pool(x, 1), kernel, bias, ConvSpec::same(k)));
  return mul(x, gate);
}

template <typename T>
Tensor<T> conv1x1(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias) {
  return conv2d(x, kernel, bias, ConvSpec{1, 1, 0, 1});
}

}  // namespace

// --- parameter records ------------------------------------------------------

template <typename T>
TripletAttentionParams<T> TripletAttentionParams<T>::zeros(std::size_t k) {
  require_odd(k);
  TripletAttentionParams p;
  p.k = k;
  for (Tensor<T>* t : {&p.cw_kernel, &p.ch_kernel, &p.hw_kernel}) *t = Tensor<T>(Shape{1, 2, k, k});
  for (Tensor<T>* t : {&p.cw_bias, &p.ch_bias, &p.hw_bias}) *t = Tensor<T>(Shape{1});
  return p;
}

template <typename T>
TripletAttentionParams<T> TripletAttentionParams<T>::init(std::size_t k, Xoshiro256pp& rng) {
  auto p = zeros(k);
  p.cw_kernel = kaiming_uniform<T>({1, 2, k, k}, rng, kGainLinear);
  p.ch_kernel = kaiming_uniform<T>({1, 2, k, k}, rng, kGainLinear);
  p.hw_kernel = kaiming_uniform<T>({1, 2, k, k}, rng, kGainLinear);
  return p;
}

template <typename T>
void TripletAttentionParams<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  add_param(out, prefix + ".cw_kernel", cw_kernel, ParamRole::kWeight);
  add_param(out, prefix + ".cw_bias", cw_bias, ParamRole::kBias);
  add_param(out, prefix + ".ch_kernel", ch_kernel, ParamRole::kWeight);
  add_param(out, prefix + ".ch_bias", ch_bias, ParamRole::kBias);
  add_param(out, prefix + ".hw_kernel", hw_kernel, ParamRole::kWeight);
  add_param(out, prefix + ".hw_bias", hw_bias, ParamRole::kBias);
}

template <typename T>
SEParams<T> SEParams<T>::zeros(std::size_t channels, std::size_t ratio) {
  const std::size_t h = reduced_width(channels, ratio, "SE");
  SEParams p;
  p.ratio = ratio;
  p.reduce_kernel = Tensor<T>(Shape{h, channels, 1, 1});
  p.reduce_bias = Tensor<T>(Shape{h});
  p.expand_kernel = Tensor<T>(Shape{channels, h, 1, 1});
  p.expand_bias = Tensor<T>(Shape{channels});
  return p;
}

template <typename T>
SEParams<T> SEParams<T>::init(std::size_t channels, std::size_t ratio, Xoshiro256pp& rng) {
  auto p = zeros(channels, ratio);
  p.reduce_kernel = kaiming_uniform<T>(p.reduce_kernel.shape(), rng);
  p.expand_kernel = kaiming_uniform<T>(p.expand_kernel.shape(), rng);
  return p;
}

template <typename T>
void SEParams<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  add_param(out, prefix + ".reduce_kernel", reduce_kernel, ParamRole::kWeight);
  add_param(out, prefix + ".reduce_bias", reduce_bias, ParamRole::kBias);
  add_param(out, prefix + ".expand_kernel", expand_kernel, ParamRole::kWeight);
  add_param(out, prefix + ".expand_bias", expand_bias, ParamRole::kBias);
}

template <typename T>
CBAMParams<T> CBAMParams<T>::zeros(std::size_t channels, std::size_t ratio) {
  const std::size_t h = reduced_width(channels, ratio, "CBAM");
  CBAMParams p;
  p.ratio = ratio;
  p.reduce_kernel = Tensor<T>(Shape{h, channels, 1, 1});
  p.reduce_bias = Tensor<T>(Shape{h});
  p.expand_kernel = Tensor<T>(Shape{channels, h, 1, 1});
  p.expand_bias = Tensor<T>(Shape{channels});
  p.spatial_kernel = Tensor<T>(Shape{1, 2, 7, 7});
  p.spatial_bias = Tensor<T>(Shape{1});
  return p;
}

template <typename T>
CBAMParams<T> CBAMParams<T>::init(std::size_t channels, std::size_t ratio, Xoshiro256pp& rng) {
  auto p = zeros(channels, ratio);
  p.reduce_kernel = kaiming_uniform<T>(p.reduce_kernel.shape(), rng);
  p.expand_kernel = kaiming_uniform<T>(p.expand_kernel.shape(), rng);
  p.spatial_kernel = kaiming_uniform<T>(p.spatial_kernel.shape(), rng);
  return p;
}

template <typename T>
void CBAMParams<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  add_param(out, prefix + ".reduce_kernel", reduce_kernel, ParamRole::kWeight);
  add_param(out, prefix + ".reduce_bias", reduce_bias, ParamRole::kBias);
  add_param(out, prefix + ".expand_kernel", expand_kernel, ParamRole::kWeight);
  add_param(out, prefix + ".expand_bias", expand_bias, ParamRole::kBias);
  add_param(out, prefix + ".spatial_kernel", spatial_kernel, ParamRole::kWeight);
  add_param(out, prefix + ".spatial_bias", spatial_bias, ParamRole::kBias);
}

template <typename T>
GCParams<T> GCParams<T>::zeros(std::size_t channels, std::size_t ratio) {
  const std::size_t h = reduced_width(channels, ratio, "GC");
  GCParams p;
  p.ratio = ratio;
  p.context_kernel = Tensor<T>(Shape{1, channels, 1, 1});
  p.reduce_kernel = Tensor<T>(Shape{h, channels, 1, 1});
  p.reduce_bias = Tensor<T>(Shape{h});
  p.ln_gain = Tensor<T>(Shape{1, h, 1, 1}, T(1));
  p.ln_bias = Tensor<T>(Shape{1, h, 1, 1});
  p.expand_kernel = Tensor<T>(Shape{channels, h, 1, 1});
  p.expand_bias = Tensor<T>(Shape{channels});
  return p;
}

template <typename T>
GCParams<T> GCParams<T>::init(std::size_t channels, std::size_t ratio, Xoshiro256pp& rng) {
  auto p = zeros(channels, ratio);
  p.context_kernel = kaiming_uniform<T>(p.context_kernel.shape(), rng);
  p.reduce_kernel = kaiming_uniform<T>(p.reduce_kernel.shape(), rng);
  p.expand_kernel = kaiming_uniform<T>(p.expand_kernel.shape(), rng);
  return p;
}

template <typename T>
void GCParams<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  add_param(out, prefix + ".context_kernel", context_kernel, ParamRole::kWeight);
  add_param(out, prefix + ".reduce_kernel", reduce_kernel, ParamRole::kWeight);
  add_param(out, prefix + ".reduce_bias", reduce_bias, ParamRole::kBias);
  add_param(out, prefix + ".ln_gain", ln_gain, ParamRole::kAffine);
  add_param(out, prefix + ".ln_bias", ln_bias, ParamRole::kAffine);
  add_param(out, prefix + ".expand_kernel", expand_kernel, ParamRole::kWeight);
  add_param(out, prefix + ".expand_bias", expand_bias, ParamRole::kBias);
}

// --- forward passes ---------------------------------------------------------

template <typename T>
Tensor<T> z_pool(const Tensor<T>& x, std::size_t axis) {
  if (x.rank() != 4 || axis >= 4) {
    throw ShapeError("z_pool: axis " + std::to_string(axis) + " invalid for " +
                     shape_str(x.shape()));
  }
  return concat<T>({max_axis(x, axis), mean_axis(x, axis)}, axis);
}

template <typename T>
Tensor<T> triplet_attention(const Tensor<T>& x, const TripletAttentionParams<T>& p) {
  require_odd(p.k);
  if (x.rank() != 4) throw ShapeError("triplet_attention: expected NCHW, got " + shape_str(x.shape()));
  // (N, H, C, W): pool across H, gate the (C, W) plane.
  const std::vector<std::size_t> swap_ch{0, 2, 1, 3};
  // (N, W, H, C): pool across W, gate the (H, C) plane.
  const std::vector<std::size_t> swap_cw{0, 3, 2, 1};
  const auto y_cw = permute(gated_branch(permute(x, swap_ch), p.cw_kernel, p.cw_bias, p.k), swap_ch);
  const auto y_ch = permute(gated_branch(permute(x, swap_cw), p.ch_kernel, p.ch_bias, p.k), swap_cw);
  const auto y_hw = gated_branch(x, p.hw_kernel, p.hw_bias, p.k);
  return scale(add(add(y_cw, y_ch), y_hw), T(1) / T(3));
}

template <typename T>
Tensor<T> se_forward(const Tensor<T>& x, const SEParams<T>& p) {
  reduced_width(x.dim(1), p.ratio, "SE");
  const auto squeeze = global_avg_pool(x);
  const auto s = sigmoid(conv1x1(relu(conv1x1(squeeze, p.reduce_kernel, p.reduce_bias)),
                                 p.expand_kernel, p.expand_bias));
  return mul(x, s);
}

template <typename T>
Tensor<T> cbam_forward(const Tensor<T>& x, const CBAMParams<T>& p) {
  reduced_width(x.dim(1), p.ratio, "CBAM");
  auto mlp = [&](const Tensor<T>& v) {
    return conv1x1(relu(conv1x1(v, p.reduce_kernel, p.reduce_bias)), p.expand_kernel,
                   p.expand_bias);
  };
  const auto channel_gate = sigmoid(add(mlp(global_avg_pool(x)), mlp(global_max_pool(x))));
  const auto refined = mul(x, channel_gate);
  const auto spatial_gate =
      sigmoid(conv2d(z_pool(refined, 1), p.spatial_kernel, p.spatial_bias, ConvSpec::same(7)));
  return mul(refined, spatial_gate);
}

template <typename T>
Tensor<T> gc_attention(const Tensor<T>& x, const GCParams<T>& p) {
  const std::size_t N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const auto logits = conv2d(x, p.context_kernel, Tensor<T>(), ConvSpec{1, 1, 0, 1});
  return softmax(reshape(logits, Shape{N, 1, H * W}), 2);
}

template <typename T>
Tensor<T> gc_forward(const Tensor<T>& x, const GCParams<T>& p) {
  reduced_width(x.dim(1), p.ratio, "GC");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto attn = gc_attention(x, p);
  const auto context =
      reshape(sum_axes(mul(reshape(x, Shape{N, C, H * W}), attn), {2}), Shape{N, C, 1, 1});
  const auto reduced = conv1x1(context, p.reduce_kernel, p.reduce_bias);
  const auto transform = conv1x1(relu(layer_norm(reduced, p.ln_gain, p.ln_bias, {1}, T(1e-5))),
                                 p.expand_kernel, p.expand_bias);
  return add(x, transform);
}

#define RFAT_INSTANTIATE_ATTENTION(T)                                                     \
  template struct TripletAttentionParams<T>;                                              \
  template struct SEParams<T>;                                                            \
  template struct CBAMParams<T>;                                                          \
  template struct GCParams<T>;                                                            \
  template Tensor<T> z_pool<T>(const Tensor<T>&, std::size_t);                            \
  template Tensor<T> triplet_attention<T>(const Tensor<T>&, const TripletAttentionParams<T>&); \
  template Tensor<T> se_forward<T>(const Tensor<T>&, const SEParams<T>&);                 \
  template Tensor<T> cbam_forward<T>(const Tensor<T>&, const CBAMParams<T>&);             \
  template Tensor<T> gc_forward<T>(const Tensor<T>&, const GCParams<T>&);                 \
  template Tensor<T> gc_attention<T>(const Tensor<T>&, const GCParams<T>&);

RFAT_INSTANTIATE_ATTENTION(float)
RFAT_INSTANTIATE_ATTENTION(double)

}  // namespace rfat
