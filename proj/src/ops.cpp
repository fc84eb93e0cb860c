#include "rfat/ops.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>

#include "rfat/autograd.hpp"

namespace rfat {

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::size_t ConvSpec::out_size(std::size_t in) const {
  if (k == 0 || stride == 0 || groups == 0) {
    throw ShapeError("ConvSpec: k, stride and groups must be positive");
  }
  const std::size_t padded = in + 2 * padding;
  if (padded < k) {
    throw ShapeError("ConvSpec: window " + std::to_string(k) + " exceeds padded extent " +
                     std::to_string(padded));
  }
  return (padded - k) / stride + 1;
}

ConvSpec ConvSpec::same(std::size_t k, std::size_t stride) {
  return ConvSpec{k, stride, (k - 1) / 2, 1};
}

template <typename T>
void check_finite(const Tensor<T>& x, const char* where) {
  for (T v : x.data()) {
    if (!std::isfinite(v)) {
      throw NumericalError(std::string(where) + ": non-finite value in output " +
                           shape_str(x.shape()));
    }
  }
}

namespace {

template <typename T>
void finish(const Tensor<T>& out, const char* name) {
#ifdef RFAT_CHECK_FINITE
  check_finite(out, name);
#else
  (void)out;
  (void)name;
#endif
}

// Returns true when the op must be recorded; prepares grad buffers.
template <typename T, typename... Ins>
bool track(Tensor<T>& out, const Ins&... inputs) {
  if (Tape::active() == nullptr) return false;
  const bool any = (... || (inputs.defined() && inputs.requires_grad()));
  if (!any) return false;
  out.set_requires_grad(true);
  out.ensure_grad();
  auto prep = [](Tensor<T> t) {
    if (t.defined() && t.requires_grad()) t.ensure_grad();
  };
  (prep(inputs), ...);
  return true;
}

template <typename F>
void record(const char* name, F&& fn) {
  Tape::active()->record(name, std::function<void()>(std::forward<F>(fn)));
}

void require_rank(const Shape& s, std::size_t r, const char* op) {
  if (s.size() != r) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                     shape_str(s));
  }
}

// Row-major strides.
std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// For each element of `s`, the flat index it reduces to when `axes` collapse
// to extent 1.
std::vector<std::size_t> reduction_map(const Shape& s, const std::vector<std::size_t>& axes,
                                       Shape* reduced) {
  Shape r = s;
  for (std::size_t a : axes) {
    if (a >= s.size()) throw ShapeError("reduction axis out of range for " + shape_str(s));
    r[a] = 1;
  }
  const auto rst = strides_of(r);
  std::vector<std::size_t> map(numel_of(s));
  std::vector<std::size_t> idx(s.size(), 0);
  for (std::size_t flat = 0; flat < map.size(); ++flat) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (r[d] != 1) off += idx[d] * rst[d];
    }
    map[flat] = off;
    for (std::size_t d = s.size(); d-- > 0;) {
      if (++idx[d] < s[d]) break;
      idx[d] = 0;
    }
  }
  if (reduced) *reduced = r;
  return map;
}

// Extract receptive-field columns for one sample: x is (C, H, W), cols is
// (C, k*k, Ho, Wo).
template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, const ConvSpec& sp,
            std::size_t Ho, std::size_t Wo, T* cols) {
  const std::size_t k = sp.k;
  for (std::size_t c = 0; c < C; ++c) {
    const T* xc = x + c * H * W;
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        T* dst = cols + ((c * k + i) * k + j) * Ho * Wo;
        for (std::size_t p = 0; p < Ho; ++p) {
          const std::ptrdiff_t row = static_cast<std::ptrdiff_t>(p * sp.stride + i) -
                                     static_cast<std::ptrdiff_t>(sp.padding);
          T* drow = dst + p * Wo;
          if (row < 0 || row >= static_cast<std::ptrdiff_t>(H)) {
            std::fill(drow, drow + Wo, T(0));
            continue;
          }
          const T* xrow = xc + static_cast<std::size_t>(row) * W;
          for (std::size_t q = 0; q < Wo; ++q) {
            const std::ptrdiff_t col = static_cast<std::ptrdiff_t>(q * sp.stride + j) -
                                       static_cast<std::ptrdiff_t>(sp.padding);
            drow[q] = (col < 0 || col >= static_cast<std::ptrdiff_t>(W))
                          ? T(0)
                          : xrow[static_cast<std::size_t>(col)];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, std::size_t C, std::size_t H, std::size_t W, const ConvSpec& sp,
                std::size_t Ho, std::size_t Wo, T* gx) {
  const std::size_t k = sp.k;
  for (std::size_t c = 0; c < C; ++c) {
    T* gc = gx + c * H * W;
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        const T* src = cols + ((c * k + i) * k + j) * Ho * Wo;
        for (std::size_t p = 0; p < Ho; ++p) {
          const std::ptrdiff_t row = static_cast<std::ptrdiff_t>(p * sp.stride + i) -
                                     static_cast<std::ptrdiff_t>(sp.padding);
          if (row < 0 || row >= static_cast<std::ptrdiff_t>(H)) continue;
          T* grow = gc + static_cast<std::size_t>(row) * W;
          for (std::size_t q = 0; q < Wo; ++q) {
            const std::ptrdiff_t col = static_cast<std::ptrdiff_t>(q * sp.stride + j) -
                                       static_cast<std::ptrdiff_t>(sp.padding);
            if (col < 0 || col >= static_cast<std::ptrdiff_t>(W)) continue;
            grow[static_cast<std::size_t>(col)] += src[p * Wo + q];
          }
        }
      }
    }
  }
}

// C (M x N) += A (M x K) * B (K x N)
template <typename T>
void gemm_nn(const T* A, const T* B, T* C, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t m = 0; m < M; ++m) {
    T* crow = C + m * N;
    for (std::size_t kk = 0; kk < K; ++kk) {
      const T a = A[m * K + kk];
      if (a == T(0)) continue;
      const T* brow = B + kk * N;
      for (std::size_t n = 0; n < N; ++n) crow[n] += a * brow[n];
    }
  }
}

// C (M x K) += A (M x N) * B(K x N)^T
template <typename T>
void gemm_nt(const T* A, const T* B, T* C, std::size_t M, std::size_t N, std::size_t K) {
  for (std::size_t m = 0; m < M; ++m) {
    const T* arow = A + m * N;
    for (std::size_t kk = 0; kk < K; ++kk) {
      const T* brow = B + kk * N;
      T acc = T(0);
      for (std::size_t n = 0; n < N; ++n) acc += arow[n] * brow[n];
      C[m * K + kk] += acc;
    }
  }
}

// C (K x N) += A(M x K)^T * B (M x N)
template <typename T>
void gemm_tn(const T* A, const T* B, T* C, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t m = 0; m < M; ++m) {
    const T* brow = B + m * N;
    for (std::size_t kk = 0; kk < K; ++kk) {
      const T a = A[m * K + kk];
      if (a == T(0)) continue;
      T* crow = C + kk * N;
      for (std::size_t n = 0; n < N; ++n) crow[n] += a * brow[n];
    }
  }
}

template <typename T>
Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " +
                     shape_str(b));
  }
  Shape out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i] || b[i] == 1) {
      out[i] = a[i];
    } else if (a[i] == 1) {
      out[i] = b[i];
    } else {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b));
    }
  }
  return out;
}

// Flat offsets into a and b for every element of the broadcast output.
void broadcast_offsets(const Shape& a, const Shape& b, const Shape& out,
                       std::vector<std::size_t>& ao, std::vector<std::size_t>& bo) {
  const auto as = strides_of(a);
  const auto bs = strides_of(b);
  const std::size_t n = numel_of(out);
  ao.resize(n);
  bo.resize(n);
  std::vector<std::size_t> idx(out.size(), 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t oa = 0;
    std::size_t ob = 0;
    for (std::size_t d = 0; d < out.size(); ++d) {
      if (a[d] != 1) oa += idx[d] * as[d];
      if (b[d] != 1) ob += idx[d] * bs[d];
    }
    ao[flat] = oa;
    bo[flat] = ob;
    for (std::size_t d = out.size(); d-- > 0;) {
      if (++idx[d] < out[d]) break;
      idx[d] = 0;
    }
  }
}

enum class BinOp { kAdd, kSub, kMul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinOp op, const char* name) {
  const Shape out_shape = broadcast_shape<T>(a.shape(), b.shape(), name);
  Tensor<T> out(out_shape);
  const bool same = a.shape() == b.shape();
  std::vector<std::size_t> ao;
  std::vector<std::size_t> bo;
  if (!same) broadcast_offsets(a.shape(), b.shape(), out_shape, ao, bo);
  auto av = a.data();
  auto bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    const T x = av[same ? i : ao[i]];
    const T y = bv[same ? i : bo[i]];
    ov[i] = op == BinOp::kAdd ? x + y : op == BinOp::kSub ? x - y : x * y;
  }
  if (track(out, a, b)) {
    record(name, [out, a, b, op, same, ao = std::move(ao), bo = std::move(bo)]() mutable {
      auto go = out.grad();
      const bool ga_on = a.requires_grad();
      const bool gb_on = b.requires_grad();
      auto av2 = a.data();
      auto bv2 = b.data();
      for (std::size_t i = 0; i < go.size(); ++i) {
        const std::size_t ia = same ? i : ao[i];
        const std::size_t ib = same ? i : bo[i];
        const T g = go[i];
        switch (op) {
          case BinOp::kAdd:
            if (ga_on) a.grad()[ia] += g;
            if (gb_on) b.grad()[ib] += g;
            break;
          case BinOp::kSub:
            if (ga_on) a.grad()[ia] += g;
            if (gb_on) b.grad()[ib] -= g;
            break;
          case BinOp::kMul:
            if (ga_on) a.grad()[ia] += g * bv2[ib];
            if (gb_on) b.grad()[ib] += g * av2[ia];
            break;
        }
      }
    });
  }
  finish(out, name);
  return out;
}

template <typename T>
T stable_sigmoid(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

// Copies a contiguous slab [start, start+len) of `axis`.
template <typename T>
Tensor<T> slice_axis(const Tensor<T>& x, std::size_t start, std::size_t len, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size() || start + len > s[axis]) {
    throw ShapeError("split: slice out of range for " + shape_str(s));
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  Shape os = s;
  os[axis] = len;
  Tensor<T> out(os);
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * s[axis] + start) * inner),
                len * inner, ov.begin() + static_cast<std::ptrdiff_t>(o * len * inner));
  }
  if (track(out, x)) {
    record("split", [out, x, outer, inner, start, len, full = s[axis]]() mutable {
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < len * inner; ++i) {
          gx[(o * full + start) * inner + i] += go[o * len * inner + i];
        }
      }
    });
  }
  return out;
}

struct AxisSplit {
  std::size_t outer;
  std::size_t len;
  std::size_t inner;
};

AxisSplit axis_split(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     shape_str(s));
  }
  AxisSplit r{1, s[axis], 1};
  for (std::size_t d = 0; d < axis; ++d) r.outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) r.inner *= s[d];
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                 const ConvSpec& spec) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(kernel.shape(), 4, "conv2d kernel");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = kernel.dim(0), k = spec.k, G = spec.groups;
  if (G == 0 || C % G != 0 || O % G != 0) {
    throw ShapeError("conv2d: groups " + std::to_string(G) + " must divide C_in " +
                     std::to_string(C) + " and C_out " + std::to_string(O));
  }
  const std::size_t Cg = C / G, Og = O / G;
  if (kernel.dim(1) != Cg || kernel.dim(2) != k || kernel.dim(3) != k) {
    throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) + " does not fit input " +
                     shape_str(x.shape()) + " with k=" + std::to_string(k) +
                     " groups=" + std::to_string(G));
  }
  if (bias.defined() && bias.numel() != O) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " for " + std::to_string(O) +
                     " output channels");
  }
  const std::size_t Ho = spec.out_size(H), Wo = spec.out_size(W);
  const std::size_t P = Ho * Wo, R = Cg * k * k;

  Tensor<T> out(Shape{N, O, Ho, Wo});
  std::vector<T> cols(R * P);
  auto xv = x.data();
  auto wv = kernel.data();
  auto ov = out.data();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t g = 0; g < G; ++g) {
      im2col(xv.data() + (n * C + g * Cg) * H * W, Cg, H, W, spec, Ho, Wo, cols.data());
      T* og = ov.data() + (n * O + g * Og) * P;
      if (bias.defined()) {
        auto bv = bias.data();
        for (std::size_t o = 0; o < Og; ++o) std::fill_n(og + o * P, P, bv[g * Og + o]);
      }
      gemm_nn(wv.data() + g * Og * R, cols.data(), og, Og, R, P);
    }
  }
  if (track(out, x, kernel, bias)) {
    record("conv2d", [out, x, kernel, bias, spec, N, C, H, W, O, G, Cg, Og, Ho, Wo, P,
                      R]() mutable {
      auto go = out.grad();
      std::vector<T> cols2(R * P);
      std::vector<T> dcols(R * P);
      const bool gx_on = x.requires_grad();
      const bool gw_on = kernel.requires_grad();
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t g = 0; g < G; ++g) {
          const T* gog = go.data() + (n * O + g * Og) * P;
          if (gw_on) {
            im2col(x.data().data() + (n * C + g * Cg) * H * W, Cg, H, W, spec, Ho, Wo,
                   cols2.data());
            gemm_nt(gog, cols2.data(), kernel.grad().data() + g * Og * R, Og, P, R);
          }
          if (gx_on) {
            std::fill(dcols.begin(), dcols.end(), T(0));
            gemm_tn(kernel.data().data() + g * Og * R, gog, dcols.data(), Og, R, P);
            col2im_add(dcols.data(), Cg, H, W, spec, Ho, Wo,
                       x.grad().data() + (n * C + g * Cg) * H * W);
          }
        }
      }
      if (bias.defined() && bias.requires_grad()) {
        auto gb = bias.grad();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t o = 0; o < O; ++o)
            for (std::size_t p = 0; p < P; ++p) gb[o] += go[(n * O + o) * P + p];
      }
    });
  }
  finish(out, "conv2d");
  return out;
}

template <typename T>
Tensor<T> unfold(const Tensor<T>& x, const ConvSpec& spec) {
  require_rank(x.shape(), 4, "unfold");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), k = spec.k;
  const std::size_t Ho = spec.out_size(H), Wo = spec.out_size(W);
  Tensor<T> out(Shape{N, C, k * k, Ho, Wo});
  const std::size_t per = C * k * k * Ho * Wo;
  for (std::size_t n = 0; n < N; ++n) {
    im2col(x.data().data() + n * C * H * W, C, H, W, spec, Ho, Wo, out.data().data() + n * per);
  }
  if (track(out, x)) {
    record("unfold", [out, x, spec, N, C, H, W, Ho, Wo, per]() mutable {
      for (std::size_t n = 0; n < N; ++n) {
        col2im_add(out.grad().data() + n * per, C, H, W, spec, Ho, Wo,
                   x.grad().data() + n * C * H * W);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> patch_contract(const Tensor<T>& patches, const Tensor<T>& kernel,
                         const Tensor<T>& bias) {
  require_rank(patches.shape(), 5, "patch_contract patches");
  require_rank(kernel.shape(), 4, "patch_contract kernel");
  const std::size_t N = patches.dim(0), C = patches.dim(1), KK = patches.dim(2);
  const std::size_t Ho = patches.dim(3), Wo = patches.dim(4);
  const std::size_t O = kernel.dim(0);
  if (kernel.dim(1) != C || kernel.dim(2) * kernel.dim(3) != KK) {
    throw ShapeError("patch_contract: kernel " + shape_str(kernel.shape()) +
                     " does not fit patches " + shape_str(patches.shape()));
  }
  if (bias.defined() && bias.numel() != O) {
    throw ShapeError("patch_contract: bias " + shape_str(bias.shape()) + " for " +
                     std::to_string(O) + " outputs");
  }
  const std::size_t P = Ho * Wo, R = C * KK;
  Tensor<T> out(Shape{N, O, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n) {
    T* on = out.data().data() + n * O * P;
    if (bias.defined()) {
      for (std::size_t o = 0; o < O; ++o) std::fill_n(on + o * P, P, bias.data()[o]);
    }
    gemm_nn(kernel.data().data(), patches.data().data() + n * R * P, on, O, R, P);
  }
  if (track(out, patches, kernel, bias)) {
    record("patch_contract", [out, patches, kernel, bias, N, O, P, R]() mutable {
      auto go = out.grad();
      for (std::size_t n = 0; n < N; ++n) {
        const T* gon = go.data() + n * O * P;
        if (kernel.requires_grad()) {
          gemm_nt(gon, patches.data().data() + n * R * P, kernel.grad().data(), O, P, R);
        }
        if (patches.requires_grad()) {
          gemm_tn(kernel.data().data(), gon, patches.grad().data() + n * R * P, O, R, P);
        }
      }
      if (bias.defined() && bias.requires_grad()) {
        auto gb = bias.grad();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t o = 0; o < O; ++o)
            for (std::size_t p = 0; p < P; ++p) gb[o] += go[(n * O + o) * P + p];
      }
    });
  }
  finish(out, "patch_contract");
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, const ConvSpec& spec) {
  require_rank(x.shape(), 4, "maxpool2d");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), k = spec.k;
  const std::size_t Ho = spec.out_size(H), Wo = spec.out_size(W);
  Tensor<T> out(Shape{N, C, Ho, Wo});
  std::vector<std::size_t> argmax(out.numel());
  auto xv = x.data();
  auto ov = out.data();
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const std::size_t base = nc * H * W;
    for (std::size_t p = 0; p < Ho; ++p) {
      for (std::size_t q = 0; q < Wo; ++q, ++o) {
        bool found = false;
        T best = T(0);
        std::size_t best_i = 0;
        for (std::size_t i = 0; i < k; ++i) {
          const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(p * spec.stride + i) -
                                   static_cast<std::ptrdiff_t>(spec.padding);
          if (r < 0 || r >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t j = 0; j < k; ++j) {
            const std::ptrdiff_t c = static_cast<std::ptrdiff_t>(q * spec.stride + j) -
                                     static_cast<std::ptrdiff_t>(spec.padding);
            if (c < 0 || c >= static_cast<std::ptrdiff_t>(W)) continue;
            const std::size_t idx = base + static_cast<std::size_t>(r) * W +
                                    static_cast<std::size_t>(c);
            if (!found || xv[idx] > best) {
              best = xv[idx];
              best_i = idx;
              found = true;
            }
          }
        }
        if (!found) throw ShapeError("maxpool2d: window lies entirely in padding");
        ov[o] = best;
        argmax[o] = best_i;
      }
    }
  }
  if (track(out, x)) {
    record("maxpool2d", [out, x, argmax = std::move(argmax)]() mutable {
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gx[argmax[i]] += go[i];
    });
  }
  finish(out, "maxpool2d");
  return out;
}

template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& x, const ConvSpec& spec) {
  require_rank(x.shape(), 4, "avgpool2d");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  ConvSpec single = spec;
  single.groups = 1;
  const std::size_t Ho = single.out_size(H), Wo = single.out_size(W);
  const std::size_t KK = spec.k * spec.k, P = Ho * Wo;
  // Each output is the mean of its (zero-padded) receptive field column.
  Tensor<T> out(Shape{N, C, Ho, Wo});
  std::vector<T> cols(KK * P);
  const T inv = T(1) / static_cast<T>(KK);
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    im2col(x.data().data() + nc * H * W, 1, H, W, single, Ho, Wo, cols.data());
    T* on = out.data().data() + nc * P;
    for (std::size_t r = 0; r < KK; ++r)
      for (std::size_t p = 0; p < P; ++p) on[p] += cols[r * P + p];
    for (std::size_t p = 0; p < P; ++p) on[p] *= inv;
  }
  if (track(out, x)) {
    record("avgpool2d", [out, x, single, N, C, H, W, Ho, Wo, KK, P, inv]() mutable {
      std::vector<T> dcols(KK * P);
      for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T* gon = out.grad().data() + nc * P;
        for (std::size_t r = 0; r < KK; ++r)
          for (std::size_t p = 0; p < P; ++p) dcols[r * P + p] = gon[p] * inv;
        col2im_add(dcols.data(), 1, H, W, single, Ho, Wo, x.grad().data() + nc * H * W);
      }
    });
  }
  finish(out, "avgpool2d");
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "global_avg_pool");
  const Shape& s = x.shape();
  return reshape(mean_axis(reshape(x, Shape{s[0], s[1], s[2] * s[3]}), 2),
                 Shape{s[0], s[1], 1, 1});
}

template <typename T>
Tensor<T> global_max_pool(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "global_max_pool");
  const Shape& s = x.shape();
  return reshape(max_axis(reshape(x, Shape{s[0], s[1], s[2] * s[3]}), 2),
                 Shape{s[0], s[1], 1, 1});
}

template <typename T>
Tensor<T> max_axis(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit a = axis_split(x.shape(), axis, "max_axis");
  Shape os = x.shape();
  os[axis] = 1;
  Tensor<T> out(os);
  std::vector<std::size_t> argmax(out.numel());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t o = 0; o < a.outer; ++o) {
    for (std::size_t i = 0; i < a.inner; ++i) {
      std::size_t best = o * a.len * a.inner + i;
      for (std::size_t l = 1; l < a.len; ++l) {
        const std::size_t idx = (o * a.len + l) * a.inner + i;
        if (xv[idx] > xv[best]) best = idx;
      }
      ov[o * a.inner + i] = xv[best];
      argmax[o * a.inner + i] = best;
    }
  }
  if (track(out, x)) {
    record("max_axis", [out, x, argmax = std::move(argmax)]() mutable {
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gx[argmax[i]] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit a = axis_split(x.shape(), axis, "mean_axis");
  Shape os = x.shape();
  os[axis] = 1;
  Tensor<T> out(os);
  auto xv = x.data();
  auto ov = out.data();
  const T inv = T(1) / static_cast<T>(a.len);
  for (std::size_t o = 0; o < a.outer; ++o) {
    for (std::size_t l = 0; l < a.len; ++l)
      for (std::size_t i = 0; i < a.inner; ++i)
        ov[o * a.inner + i] += xv[(o * a.len + l) * a.inner + i];
    for (std::size_t i = 0; i < a.inner; ++i) ov[o * a.inner + i] *= inv;
  }
  if (track(out, x)) {
    record("mean_axis", [out, x, a, inv]() mutable {
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t o = 0; o < a.outer; ++o)
        for (std::size_t l = 0; l < a.len; ++l)
          for (std::size_t i = 0; i < a.inner; ++i)
            gx[(o * a.len + l) * a.inner + i] += go[o * a.inner + i] * inv;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_axes(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  Shape os;
  auto map = reduction_map(x.shape(), axes, &os);
  Tensor<T> out(os);
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < map.size(); ++i) ov[map[i]] += xv[i];
  if (track(out, x)) {
    record("sum_axes", [out, x, map = std::move(map)]() mutable {
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < map.size(); ++i) gx[i] += go[map[i]];
    });
  }
  finish(out, "sum_axes");
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  Tensor<T> out(Shape{1});
  T acc = T(0);
  for (T v : x.data()) acc += v;
  out.data()[0] = acc;
  if (track(out, x)) {
    record("sum", [out, x]() mutable {
      const T g = out.grad()[0];
      for (T& v : x.grad()) v += g;
    });
  }
  finish(out, "sum");
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order) {
  const Shape& s = x.shape();
  const std::size_t r = s.size();
  std::vector<bool> seen(r, false);
  if (order.size() != r) throw ShapeError("permute: order length differs from rank");
  for (std::size_t a : order) {
    if (a >= r || seen[a]) throw ShapeError("permute: order is not a permutation");
    seen[a] = true;
  }
  Shape os(r);
  for (std::size_t i = 0; i < r; ++i) os[i] = s[order[i]];
  const auto ost = strides_of(os);
  // Output stride contributed by each input axis.
  std::vector<std::size_t> in_to_out(r);
  for (std::size_t i = 0; i < r; ++i) in_to_out[order[i]] = ost[i];
  std::vector<std::size_t> map(x.numel());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < map.size(); ++flat) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < r; ++d) off += idx[d] * in_to_out[d];
    map[flat] = off;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < s[d]) break;
      idx[d] = 0;
    }
  }
  Tensor<T> out(os);
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < map.size(); ++i) ov[map[i]] = xv[i];
  if (track(out, x)) {
    record("permute", [out, x, map = std::move(map)]() mutable {
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < map.size(); ++i) gx[i] += go[map[i]];
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (track(out, x)) {
    record("reshape", [out, x]() mutable {
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + shape_str(s0));
  Shape os = s0;
  os[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == s0[d];
    if (!ok) {
      throw ShapeError("concat: " + shape_str(s) + " incompatible with " + shape_str(s0) +
                       " along axis " + std::to_string(axis));
    }
    os[axis] += s[axis];
  }
  const AxisSplit a = axis_split(os, axis, "concat");
  Tensor<T> out(os);
  auto ov = out.data();
  std::size_t start = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.dim(axis);
    auto pv = p.data();
    for (std::size_t o = 0; o < a.outer; ++o) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * len * a.inner), len * a.inner,
                  ov.begin() + static_cast<std::ptrdiff_t>((o * a.len + start) * a.inner));
    }
    start += len;
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (Tape::active() && any) {
    out.set_requires_grad(true);
    out.ensure_grad();
    for (auto p : parts)
      if (p.requires_grad()) p.ensure_grad();
    record("concat", [out, parts, axis, a]() mutable {
      auto go = out.grad();
      std::size_t start2 = 0;
      for (auto& p : parts) {
        const std::size_t len = p.dim(axis);
        if (p.requires_grad()) {
          auto gp = p.grad();
          for (std::size_t o = 0; o < a.outer; ++o)
            for (std::size_t i = 0; i < len * a.inner; ++i)
              gp[o * len * a.inner + i] += go[(o * a.len + start2) * a.inner + i];
        }
        start2 += len;
      }
    });
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, const std::vector<std::size_t>& sizes,
                             std::size_t axis) {
  const AxisSplit a = axis_split(x.shape(), axis, "split");
  if (std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) != a.len) {
    throw ShapeError("split: sizes do not sum to extent " + std::to_string(a.len));
  }
  std::vector<Tensor<T>> parts;
  std::size_t start = 0;
  for (std::size_t len : sizes) {
    parts.push_back(slice_axis(x, start, len, axis));
    start += len;
  }
  return parts;
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "upsample_nearest2x");
  const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> out(Shape{x.dim(0), x.dim(1), 2 * H, 2 * W});
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t nc = 0; nc < NC; ++nc)
    for (std::size_t h = 0; h < 2 * H; ++h)
      for (std::size_t w = 0; w < 2 * W; ++w)
        ov[(nc * 2 * H + h) * 2 * W + w] = xv[(nc * H + h / 2) * W + w / 2];
  if (track(out, x)) {
    record("upsample_nearest2x", [out, x, NC, H, W]() mutable {
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t nc = 0; nc < NC; ++nc)
        for (std::size_t h = 0; h < 2 * H; ++h)
          for (std::size_t w = 0; w < 2 * W; ++w)
            gx[(nc * H + h / 2) * W + w / 2] += go[(nc * 2 * H + h) * 2 * W + w];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = stable_sigmoid(xv[i]);
  if (track(out, x)) {
    record("sigmoid", [out, x]() mutable {
      auto go = out.grad();
      auto gx = x.grad();
      auto y = out.data();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * y[i] * (T(1) - y[i]);
    });
  }
  finish(out, "sigmoid");
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
  if (track(out, x)) {
    record("relu", [out, x]() mutable {
      auto go = out.grad();
      auto gx = x.grad();
      auto xv2 = x.data();
      for (std::size_t i = 0; i < go.size(); ++i)
        if (xv2[i] > T(0)) gx[i] += go[i];
    });
  }
  finish(out, "relu");
  return out;
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * stable_sigmoid(xv[i]);
  if (track(out, x)) {
    record("silu", [out, x]() mutable {
      auto go = out.grad();
      auto gx = x.grad();
      auto xv2 = x.data();
      for (std::size_t i = 0; i < go.size(); ++i) {
        const T s = stable_sigmoid(xv2[i]);
        gx[i] += go[i] * s * (T(1) + xv2[i] * (T(1) - s));
      }
    });
  }
  finish(out, "silu");
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinOp::kAdd, "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinOp::kSub, "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinOp::kMul, "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * factor;
  if (track(out, x)) {
    record("scale", [out, x, factor]() mutable {
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * factor;
    });
  }
  finish(out, "scale");
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit a = axis_split(x.shape(), axis, "softmax");
  Tensor<T> out(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t o = 0; o < a.outer; ++o) {
    for (std::size_t i = 0; i < a.inner; ++i) {
      const std::size_t base = o * a.len * a.inner + i;
      T mx = xv[base];
      for (std::size_t l = 1; l < a.len; ++l) mx = std::max(mx, xv[base + l * a.inner]);
      T z = T(0);
      for (std::size_t l = 0; l < a.len; ++l) {
        const T e = std::exp(xv[base + l * a.inner] - mx);
        ov[base + l * a.inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < a.len; ++l) ov[base + l * a.inner] /= z;
    }
  }
  if (track(out, x)) {
    record("softmax", [out, x, a]() mutable {
      auto go = out.grad();
      auto gx = x.grad();
      auto y = out.data();
      for (std::size_t o = 0; o < a.outer; ++o) {
        for (std::size_t i = 0; i < a.inner; ++i) {
          const std::size_t base = o * a.len * a.inner + i;
          T dot = T(0);
          for (std::size_t l = 0; l < a.len; ++l)
            dot += go[base + l * a.inner] * y[base + l * a.inner];
          for (std::size_t l = 0; l < a.len; ++l) {
            const std::size_t j = base + l * a.inner;
            gx[j] += y[j] * (go[j] - dot);
          }
        }
      }
    });
  }
  finish(out, "softmax");
  return out;
}

template <typename T>
Tensor<T> normalize(const Tensor<T>& x, const std::vector<std::size_t>& axes, T eps) {
  Shape gs;
  auto group = reduction_map(x.shape(), axes, &gs);
  const std::size_t G = numel_of(gs);
  const T m = static_cast<T>(x.numel() / G);
  std::vector<T> mu(G, T(0));
  std::vector<T> var(G, T(0));
  auto xv = x.data();
  for (std::size_t i = 0; i < group.size(); ++i) mu[group[i]] += xv[i];
  for (T& v : mu) v /= m;
  for (std::size_t i = 0; i < group.size(); ++i) {
    const T d = xv[i] - mu[group[i]];
    var[group[i]] += d * d;
  }
  std::vector<T> inv_std(G);
  for (std::size_t g = 0; g < G; ++g) inv_std[g] = T(1) / std::sqrt(var[g] / m + eps);
  Tensor<T> out(x.shape());
  auto ov = out.data();
  for (std::size_t i = 0; i < group.size(); ++i) ov[i] = (xv[i] - mu[group[i]]) * inv_std[group[i]];
  if (track(out, x)) {
    record("normalize", [out, x, group = std::move(group), inv_std = std::move(inv_std), G,
                         m]() mutable {
      auto go = out.grad();
      auto gx = x.grad();
      auto y = out.data();
      std::vector<T> mean_g(G, T(0));
      std::vector<T> mean_gy(G, T(0));
      for (std::size_t i = 0; i < group.size(); ++i) {
        mean_g[group[i]] += go[i];
        mean_gy[group[i]] += go[i] * y[i];
      }
      for (std::size_t g = 0; g < G; ++g) {
        mean_g[g] /= m;
        mean_gy[g] /= m;
      }
      for (std::size_t i = 0; i < group.size(); ++i) {
        const std::size_t g = group[i];
        gx[i] += inv_std[g] * (go[i] - mean_g[g] - y[i] * mean_gy[g]);
      }
    });
  }
  finish(out, "normalize");
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     const std::vector<std::size_t>& axes, T eps) {
  return add(mul(normalize(x, axes, eps), gain), bias);
}

// ---------------------------------------------------------------------------

#define RFAT_INSTANTIATE_OPS(T)                                                               \
  template void check_finite<T>(const Tensor<T>&, const char*);                              \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                               const ConvSpec&);                                              \
  template Tensor<T> unfold<T>(const Tensor<T>&, const ConvSpec&);                           \
  template Tensor<T> patch_contract<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> maxpool2d<T>(const Tensor<T>&, const ConvSpec&);                        \
  template Tensor<T> avgpool2d<T>(const Tensor<T>&, const ConvSpec&);                        \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                   \
  template Tensor<T> global_max_pool<T>(const Tensor<T>&);                                   \
  template Tensor<T> max_axis<T>(const Tensor<T>&, std::size_t);                             \
  template Tensor<T> mean_axis<T>(const Tensor<T>&, std::size_t);                            \
  template Tensor<T> sum_axes<T>(const Tensor<T>&, const std::vector<std::size_t>&);         \
  template Tensor<T> sum<T>(const Tensor<T>&);                                               \
  template Tensor<T> mean<T>(const Tensor<T>&);                                              \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<std::size_t>&);          \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                    \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, std::size_t);                  \
  template std::vector<Tensor<T>> split<T>(const Tensor<T>&, const std::vector<std::size_t>&, \
                                           std::size_t);                                      \
  template Tensor<T> upsample_nearest2x<T>(const Tensor<T>&);                                \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                           \
  template Tensor<T> relu<T>(const Tensor<T>&);                                              \
  template Tensor<T> silu<T>(const Tensor<T>&);                                              \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                          \
  template Tensor<T> softmax<T>(const Tensor<T>&, std::size_t);                              \
  template Tensor<T> normalize<T>(const Tensor<T>&, const std::vector<std::size_t>&, T);     \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                   const std::vector<std::size_t>&, T);

RFAT_INSTANTIATE_OPS(float)
RFAT_INSTANTIATE_OPS(double)

}  // namespace rfat
