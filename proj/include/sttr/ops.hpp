#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

#include "sttr/error.hpp"
#include "sttr/rng.hpp"
#include "sttr/tensor.hpp"

namespace sttr {

inline constexpr double kStatsEpsilon = 1e-5;

namespace detail {

// Period of the smaller operand for trailing-dimension broadcasting, or throws.
inline void check_broadcast(const Shape& big, const Shape& small, const char* op) {
  if (small.size() > big.size() ||
      !std::equal(small.rbegin(), small.rend(), big.rbegin())) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(small) + " onto " +
                     shape_str(big));
  }
}

template <typename T, typename Fwd, typename DA, typename DB>
BasicTensor<T> binary_broadcast(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op,
                                Fwd fwd, DA da, DB db) {
  const bool a_big = a.rank() >= b.rank();
  const Shape& big = a_big ? a.shape() : b.shape();
  check_broadcast(big, a_big ? b.shape() : a.shape(), op);
  const std::size_t n = shape_numel(big);
  const std::size_t na = a.numel();
  const std::size_t nb = b.numel();
  std::vector<T> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i % na], bv[i % nb]);
  return make_result<T>(big, std::move(out), {a, b}, op, [na, nb, da, db](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    Node<T>& pb = *self.parents[1];
    if (pa.requires_grad) pa.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T g = self.grad[i];
      const T x = pa.data[i % na];
      const T y = pb.data[i % nb];
      if (pa.requires_grad) pa.grad[i % na] += g * da(x, y);
      if (pb.requires_grad) pb.grad[i % nb] += g * db(x, y);
    }
  });
}

inline std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw IndexError("axis " + std::to_string(axis) + " out of range");
  return static_cast<std::size_t>(a);
}

// (outer, length, inner) decomposition of a shape around one axis.
inline std::array<std::size_t, 3> axis_split(const Shape& shape, std::size_t axis) {
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  return {outer, shape[axis], inner};
}

// Output positions o in [lo, hi) for which o*stride + k - pad lands in [0, extent).
inline std::pair<std::ptrdiff_t, std::ptrdiff_t> valid_range(std::ptrdiff_t extent,
                                                             std::ptrdiff_t out_extent,
                                                             std::ptrdiff_t k, std::ptrdiff_t stride,
                                                             std::ptrdiff_t pad) {
  std::ptrdiff_t lo = 0;
  if (pad - k > 0) lo = (pad - k + stride - 1) / stride;
  const std::ptrdiff_t last = extent - 1 + pad - k;
  std::ptrdiff_t hi = last < 0 ? 0 : last / stride + 1;
  hi = std::min(hi, out_extent);
  return {lo, std::max(lo, hi)};
}

}  // namespace detail

inline std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                                    std::size_t padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

// ---------------------------------------------------------------- elementwise

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary_broadcast(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T{1}; },
      [](T, T) { return T{1}; });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary_broadcast(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T{1}; },
      [](T, T) { return T{-1}; });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary_broadcast(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
BasicTensor<T> scalar_mul(const BasicTensor<T>& a, T s) {
  std::vector<T> out(a.values());
  for (auto& v : out) v *= s;
  return make_result<T>(a.shape(), std::move(out), {a}, "scalar_mul", [s](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * s;
  });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  std::vector<T> out(x.values());
  for (auto& v : out) v = v > T{0} ? v : T{0};
  return make_result<T>(x.shape(), std::move(out), {x}, "relu", [](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    // relu'(0) = 0
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (p.data[i] > T{0}) p.grad[i] += self.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x[i];
    if (v >= T{0}) {
      out[i] = T{1} / (T{1} + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out[i] = e / (T{1} + e);
    }
  }
  return make_result<T>(x.shape(), std::move(out), {x}, "sigmoid", [](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T y = self.data[i];
      p.grad[i] += self.grad[i] * y * (T{1} - y);
    }
  });
}

/// Inverted dropout; identity when rate is 0.
template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  auto mask = std::make_shared<std::vector<T>>(x.numel());
  const T keep = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& m : *mask) m = rng.uniform() < rate ? T{0} : keep;
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * (*mask)[i];
  return make_result<T>(x.shape(), std::move(out), {x}, "dropout", [mask](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * (*mask)[i];
  });
}

// ---------------------------------------------------------------- reductions

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double total = 0.0;
  for (T v : x.values()) total += v;
  return make_result<T>(Shape{1}, {static_cast<T>(total)}, {x}, "sum", [](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (auto& g : p.grad) g += self.grad[0];
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  double total = 0.0;
  for (T v : x.values()) total += v;
  const T n = static_cast<T>(x.numel());
  return make_result<T>(Shape{1}, {static_cast<T>(total / x.numel())}, {x}, "mean", [n](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    const T g = self.grad[0] / n;
    for (auto& v : p.grad) v += g;
  });
}

/// Euclidean norm of all entries. The subgradient at the origin is taken as 0.
template <typename T>
BasicTensor<T> l2_norm(const BasicTensor<T>& x) {
  T sq{0};
  for (T v : x.values()) sq += v * v;
  const T norm = std::sqrt(sq);
  return make_result<T>(Shape{1}, {norm}, {x}, "l2_norm", [](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    const T n = self.data[0];
    if (n <= T{0}) return;
    const T g = self.grad[0] / n;
    for (std::size_t i = 0; i < p.data.size(); ++i) p.grad[i] += g * p.data[i];
  });
}

// ---------------------------------------------------------------- shape ops

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  return make_result<T>(std::move(shape), x.values(), {x}, "reshape", [](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("transpose expects a matrix, got " + shape_str(x.shape()));
  const std::size_t m = x.dim(0);
  const std::size_t n = x.dim(1);
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return make_result<T>(Shape{n, m}, std::move(out), {x}, "transpose",
                        [m, n](detail::Node<T>& self) {
                          auto& p = *self.parents[0];
                          p.ensure_grad();
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j)
                              p.grad[i * n + j] += self.grad[j * m + i];
                        });
}

/// Columns [begin, end) of a matrix.
template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::size_t begin, std::size_t end) {
  if (x.rank() != 2 || begin >= end || end > x.dim(1)) {
    throw ShapeError("slice_cols [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.dim(0);
  const std::size_t cols = x.dim(1);
  const std::size_t w = end - begin;
  std::vector<T> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.values().begin() + r * cols + begin, w, out.begin() + r * w);
  return make_result<T>(Shape{rows, w}, std::move(out), {x}, "slice_cols",
                        [rows, cols, w, begin](detail::Node<T>& self) {
                          auto& p = *self.parents[0];
                          p.ensure_grad();
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t c = 0; c < w; ++c)
                              p.grad[r * cols + begin + c] += self.grad[r * w + c];
                        });
}

template <typename T>
BasicTensor<T> concat_cols(const std::vector<BasicTensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const std::size_t rows = parts[0].dim(0);
  std::vector<std::size_t> offsets;
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != rows) {
      throw ShapeError("concat_cols row mismatch: " + shape_str(p.shape()));
    }
    offsets.push_back(cols);
    cols += p.dim(1);
  }
  std::vector<T> out(rows * cols);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t w = parts[k].dim(1);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(parts[k].values().begin() + r * w, w, out.begin() + r * cols + offsets[k]);
  }
  return make_result<T>(Shape{rows, cols}, std::move(out), parts, "concat_cols",
                        [rows, cols, offsets](detail::Node<T>& self) {
                          for (std::size_t k = 0; k < self.parents.size(); ++k) {
                            auto& p = *self.parents[k];
                            if (!p.requires_grad) continue;
                            p.ensure_grad();
                            const std::size_t w = p.shape[1];
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t c = 0; c < w; ++c)
                                p.grad[r * w + c] += self.grad[r * cols + offsets[k] + c];
                          }
                        });
}

// ---------------------------------------------------------------- linear algebra

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0);
  const std::size_t k = a.dim(1);
  const std::size_t n = b.dim(1);
  std::vector<T> out(m * n, T{0});
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T s = av[i * k + p];
      const T* brow = bv + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
    }
  }
  return make_result<T>(Shape{m, n}, std::move(out), {a, b}, "matmul",
                        [m, k, n](detail::Node<T>& self) {
                          auto& pa = *self.parents[0];
                          auto& pb = *self.parents[1];
                          const T* g = self.grad.data();
                          if (pa.requires_grad) {
                            pa.ensure_grad();
                            // dA = G B^T
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t p = 0; p < k; ++p) {
                                T acc{0};
                                const T* brow = pb.data.data() + p * n;
                                const T* grow = g + i * n;
                                for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                                pa.grad[i * k + p] += acc;
                              }
                          }
                          if (pb.requires_grad) {
                            pb.ensure_grad();
                            // dB = A^T G
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t p = 0; p < k; ++p) {
                                const T s = pa.data[i * k + p];
                                T* brow = pb.grad.data() + p * n;
                                const T* grow = g + i * n;
                                for (std::size_t j = 0; j < n; ++j) brow[j] += s * grow[j];
                              }
                          }
                        });
}

/// Max-subtracted softmax along one axis.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, int axis) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  const auto [outer, len, inner] = detail::axis_split(x.shape(), ax);
  std::vector<T> out(x.numel());
  const auto& in = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t q = 0; q < inner; ++q) {
      const std::size_t base = o * len * inner + q;
      T mx = in[base];
      for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, in[base + i * inner]);
      T total{0};
      for (std::size_t i = 0; i < len; ++i) {
        const T e = std::exp(in[base + i * inner] - mx);
        out[base + i * inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < len; ++i) out[base + i * inner] /= total;
    }
  return make_result<T>(x.shape(), std::move(out), {x}, "softmax",
                        [outer, len, inner](detail::Node<T>& self) {
                          auto& p = *self.parents[0];
                          p.ensure_grad();
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t q = 0; q < inner; ++q) {
                              const std::size_t base = o * len * inner + q;
                              T dot{0};
                              for (std::size_t i = 0; i < len; ++i) {
                                const std::size_t j = base + i * inner;
                                dot += self.grad[j] * self.data[j];
                              }
                              for (std::size_t i = 0; i < len; ++i) {
                                const std::size_t j = base + i * inner;
                                p.grad[j] += self.data[j] * (self.grad[j] - dot);
                              }
                            }
                        });
}

/// Normalizes each slice along `axis` to zero mean and unit (population)
/// variance, then applies the optional per-position gain and offset.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, int axis, const BasicTensor<T>& gain,
                          const BasicTensor<T>& offset) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  const auto [outer, len, inner] = detail::axis_split(x.shape(), ax);
  if ((gain.defined() && gain.numel() != len) || (offset.defined() && offset.numel() != len)) {
    throw ShapeError("layer_norm gain/offset must have " + std::to_string(len) + " entries");
  }
  const std::size_t slices = outer * inner;
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(slices);
  std::vector<T> out(x.numel());
  const auto& in = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t q = 0; q < inner; ++q) {
      const std::size_t base = o * len * inner + q;
      T mu{0};
      for (std::size_t i = 0; i < len; ++i) mu += in[base + i * inner];
      mu /= static_cast<T>(len);
      T var{0};
      for (std::size_t i = 0; i < len; ++i) {
        const T c = in[base + i * inner] - mu;
        var += c * c;
      }
      var /= static_cast<T>(len);
      const T inv = T{1} / std::sqrt(var + static_cast<T>(kStatsEpsilon));
      (*inv_std)[o * inner + q] = inv;
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t j = base + i * inner;
        const T h = (in[j] - mu) * inv;
        (*xhat)[j] = h;
        T y = h;
        if (gain.defined()) y *= gain[i];
        if (offset.defined()) y += offset[i];
        out[j] = y;
      }
    }
  const bool has_gain = gain.defined();
  const bool has_offset = offset.defined();
  std::initializer_list<BasicTensor<T>> parents = {x, gain, offset};
  return make_result<T>(
      x.shape(), std::move(out), parents, "layer_norm",
      [outer, len, inner, xhat, inv_std, has_gain, has_offset](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        detail::Node<T>* pg = has_gain ? self.parents[1].get() : nullptr;
        detail::Node<T>* po = has_offset ? self.parents[2].get() : nullptr;
        if (pg && pg->requires_grad) pg->ensure_grad();
        if (po && po->requires_grad) po->ensure_grad();
        if (px.requires_grad) px.ensure_grad();
        std::vector<T> dh(len);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t q = 0; q < inner; ++q) {
            const std::size_t base = o * len * inner + q;
            T mean_dh{0};
            T mean_dh_h{0};
            for (std::size_t i = 0; i < len; ++i) {
              const std::size_t j = base + i * inner;
              const T g = self.grad[j];
              const T h = (*xhat)[j];
              if (pg && pg->requires_grad) pg->grad[i] += g * h;
              if (po && po->requires_grad) po->grad[i] += g;
              dh[i] = pg ? g * pg->data[i] : g;
              mean_dh += dh[i];
              mean_dh_h += dh[i] * h;
            }
            if (!px.requires_grad) continue;
            mean_dh /= static_cast<T>(len);
            mean_dh_h /= static_cast<T>(len);
            const T inv = (*inv_std)[o * inner + q];
            for (std::size_t i = 0; i < len; ++i) {
              const std::size_t j = base + i * inner;
              px.grad[j] += inv * (dh[i] - mean_dh - (*xhat)[j] * mean_dh_h);
            }
          }
      });
}

// ---------------------------------------------------------------- convolution

/// 2D cross-correlation over NCHW input with OIHW weights and zero padding.
/// `bias` may be an undefined tensor.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, std::size_t stride, std::size_t padding) {
  if (input.rank() != 4 || weight.rank() != 4) {
    throw ShapeError("conv2d expects NCHW input and OIHW weight, got " + shape_str(input.shape()) +
                     " and " + shape_str(weight.shape()));
  }
  const std::size_t n_batch = input.dim(0);
  const std::size_t in_c = input.dim(1);
  const std::size_t in_h = input.dim(2);
  const std::size_t in_w = input.dim(3);
  const std::size_t out_c = weight.dim(0);
  const std::size_t kh = weight.dim(2);
  const std::size_t kw = weight.dim(3);
  if (weight.dim(1) != in_c) {
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(in_c) +
                     " channels, weight expects " + std::to_string(weight.dim(1)));
  }
  if (bias.defined() && bias.numel() != out_c) {
    throw ShapeError("conv2d bias must have " + std::to_string(out_c) + " entries");
  }
  if (stride == 0) throw ShapeError("conv2d stride must be >= 1");
  if (kh > in_h + 2 * padding || kw > in_w + 2 * padding) {
    throw DimensionError("conv2d kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " exceeds padded input " + shape_str(input.shape()));
  }
  const std::size_t out_h = conv_output_size(in_h, kh, stride, padding);
  const std::size_t out_w = conv_output_size(in_w, kw, stride, padding);

  struct Geometry {
    std::size_t n, c, h, w, o, kh, kw, oh, ow;
    std::ptrdiff_t s, p;
  };
  const Geometry g{n_batch, in_c, in_h, in_w, out_c, kh, kw, out_h, out_w,
                   static_cast<std::ptrdiff_t>(stride), static_cast<std::ptrdiff_t>(padding)};

  // Visits every (output, input, weight) index triple that contributes; `fn`
  // receives row pointers and the valid output-column range.
  auto for_each_tap = [g](auto&& fn) {
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t o = 0; o < g.o; ++o)
        for (std::size_t c = 0; c < g.c; ++c)
          for (std::size_t ky = 0; ky < g.kh; ++ky) {
            const auto [oy_lo, oy_hi] = detail::valid_range(
                static_cast<std::ptrdiff_t>(g.h), static_cast<std::ptrdiff_t>(g.oh),
                static_cast<std::ptrdiff_t>(ky), g.s, g.p);
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
              const auto [ox_lo, ox_hi] = detail::valid_range(
                  static_cast<std::ptrdiff_t>(g.w), static_cast<std::ptrdiff_t>(g.ow),
                  static_cast<std::ptrdiff_t>(kx), g.s, g.p);
              const std::size_t w_idx = ((o * g.c + c) * g.kh + ky) * g.kw + kx;
              for (std::ptrdiff_t oy = oy_lo; oy < oy_hi; ++oy) {
                const std::ptrdiff_t iy = oy * g.s + static_cast<std::ptrdiff_t>(ky) - g.p;
                const std::size_t out_row = ((n * g.o + o) * g.oh + static_cast<std::size_t>(oy)) * g.ow;
                const std::size_t in_row = ((n * g.c + c) * g.h + static_cast<std::size_t>(iy)) * g.w;
                const std::ptrdiff_t in_col0 = static_cast<std::ptrdiff_t>(kx) - g.p;
                fn(out_row, in_row, in_col0, w_idx, ox_lo, ox_hi);
              }
            }
          }
  };

  std::vector<T> out(g.n * g.o * g.oh * g.ow, T{0});
  if (bias.defined()) {
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t o = 0; o < g.o; ++o)
        std::fill_n(out.begin() + (n * g.o + o) * g.oh * g.ow, g.oh * g.ow, bias[o]);
  }
  {
    const T* in = input.values().data();
    const T* w = weight.values().data();
    T* dst = out.data();
    for_each_tap([&](std::size_t out_row, std::size_t in_row, std::ptrdiff_t in_col0,
                     std::size_t w_idx, std::ptrdiff_t lo, std::ptrdiff_t hi) {
      const T wv = w[w_idx];
      T* orow = dst + out_row;
      const T* irow = in + in_row;
      if (g.s == 1) {
        const T* src = irow + in_col0;
        for (std::ptrdiff_t ox = lo; ox < hi; ++ox) orow[ox] += wv * src[ox];
      } else {
        for (std::ptrdiff_t ox = lo; ox < hi; ++ox) orow[ox] += wv * irow[ox * g.s + in_col0];
      }
    });
  }

  const bool has_bias = bias.defined();
  return make_result<T>(
      Shape{g.n, g.o, g.oh, g.ow}, std::move(out), {input, weight, bias}, "conv2d",
      [g, for_each_tap, has_bias](detail::Node<T>& self) {
        auto& pin = *self.parents[0];
        auto& pw = *self.parents[1];
        const T* gout = self.grad.data();
        if (has_bias && self.parents[2]->requires_grad) {
          auto& pb = *self.parents[2];
          pb.ensure_grad();
          for (std::size_t n = 0; n < g.n; ++n)
            for (std::size_t o = 0; o < g.o; ++o) {
              const T* src = gout + (n * g.o + o) * g.oh * g.ow;
              T acc{0};
              for (std::size_t i = 0; i < g.oh * g.ow; ++i) acc += src[i];
              pb.grad[o] += acc;
            }
        }
        const bool need_in = pin.requires_grad;
        const bool need_w = pw.requires_grad;
        if (need_in) pin.ensure_grad();
        if (need_w) pw.ensure_grad();
        if (!need_in && !need_w) return;
        const T* in = pin.data.data();
        const T* w = pw.data.data();
        T* gin = need_in ? pin.grad.data() : nullptr;
        T* gw = need_w ? pw.grad.data() : nullptr;
        for_each_tap([&](std::size_t out_row, std::size_t in_row, std::ptrdiff_t in_col0,
                         std::size_t w_idx, std::ptrdiff_t lo, std::ptrdiff_t hi) {
          const T* grow = gout + out_row;
          if (g.s == 1) {
            if (gin) {
              const T wv = w[w_idx];
              T* dst = gin + in_row + in_col0;
              for (std::ptrdiff_t ox = lo; ox < hi; ++ox) dst[ox] += wv * grow[ox];
            }
            if (gw) {
              const T* src = in + in_row + in_col0;
              T acc{0};
              for (std::ptrdiff_t ox = lo; ox < hi; ++ox) acc += src[ox] * grow[ox];
              gw[w_idx] += acc;
            }
          } else {
            if (gin) {
              const T wv = w[w_idx];
              T* dst = gin + in_row;
              for (std::ptrdiff_t ox = lo; ox < hi; ++ox) dst[ox * g.s + in_col0] += wv * grow[ox];
            }
            if (gw) {
              const T* src = in + in_row;
              T acc{0};
              for (std::ptrdiff_t ox = lo; ox < hi; ++ox) acc += src[ox * g.s + in_col0] * grow[ox];
              gw[w_idx] += acc;
            }
          }
        });
      });
}

/// Max pooling; padded positions never win.
template <typename T>
BasicTensor<T> max_pool2d(const BasicTensor<T>& x, std::size_t kernel, std::size_t stride,
                          std::size_t padding) {
  if (x.rank() != 4) throw ShapeError("max_pool2d expects NCHW, got " + shape_str(x.shape()));
  const std::size_t nc = x.dim(0) * x.dim(1);
  const std::size_t h = x.dim(2);
  const std::size_t w = x.dim(3);
  if (kernel > h + 2 * padding || kernel > w + 2 * padding || stride == 0) {
    throw DimensionError("max_pool2d window exceeds input " + shape_str(x.shape()));
  }
  const std::size_t oh = conv_output_size(h, kernel, stride, padding);
  const std::size_t ow = conv_output_size(w, kernel, stride, padding);
  auto argmax = std::make_shared<std::vector<std::size_t>>(nc * oh * ow);
  std::vector<T> out(nc * oh * ow);
  const auto& in = x.values();
  const auto ip = static_cast<std::ptrdiff_t>(padding);
  for (std::size_t c = 0; c < nc; ++c)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_idx = 0;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - ip;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - ip;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            const std::size_t idx = (c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix);
            if (in[idx] > best) {
              best = in[idx];
              best_idx = idx;
            }
          }
        }
        const std::size_t o = (c * oh + oy) * ow + ox;
        out[o] = best;
        (*argmax)[o] = best_idx;
      }
  return make_result<T>(Shape{x.dim(0), x.dim(1), oh, ow}, std::move(out), {x}, "max_pool2d",
                        [argmax](detail::Node<T>& self) {
                          auto& p = *self.parents[0];
                          p.ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                            p.grad[(*argmax)[i]] += self.grad[i];
                        });
}

namespace detail {

struct LerpTap {
  std::size_t i0, i1;
  double frac;
};

// Half-pixel (align_corners = false) source coordinates for a 2x upsample.
inline std::vector<LerpTap> upsample_taps(std::size_t in) {
  std::vector<LerpTap> taps(2 * in);
  for (std::size_t o = 0; o < 2 * in; ++o) {
    const double src = std::max(0.0, (static_cast<double>(o) + 0.5) * 0.5 - 0.5);
    const auto i0 = static_cast<std::size_t>(src);
    const std::size_t i1 = i0 + 1 < in ? i0 + 1 : i0;
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear 2x upsampling with half-pixel centers. Evaluated in lerp form so
/// constant regions stay exactly constant.
template <typename T>
BasicTensor<T> bilinear_upsample2x(const BasicTensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("bilinear_upsample2x expects NCHW, got " + shape_str(x.shape()));
  const std::size_t nc = x.dim(0) * x.dim(1);
  const std::size_t h = x.dim(2);
  const std::size_t w = x.dim(3);
  const auto ty = detail::upsample_taps(h);
  const auto tx = detail::upsample_taps(w);
  std::vector<T> out(nc * 4 * h * w);
  const auto& in = x.values();
  for (std::size_t c = 0; c < nc; ++c) {
    const T* plane = in.data() + c * h * w;
    for (std::size_t oy = 0; oy < 2 * h; ++oy) {
      const T ly = static_cast<T>(ty[oy].frac);
      const T* r0 = plane + ty[oy].i0 * w;
      const T* r1 = plane + ty[oy].i1 * w;
      T* dst = out.data() + (c * 2 * h + oy) * 2 * w;
      for (std::size_t ox = 0; ox < 2 * w; ++ox) {
        const T lx = static_cast<T>(tx[ox].frac);
        const T top = r0[tx[ox].i0] + lx * (r0[tx[ox].i1] - r0[tx[ox].i0]);
        const T bot = r1[tx[ox].i0] + lx * (r1[tx[ox].i1] - r1[tx[ox].i0]);
        dst[ox] = top + ly * (bot - top);
      }
    }
  }
  return make_result<T>(Shape{x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out), {x},
                        "bilinear_upsample2x", [nc, h, w, ty, tx](detail::Node<T>& self) {
                          auto& p = *self.parents[0];
                          p.ensure_grad();
                          for (std::size_t c = 0; c < nc; ++c) {
                            T* plane = p.grad.data() + c * h * w;
                            for (std::size_t oy = 0; oy < 2 * h; ++oy) {
                              const T ly = static_cast<T>(ty[oy].frac);
                              const T* src = self.grad.data() + (c * 2 * h + oy) * 2 * w;
                              for (std::size_t ox = 0; ox < 2 * w; ++ox) {
                                const T lx = static_cast<T>(tx[ox].frac);
                                const T gv = src[ox];
                                plane[ty[oy].i0 * w + tx[ox].i0] += gv * (T{1} - ly) * (T{1} - lx);
                                plane[ty[oy].i0 * w + tx[ox].i1] += gv * (T{1} - ly) * lx;
                                plane[ty[oy].i1 * w + tx[ox].i0] += gv * ly * (T{1} - lx);
                                plane[ty[oy].i1 * w + tx[ox].i1] += gv * ly * lx;
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------- statistics

template <typename T>
struct ChannelStats {
  BasicTensor<T> mean;
  BasicTensor<T> std;
};

/// Per-channel mean and standard deviation over batch and spatial dimensions
/// jointly. Variance is the population variance plus kStatsEpsilon.
template <typename T>
ChannelStats<T> channel_stats(const BasicTensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("channel_stats expects NCHW, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0);
  const std::size_t c = x.dim(1);
  const std::size_t hw = x.dim(2) * x.dim(3);
  const T count = static_cast<T>(n * hw);
  std::vector<T> mu(c, T{0});
  std::vector<T> sd(c, T{0});
  const auto& in = x.values();
  for (std::size_t ch = 0; ch < c; ++ch) {
    // double accumulators keep float stats close to the 64-bit values
    double acc = 0.0;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < hw; ++i) acc += in[(b * c + ch) * hw + i];
    const double m = acc / static_cast<double>(n * hw);
    double var = 0.0;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < hw; ++i) {
        const double d = in[(b * c + ch) * hw + i] - m;
        var += d * d;
      }
    mu[ch] = static_cast<T>(m);
    sd[ch] = static_cast<T>(std::sqrt(var / static_cast<double>(n * hw) + kStatsEpsilon));
  }
  auto mean_t = make_result<T>(Shape{c}, mu, {x}, "channel_mean",
                               [n, c, hw, count](detail::Node<T>& self) {
                                 auto& p = *self.parents[0];
                                 p.ensure_grad();
                                 for (std::size_t b = 0; b < n; ++b)
                                   for (std::size_t ch = 0; ch < c; ++ch) {
                                     const T g = self.grad[ch] / count;
                                     T* dst = p.grad.data() + (b * c + ch) * hw;
                                     for (std::size_t i = 0; i < hw; ++i) dst[i] += g;
                                   }
                               });
  auto std_t = make_result<T>(Shape{c}, std::move(sd), {x}, "channel_std",
                              [n, c, hw, count, mu](detail::Node<T>& self) {
                                auto& p = *self.parents[0];
                                p.ensure_grad();
                                for (std::size_t b = 0; b < n; ++b)
                                  for (std::size_t ch = 0; ch < c; ++ch) {
                                    const T scale = self.grad[ch] / (count * self.data[ch]);
                                    const T* src = p.data.data() + (b * c + ch) * hw;
                                    T* dst = p.grad.data() + (b * c + ch) * hw;
                                    for (std::size_t i = 0; i < hw; ++i)
                                      dst[i] += scale * (src[i] - mu[ch]);
                                  }
                              });
  return {std::move(mean_t), std::move(std_t)};
}

// ---------------------------------------------------------------- patches

/// Sliding-window patch extraction over a [1,C,H,W] map. Row l holds the
/// patch at window (l / windows_w, l % windows_w), laid out channel-major
/// (c, ky, kx).
template <typename T>
BasicTensor<T> unfold2d(const BasicTensor<T>& x, std::size_t kh, std::size_t kw, std::size_t sh,
                        std::size_t sw) {
  if (x.rank() != 4 || x.dim(0) != 1) throw ShapeError("unfold2d expects [1,C,H,W], got " + shape_str(x.shape()));
  const std::size_t c = x.dim(1);
  const std::size_t h = x.dim(2);
  const std::size_t w = x.dim(3);
  if (kh == 0 || kw == 0 || kh > h || kw > w) {
    throw DimensionError("unfold kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " exceeds feature map " + std::to_string(h) + "x" + std::to_string(w));
  }
  if (sh == 0 || sw == 0) throw DimensionError("unfold stride must be >= 1");
  const std::size_t nh = (h - kh) / sh + 1;
  const std::size_t nw = (w - kw) / sw + 1;
  const std::size_t dim = c * kh * kw;
  auto source = std::make_shared<std::vector<std::size_t>>(nh * nw * dim);
  std::vector<T> out(nh * nw * dim);
  for (std::size_t wy = 0; wy < nh; ++wy)
    for (std::size_t wx = 0; wx < nw; ++wx)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t ky = 0; ky < kh; ++ky)
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const std::size_t o = (wy * nw + wx) * dim + (ch * kh + ky) * kw + kx;
            const std::size_t i = (ch * h + wy * sh + ky) * w + wx * sw + kx;
            (*source)[o] = i;
            out[o] = x[i];
          }
  return make_result<T>(Shape{nh * nw, dim}, std::move(out), {x}, "unfold2d",
                        [source](detail::Node<T>& self) {
                          auto& p = *self.parents[0];
                          p.ensure_grad();
                          for (std::size_t o = 0; o < self.grad.size(); ++o)
                            p.grad[(*source)[o]] += self.grad[o];
                        });
}

}  // namespace sttr
