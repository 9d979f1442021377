#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "sttr/error.hpp"
#include "sttr/ops.hpp"
#include "sttr/rng.hpp"
#include "sttr/tensor.hpp"

namespace sttr {

template <typename T>
struct NamedTensor {
  std::string name;
  BasicTensor<T> tensor;
};

/// Ordered registry of named parameters. Layers keep handles into it, so
/// loading values through the store updates the layers in place.
template <typename T>
class ParameterStore {
 public:
  explicit ParameterStore(bool trainable = true) : trainable_(trainable) {}

  BasicTensor<T> add(std::string name, Shape shape, std::vector<T> values) {
    if (find(name).defined()) throw ConfigError("duplicate parameter name " + name);
    BasicTensor<T> t(std::move(shape), std::move(values));
    t.set_requires_grad(trainable_);
    entries_.push_back({std::move(name), t});
    return t;
  }

  BasicTensor<T> add_zeros(std::string name, Shape shape) {
    const std::size_t n = shape_numel(shape);
    return add(std::move(name), std::move(shape), std::vector<T>(n, T{0}));
  }

  BasicTensor<T> add_constant(std::string name, Shape shape, T value) {
    const std::size_t n = shape_numel(shape);
    return add(std::move(name), std::move(shape), std::vector<T>(n, value));
  }

  BasicTensor<T> add_uniform(std::string name, Shape shape, double bound, Rng& rng) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return add(std::move(name), std::move(shape), std::move(v));
  }

  BasicTensor<T> find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return e.tensor;
    return {};
  }

  const std::vector<NamedTensor<T>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool trainable() const { return trainable_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.drop_grad();
  }

  /// Copies values from a store with the same layout, converting the scalar type.
  template <typename U>
  void copy_values_from(const ParameterStore<U>& other) {
    if (other.size() != size()) throw ShapeError("parameter stores differ in size");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& src = other.entries()[i];
      auto& dst = entries_[i];
      if (src.name != dst.name || src.tensor.shape() != dst.tensor.shape()) {
        throw ShapeError("parameter layout mismatch at " + dst.name);
      }
      auto out = dst.tensor.data();
      for (std::size_t j = 0; j < out.size(); ++j) out[j] = static_cast<T>(src.tensor[j]);
    }
  }

 private:
  bool trainable_;
  std::vector<NamedTensor<T>> entries_;
};

/// He-uniform bound for a ReLU layer with the given fan-in.
inline double he_bound(std::size_t fan_in) { return std::sqrt(6.0 / static_cast<double>(fan_in)); }

inline double xavier_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

template <typename T>
struct Conv2d {
  BasicTensor<T> weight;  // [out, in, k, k]
  BasicTensor<T> bias;    // [out], may be undefined
  std::size_t stride = 1;
  std::size_t padding = 0;

  static Conv2d create(ParameterStore<T>& store, const std::string& name, std::size_t in,
                       std::size_t out, std::size_t kernel, std::size_t stride,
                       std::size_t padding, Rng& rng, bool with_bias = true,
                       double gain = 1.0) {
    Conv2d c;
    c.weight = store.add_uniform(name + ".weight", {out, in, kernel, kernel},
                                 gain * he_bound(in * kernel * kernel), rng);
    if (with_bias) c.bias = store.add_zeros(name + ".bias", {out});
    c.stride = stride;
    c.padding = padding;
    return c;
  }

  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t kernel() const { return weight.dim(2); }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const {
    return conv2d(x, weight, bias, stride, padding);
  }

  Shape output_shape(const Shape& in) const {
    return {in[0], out_channels(), conv_output_size(in[2], kernel(), stride, padding),
            conv_output_size(in[3], kernel(), stride, padding)};
  }
};

/// Row-vector affine map: y = x W + b with W stored [in, out].
template <typename T>
struct Linear {
  BasicTensor<T> weight;
  BasicTensor<T> bias;

  static Linear create(ParameterStore<T>& store, const std::string& name, std::size_t in,
                       std::size_t out, Rng& rng, bool relu_gain = false) {
    Linear l;
    const double bound = relu_gain ? he_bound(in) : xavier_bound(in, out);
    l.weight = store.add_uniform(name + ".weight", {in, out}, bound, rng);
    l.bias = store.add_zeros(name + ".bias", {out});
    return l;
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return add(matmul(x, weight), bias); }
};

template <typename T>
struct LayerNorm {
  BasicTensor<T> gain;
  BasicTensor<T> offset;

  static LayerNorm create(ParameterStore<T>& store, const std::string& name, std::size_t width) {
    return {store.add_constant(name + ".gain", {width}, T{1}),
            store.add_zeros(name + ".offset", {width})};
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return layer_norm(x, -1, gain, offset); }
};

}  // namespace sttr
