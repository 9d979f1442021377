#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "sttr/error.hpp"
#include "sttr/nn.hpp"
#include "sttr/ops.hpp"
#include "sttr/tensor.hpp"

namespace sttr {

struct BackboneConfig {
  std::size_t base_width = 32;
  std::size_t blocks_per_stage = 1;
  int content_tap_stage = 2;
  int style_tap_stage = 4;

  /// Stage output widths in the fixed 1:2:4:8 ratio.
  std::array<std::size_t, 4> stage_channels() const {
    return {base_width, 2 * base_width, 4 * base_width, 8 * base_width};
  }
  std::size_t stem_channels() const { return std::max<std::size_t>(1, base_width / 4); }

  void validate() const {
    if (base_width == 0) throw ConfigError("backbone base_width must be positive");
    if (blocks_per_stage == 0) throw ConfigError("backbone blocks_per_stage must be positive");
    for (int tap : {content_tap_stage, style_tap_stage})
      if (tap < 1 || tap > 4) throw ConfigError("backbone tap stage must be in 1..4");
  }
};

/// Spatial stride of a stage's output relative to the input image: 4, 8, 16, 32.
inline std::size_t stage_stride(int stage) { return std::size_t{4} << (stage - 1); }

template <typename T>
struct TokenSequence {
  BasicTensor<T> tokens;  // [L, d]
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;

  std::size_t length() const { return tokens.dim(0); }
  std::size_t width() const { return tokens.dim(1); }
};

/// ResNet-style bottleneck: 1x1 reduce, 3x3 (strided), 1x1 expand, plus an
/// identity or 1x1 projection shortcut.
template <typename T>
struct Bottleneck {
  Conv2d<T> reduce;
  Conv2d<T> spatial;
  Conv2d<T> expand;
  Conv2d<T> shortcut;  // weight undefined for identity
  bool projected = false;

  static Bottleneck create(ParameterStore<T>& store, const std::string& name, std::size_t in,
                           std::size_t out, std::size_t stride, Rng& rng) {
    const std::size_t mid = std::max<std::size_t>(1, out / 4);
    Bottleneck b;
    b.reduce = Conv2d<T>::create(store, name + ".reduce", in, mid, 1, 1, 0, rng);
    b.spatial = Conv2d<T>::create(store, name + ".spatial", mid, mid, 3, stride, 1, rng);
    b.expand = Conv2d<T>::create(store, name + ".expand", mid, out, 1, 1, 0, rng, true, 0.5);
    b.projected = in != out || stride != 1;
    if (b.projected) {
      b.shortcut = Conv2d<T>::create(store, name + ".shortcut", in, out, 1, stride, 0, rng, false);
    }
    return b;
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const {
    auto h = relu(reduce(x));
    h = relu(spatial(h));
    h = expand(h);
    return relu(add(h, projected ? shortcut(x) : x));
  }
};

/// Residual feature extractor truncated after `tap_stage`.
template <typename T>
class Backbone {
 public:
  Backbone() = default;

  Backbone(ParameterStore<T>& store, const std::string& name, const BackboneConfig& cfg,
           int tap_stage, Rng& rng)
      : cfg_(cfg), tap_stage_(tap_stage) {
    cfg.validate();
    if (tap_stage < 1 || tap_stage > 4) throw ConfigError("tap stage must be in 1..4");
    const auto widths = cfg.stage_channels();
    stem_ = Conv2d<T>::create(store, name + ".stem", 3, cfg.stem_channels(), 7, 2, 3, rng);
    std::size_t in = cfg.stem_channels();
    for (int s = 1; s <= tap_stage; ++s) {
      std::vector<Bottleneck<T>> blocks;
      for (std::size_t b = 0; b < cfg.blocks_per_stage; ++b) {
        const std::size_t stride = (s > 1 && b == 0) ? 2 : 1;
        blocks.push_back(Bottleneck<T>::create(
            store, name + ".stage" + std::to_string(s) + ".block" + std::to_string(b), in,
            widths[s - 1], stride, rng));
        in = widths[s - 1];
      }
      stages_.push_back(std::move(blocks));
    }
  }

  int tap_stage() const { return tap_stage_; }
  std::size_t stride() const { return stage_stride(tap_stage_); }
  std::size_t out_channels() const { return cfg_.stage_channels()[tap_stage_ - 1]; }

  BasicTensor<T> operator()(const BasicTensor<T>& image) const {
    check_input(image.shape());
    auto h = relu(stem_(image));
    h = max_pool2d(h, 3, 2, 1);
    for (const auto& stage : stages_)
      for (const auto& block : stage) h = block(h);
    return h;
  }

  void check_input(const Shape& shape) const {
    if (shape.size() != 4 || shape[1] != 3) {
      throw ShapeError("backbone expects a [N,3,H,W] image, got " + shape_str(shape));
    }
    const std::size_t s = stride();
    if (shape[2] % s != 0 || shape[3] % s != 0 || shape[2] == 0 || shape[3] == 0) {
      throw DimensionError("image " + std::to_string(shape[2]) + "x" + std::to_string(shape[3]) +
                           " is not divisible by the backbone stride " + std::to_string(s));
    }
  }

  /// Shape inference without weights; follows the same layer geometry as the
  /// forward pass.
  static Shape infer_shape(const BackboneConfig& cfg, int tap_stage, const Shape& in) {
    std::size_t h = conv_output_size(in[2], 7, 2, 3);
    std::size_t w = conv_output_size(in[3], 7, 2, 3);
    h = conv_output_size(h, 3, 2, 1);
    w = conv_output_size(w, 3, 2, 1);
    for (int s = 2; s <= tap_stage; ++s) {
      h = conv_output_size(h, 3, 2, 1);
      w = conv_output_size(w, 3, 2, 1);
    }
    return {in[0], cfg.stage_channels()[tap_stage - 1], h, w};
  }

 private:
  BackboneConfig cfg_;
  int tap_stage_ = 0;
  Conv2d<T> stem_;
  std::vector<std::vector<Bottleneck<T>>> stages_;
};

/// Content features from the content backbone (stride 8 at the default tap).
template <typename T>
BasicTensor<T> extract_content_features(const Backbone<T>& backbone, const BasicTensor<T>& image) {
  return backbone(image);
}

/// Style features from the style backbone (stride 32 at the default tap).
template <typename T>
BasicTensor<T> extract_style_features(const Backbone<T>& backbone, const BasicTensor<T>& image) {
  return backbone(image);
}

/// [1,C,h,w] -> tokens [h*w, C]; row i is spatial position (i / w, i % w).
template <typename T>
TokenSequence<T> flatten_tokens(const BasicTensor<T>& features) {
  if (features.rank() != 4 || features.dim(0) != 1) {
    throw ShapeError("flatten_tokens expects [1,C,h,w], got " + shape_str(features.shape()));
  }
  const std::size_t c = features.dim(1);
  const std::size_t h = features.dim(2);
  const std::size_t w = features.dim(3);
  return {transpose(reshape(features, {c, h * w})), h, w};
}

/// Inverse of flatten_tokens.
template <typename T>
BasicTensor<T> unflatten_tokens(const TokenSequence<T>& seq) {
  if (seq.grid_h * seq.grid_w != seq.length()) {
    throw ShapeError("token grid " + std::to_string(seq.grid_h) + "x" + std::to_string(seq.grid_w) +
                     " does not match " + std::to_string(seq.length()) + " tokens");
  }
  return reshape(transpose(seq.tokens), {1, seq.width(), seq.grid_h, seq.grid_w});
}

/// 1x1 convolution to the common width d followed by spatial flattening.
template <typename T>
struct TokenProjection {
  Conv2d<T> proj;

  static TokenProjection create(ParameterStore<T>& store, const std::string& name,
                                std::size_t in_channels, std::size_t d, Rng& rng) {
    return {Conv2d<T>::create(store, name, in_channels, d, 1, 1, 0, rng, true, std::sqrt(0.5))};
  }

  std::size_t width() const { return proj.out_channels(); }

  TokenSequence<T> operator()(const BasicTensor<T>& features) const {
    return flatten_tokens(proj(features));
  }
};

template <typename T>
TokenSequence<T> project_and_flatten(const BasicTensor<T>& features, const TokenProjection<T>& projection) {
  return projection(features);
}

/// Number of sliding windows: prod_d floor((spatial[d] - kernel[d]) / stride[d]) + 1.
inline std::size_t token_count(std::span<const std::size_t> spatial,
                               std::span<const std::size_t> kernel,
                               std::span<const std::size_t> stride) {
  if (spatial.size() != kernel.size() || spatial.size() != stride.size()) {
    throw ShapeError("token_count: spatial, kernel and stride ranks differ");
  }
  std::size_t total = 1;
  for (std::size_t d = 0; d < spatial.size(); ++d) {
    if (kernel[d] == 0 || kernel[d] > spatial[d]) {
      throw DimensionError("token_count: kernel exceeds spatial size in dimension " + std::to_string(d));
    }
    if (stride[d] == 0) throw DimensionError("token_count: stride must be >= 1");
    total *= (spatial[d] - kernel[d]) / stride[d] + 1;
  }
  return total;
}

inline std::size_t token_count(std::array<std::size_t, 2> spatial, std::array<std::size_t, 2> kernel,
                               std::array<std::size_t, 2> stride) {
  return token_count(std::span<const std::size_t>(spatial), std::span<const std::size_t>(kernel),
                     std::span<const std::size_t>(stride));
}

/// Unfold-based tokenizer: each sliding window of the feature map becomes one
/// token of width C*kh*kw.
template <typename T>
TokenSequence<T> unfold_tokenize(const BasicTensor<T>& features, std::array<std::size_t, 2> kernel,
                                 std::array<std::size_t, 2> stride) {
  if (features.rank() != 4) throw ShapeError("unfold_tokenize expects [1,C,H,W]");
  if (kernel[0] > features.dim(2) || kernel[1] > features.dim(3)) {
    throw DimensionError("unfold kernel " + std::to_string(kernel[0]) + "x" +
                         std::to_string(kernel[1]) + " exceeds feature map " +
                         std::to_string(features.dim(2)) + "x" + std::to_string(features.dim(3)));
  }
  auto tokens = unfold2d(features, kernel[0], kernel[1], stride[0], stride[1]);
  return {tokens, (features.dim(2) - kernel[0]) / stride[0] + 1,
          (features.dim(3) - kernel[1]) / stride[1] + 1};
}

/// Fixed 2D sinusoidal encoding. The first d/2 channels encode the row, the
/// last d/2 the column, each as interleaved (sin, cos) pairs at geometrically
/// spaced frequencies. Row l corresponds to grid position (l / grid_w, l % grid_w).
template <typename T>
BasicTensor<T> positional_encoding(std::size_t grid_h, std::size_t grid_w, std::size_t d) {
  if (d == 0 || d % 4 != 0) {
    throw ConfigError("positional encoding width " + std::to_string(d) + " is not divisible by 4");
  }
  const std::size_t half = d / 2;
  std::vector<T> out(grid_h * grid_w * d);
  for (std::size_t y = 0; y < grid_h; ++y)
    for (std::size_t x = 0; x < grid_w; ++x) {
      T* row = out.data() + (y * grid_w + x) * d;
      for (std::size_t i = 0; i < half / 2; ++i) {
        const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(half));
        row[2 * i] = static_cast<T>(std::sin(static_cast<double>(y) * freq));
        row[2 * i + 1] = static_cast<T>(std::cos(static_cast<double>(y) * freq));
        row[half + 2 * i] = static_cast<T>(std::sin(static_cast<double>(x) * freq));
        row[half + 2 * i + 1] = static_cast<T>(std::cos(static_cast<double>(x) * freq));
      }
    }
  return BasicTensor<T>({grid_h * grid_w, d}, std::move(out));
}

}  // namespace sttr
