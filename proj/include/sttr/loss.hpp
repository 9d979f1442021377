#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "sttr/error.hpp"
#include "sttr/nn.hpp"
#include "sttr/ops.hpp"
#include "sttr/rng.hpp"
#include "sttr/tensor.hpp"

namespace sttr {

using StyleLayerMask = std::array<bool, 4>;
inline constexpr StyleLayerMask kAllStyleLayers{true, true, true, true};

/// Frozen VGG-19-shaped feature network truncated at relu4_1. Taps are
/// relu1_1, relu2_1, relu3_1 and relu4_1 (strides 1, 2, 4, 8).
template <typename T>
class LossNetwork {
 public:
  static LossNetwork random(double width_factor, std::uint64_t seed) {
    return LossNetwork(width_factor, seed);
  }

  const ParameterStore<T>& store() const { return store_; }
  ParameterStore<T>& store() { return store_; }

  std::array<std::size_t, 4> tap_channels() const { return tap_channels_; }

  std::array<BasicTensor<T>, 4> features(const BasicTensor<T>& image) const {
    if (image.rank() != 4 || image.dim(1) != 3) {
      throw ShapeError("loss network expects [N,3,H,W], got " + shape_str(image.shape()));
    }
    if (image.dim(2) % 8 != 0 || image.dim(3) % 8 != 0) {
      throw DimensionError("loss network input " + std::to_string(image.dim(2)) + "x" +
                           std::to_string(image.dim(3)) + " is not divisible by 8");
    }
    std::array<BasicTensor<T>, 4> taps;
    auto h = image;
    std::size_t tap = 0;
    for (const auto& layer : layers_) {
      if (layer.pool) {
        h = max_pool2d(h, 2, 2, 0);
        continue;
      }
      h = relu(layer.conv(h));
      if (layer.is_tap) taps[tap++] = h;
    }
    return taps;
  }

 private:
  struct Layer {
    Conv2d<T> conv;
    bool pool = false;
    bool is_tap = false;
  };

  LossNetwork(double width_factor, std::uint64_t seed) : store_(false) {
    auto w = [width_factor](double base) {
      return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(base * width_factor)));
    };
    tap_channels_ = {w(64), w(128), w(256), w(512)};
    struct Spec {
      const char* name;
      int width;  // 0 marks a pool
      bool tap;
    };
    const Spec specs[] = {{"conv1_1", 64, true},  {"conv1_2", 64, false}, {"pool1", 0, false},
                          {"conv2_1", 128, true},  {"conv2_2", 128, false}, {"pool2", 0, false},
                          {"conv3_1", 256, true}, {"conv3_2", 256, false}, {"conv3_3", 256, false},
                          {"conv3_4", 256, false}, {"pool3", 0, false},     {"conv4_1", 512, true}};
    Rng rng(seed);
    std::size_t in = 3;
    for (const auto& s : specs) {
      Layer layer;
      if (s.width == 0) {
        layer.pool = true;
      } else {
        const std::size_t out = w(s.width);
        layer.conv = Conv2d<T>::create(store_, std::string("loss_net.") + s.name, in, out, 3, 1, 1, rng);
        layer.is_tap = s.tap;
        in = out;
      }
      layers_.push_back(layer);
    }
  }

  ParameterStore<T> store_;
  std::vector<Layer> layers_;
  std::array<std::size_t, 4> tap_channels_{};
};

template <typename T>
BasicTensor<T> square_distance_mean(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("feature shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const auto diff = sub(a, b);
  return mean(mul(diff, diff));
}

/// Mean squared distance between relu4_1 features.
template <typename T>
BasicTensor<T> content_loss(const LossNetwork<T>& net, const BasicTensor<T>& content,
                            const BasicTensor<T>& output) {
  if (content.shape() != output.shape()) {
    throw ShapeError("content_loss: image sizes differ: " + shape_str(content.shape()) + " vs " +
                     shape_str(output.shape()));
  }
  BasicTensor<T> target;
  {
    NoGradGuard no_grad;
    target = net.features(content)[3];
  }
  return square_distance_mean(net.features(output)[3], target);
}

/// Detached loss targets for one content/style pair.
template <typename T>
struct LossTargets {
  BasicTensor<T> content_feature;                 // relu4_1 of the content image
  std::array<ChannelStats<T>, 4> style_stats;     // per tap of the style image
};

template <typename T>
LossTargets<T> make_targets(const LossNetwork<T>& net, const BasicTensor<T>& content,
                            const BasicTensor<T>& style) {
  NoGradGuard no_grad;
  LossTargets<T> t;
  t.content_feature = net.features(content)[3];
  const auto taps = net.features(style);
  for (std::size_t i = 0; i < 4; ++i) t.style_stats[i] = channel_stats(taps[i]);
  return t;
}

template <typename T>
struct StyleLoss {
  BasicTensor<T> total;
  std::array<T, 4> per_layer{};
};

template <typename T>
StyleLoss<T> style_loss_from_taps(const std::array<ChannelStats<T>, 4>& target,
                                  const std::array<BasicTensor<T>, 4>& output_taps,
                                  const StyleLayerMask& layers) {
  StyleLoss<T> result;
  for (std::size_t i = 0; i < 4; ++i) {
    if (!layers[i]) continue;
    const auto stats = channel_stats(output_taps[i]);
    const auto term = add(l2_norm(sub(target[i].mean, stats.mean)), l2_norm(sub(target[i].std, stats.std)));
    result.per_layer[i] = term.item();
    result.total = result.total.defined() ? add(result.total, term) : term;
  }
  if (!result.total.defined()) result.total = BasicTensor<T>::scalar(T{0});
  return result;
}

/// Sum over taps of ||mu_s - mu_o||_2 + ||sigma_s - sigma_o||_2. Style and
/// output images may differ in size.
template <typename T>
StyleLoss<T> style_loss(const LossNetwork<T>& net, const BasicTensor<T>& style,
                        const BasicTensor<T>& output, const StyleLayerMask& layers = kAllStyleLayers) {
  std::array<ChannelStats<T>, 4> target;
  {
    NoGradGuard no_grad;
    const auto taps = net.features(style);
    for (std::size_t i = 0; i < 4; ++i) target[i] = channel_stats(taps[i]);
  }
  return style_loss_from_taps(target, net.features(output), layers);
}

template <typename T>
struct LossBreakdown {
  T content{0};
  T style{0};
  T total{0};
  std::array<T, 4> per_layer_style{};
  BasicTensor<T> total_tensor;  // differentiable total
};

/// total = content + lambda * style, from precomputed targets. Runs the loss
/// network once on the output.
template <typename T>
LossBreakdown<T> evaluate_loss(const LossNetwork<T>& net, const LossTargets<T>& targets,
                               const BasicTensor<T>& output, double lambda,
                               const StyleLayerMask& layers = kAllStyleLayers) {
  if (lambda < 0.0) throw ConfigError("lambda must be non-negative");
  const auto taps = net.features(output);
  const auto c = square_distance_mean(taps[3], targets.content_feature);
  const auto s = style_loss_from_taps(targets.style_stats, taps, layers);
  LossBreakdown<T> out;
  out.total_tensor = add(c, scalar_mul(s.total, static_cast<T>(lambda)));
  out.content = c.item();
  out.style = s.total.item();
  out.total = out.total_tensor.item();
  out.per_layer_style = s.per_layer;
  return out;
}

template <typename T>
LossBreakdown<T> total_loss(const LossNetwork<T>& net, const BasicTensor<T>& content,
                            const BasicTensor<T>& style, const BasicTensor<T>& output, double lambda,
                            const StyleLayerMask& layers = kAllStyleLayers) {
  if (content.shape() != output.shape()) {
    throw ShapeError("total_loss: content and output sizes differ");
  }
  return evaluate_loss(net, make_targets(net, content, style), output, lambda, layers);
}

}  // namespace sttr
