#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "sttr/error.hpp"
#include "sttr/feature_model.hpp"
#include "sttr/nn.hpp"
#include "sttr/ops.hpp"
#include "sttr/tensor.hpp"

namespace sttr {

struct RbcStage {
  std::size_t out_channels = 0;
  bool upsample = false;
};

struct RbcConfig {
  std::vector<RbcStage> stages;

  /// RBC256-RBC128-RBC64-RBC3 with the widths scaled; the last stage keeps 3
  /// channels and skips the upsample so the stack grows the grid by exactly 8.
  /// Other upsample counts (for shallower or deeper content taps) extend or
  /// truncate the 256-128-64 ladder, repeating 64.
  static RbcConfig scaled(double width_factor, std::size_t upsamples = 3) {
    auto w = [width_factor](double base) {
      return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(base * width_factor)));
    };
    const double ladder[] = {256, 128, 64};
    RbcConfig cfg;
    for (std::size_t i = 0; i < upsamples; ++i) cfg.stages.push_back({w(ladder[std::min<std::size_t>(i, 2)]), true});
    cfg.stages.push_back({3, false});
    return cfg;
  }

  std::size_t upsample_count() const {
    return static_cast<std::size_t>(std::count_if(stages.begin(), stages.end(),
                                                  [](const RbcStage& s) { return s.upsample; }));
  }

  void validate() const {
    if (stages.empty()) throw ConfigError("RBC decoder needs at least one stage");
    if (upsample_count() == 0) throw ConfigError("RBC decoder must upsample at least once");
    if (stages.back().out_channels != 3) throw ConfigError("RBC decoder must end with 3 channels");
  }
};

/// Residual block -> optional bilinear x2 -> 3x3 convolution.
///
/// The residual block maps C -> out channels with an identity shortcut when
/// C == out and a 1x1 projection otherwise. The closing 3x3 convolution is
/// applied as a residual refinement, so a block whose convolutions are all
/// zero passes its (upsampled) input through unchanged.
template <typename T>
struct RbcBlock {
  Conv2d<T> conv_a;
  Conv2d<T> conv_b;
  Conv2d<T> shortcut;  // undefined weight for identity
  Conv2d<T> conv_out;
  bool projected = false;
  bool upsample = false;

  static RbcBlock create(ParameterStore<T>& store, const std::string& name, std::size_t in,
                         std::size_t out, bool upsample, Rng& rng, double shortcut_gain = std::sqrt(0.5)) {
    RbcBlock b;
    b.conv_a = Conv2d<T>::create(store, name + ".res.conv_a", in, out, 3, 1, 1, rng);
    b.conv_b = Conv2d<T>::create(store, name + ".res.conv_b", out, out, 3, 1, 1, rng, true, 0.1);
    b.projected = in != out;
    if (b.projected) b.shortcut = Conv2d<T>::create(store, name + ".res.shortcut", in, out, 1, 1, 0, rng, false, shortcut_gain);
    b.conv_out = Conv2d<T>::create(store, name + ".conv", out, out, 3, 1, 1, rng, true, 0.1);
    b.upsample = upsample;
    return b;
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const {
    auto branch = conv_b(relu(conv_a(x)));
    auto r = add(branch, projected ? shortcut(x) : x);
    if (upsample) r = bilinear_upsample2x(r);
    return add(r, conv_out(relu(r)));
  }
};

template <typename T>
BasicTensor<T> rbc_block(const RbcBlock<T>& block, const BasicTensor<T>& x) {
  return block(x);
}

/// Maps decoded tokens back to an image 8x the token grid.
template <typename T>
class CnnDecoder {
 public:
  CnnDecoder() = default;
  CnnDecoder(ParameterStore<T>& store, const std::string& name, std::size_t in_channels,
             const RbcConfig& cfg, Rng& rng)
      : cfg_(cfg) {
    cfg.validate();
    std::size_t in = in_channels;
    for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
      // the last stage starts near zero so the initial image sits mid-range of the sigmoid
      const bool last = i + 1 == cfg.stages.size();
      blocks_.push_back(RbcBlock<T>::create(store, name + ".rbc" + std::to_string(i), in,
                                            cfg.stages[i].out_channels, cfg.stages[i].upsample, rng,
                                            last ? 0.1 : std::sqrt(0.5)));
      in = cfg.stages[i].out_channels;
    }
  }

  const RbcConfig& config() const { return cfg_; }
  const std::vector<RbcBlock<T>>& blocks() const { return blocks_; }

  /// Output image in (0,1) via a final sigmoid.
  BasicTensor<T> operator()(const TokenSequence<T>& decoded) const {
    auto x = unflatten_tokens(decoded);
    for (const auto& b : blocks_) x = b(x);
    return sigmoid(x);
  }

  static Shape infer_shape(const RbcConfig& cfg, std::size_t grid_h, std::size_t grid_w) {
    std::size_t h = grid_h;
    std::size_t w = grid_w;
    for (const auto& s : cfg.stages) {
      if (s.upsample) {
        h *= 2;
        w *= 2;
      }
    }
    return {1, cfg.stages.back().out_channels, h, w};
  }

 private:
  RbcConfig cfg_;
  std::vector<RbcBlock<T>> blocks_;
};

template <typename T>
BasicTensor<T> reconstruct(const CnnDecoder<T>& decoder, const TokenSequence<T>& decoded) {
  return decoder(decoded);
}

}  // namespace sttr
