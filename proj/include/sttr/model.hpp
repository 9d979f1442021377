#pragma once

#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <string>

#include "sttr/cnn_decoder.hpp"
#include "sttr/error.hpp"
#include "sttr/feature_model.hpp"
#include "sttr/nn.hpp"
#include "sttr/ops.hpp"
#include "sttr/rng.hpp"
#include "sttr/tensor.hpp"
#include "sttr/transformer.hpp"

namespace sttr {

enum class Tokenizer { filter, unfold };

/// Architecture hyperparameters.
///
/// With the filter tokenizer, content tokens are the positions of the content
/// backbone's tap-stage map and style tokens those of the style backbone's.
/// With the unfold tokenizer both backbones stop after stage 1 (stride 4):
/// content tokens are non-overlapping 2x2 windows so the token grid stays at
/// stride 8, and style tokens are `unfold_kernel` windows every `unfold_stride`.
struct ModelConfig {
  BackboneConfig backbone;
  TransformerConfig transformer;
  double width_factor = 0.25;
  Tokenizer tokenizer = Tokenizer::filter;
  std::array<std::size_t, 2> unfold_kernel{4, 4};
  std::array<std::size_t, 2> unfold_stride{2, 2};
  std::uint64_t seed = 0;

  static ModelConfig desk() { return {}; }

  static ModelConfig paper() {
    ModelConfig c;
    c.backbone.base_width = 256;
    c.transformer.d = 256;
    c.width_factor = 1.0;
    return c;
  }

  /// Stride of the content token grid relative to the content image.
  std::size_t content_stride() const {
    return tokenizer == Tokenizer::filter ? stage_stride(backbone.content_tap_stage) : 8;
  }
  std::size_t style_stride() const {
    return tokenizer == Tokenizer::filter ? stage_stride(backbone.style_tap_stage) : 4;
  }

  RbcConfig decoder() const {
    return RbcConfig::scaled(width_factor, static_cast<std::size_t>(std::countr_zero(content_stride())));
  }

  void validate() const {
    backbone.validate();
    transformer.validate();
    if (transformer.d % 4 != 0) throw ConfigError("d must be divisible by 4 for positional encodings");
    if (!(width_factor > 0.0)) throw ConfigError("width_factor must be positive");
    for (std::size_t i = 0; i < 2; ++i)
      if (unfold_kernel[i] == 0 || unfold_stride[i] == 0) throw ConfigError("unfold kernel/stride must be positive");
  }
};

/// Shapes of every stage of the pipeline, computed without running it.
struct ShapeReport {
  Shape content_features;
  Shape style_features;
  Shape content_tokens;
  Shape style_tokens;
  Shape decoded_tokens;
  Shape output;
  std::size_t upsample_count = 0;
};

inline ShapeReport infer_shapes(const ModelConfig& cfg, std::size_t content_h, std::size_t content_w,
                                std::size_t style_h, std::size_t style_w) {
  cfg.validate();
  ShapeReport r;
  const std::size_t d = cfg.transformer.d;
  std::size_t ch = 0, cw = 0, sh = 0, sw = 0;
  if (cfg.tokenizer == Tokenizer::filter) {
    r.content_features = Backbone<float>::infer_shape(cfg.backbone, cfg.backbone.content_tap_stage,
                                                      {1, 3, content_h, content_w});
    r.style_features = Backbone<float>::infer_shape(cfg.backbone, cfg.backbone.style_tap_stage,
                                                    {1, 3, style_h, style_w});
    ch = r.content_features[2];
    cw = r.content_features[3];
    sh = r.style_features[2];
    sw = r.style_features[3];
  } else {
    r.content_features = Backbone<float>::infer_shape(cfg.backbone, 1, {1, 3, content_h, content_w});
    r.style_features = Backbone<float>::infer_shape(cfg.backbone, 1, {1, 3, style_h, style_w});
    ch = (r.content_features[2] - 2) / 2 + 1;
    cw = (r.content_features[3] - 2) / 2 + 1;
    sh = token_count(std::array<std::size_t, 1>{r.style_features[2]}, std::array<std::size_t, 1>{cfg.unfold_kernel[0]},
                     std::array<std::size_t, 1>{cfg.unfold_stride[0]});
    sw = token_count(std::array<std::size_t, 1>{r.style_features[3]}, std::array<std::size_t, 1>{cfg.unfold_kernel[1]},
                     std::array<std::size_t, 1>{cfg.unfold_stride[1]});
  }
  r.content_tokens = {ch * cw, d};
  r.style_tokens = {sh * sw, d};
  r.decoded_tokens = r.content_tokens;
  const auto rbc = cfg.decoder();
  r.output = CnnDecoder<float>::infer_shape(rbc, ch, cw);
  r.upsample_count = rbc.upsample_count();
  return r;
}

/// Intermediate results of one forward pass.
template <typename T>
struct ForwardResult {
  BasicTensor<T> output;
  TokenSequence<T> content_tokens;
  TokenSequence<T> style_tokens;
  TokenSequence<T> style_codes;
  TokenSequence<T> decoded;
};

/// The full content/style -> stylized-image network.
template <typename T>
class StyleTransferModel {
 public:
  explicit StyleTransferModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const std::size_t d = cfg.transformer.d;
    const bool filter = cfg.tokenizer == Tokenizer::filter;
    content_backbone_ = Backbone<T>(store_, "content_backbone", cfg.backbone,
                                    filter ? cfg.backbone.content_tap_stage : 1, rng);
    style_backbone_ = Backbone<T>(store_, "style_backbone", cfg.backbone,
                                  filter ? cfg.backbone.style_tap_stage : 1, rng);
    if (filter) {
      content_proj_ = TokenProjection<T>::create(store_, "content_proj", content_backbone_.out_channels(), d, rng);
      style_proj_ = TokenProjection<T>::create(store_, "style_proj", style_backbone_.out_channels(), d, rng);
    } else {
      const std::size_t c1 = cfg.backbone.stage_channels()[0];
      content_unfold_proj_ = Linear<T>::create(store_, "content_unfold_proj", c1 * 4, d, rng);
      style_unfold_proj_ = Linear<T>::create(
          store_, "style_unfold_proj", c1 * cfg.unfold_kernel[0] * cfg.unfold_kernel[1], d, rng);
    }
    encoder_ = TransformerEncoder<T>(store_, "encoder", cfg.transformer, rng);
    decoder_ = TransformerDecoder<T>(store_, "decoder", cfg.transformer, rng);
    cnn_ = CnnDecoder<T>(store_, "cnn_decoder", d, cfg.decoder(), rng);
  }

  StyleTransferModel(const StyleTransferModel&) = delete;
  StyleTransferModel& operator=(const StyleTransferModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<T>& parameters() { return store_; }
  const ParameterStore<T>& parameters() const { return store_; }

  const Backbone<T>& content_backbone() const { return content_backbone_; }
  const Backbone<T>& style_backbone() const { return style_backbone_; }
  const TransformerEncoder<T>& encoder() const { return encoder_; }
  const TransformerDecoder<T>& decoder() const { return decoder_; }
  const CnnDecoder<T>& cnn_decoder() const { return cnn_; }

  void check_content(const Shape& s) const { check_multiple(s, cfg_.content_stride(), "content"); }
  void check_style(const Shape& s) const {
    check_multiple(s, cfg_.tokenizer == Tokenizer::filter ? cfg_.style_stride() : 4, "style");
  }

  TokenSequence<T> content_tokens(const BasicTensor<T>& content) const {
    check_content(content.shape());
    if (cfg_.tokenizer == Tokenizer::filter) return content_proj_(content_backbone_(content));
    auto seq = unfold_tokenize(content_backbone_(content), {2, 2}, {2, 2});
    return {content_unfold_proj_(seq.tokens), seq.grid_h, seq.grid_w};
  }

  TokenSequence<T> style_tokens(const BasicTensor<T>& style) const {
    check_style(style.shape());
    if (cfg_.tokenizer == Tokenizer::filter) return style_proj_(style_backbone_(style));
    auto seq = unfold_tokenize(style_backbone_(style), cfg_.unfold_kernel, cfg_.unfold_stride);
    return {style_unfold_proj_(seq.tokens), seq.grid_h, seq.grid_w};
  }

  ForwardResult<T> forward(const BasicTensor<T>& content, const BasicTensor<T>& style,
                           AttentionRecorder<T>* recorder = nullptr,
                           const DropoutContext& drop = {}) const {
    ForwardResult<T> r;
    r.content_tokens = content_tokens(content);
    r.style_tokens = style_tokens(style);
    const std::size_t d = cfg_.transformer.d;
    const auto pos_c = positional_encoding<T>(r.content_tokens.grid_h, r.content_tokens.grid_w, d);
    const auto pos_s = positional_encoding<T>(r.style_tokens.grid_h, r.style_tokens.grid_w, d);
    if (recorder) {
      recorder->content_grid_h = r.content_tokens.grid_h;
      recorder->content_grid_w = r.content_tokens.grid_w;
      recorder->style_grid_h = r.style_tokens.grid_h;
      recorder->style_grid_w = r.style_tokens.grid_w;
    }
    r.style_codes = encoder_(r.style_tokens, pos_s, recorder, drop);
    r.decoded = decoder_(r.content_tokens, r.style_codes, pos_c, pos_s, recorder, drop);
    r.output = cnn_(r.decoded);
    return r;
  }

  /// Inference without graph recording.
  BasicTensor<T> stylize(const BasicTensor<T>& content, const BasicTensor<T>& style,
                         AttentionRecorder<T>* recorder = nullptr) const {
    NoGradGuard no_grad;
    return forward(content, style, recorder).output;
  }

 private:
  static void check_multiple(const Shape& s, std::size_t m, const char* what) {
    if (s.size() != 4 || s[0] != 1 || s[1] != 3) {
      throw ShapeError(std::string(what) + " image must be [1,3,H,W], got " + shape_str(s));
    }
    if (s[2] == 0 || s[3] == 0 || s[2] % m != 0 || s[3] % m != 0) {
      throw DimensionError(std::string(what) + " image " + std::to_string(s[2]) + "x" +
                           std::to_string(s[3]) + " is not divisible by " + std::to_string(m));
    }
  }

  ModelConfig cfg_;
  ParameterStore<T> store_;
  Backbone<T> content_backbone_;
  Backbone<T> style_backbone_;
  TokenProjection<T> content_proj_;
  TokenProjection<T> style_proj_;
  Linear<T> content_unfold_proj_;
  Linear<T> style_unfold_proj_;
  TransformerEncoder<T> encoder_;
  TransformerDecoder<T> decoder_;
  CnnDecoder<T> cnn_;
};

}  // namespace sttr
