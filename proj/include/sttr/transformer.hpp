#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "sttr/error.hpp"
#include "sttr/feature_model.hpp"
#include "sttr/nn.hpp"
#include "sttr/ops.hpp"
#include "sttr/rng.hpp"
#include "sttr/tensor.hpp"

namespace sttr {

struct TransformerConfig {
  std::size_t d = 64;
  std::size_t heads = 8;
  std::size_t encoder_layers = 6;
  std::size_t decoder_layers = 6;
  std::size_t ffn_hidden = 0;  // 0 selects 4*d
  double dropout = 0.0;

  std::size_t ffn_width() const { return ffn_hidden ? ffn_hidden : 4 * d; }
  std::size_t head_width() const { return d / heads; }

  void validate() const {
    if (d == 0 || heads == 0) throw ConfigError("transformer d and heads must be positive");
    if (d % heads != 0) {
      throw ConfigError("transformer d=" + std::to_string(d) + " is not divisible by heads=" +
                        std::to_string(heads));
    }
    if (encoder_layers == 0 || decoder_layers == 0) {
      throw ConfigError("transformer needs at least one encoder and one decoder layer");
    }
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
  }
};

template <typename T>
struct AttentionResult {
  BasicTensor<T> output;   // [Lq, dh]
  BasicTensor<T> weights;  // [Lq, Lk], rows sum to 1
};

/// softmax(Q K^T / sqrt(dh)) V for one head.
template <typename T>
AttentionResult<T> attention_with_weights(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                          const BasicTensor<T>& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) ||
      k.dim(0) != v.dim(0) || q.dim(1) == 0) {
    throw ShapeError("attention: incompatible Q " + shape_str(q.shape()) + ", K " +
                     shape_str(k.shape()) + ", V " + shape_str(v.shape()));
  }
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(q.dim(1))));
  auto weights = softmax(scalar_mul(matmul(q, transpose(k)), scale), 1);
  return {matmul(weights, v), weights};
}

template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v) {
  return attention_with_weights(q, k, v).output;
}

/// Post-softmax weights of one attention call, stored per head.
template <typename T>
struct AttentionCapture {
  std::size_t query_len = 0;
  std::size_t key_len = 0;
  std::vector<std::vector<T>> per_head;  // each [query_len * key_len]

  std::vector<T> head_average() const {
    std::vector<T> avg(query_len * key_len, T{0});
    for (const auto& h : per_head)
      for (std::size_t i = 0; i < avg.size(); ++i) avg[i] += h[i];
    for (auto& a : avg) a /= static_cast<T>(per_head.size());
    return avg;
  }
};

enum class AttentionModule { encoder, decoder, decoder_self };

/// Per-invocation buffer filled by a forward pass when supplied.
template <typename T>
struct AttentionRecorder {
  std::vector<AttentionCapture<T>> encoder_self;
  std::vector<AttentionCapture<T>> decoder_self;
  std::vector<AttentionCapture<T>> decoder_cross;
  std::size_t content_grid_h = 0, content_grid_w = 0;
  std::size_t style_grid_h = 0, style_grid_w = 0;
};

template <typename T>
struct AttentionMap {
  std::vector<T> weights;  // one query row over the keys
  std::size_t key_grid_h = 0;
  std::size_t key_grid_w = 0;
  int layer_index = 0;
  int head_index = -1;  // -1: head average
};

/// Attention row of one query token. `module` selects the encoder
/// self-attention, the decoder cross-attention, or the decoder self-attention.
template <typename T>
AttentionMap<T> capture_attention(const AttentionRecorder<T>& recorder, AttentionModule module,
                                  std::size_t layer, std::size_t query_index, int head = -1) {
  const auto& layers = module == AttentionModule::encoder   ? recorder.encoder_self
                       : module == AttentionModule::decoder ? recorder.decoder_cross
                                                            : recorder.decoder_self;
  if (layer >= layers.size()) {
    throw IndexError("attention layer " + std::to_string(layer) + " out of range (have " +
                     std::to_string(layers.size()) + ")");
  }
  const auto& cap = layers[layer];
  if (query_index >= cap.query_len) {
    throw IndexError("query index " + std::to_string(query_index) + " out of range (have " +
                     std::to_string(cap.query_len) + " queries)");
  }
  if (head >= static_cast<int>(cap.per_head.size())) {
    throw IndexError("head " + std::to_string(head) + " out of range");
  }
  const std::vector<T> full = head < 0 ? cap.head_average() : cap.per_head[static_cast<std::size_t>(head)];
  AttentionMap<T> map;
  map.weights.assign(full.begin() + static_cast<std::ptrdiff_t>(query_index * cap.key_len),
                     full.begin() + static_cast<std::ptrdiff_t>((query_index + 1) * cap.key_len));
  if (module == AttentionModule::decoder_self) {
    map.key_grid_h = recorder.content_grid_h;
    map.key_grid_w = recorder.content_grid_w;
  } else {
    map.key_grid_h = recorder.style_grid_h;
    map.key_grid_w = recorder.style_grid_w;
  }
  map.layer_index = static_cast<int>(layer);
  map.head_index = head;
  return map;
}

template <typename T>
struct MultiHeadAttention {
  Linear<T> wq, wk, wv, wo;
  std::size_t heads = 1;

  static MultiHeadAttention create(ParameterStore<T>& store, const std::string& name,
                                   std::size_t d, std::size_t heads, Rng& rng) {
    MultiHeadAttention m;
    m.wq = Linear<T>::create(store, name + ".query", d, d, rng);
    m.wk = Linear<T>::create(store, name + ".key", d, d, rng);
    m.wv = Linear<T>::create(store, name + ".value", d, d, rng);
    m.wo = Linear<T>::create(store, name + ".out", d, d, rng);
    m.heads = heads;
    return m;
  }

  BasicTensor<T> operator()(const BasicTensor<T>& query_in, const BasicTensor<T>& key_in,
                            const BasicTensor<T>& value_in, AttentionCapture<T>* capture) const {
    const std::size_t d = wq.weight.dim(1);
    if (query_in.dim(1) != d || key_in.dim(1) != d || value_in.dim(1) != d) {
      throw ShapeError("multi-head attention expects width " + std::to_string(d));
    }
    const auto q = wq(query_in);
    const auto k = wk(key_in);
    const auto v = wv(value_in);
    const std::size_t dh = d / heads;
    if (capture) {
      capture->query_len = query_in.dim(0);
      capture->key_len = key_in.dim(0);
      capture->per_head.clear();
    }
    std::vector<BasicTensor<T>> outs;
    for (std::size_t h = 0; h < heads; ++h) {
      auto r = attention_with_weights(slice_cols(q, h * dh, (h + 1) * dh),
                                      slice_cols(k, h * dh, (h + 1) * dh),
                                      slice_cols(v, h * dh, (h + 1) * dh));
      if (capture) capture->per_head.push_back(r.weights.values());
      outs.push_back(r.output);
    }
    return wo(heads == 1 ? outs[0] : concat_cols(outs));
  }
};

template <typename T>
struct FeedForward {
  Linear<T> hidden;
  Linear<T> out;

  static FeedForward create(ParameterStore<T>& store, const std::string& name, std::size_t d,
                            std::size_t width, Rng& rng) {
    return {Linear<T>::create(store, name + ".hidden", d, width, rng, true),
            Linear<T>::create(store, name + ".out", width, d, rng)};
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return out(relu(hidden(x))); }
};

/// Dropout source for training; a null rng means evaluation mode.
struct DropoutContext {
  double rate = 0.0;
  Rng* rng = nullptr;

  template <typename T>
  BasicTensor<T> apply(const BasicTensor<T>& x) const {
    return rng ? dropout(x, rate, *rng) : x;
  }
};

template <typename T>
struct EncoderLayer {
  MultiHeadAttention<T> self_attn;
  LayerNorm<T> norm1;
  FeedForward<T> ffn;
  LayerNorm<T> norm2;

  static EncoderLayer create(ParameterStore<T>& store, const std::string& name,
                             const TransformerConfig& cfg, Rng& rng) {
    EncoderLayer l;
    l.self_attn = MultiHeadAttention<T>::create(store, name + ".self_attn", cfg.d, cfg.heads, rng);
    l.norm1 = LayerNorm<T>::create(store, name + ".norm1", cfg.d);
    l.ffn = FeedForward<T>::create(store, name + ".ffn", cfg.d, cfg.ffn_width(), rng);
    l.norm2 = LayerNorm<T>::create(store, name + ".norm2", cfg.d);
    return l;
  }

  // Post-norm; positions go into queries and keys, never values.
  BasicTensor<T> operator()(const BasicTensor<T>& x, const BasicTensor<T>& pos,
                            AttentionCapture<T>* capture, const DropoutContext& drop) const {
    const auto qk = add(x, pos);
    auto h = norm1(add(x, drop.apply(self_attn(qk, qk, x, capture))));
    return norm2(add(h, drop.apply(ffn(h))));
  }
};

template <typename T>
struct DecoderLayer {
  MultiHeadAttention<T> self_attn;
  LayerNorm<T> norm1;
  MultiHeadAttention<T> cross_attn;
  LayerNorm<T> norm2;
  FeedForward<T> ffn;
  LayerNorm<T> norm3;

  static DecoderLayer create(ParameterStore<T>& store, const std::string& name,
                             const TransformerConfig& cfg, Rng& rng) {
    DecoderLayer l;
    l.self_attn = MultiHeadAttention<T>::create(store, name + ".self_attn", cfg.d, cfg.heads, rng);
    l.norm1 = LayerNorm<T>::create(store, name + ".norm1", cfg.d);
    l.cross_attn = MultiHeadAttention<T>::create(store, name + ".cross_attn", cfg.d, cfg.heads, rng);
    l.norm2 = LayerNorm<T>::create(store, name + ".norm2", cfg.d);
    l.ffn = FeedForward<T>::create(store, name + ".ffn", cfg.d, cfg.ffn_width(), rng);
    l.norm3 = LayerNorm<T>::create(store, name + ".norm3", cfg.d);
    return l;
  }

  BasicTensor<T> operator()(const BasicTensor<T>& content, const BasicTensor<T>& codes,
                            const BasicTensor<T>& pos_c, const BasicTensor<T>& pos_s,
                            AttentionCapture<T>* self_capture, AttentionCapture<T>* cross_capture,
                            const DropoutContext& drop) const {
    const auto qk = add(content, pos_c);
    auto t = norm1(add(content, drop.apply(self_attn(qk, qk, content, self_capture))));
    const auto cross = cross_attn(add(t, pos_c), add(codes, pos_s), codes, cross_capture);
    t = norm2(add(t, drop.apply(cross)));
    return norm3(add(t, drop.apply(ffn(t))));
  }
};

/// Self-attention stack over the style tokens.
template <typename T>
class TransformerEncoder {
 public:
  TransformerEncoder() = default;
  TransformerEncoder(ParameterStore<T>& store, const std::string& name,
                     const TransformerConfig& cfg, Rng& rng)
      : cfg_(cfg) {
    cfg.validate();
    for (std::size_t i = 0; i < cfg.encoder_layers; ++i)
      layers_.push_back(EncoderLayer<T>::create(store, name + ".layer" + std::to_string(i), cfg, rng));
  }

  const std::vector<EncoderLayer<T>>& layers() const { return layers_; }

  TokenSequence<T> operator()(const TokenSequence<T>& style, const BasicTensor<T>& pos,
                              AttentionRecorder<T>* recorder = nullptr,
                              const DropoutContext& drop = {}) const {
    if (pos.shape() != style.tokens.shape()) {
      throw ShapeError("encoder: positional encoding " + shape_str(pos.shape()) +
                       " does not match tokens " + shape_str(style.tokens.shape()));
    }
    if (style.width() != cfg_.d) throw ShapeError("encoder: token width must be d");
    if (recorder) recorder->encoder_self.assign(layers_.size(), {});
    auto x = style.tokens;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      x = layers_[i](x, pos, recorder ? &recorder->encoder_self[i] : nullptr, drop);
    return {x, style.grid_h, style.grid_w};
  }

 private:
  TransformerConfig cfg_;
  std::vector<EncoderLayer<T>> layers_;
};

/// Content self-attention + content-to-style cross-attention stack.
template <typename T>
class TransformerDecoder {
 public:
  TransformerDecoder() = default;
  TransformerDecoder(ParameterStore<T>& store, const std::string& name,
                     const TransformerConfig& cfg, Rng& rng)
      : cfg_(cfg) {
    cfg.validate();
    for (std::size_t i = 0; i < cfg.decoder_layers; ++i)
      layers_.push_back(DecoderLayer<T>::create(store, name + ".layer" + std::to_string(i), cfg, rng));
  }

  const std::vector<DecoderLayer<T>>& layers() const { return layers_; }

  TokenSequence<T> operator()(const TokenSequence<T>& content, const TokenSequence<T>& codes,
                              const BasicTensor<T>& pos_c, const BasicTensor<T>& pos_s,
                              AttentionRecorder<T>* recorder = nullptr,
                              const DropoutContext& drop = {}) const {
    if (content.width() != cfg_.d || codes.width() != cfg_.d) {
      throw ShapeError("decoder: content width " + std::to_string(content.width()) +
                       " and style width " + std::to_string(codes.width()) + " must both be d=" +
                       std::to_string(cfg_.d));
    }
    if (pos_c.shape() != content.tokens.shape() || pos_s.shape() != codes.tokens.shape()) {
      throw ShapeError("decoder: positional encodings do not match token shapes");
    }
    if (recorder) {
      recorder->decoder_self.assign(layers_.size(), {});
      recorder->decoder_cross.assign(layers_.size(), {});
    }
    auto t = content.tokens;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      t = layers_[i](t, codes.tokens, pos_c, pos_s,
                     recorder ? &recorder->decoder_self[i] : nullptr,
                     recorder ? &recorder->decoder_cross[i] : nullptr, drop);
    }
    return {t, content.grid_h, content.grid_w};
  }

 private:
  TransformerConfig cfg_;
  std::vector<DecoderLayer<T>> layers_;
};

template <typename T>
TokenSequence<T> encode_style(const TransformerEncoder<T>& encoder, const TokenSequence<T>& style,
                              const BasicTensor<T>& pos) {
  return encoder(style, pos);
}

template <typename T>
TokenSequence<T> decode(const TransformerDecoder<T>& decoder, const TokenSequence<T>& content,
                        const TokenSequence<T>& codes, const BasicTensor<T>& pos_c,
                        const BasicTensor<T>& pos_s) {
  return decoder(content, codes, pos_c, pos_s);
}

}  // namespace sttr
