#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <iterator>
#include <optional>
#include <set>
#include <string>

#include <json.hpp>

#include "sttr/checkpoint.hpp"
#include "sttr/error.hpp"
#include "sttr/loss.hpp"
#include "sttr/model.hpp"

namespace sttr {

/// Training-loop knobs.
struct TrainConfig {
  double learning_rate = 1e-3;
  double lambda = 10.0;
  std::size_t steps = 200;
  std::size_t image_size = 64;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0 disables intermediate checkpoints

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be positive");
    if (lambda < 0.0) throw ConfigError("lambda must be non-negative");
    if (image_size == 0 || image_size % 32 != 0) {
      throw ConfigError("train.image_size=" + std::to_string(image_size) + " is not a positive multiple of 32");
    }
  }
};

enum class LossNetSource { random, file };

struct LossConfig {
  LossNetSource source = LossNetSource::random;
  std::string path;                    // weight file when source == file
  StyleLayerMask tap_layers = kAllStyleLayers;
  std::uint64_t loss_seed = 1234;
};

inline constexpr std::array<const char*, 4> kTapNames{"relu1_1", "relu2_1", "relu3_1", "relu4_1"};

struct RunConfig {
  std::string profile = "desk";
  ModelConfig model;
  TrainConfig train;
  LossConfig loss;

  static RunConfig desk() { return {}; }

  static RunConfig paper() {
    RunConfig c;
    c.profile = "paper";
    c.model = ModelConfig::paper();
    c.train.learning_rate = 1e-5;
    c.train.lambda = 10.0;
    c.train.image_size = 512;
    return c;
  }

  static RunConfig named(const std::string& profile) {
    if (profile == "desk") return desk();
    if (profile == "paper") return paper();
    throw ConfigError("unknown profile '" + profile + "' (expected desk or paper)");
  }

  void validate() const {
    model.validate();
    train.validate();
    if (loss.source == LossNetSource::file && loss.path.empty()) {
      throw ConfigError("loss.loss_net path is empty");
    }
  }
};

namespace detail {

using json = nlohmann::json;

inline void reject_unknown(const json& obj, const std::string& section, std::initializer_list<const char*> known) {
  if (!obj.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  const std::set<std::string> allowed(known.begin(), known.end());
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!allowed.count(it.key())) {
      throw ConfigError("unknown config key '" + (section.empty() ? it.key() : section + "." + it.key()) + "'");
    }
  }
}

inline std::size_t get_count(const json& v, const std::string& key) {
  if (!v.is_number_unsigned()) throw ConfigError("config key '" + key + "' must be a non-negative integer");
  return v.get<std::size_t>();
}

inline double get_real(const json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError("config key '" + key + "' must be a number");
  return v.get<double>();
}

inline std::string get_text(const json& v, const std::string& key) {
  if (!v.is_string()) throw ConfigError("config key '" + key + "' must be a string");
  return v.get<std::string>();
}

inline std::array<std::size_t, 2> get_pair(const json& v, const std::string& key) {
  if (v.is_number_unsigned()) {
    const auto n = v.get<std::size_t>();
    return {n, n};
  }
  if (!v.is_array() || v.size() != 2) throw ConfigError("config key '" + key + "' must be an integer or [h, w]");
  return {get_count(v[0], key), get_count(v[1], key)};
}

inline int get_stage(const json& v, const std::string& key) {
  const auto s = get_count(v, key);
  if (s < 1 || s > 4) throw ConfigError("config key '" + key + "' must be in 1..4");
  return static_cast<int>(s);
}

inline StyleLayerMask parse_taps(const json& v) {
  if (!v.is_array() || v.empty()) throw ConfigError("config key 'loss.tap_layers' must be a non-empty array");
  StyleLayerMask mask{false, false, false, false};
  for (const auto& item : v) {
    const auto name = get_text(item, "loss.tap_layers");
    bool found = false;
    for (std::size_t i = 0; i < 4; ++i) {
      if (name == kTapNames[i]) {
        mask[i] = true;
        found = true;
      }
    }
    if (!found) throw ConfigError("unknown loss tap layer '" + name + "'");
  }
  return mask;
}

inline void apply_model(ModelConfig& m, const json& j) {
  reject_unknown(j, "model",
                 {"width_factor", "base_width", "blocks_per_stage", "d", "heads", "encoder_layers",
                  "decoder_layers", "ffn_hidden", "dropout", "content_tap_stage", "style_tap_stage", "tokenizer",
                  "unfold_kernel", "unfold_stride", "seed"});
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const json& v = it.value();
    const std::string key = "model." + k;
    if (k == "width_factor") m.width_factor = get_real(v, key);
    else if (k == "base_width") m.backbone.base_width = get_count(v, key);
    else if (k == "blocks_per_stage") m.backbone.blocks_per_stage = get_count(v, key);
    else if (k == "d") m.transformer.d = get_count(v, key);
    else if (k == "heads") m.transformer.heads = get_count(v, key);
    else if (k == "encoder_layers") m.transformer.encoder_layers = get_count(v, key);
    else if (k == "decoder_layers") m.transformer.decoder_layers = get_count(v, key);
    else if (k == "ffn_hidden") m.transformer.ffn_hidden = get_count(v, key);
    else if (k == "dropout") m.transformer.dropout = get_real(v, key);
    else if (k == "content_tap_stage") m.backbone.content_tap_stage = get_stage(v, key);
    else if (k == "style_tap_stage") m.backbone.style_tap_stage = get_stage(v, key);
    else if (k == "unfold_kernel") m.unfold_kernel = get_pair(v, key);
    else if (k == "unfold_stride") m.unfold_stride = get_pair(v, key);
    else if (k == "seed") m.seed = get_count(v, key);
    else if (k == "tokenizer") {
      const auto t = get_text(v, key);
      if (t == "filter") m.tokenizer = Tokenizer::filter;
      else if (t == "unfold") m.tokenizer = Tokenizer::unfold;
      else throw ConfigError("model.tokenizer must be 'filter' or 'unfold', got '" + t + "'");
    }
  }
}

}  // namespace detail

/// Parses a JSON run configuration. A "profile" key selects the base preset;
/// every other key overrides it. Unknown keys are errors.
inline RunConfig parse_run_config(const std::string& text) {
  using detail::json;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("invalid config JSON: ") + e.what());
  }
  detail::reject_unknown(j, "", {"profile", "model", "train", "loss"});
  RunConfig cfg = j.contains("profile") ? RunConfig::named(detail::get_text(j["profile"], "profile")) : RunConfig{};
  if (j.contains("model")) detail::apply_model(cfg.model, j["model"]);

  std::optional<double> train_lambda, loss_lambda;
  if (j.contains("train")) {
    const json& t = j["train"];
    detail::reject_unknown(t, "train", {"learning_rate", "lambda", "steps", "image_size", "seed", "checkpoint_every"});
    if (t.contains("learning_rate")) cfg.train.learning_rate = detail::get_real(t["learning_rate"], "train.learning_rate");
    if (t.contains("lambda")) train_lambda = detail::get_real(t["lambda"], "train.lambda");
    if (t.contains("steps")) cfg.train.steps = detail::get_count(t["steps"], "train.steps");
    if (t.contains("image_size")) cfg.train.image_size = detail::get_count(t["image_size"], "train.image_size");
    if (t.contains("seed")) cfg.train.seed = detail::get_count(t["seed"], "train.seed");
    if (t.contains("checkpoint_every")) {
      cfg.train.checkpoint_every = detail::get_count(t["checkpoint_every"], "train.checkpoint_every");
    }
  }
  if (j.contains("loss")) {
    const json& l = j["loss"];
    detail::reject_unknown(l, "loss", {"lambda", "loss_net", "tap_layers", "loss_seed"});
    if (l.contains("lambda")) loss_lambda = detail::get_real(l["lambda"], "loss.lambda");
    if (l.contains("loss_net")) {
      const auto src = detail::get_text(l["loss_net"], "loss.loss_net");
      if (src == "random") {
        cfg.loss.source = LossNetSource::random;
      } else {
        cfg.loss.source = LossNetSource::file;
        cfg.loss.path = src;
      }
    }
    if (l.contains("tap_layers")) cfg.loss.tap_layers = detail::parse_taps(l["tap_layers"]);
    if (l.contains("loss_seed")) cfg.loss.loss_seed = detail::get_count(l["loss_seed"], "loss.loss_seed");
  }
  if (train_lambda && loss_lambda && *train_lambda != *loss_lambda) {
    throw ConfigError("train.lambda and loss.lambda disagree");
  }
  if (loss_lambda) cfg.train.lambda = *loss_lambda;
  if (train_lambda) cfg.train.lambda = *train_lambda;
  cfg.validate();
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_run_config(text);
}

/// Fully resolved configuration, suitable for parse_run_config.
inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json taps = nlohmann::json::array();
  for (std::size_t i = 0; i < 4; ++i)
    if (c.loss.tap_layers[i]) taps.push_back(kTapNames[i]);
  const auto& m = c.model;
  return {
      {"profile", c.profile},
      {"model",
       {{"width_factor", m.width_factor},
        {"base_width", m.backbone.base_width},
        {"blocks_per_stage", m.backbone.blocks_per_stage},
        {"d", m.transformer.d},
        {"heads", m.transformer.heads},
        {"encoder_layers", m.transformer.encoder_layers},
        {"decoder_layers", m.transformer.decoder_layers},
        {"ffn_hidden", m.transformer.ffn_width()},
        {"dropout", m.transformer.dropout},
        {"content_tap_stage", m.backbone.content_tap_stage},
        {"style_tap_stage", m.backbone.style_tap_stage},
        {"tokenizer", m.tokenizer == Tokenizer::filter ? "filter" : "unfold"},
        {"unfold_kernel", {m.unfold_kernel[0], m.unfold_kernel[1]}},
        {"unfold_stride", {m.unfold_stride[0], m.unfold_stride[1]}},
        {"seed", m.seed}}},
      {"train",
       {{"learning_rate", c.train.learning_rate},
        {"steps", c.train.steps},
        {"image_size", c.train.image_size},
        {"seed", c.train.seed},
        {"checkpoint_every", c.train.checkpoint_every}}},
      {"loss",
       {{"lambda", c.train.lambda},
        {"loss_net", c.loss.source == LossNetSource::random ? std::string("random") : c.loss.path},
        {"tap_layers", taps},
        {"loss_seed", c.loss.loss_seed}}},
  };
}

/// Loss network for a run: fixed random weights, or weights from a checkpoint file.
template <typename T>
LossNetwork<T> make_loss_network(const RunConfig& cfg) {
  auto net = LossNetwork<T>::random(cfg.model.width_factor, cfg.loss.loss_seed);
  if (cfg.loss.source == LossNetSource::file) apply_checkpoint(net.store(), load_checkpoint(cfg.loss.path));
  return net;
}

}  // namespace sttr
