#pragma once

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sttr/adam.hpp"
#include "sttr/checkpoint.hpp"
#include "sttr/config.hpp"
#include "sttr/error.hpp"
#include "sttr/image.hpp"
#include "sttr/loss.hpp"
#include "sttr/model.hpp"
#include "sttr/rng.hpp"

namespace sttr {

/// One line of the training log.
struct TrainRecord {
  std::size_t step = 0;
  double content = 0.0;
  double style = 0.0;
  double total = 0.0;
  double ms = 0.0;
  std::size_t content_index = 0;
  std::size_t style_index = 0;
};

inline std::string to_jsonl(const TrainRecord& r) {
  return nlohmann::json{{"step", r.step}, {"content", r.content}, {"style", r.style}, {"total", r.total}, {"ms", r.ms}}
      .dump();
}

/// Regular files in a directory, sorted by name; hidden files are skipped.
inline std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) throw ImageError(ImageError::Kind::io, "not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    if (entry.path().filename().string().starts_with(".")) continue;
    files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

/// Decodes every file in `dir` and center-crops it for training.
inline std::vector<ImageBuffer> load_training_images(const std::filesystem::path& dir, std::size_t image_size) {
  const auto files = list_images(dir);
  if (files.empty()) throw Error("no images in " + dir.string());
  std::vector<ImageBuffer> images;
  for (const auto& f : files) images.push_back(crop_to_multiple(decode_image(f), 32, image_size));
  return images;
}

/// Training loop over in-memory images. Each step samples a pair, scores the
/// output with the frozen loss network and applies one Adam update.
class Trainer {
 public:
  Trainer(const RunConfig& cfg, std::vector<ImageBuffer> contents, std::vector<ImageBuffer> styles)
      : cfg_(cfg),
        model_(std::make_unique<StyleTransferModel<float>>(cfg.model)),
        loss_net_(make_loss_network<float>(cfg)),
        adam_(model_->parameters()),
        pair_rng_(cfg.train.seed),
        dropout_rng_(cfg.train.seed ^ 0x5deece66dULL) {
    cfg.validate();
    if (contents.empty()) throw Error("no content images");
    if (styles.empty()) throw Error("no style images");
    for (auto& img : contents) contents_.push_back(to_tensor(img));
    for (auto& img : styles) styles_.push_back(to_tensor(img));
    for (const auto& c : contents_) model_->check_content(c.shape());
    for (const auto& s : styles_) model_->check_style(s.shape());
  }

  const RunConfig& config() const { return cfg_; }
  StyleTransferModel<float>& model() { return *model_; }
  const StyleTransferModel<float>& model() const { return *model_; }
  const LossNetwork<float>& loss_network() const { return loss_net_; }
  std::size_t steps_done() const { return adam_.step; }

  /// Loss of the current weights on a given pair, without updating anything.
  LossBreakdown<float> evaluate(std::size_t content_index, std::size_t style_index) {
    NoGradGuard no_grad;
    const auto out = model_->forward(contents_.at(content_index), styles_.at(style_index)).output;
    return evaluate_loss(loss_net_, targets(content_index, style_index), out, cfg_.train.lambda, cfg_.loss.tap_layers);
  }

  TrainRecord step() {
    const auto start = std::chrono::steady_clock::now();
    TrainRecord rec;
    rec.content_index = pair_rng_.index(contents_.size());
    rec.style_index = pair_rng_.index(styles_.size());
    const double rate = cfg_.model.transformer.dropout;
    const DropoutContext drop{rate, rate > 0.0 ? &dropout_rng_ : nullptr};
    const auto out = model_->forward(contents_[rec.content_index], styles_[rec.style_index], nullptr, drop).output;
    const auto loss = evaluate_loss(loss_net_, targets(rec.content_index, rec.style_index), out, cfg_.train.lambda,
                                    cfg_.loss.tap_layers);
    backward(loss.total_tensor);
    adam_step(model_->parameters(), adam_, cfg_.train.learning_rate);
    rec.step = adam_.step;
    rec.content = loss.content;
    rec.style = loss.style;
    rec.total = loss.total;
    rec.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return rec;
  }

 private:
  LossTargets<float> targets(std::size_t ci, std::size_t si) {
    auto c = content_targets_.find(ci);
    if (c == content_targets_.end()) {
      NoGradGuard no_grad;
      c = content_targets_.emplace(ci, loss_net_.features(contents_[ci])[3]).first;
    }
    auto s = style_targets_.find(si);
    if (s == style_targets_.end()) {
      NoGradGuard no_grad;
      const auto taps = loss_net_.features(styles_[si]);
      std::array<ChannelStats<float>, 4> stats;
      for (std::size_t i = 0; i < 4; ++i) stats[i] = channel_stats(taps[i]);
      s = style_targets_.emplace(si, stats).first;
    }
    return {c->second, s->second};
  }

  RunConfig cfg_;
  std::unique_ptr<StyleTransferModel<float>> model_;
  LossNetwork<float> loss_net_;
  AdamState<float> adam_;
  Rng pair_rng_;
  Rng dropout_rng_;
  std::vector<Tensor> contents_;
  std::vector<Tensor> styles_;
  std::map<std::size_t, Tensor> content_targets_;
  std::map<std::size_t, std::array<ChannelStats<float>, 4>> style_targets_;
};

struct TrainOutcome {
  std::vector<TrainRecord> log;
  std::vector<NamedTensor<float>> weights;
};

/// Intermediate checkpoint path for a step: "<out>.step<N>".
inline std::filesystem::path checkpoint_path_for_step(const std::filesystem::path& out, std::size_t step) {
  return out.string() + ".step" + std::to_string(step);
}

/// Trains on the images in two directories. Writes one JSON line per step to
/// `log` (when given) and, when `checkpoint_out` is set, the final weights
/// plus any scheduled intermediate checkpoints.
inline TrainOutcome train(const std::filesystem::path& content_dir, const std::filesystem::path& style_dir,
                          const RunConfig& cfg, std::ostream* log = nullptr,
                          const std::filesystem::path& checkpoint_out = {}) {
  cfg.validate();
  Trainer trainer(cfg, load_training_images(content_dir, cfg.train.image_size),
                  load_training_images(style_dir, cfg.train.image_size));
  TrainOutcome outcome;
  for (std::size_t i = 0; i < cfg.train.steps; ++i) {
    const auto rec = trainer.step();
    outcome.log.push_back(rec);
    if (log) *log << to_jsonl(rec) << '\n' << std::flush;
    const std::size_t every = cfg.train.checkpoint_every;
    if (!checkpoint_out.empty() && every && rec.step % every == 0 && rec.step != cfg.train.steps) {
      save_checkpoint(checkpoint_path_for_step(checkpoint_out, rec.step), trainer.model().parameters());
    }
  }
  outcome.weights = trainer.model().parameters().entries();
  if (!checkpoint_out.empty()) save_checkpoint(checkpoint_out, outcome.weights);
  return outcome;
}

}  // namespace sttr
