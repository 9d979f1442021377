#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sttr/checkpoint.hpp"
#include "sttr/config.hpp"
#include "sttr/error.hpp"
#include "sttr/image.hpp"
#include "sttr/model.hpp"
#include "sttr/trainer.hpp"
#include "sttr/transformer.hpp"

namespace sttr::app {

enum ExitCode : int { kOk = 0, kInputError = 1, kMismatchError = 2 };

/// Runs a command body and maps exceptions to exit codes: 2 for checkpoint
/// or configuration problems, 1 for everything else.
inline int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << '\n';
    return e.kind() == CheckpointError::Kind::io ? kInputError : kMismatchError;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kMismatchError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kInputError;
  }
}

inline RunConfig resolve_config(const std::string& path) {
  return path.empty() ? RunConfig::desk() : load_run_config(path);
}

inline std::unique_ptr<StyleTransferModel<float>> load_model(const RunConfig& cfg, const std::string& checkpoint) {
  auto model = std::make_unique<StyleTransferModel<float>>(cfg.model);
  if (!checkpoint.empty()) apply_checkpoint(model->parameters(), load_checkpoint(checkpoint));
  return model;
}

/// Decodes an input image and center-crops it to multiples of 32, warning on `err` when it does.
inline ImageBuffer load_input(const std::filesystem::path& path, const char* what, std::ostream& err) {
  const auto img = decode_image(path);
  auto cropped = crop_to_multiple(img, 32);
  if (cropped.width != img.width || cropped.height != img.height) {
    err << "warning: " << what << " image " << path.string() << " " << img.width << "x" << img.height
        << " center-cropped to " << cropped.width << "x" << cropped.height << '\n';
  }
  return cropped;
}

inline ImageBuffer stylize_image(const StyleTransferModel<float>& model, const ImageBuffer& content,
                                 const ImageBuffer& style) {
  return from_tensor(model.stylize(to_tensor(content), to_tensor(style)));
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw Error("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

struct StylizeArgs {
  std::string content;
  std::string style;
  std::string checkpoint;
  std::string out;
  std::string config;
};

inline int stylize(const StylizeArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto cfg = resolve_config(a.config);
    const auto model = load_model(cfg, a.checkpoint);
    const auto content = load_input(a.content, "content", err);
    const auto style = load_input(a.style, "style", err);
    encode_image(stylize_image(*model, content, style), a.out);
    out << "wrote " << a.out << " (" << content.width << "x" << content.height << ")\n";
    return int{kOk};
  });
}

struct VideoArgs {
  std::string frames;
  std::string style;
  std::string checkpoint;
  std::string out_dir;
  std::string report;
  std::string config;
};

/// Per adjacent frame pair: mean absolute difference of the inputs and of the outputs.
struct FramePairDiff {
  std::string first;
  std::string second;
  double input_mad = 0.0;
  double output_mad = 0.0;
};

inline void write_video_report(const std::filesystem::path& path, const std::vector<FramePairDiff>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ImageError(ImageError::Kind::io, "cannot write report " + path.string());
  f << "frame_a,frame_b,input_mad,output_mad\n";
  for (const auto& r : rows) {
    f << r.first << ',' << r.second << ',' << format_real(r.input_mad) << ',' << format_real(r.output_mad) << '\n';
  }
}

inline int video(const VideoArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto cfg = resolve_config(a.config);
    const auto model = load_model(cfg, a.checkpoint);
    const auto files = list_images(a.frames);
    if (files.size() < 2) throw Error("need at least 2 frames in " + a.frames + ", found " + std::to_string(files.size()));
    const auto style = load_input(a.style, "style", err);
    std::filesystem::create_directories(a.out_dir);
    std::vector<FramePairDiff> rows;
    ImageBuffer prev_in, prev_out;
    for (std::size_t i = 0; i < files.size(); ++i) {
      const auto frame = load_input(files[i], "frame", err);
      const auto styled = stylize_image(*model, frame, style);
      const auto name = files[i].stem().string() + ".ppm";
      encode_image(styled, std::filesystem::path(a.out_dir) / name);
      if (i > 0) {
        if (frame.width != prev_in.width || frame.height != prev_in.height) {
          throw ImageError(ImageError::Kind::size, "frame " + files[i].string() + " differs in size from " +
                                                       files[i - 1].string());
        }
        rows.push_back({files[i - 1].filename().string(), files[i].filename().string(),
                        mean_abs_difference(prev_in, frame), mean_abs_difference(prev_out, styled)});
      }
      prev_in = frame;
      prev_out = styled;
    }
    write_video_report(a.report, rows);
    out << "stylized " << files.size() << " frames into " << a.out_dir << "; report " << a.report << '\n';
    return int{kOk};
  });
}

struct AttentionArgs {
  std::string content;
  std::string style;
  std::string checkpoint;
  std::string module = "dec";  // enc: style self-attention, dec: content-to-style cross-attention
  std::size_t layer = 0;
  std::string point;           // "x,y" in the query token grid
  std::string out;
  std::string config;
};

inline std::pair<std::size_t, std::size_t> parse_point(const std::string& s) {
  const auto comma = s.find(',');
  auto parse = [&](std::string_view part) {
    std::size_t v = 0;
    const auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
    if (ec != std::errc() || ptr != part.data() + part.size() || part.empty()) {
      throw Error("bad --point '" + s + "' (expected x,y)");
    }
    return v;
  };
  if (comma == std::string::npos) throw Error("bad --point '" + s + "' (expected x,y)");
  const std::string_view view(s);
  return {parse(view.substr(0, comma)), parse(view.substr(comma + 1))};
}

/// Grayscale rendering of an attention row on its key grid, min-max normalised;
/// a constant row renders white.
inline ImageBuffer render_attention(const std::vector<float>& row, std::size_t grid_h, std::size_t grid_w) {
  const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
  ImageBuffer img(grid_w, grid_h);
  for (std::size_t i = 0; i < row.size(); ++i) {
    const float v = *hi > *lo ? (row[i] - *lo) / (*hi - *lo) : 1.0f;
    for (std::size_t c = 0; c < 3; ++c) img.pixels[i * 3 + c] = v;
  }
  return img;
}

inline std::filesystem::path text_path_for(const std::filesystem::path& image_path) {
  auto p = image_path;
  p.replace_extension(".txt");
  return p;
}

inline int attention_dump(const AttentionArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    AttentionModule module;
    if (a.module == "enc") module = AttentionModule::encoder;
    else if (a.module == "dec") module = AttentionModule::decoder;
    else throw Error("--module must be enc or dec, got '" + a.module + "'");
    const auto [x, y] = parse_point(a.point);
    const auto cfg = resolve_config(a.config);
    const auto model = load_model(cfg, a.checkpoint);
    const auto content = load_input(a.content, "content", err);
    const auto style = load_input(a.style, "style", err);
    AttentionRecorder<float> rec;
    model->stylize(to_tensor(content), to_tensor(style), &rec);
    const std::size_t qh = module == AttentionModule::encoder ? rec.style_grid_h : rec.content_grid_h;
    const std::size_t qw = module == AttentionModule::encoder ? rec.style_grid_w : rec.content_grid_w;
    if (x >= qw || y >= qh) {
      throw IndexError("point (" + std::to_string(x) + "," + std::to_string(y) + ") is outside the " +
                       std::to_string(qw) + "x" + std::to_string(qh) + " query token grid (x < " +
                       std::to_string(qw) + ", y < " + std::to_string(qh) + ")");
    }
    const auto map = capture_attention(rec, module, a.layer, y * qw + x);
    encode_image(render_attention(map.weights, map.key_grid_h, map.key_grid_w), a.out);
    const auto txt = text_path_for(a.out);
    std::ofstream f(txt, std::ios::trunc);
    if (!f) throw ImageError(ImageError::Kind::io, "cannot write " + txt.string());
    for (std::size_t i = 0; i < map.weights.size(); ++i) f << (i ? " " : "") << format_real(map.weights[i]);
    f << '\n';
    out << "wrote " << a.out << " and " << txt.string() << " (key grid " << map.key_grid_w << "x" << map.key_grid_h
        << ")\n";
    return int{kOk};
  });
}

struct BenchArgs {
  std::string checkpoint;
  std::size_t size = 64;
  std::size_t repeats = 3;
  std::string config;
  std::uint64_t seed = 0;
};

struct BenchReport {
  std::size_t size = 0;
  std::vector<double> seconds;
  double median_seconds = 0.0;
};

inline BenchReport run_bench(const StyleTransferModel<float>& model, std::size_t size, std::size_t repeats,
                             std::uint64_t seed) {
  if (size == 0 || size % 32 != 0) throw DimensionError("bench size " + std::to_string(size) + " is not a multiple of 32");
  if (repeats == 0) throw Error("bench needs at least one repeat");
  Rng rng(seed);
  ImageBuffer content(size, size), style(size, size);
  for (auto& v : content.pixels) v = static_cast<float>(rng.uniform());
  for (auto& v : style.pixels) v = static_cast<float>(rng.uniform());
  stylize_image(model, content, style);  // warm-up
  BenchReport r;
  r.size = size;
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    stylize_image(model, content, style);
    r.seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  r.median_seconds = median(r.seconds);
  return r;
}

inline int bench(const BenchArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto cfg = resolve_config(a.config);
    const auto model = load_model(cfg, a.checkpoint);
    const auto r = run_bench(*model, a.size, a.repeats, a.seed);
    out << nlohmann::json{{"size", r.size}, {"repeats", r.seconds.size()}, {"seconds", r.seconds},
                          {"median_seconds", r.median_seconds}}
               .dump()
        << '\n';
    return int{kOk};
  });
}

struct TrainArgs {
  std::string content_dir;
  std::string style_dir;
  std::string config;
  std::string out;
  std::string log;  // empty: stdout
  std::optional<std::size_t> steps;
};

inline int train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    auto cfg = resolve_config(a.config);
    if (a.steps) cfg.train.steps = *a.steps;
    cfg.validate();
    std::ofstream log_file;
    std::ostream* log = &out;
    if (!a.log.empty()) {
      log_file.open(a.log, std::ios::trunc);
      if (!log_file) throw Error("cannot write log " + a.log);
      log = &log_file;
    }
    const auto outcome = sttr::train(a.content_dir, a.style_dir, cfg, log, a.out);
    err << "trained " << outcome.log.size() << " steps";
    if (!outcome.log.empty()) err << ", final total " << format_real(outcome.log.back().total);
    err << "; wrote " << a.out << '\n';
    return int{kOk};
  });
}

inline int show_config(const std::string& profile, const std::string& config, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto cfg = config.empty() ? RunConfig::named(profile) : load_run_config(config);
    out << to_json(cfg).dump(2) << '\n';
    return int{kOk};
  });
}

}  // namespace sttr::app
