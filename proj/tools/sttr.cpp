// Command-line front end: train, stylize, video, attention-dump, bench, config.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "sttr/app.hpp"

int main(int argc, char** argv) {
  using namespace sttr;
  CLI::App cli{"Transformer-based style transfer at desk scale"};
  cli.require_subcommand(1);

  app::TrainArgs train;
  std::size_t train_steps = 0;
  auto* train_cmd = cli.add_subcommand("train", "train on a content directory and a style directory");
  train_cmd->add_option("--content-dir", train.content_dir, "directory of content images")->required();
  train_cmd->add_option("--style-dir", train.style_dir, "directory of style images")->required();
  train_cmd->add_option("--out", train.out, "checkpoint to write")->required();
  train_cmd->add_option("--config", train.config, "JSON run configuration");
  train_cmd->add_option("--log", train.log, "JSONL log file (default: stdout)");
  auto* steps_opt = train_cmd->add_option("--steps", train_steps, "override train.steps");

  app::StylizeArgs stylize;
  auto* stylize_cmd = cli.add_subcommand("stylize", "stylize one content image");
  stylize_cmd->add_option("--content", stylize.content)->required();
  stylize_cmd->add_option("--style", stylize.style)->required();
  stylize_cmd->add_option("--checkpoint", stylize.checkpoint)->required();
  stylize_cmd->add_option("--out", stylize.out)->required();
  stylize_cmd->add_option("--config", stylize.config, "JSON run configuration matching the checkpoint");

  app::VideoArgs video;
  auto* video_cmd = cli.add_subcommand("video", "stylize a directory of frames one by one");
  video_cmd->add_option("--frames", video.frames, "directory of frames, processed in name order")->required();
  video_cmd->add_option("--style", video.style)->required();
  video_cmd->add_option("--checkpoint", video.checkpoint)->required();
  video_cmd->add_option("--out", video.out_dir, "output directory")->required();
  video_cmd->add_option("--report", video.report, "CSV of neighbouring-frame differences")->required();
  video_cmd->add_option("--config", video.config);

  app::AttentionArgs attn;
  auto* attn_cmd = cli.add_subcommand("attention-dump", "export one attention row as an image");
  attn_cmd->add_option("--content", attn.content)->required();
  attn_cmd->add_option("--style", attn.style)->required();
  attn_cmd->add_option("--checkpoint", attn.checkpoint)->required();
  attn_cmd->add_option("--module", attn.module, "enc or dec")->check(CLI::IsMember({"enc", "dec"}));
  attn_cmd->add_option("--layer", attn.layer, "0-based layer index");
  attn_cmd->add_option("--point", attn.point, "query token x,y")->required();
  attn_cmd->add_option("--out", attn.out, "PPM path; the raw row goes next to it as .txt")->required();
  attn_cmd->add_option("--config", attn.config);

  app::BenchArgs bench;
  auto* bench_cmd = cli.add_subcommand("bench", "time stylization");
  bench_cmd->add_option("--checkpoint", bench.checkpoint, "weights (default: seeded initialization)");
  bench_cmd->add_option("--size", bench.size, "square image side, multiple of 32");
  bench_cmd->add_option("--repeats", bench.repeats, "timed runs after one warm-up");
  bench_cmd->add_option("--config", bench.config);
  bench_cmd->add_option("--seed", bench.seed, "seed for the synthetic inputs");

  std::string profile = "desk";
  std::string config_path;
  auto* config_cmd = cli.add_subcommand("config", "print a resolved run configuration");
  config_cmd->add_option("--profile", profile, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
  config_cmd->add_option("--config", config_path, "JSON file to resolve instead of a profile");

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return cli.exit(e) == 0 ? 0 : 1;
  }

  if (*train_cmd) {
    if (*steps_opt) train.steps = train_steps;
    return app::train(train, std::cout, std::cerr);
  }
  if (*stylize_cmd) return app::stylize(stylize, std::cout, std::cerr);
  if (*video_cmd) return app::video(video, std::cout, std::cerr);
  if (*attn_cmd) return app::attention_dump(attn, std::cout, std::cerr);
  if (*bench_cmd) return app::bench(bench, std::cout, std::cerr);
  return app::show_config(profile, config_path, std::cout, std::cerr);
}
