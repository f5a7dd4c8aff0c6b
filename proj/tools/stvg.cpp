// stvg: train / eval / infer / visualize / synth / ablate.
//
// Exit codes: 0 ok, 1 usage or config error, 2 data error, 3 numerical abort.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"

#include "stvg/harness.hpp"
#include "stvg/kernels.hpp"
#include "stvg/logging.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace stvg;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

RunConfig resolve_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : RunConfig::load(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  cfg.validate();
  return cfg;
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::unique_ptr<GroundingModel> make_model(RunConfig& cfg, const Tokenizer& tok) {
  cfg.model.vocab_size = tok.size();
  return std::make_unique<GroundingModel>(cfg.model, cfg.seed);
}

struct TrainOutcome {
  TrainResult result;
  EvalResult eval;
};

TrainOutcome train_run(RunConfig cfg, bool quiet) {
  const Tokenizer tok = build_tokenizer(cfg);
  const auto samples = load_samples(cfg, tok);
  auto model = make_model(cfg, tok);
  Trainer trainer(cfg, *model, samples);
  const fs::path out = cfg.out_dir;
  TrainHooks hooks;
  hooks.on_epoch = [&](int epoch, double loss) {
    if (!quiet) std::printf("epoch %4d  loss %.6f\n", epoch, loss);
    if (cfg.save_checkpoints && cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%04d.ckpt", epoch);
      save_checkpoint(out / name, cfg, tok, *model, &trainer);
    }
  };
  TrainOutcome o;
  o.result = trainer.run(hooks);
  if (cfg.save_checkpoints) save_checkpoint(out / "final.ckpt", cfg, tok, *model, &trainer);
  write_json(out / "losses.json", {{"step", o.result.step_losses}, {"epoch", o.result.epoch_losses}});
  write_json(out / "config.json", cfg.to_json());
  o.eval = evaluate(samples, model_predictor(*model));
  write_json(out / "train_eval.json", o.eval.to_json());
  return o;
}

int cmd_train(const Common& c) {
  const RunConfig cfg = resolve_config(c);
  const auto o = train_run(cfg, false);
  std::cout << o.eval.to_json().dump(2) << '\n';
  return 0;
}

int cmd_eval(const Common& c, const std::string& ckpt_path) {
  LoadedCheckpoint ck = load_checkpoint(ckpt_path);
  RunConfig data_cfg = c.config.empty() ? ck.config : RunConfig::load(c.config);
  data_cfg.model = ck.config.model;
  const auto samples = load_samples(data_cfg, ck.tokenizer());
  const EvalResult r = evaluate(samples, model_predictor(*ck.model));
  const json j = r.to_json();
  if (!c.out.empty()) write_json(c.out, j);
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_infer(const Common& c, const std::string& ckpt_path, const std::string& video, const std::string& caption,
              bool dump_dists) {
  LoadedCheckpoint ck = load_checkpoint(ckpt_path);
  const ModelConfig& mc = ck.config.model;
  const std::vector<Image> frames = load_frame_dir(video);
  Sample s{fs::path(video).filename().string(), resample_clip(frames, mc.max_frames, mc.resolution), {},
           ck.tokenizer().encode(caption, mc.max_text_len)};
  const Prediction p = predict(*ck.model, s);
  const json j = tube_to_json(p.tube, s.id, caption, s.clip.width(), s.clip.height(), dump_dists ? &p.distributions : nullptr);
  if (!c.out.empty()) write_json(c.out, j);
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_visualize(const Common& c, const std::string& tube_path, const std::string& video, int max_frames, int resolution) {
  std::ifstream in(tube_path);
  if (!in) throw DataError("cannot open " + tube_path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(tube_path + ": " + e.what());
  }
  const SpatioTemporalTube tube = tube_from_json(j);
  const VideoClip clip = resample_clip(load_frame_dir(video), max_frames, resolution);
  const auto files = visualize(tube, clip, c.out.empty() ? fs::path("overlays") : fs::path(c.out));
  for (const auto& f : files) std::cout << f.string() << '\n';
  return 0;
}

int cmd_synth(const Common& c) {
  RunConfig cfg = resolve_config(c);
  const SyntheticDataset ds = generate_synthetic(synthetic_spec(cfg));
  const fs::path out = c.out.empty() ? fs::path("synthetic") : fs::path(c.out);
  save_synthetic(out, ds);
  std::cout << "wrote " << ds.videos.size() << " videos to " << out.string() << '\n';
  return 0;
}

int cmd_ablate(const Common& c, bool run) {
  const RunConfig base = resolve_config(c);
  const auto rows = ablation_matrix(base);
  const auto names = ablation_row_names();
  json summary = json::array();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    write_json(fs::path(base.out_dir) / ("ablation_" + std::to_string(i) + ".json"), rows[i].to_json());
    json row = {{"row", i}, {"name", names[i]}, {"out_dir", rows[i].out_dir}};
    if (run) {
      const auto o = train_run(rows[i], true);
      json changed = json::array();
      for (auto g : nn::kAllGroups)
        if (o.result.checksums_before.at(g) != o.result.checksums_after.at(g)) changed.push_back(std::string(nn::to_string(g)));
      row["changed_groups"] = changed;
      row["train_eval"] = o.eval.to_json();
    }
    std::cout << row.dump() << '\n';
    summary.push_back(std::move(row));
  }
  write_json(fs::path(base.out_dir) / "ablation_summary.json", summary);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatio-temporal video grounding"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "run configuration (JSON)");
    sub->add_option("--seed", common.seed, "override the run seed");
    sub->add_option("--out", common.out, "output path");
  };

  auto* train = app.add_subcommand("train", "train a model");
  add_common(train);

  std::string ckpt, video, caption, tube;
  bool dump_dists = false, run_ablation = false;
  int max_frames = ModelConfig{}.max_frames, resolution = ModelConfig{}.resolution;

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval);
  eval->add_option("--checkpoint", ckpt, "checkpoint file")->required();

  auto* infer = app.add_subcommand("infer", "ground a caption in a frame directory");
  add_common(infer);
  infer->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  infer->add_option("--video", video, "directory of PPM frames")->required();
  infer->add_option("--caption", caption, "text prompt")->required();
  infer->add_flag("--dump-distributions", dump_dists, "include start/end distributions");

  auto* vis = app.add_subcommand("visualize", "draw a tube onto its frames");
  add_common(vis);
  vis->add_option("--tube", tube, "tube JSON from infer")->required();
  vis->add_option("--video", video, "directory of PPM frames")->required();
  vis->add_option("--max-frames", max_frames, "frames sampled at inference");
  vis->add_option("--resolution", resolution, "shorter side at inference");

  auto* synth = app.add_subcommand("synth", "generate a synthetic moving-shapes dataset");
  add_common(synth);

  auto* ablate = app.add_subcommand("ablate", "emit (and optionally run) the ablation ladder");
  add_common(ablate);
  ablate->add_flag("--run", run_ablation, "train every row");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : 1;
  }

  log::debug("kernels: " + std::string(kernels::active().name));
  try {
    if (train->parsed()) return cmd_train(common);
    if (eval->parsed()) return cmd_eval(common, ckpt);
    if (infer->parsed()) return cmd_infer(common, ckpt, video, caption, dump_dists);
    if (vis->parsed()) return cmd_visualize(common, tube, video, max_frames, resolution);
    if (synth->parsed()) return cmd_synth(common);
    if (ablate->parsed()) return cmd_ablate(common, run_ablation);
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const NoValidIntervalError& e) {
    std::cerr << "no valid interval: " << e.what() << '\n';
    return 2;
  } catch (const TokenizerError& e) {
    std::cerr << "tokenizer error: " << e.what() << '\n';
    return 2;
  } catch (const IntervalError& e) {
    std::cerr << "interval error: " << e.what() << '\n';
    return 2;
  } catch (const InvalidBoxError& e) {
    std::cerr << "box error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
