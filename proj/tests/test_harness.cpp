#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <random>

#include "stvg/harness.hpp"
#include "stvg/image_io.hpp"
#include "test_support.hpp"

using namespace stvg;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

RunConfig small_run(int n_videos = 2) {
  RunConfig cfg;
  cfg.model = testing::tiny_config();
  cfg.data.n_videos = n_videos;
  cfg.data.synth_seed = 3;
  cfg.optim.batch_size = 1;
  cfg.optim.epochs = 1;
  cfg.save_checkpoints = false;
  return cfg;
}

struct Setup {
  RunConfig cfg;
  Tokenizer tok;
  std::vector<Sample> samples;
};

Setup prepare(RunConfig cfg) {
  Tokenizer tok = build_tokenizer(cfg);
  cfg.model.vocab_size = tok.size();
  auto samples = load_samples(cfg, tok);
  return {cfg, std::move(tok), std::move(samples)};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("stvg_test_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(STVG_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p);
  out << s;
}

}  // namespace

TEST_CASE("run config defaults, round trip and unknown keys") {
  const RunConfig d;
  CHECK(d.optim.lr == 1e-4);
  CHECK(d.optim.weight_decay == 1e-4);
  CHECK(d.freeze_vision);
  CHECK(d.freeze_text);
  CHECK(default_epochs("vidstg") == 10);
  CHECK(default_epochs("hcstvg") == 90);

  RunConfig c = small_run();
  c.seed = 42;
  c.model.decoder_temporal = false;
  c.data.pair_modulus = 3;
  c.data.pair_residue = 1;
  const RunConfig back = RunConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.seed == 42);
  CHECK_FALSE(back.model.decoder_temporal);

  json j = c.to_json();
  j["optimizer"]["learning_rate"] = 0.1;
  CHECK_THROWS_AS(RunConfig::from_json(j), ConfigError);
  j = c.to_json();
  j["colour"] = 1;
  CHECK_THROWS_AS(RunConfig::from_json(j), ConfigError);
  j = c.to_json();
  j["optimizer"]["lr"] = -1.0;
  CHECK_THROWS_AS(RunConfig::from_json(j), ConfigError);
  j = c.to_json();
  j["data"]["kind"] = "kinetics";
  CHECK_THROWS_AS(RunConfig::from_json(j), ConfigError);

  c.optim.epochs = 0;
  CHECK(c.resolved_epochs() == 200);
  c.data.kind = "hcstvg";
  CHECK(c.resolved_epochs() == 90);
}

TEST_CASE("adamw matches the hand-computed update") {
  OptimizerConfig oc;
  oc.lr = 0.01;
  oc.weight_decay = 0.1;
  oc.grad_clip = 0.0;
  AdamW opt(oc);
  nn::Parameter p{"w", nn::ParamGroup::Heads, ag::parameter(1, 2, {0.5, -2.0})};
  p.var->grad = {0.3, -0.04};
  std::vector<nn::Parameter*> ps = {&p};
  const double norm = opt.step(ps);
  CHECK(norm == doctest::Approx(std::sqrt(0.09 + 0.0016)).epsilon(1e-12));
  // First step: mhat = g, vhat = g^2.
  auto expect1 = [&](double w, double g) { return w - oc.lr * (g / (std::abs(g) + oc.eps) + oc.weight_decay * w); };
  const double w0 = expect1(0.5, 0.3), w1 = expect1(-2.0, -0.04);
  CHECK(p.var->value[0] == doctest::Approx(w0).epsilon(1e-12));
  CHECK(p.var->value[1] == doctest::Approx(w1).epsilon(1e-12));

  // Second step by the recurrence.
  p.var->grad = {-0.1, 0.2};
  opt.step(ps);
  const double b1 = oc.beta1, b2 = oc.beta2;
  auto expect2 = [&](double w, double g1, double g2) {
    const double m = b1 * (1 - b1) * g1 + (1 - b1) * g2;
    const double v = b2 * (1 - b2) * g1 * g1 + (1 - b2) * g2 * g2;
    const double mh = m / (1 - b1 * b1), vh = v / (1 - b2 * b2);
    return w - oc.lr * (mh / (std::sqrt(vh) + oc.eps) + oc.weight_decay * w);
  };
  CHECK(p.var->value[0] == doctest::Approx(expect2(w0, 0.3, -0.1)).epsilon(1e-12));
  CHECK(p.var->value[1] == doctest::Approx(expect2(w1, -0.04, 0.2)).epsilon(1e-12));
  CHECK(opt.steps() == 2);
}

TEST_CASE("adamw clips the global norm") {
  OptimizerConfig oc;
  oc.grad_clip = 0.1;
  oc.weight_decay = 0.0;
  AdamW a(oc), b(oc);
  nn::Parameter pa{"w", nn::ParamGroup::Heads, ag::parameter(1, 2, {0.0, 0.0})};
  nn::Parameter pb{"w", nn::ParamGroup::Heads, ag::parameter(1, 2, {0.0, 0.0})};
  pa.var->grad = {3.0, 4.0};
  const double s = 0.1 / (5.0 + 1e-6);
  pb.var->grad = {3.0 * s, 4.0 * s};
  CHECK(a.step({&pa}) == doctest::Approx(5.0));
  b.step({&pb});
  CHECK(pa.var->value == pb.var->value);
  CHECK(a.state().at("w").m[0] == doctest::Approx(0.1 * 3.0 * s));
}

TEST_CASE("freeze contract") {
  Setup s = prepare(small_run());
  GroundingModel model(s.cfg.model, s.cfg.seed);
  Trainer trainer(s.cfg, model, s.samples);
  for (const auto* p : trainer.trainable()) {
    CHECK(p->group != nn::ParamGroup::VisionBackbone);
    CHECK(p->group != nn::ParamGroup::TextBackbone);
  }
  const TrainResult r = trainer.run();
  using G = nn::ParamGroup;
  for (G g : {G::VisionBackbone, G::TextBackbone}) CHECK(r.checksums_before.at(g) == r.checksums_after.at(g));
  for (G g : {G::Heads, G::DecoderSpatial, G::EncoderSpatial}) CHECK(r.checksums_before.at(g) != r.checksums_after.at(g));

  // Fully frozen spatial modules and no temporal aggregation.
  RunConfig naive = ablation_matrix(s.cfg).front();
  GroundingModel m2(naive.model, naive.seed);
  Trainer t2(naive, m2, s.samples);
  const TrainResult r2 = t2.run();
  for (G g : nn::kAllGroups) {
    CAPTURE(nn::to_string(g));
    CHECK((r2.checksums_before.at(g) != r2.checksums_after.at(g)) == (g == G::Heads));
  }

  RunConfig unfrozen = s.cfg;
  unfrozen.freeze_vision = false;
  CHECK(unfrozen.trainable_groups().count(G::VisionBackbone) == 1);
  CHECK(unfrozen.trainable_groups().count(G::TextBackbone) == 0);
}

TEST_CASE("training smoke: loss decreases on one repeated sample") {
  RunConfig cfg = small_run(1);
  cfg.optim.epochs = 10;
  Setup s = prepare(cfg);
  GroundingModel model(s.cfg.model, s.cfg.seed);
  Trainer trainer(s.cfg, model, s.samples);
  const TrainResult r = trainer.run();
  REQUIRE(r.step_losses.size() == 10);
  int bumps = 0;
  for (std::size_t i = 1; i < r.step_losses.size(); ++i)
    if (r.step_losses[i] >= r.step_losses[i - 1]) ++bumps;
  CHECK(bumps <= 2);
  CHECK(r.step_losses.back() < r.step_losses.front());
}

TEST_CASE("training is deterministic") {
  RunConfig cfg = small_run(2);
  cfg.optim.epochs = 2;
  Setup s = prepare(cfg);
  auto once = [&] {
    GroundingModel model(s.cfg.model, s.cfg.seed);
    Trainer trainer(s.cfg, model, s.samples);
    return trainer.run().step_losses;
  };
  const auto a = once(), b = once();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-6);
}

TEST_CASE("checkpoint round trip is bitwise") {
  Setup s = prepare(small_run());
  GroundingModel model(s.cfg.model, s.cfg.seed);
  Trainer trainer(s.cfg, model, s.samples);
  trainer.run();
  const fs::path dir = scratch("ckpt");
  save_checkpoint(dir / "m.ckpt", s.cfg, s.tok, model, &trainer);
  const LoadedCheckpoint ck = load_checkpoint(dir / "m.ckpt");
  CHECK(ck.epoch == 1);
  CHECK(ck.optimizer_steps == trainer.optimizer().steps());
  CHECK(ck.vocabulary.size() == static_cast<std::size_t>(s.tok.size()));
  CHECK(ck.config.to_json() == s.cfg.to_json());
  for (const auto& p : model.params().all()) {
    const nn::Parameter* q = ck.model->params().find(p.name);
    REQUIRE(q != nullptr);
    CHECK(q->var->value == p.var->value);
  }
  for (const Sample& smp : s.samples) {
    const Prediction a = predict(model, smp), b = predict(*ck.model, smp);
    CHECK(a.distributions.tau_s == b.distributions.tau_s);
    CHECK(a.distributions.tau_e == b.distributions.tau_e);
    REQUIRE(a.frame_boxes.size() == b.frame_boxes.size());
    for (std::size_t t = 0; t < a.frame_boxes.size(); ++t) {
      CHECK(a.frame_boxes[t].cx == b.frame_boxes[t].cx);
      CHECK(a.frame_boxes[t].w == b.frame_boxes[t].w);
    }
  }

  // Corruption is detected.
  std::string bytes;
  {
    std::ifstream in(dir / "m.ckpt", std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  write_text(dir / "cut.ckpt", bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(dir / "cut.ckpt"), DataError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), DataError);
}

TEST_CASE("evaluate with ground-truth predictions") {
  Setup s = prepare(small_run(4));
  s.samples[0].annotation.sentence_kind = SentenceKind::Declarative;
  s.samples[1].annotation.sentence_kind = SentenceKind::Interrogative;
  s.samples[2].annotation.sentence_kind = SentenceKind::Interrogative;
  s.samples[3].annotation.sentence_kind = SentenceKind::Declarative;
  const Predictor oracle = [](const Sample& smp) {
    Prediction p;
    const auto& a = smp.annotation;
    p.tube.interval = a.interval;
    for (int t = a.interval.start(); t <= a.interval.end(); ++t) p.tube.boxes.push_back(a.boxes.at(t));
    for (int t = 0; t < smp.clip.num_frames(); ++t)
      p.frame_boxes.push_back(a.interval.contains(t) ? a.boxes.at(t) : BoundingBox{});
    return p;
  };
  const EvalResult r = evaluate(s.samples, oracle);
  CHECK(r.overall.m_tIoU == 1.0);
  CHECK(r.overall.m_vIoU == 1.0);
  CHECK(r.overall.vIoU_at.at(0.5) == 1.0);
  int total = 0;
  for (const auto& [k, rep] : r.by_kind) total += rep.sample_count;
  CHECK(total == r.overall.sample_count);
  CHECK(r.by_kind.size() == 2);
  const json j = r.to_json();
  CHECK(j.contains("declarative"));
  CHECK(j.contains("interrogative"));
  CHECK_THROWS_AS(evaluate({}, oracle), std::invalid_argument);

  // The model predictor runs end to end and stays in range.
  GroundingModel model(s.cfg.model, s.cfg.seed);
  const EvalResult m = evaluate(s.samples, model_predictor(model));
  CHECK(m.overall.m_vIoU >= 0.0);
  CHECK(m.overall.m_vIoU <= 1.0);
  CHECK(m.overall.m_tIoU <= 1.0);
}

TEST_CASE("tube json round trip") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    SpatioTemporalTube tube;
    const int s = static_cast<int>(rng() % 10), len = 2 + static_cast<int>(rng() % 6);
    tube.interval = TemporalInterval(s, s + len - 1);
    for (int i = 0; i < len; ++i) tube.boxes.push_back(testing::random_box(rng));
    tube.score = 0.25;
    const json j = tube_to_json(tube, "vid", "a red square", 64, 48);
    CHECK(j.at("t_s").get<int>() == s + 1);
    CHECK(j.at("schema_version").get<int>() == kTubeSchemaVersion);
    const SpatioTemporalTube back = tube_from_json(json::parse(j.dump()));
    CHECK(back.interval.start() == s);
    CHECK(back.interval.end() == s + len - 1);
    for (int i = 0; i < len; ++i) {
      CHECK(std::abs(back.boxes[i].cx - tube.boxes[i].cx) < 1e-9);
      CHECK(std::abs(back.boxes[i].cy - tube.boxes[i].cy) < 1e-9);
      CHECK(std::abs(back.boxes[i].w - tube.boxes[i].w) < 1e-9);
      CHECK(std::abs(back.boxes[i].h - tube.boxes[i].h) < 1e-9);
    }
  }
  json bad = {{"schema_version", 99}};
  CHECK_THROWS_AS(tube_from_json(bad), DataError);
  CHECK_THROWS_AS(tube_from_json(json{{"schema_version", 1}}), DataError);
}

TEST_CASE("overlay rectangles") {
  std::mt19937_64 rng(11);
  const int W = 40, H = 30;
  for (int trial = 0; trial < 200; ++trial) {
    const BoundingBox b = testing::random_box(rng);
    const auto r = box_pixel_rect(b, W, H);
    // Pixels whose cells overlap the box.
    int ox0 = W, oy0 = H, ox1 = -1, oy1 = -1;
    for (int x = 0; x < W; ++x)
      if ((x + 1.0) / W > b.x0() && x / double(W) < b.x1()) ox0 = std::min(ox0, x), ox1 = std::max(ox1, x);
    for (int y = 0; y < H; ++y)
      if ((y + 1.0) / H > b.y0() && y / double(H) < b.y1()) oy0 = std::min(oy0, y), oy1 = std::max(oy1, y);
    CHECK(std::abs(r[0] - ox0) <= 1);
    CHECK(std::abs(r[1] - oy0) <= 1);
    CHECK(std::abs(r[2] - ox1) <= 1);
    CHECK(std::abs(r[3] - oy1) <= 1);
  }

  const VideoClip clip(5, H, W, std::vector<double>(5u * H * W * 3, 0.0));
  SpatioTemporalTube tube;
  tube.interval = TemporalInterval(1, 3);
  const BoundingBox box{0.5, 0.5, 0.5, 0.4};
  tube.boxes = {box, box, box};
  const fs::path dir = scratch("overlay");
  const auto files = visualize(tube, clip, dir);
  REQUIRE(files.size() == 3);
  CHECK(files[0].filename() == "frame_0002.ppm");
  const Image img = read_ppm(files[1]);
  const auto r = box_pixel_rect(box, W, H);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const bool on_edge = ((x == r[0] || x == r[2]) && y >= r[1] && y <= r[3]) ||
                           ((y == r[1] || y == r[3]) && x >= r[0] && x <= r[2]);
      CHECK((img.at(x, y, 1) > 0.5) == on_edge);
    }

  SpatioTemporalTube empty;
  CHECK_THROWS_AS(visualize(empty, clip, dir), DataError);
  SpatioTemporalTube late = tube;
  late.interval = TemporalInterval(3, 5);
  CHECK_THROWS_AS(visualize(late, clip, dir), DataError);
}

TEST_CASE("ablation ladder") {
  RunConfig base = small_run();
  base.out_dir = "runs/x";
  const auto rows = ablation_matrix(base);
  REQUIRE(rows.size() == 5);
  CHECK(ablation_row_names().size() == 5);
  auto toggles = [](const RunConfig& c) {
    return std::array<bool, 4>{c.model.decoder_temporal, c.model.encoder_temporal, c.model.finetune_decoder_spatial,
                               c.model.finetune_encoder_spatial};
  };
  CHECK(toggles(rows[0]) == std::array<bool, 4>{false, false, false, false});
  CHECK(rows[0].freeze_vision);
  CHECK(rows[0].freeze_text);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto a = toggles(rows[i - 1]), b = toggles(rows[i]);
    int diff = 0;
    for (int k = 0; k < 4; ++k) diff += a[k] != b[k];
    CHECK(diff == 1);
    CHECK(b[i - 1]);
    CHECK(rows[i].out_dir != rows[i - 1].out_dir);
  }
  for (const auto& r : rows) CHECK_NOTHROW(r.validate());
  CHECK(rows[0].trainable_groups() == std::set<nn::ParamGroup>{nn::ParamGroup::Heads});
}

TEST_CASE("cli exit codes and end-to-end run") {
  const fs::path dir = scratch("cli");
  CHECK(run_cli("") == 1);
  CHECK(run_cli("frobnicate") == 1);
  CHECK(run_cli("eval") == 1);
  CHECK(run_cli("train --config " + (dir / "absent.json").string()) == 1);
  CHECK(run_cli("eval --checkpoint " + (dir / "absent.ckpt").string()) == 2);

  json bad = small_run().to_json();
  bad["model"]["dmodel"] = 8;
  write_text(dir / "bad.json", bad.dump());
  CHECK(run_cli("train --config " + (dir / "bad.json").string()) == 1);

  RunConfig cfg = small_run();
  cfg.save_checkpoints = true;
  cfg.out_dir = (dir / "run").string();
  write_text(dir / "cfg.json", cfg.to_json().dump());
  REQUIRE(run_cli("train --config " + (dir / "cfg.json").string()) == 0);
  const fs::path ckpt = dir / "run" / "final.ckpt";
  CHECK(fs::exists(ckpt));
  CHECK(fs::exists(dir / "run" / "losses.json"));
  CHECK(run_cli("eval --checkpoint " + ckpt.string() + " --out " + (dir / "eval.json").string()) == 0);
  CHECK(fs::exists(dir / "eval.json"));

  REQUIRE(run_cli("synth --config " + (dir / "cfg.json").string() + " --out " + (dir / "synth").string()) == 0);
  fs::path video;
  for (const auto& e : fs::recursive_directory_iterator(dir / "synth"))
    if (e.is_regular_file() && e.path().extension() == ".ppm") {
      video = e.path().parent_path();
      break;
    }
  REQUIRE_FALSE(video.empty());
  CHECK(run_cli("infer --checkpoint " + ckpt.string() + " --video " + video.string() +
                " --caption \"red square\" --dump-distributions --out " + (dir / "tube.json").string()) == 0);
  REQUIRE(fs::exists(dir / "tube.json"));
  CHECK(run_cli("visualize --tube " + (dir / "tube.json").string() + " --video " + video.string() +
                " --max-frames 4 --resolution 32 --out " + (dir / "overlays").string()) == 0);
  CHECK(fs::exists(dir / "overlays"));
  CHECK(run_cli("infer --checkpoint " + ckpt.string() + " --video " + (dir / "nowhere").string() +
                " --caption x") == 2);
  write_text(dir / "junk.json", "{not json");
  CHECK(run_cli("visualize --tube " + (dir / "junk.json").string() + " --video " + video.string()) == 2);
}
