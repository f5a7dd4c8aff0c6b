#include "stvg/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "stvg/image_io.hpp"
#include "stvg/logging.hpp"

namespace stvg {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Reads known keys and rejects the rest.
class Reader {
 public:
  Reader(const json& j, std::string ctx) : j_(j), ctx_(std::move(ctx)) {
    if (!j.is_object()) throw ConfigError(ctx_ + ": expected an object");
  }
  template <class T>
  void operator()(const char* key, T& v) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      v = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(ctx_ + "." + key + ": wrong type");
    }
  }
  const json* nested(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }
  void finish() const {
    for (const auto& [k, _] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key " + ctx_ + "." + k);
  }

 private:
  const json& j_;
  std::string ctx_;
  std::set<std::string> seen_;
};

struct Writer {
  json& j;
  template <class T>
  void operator()(const char* key, const T& v) {
    j[key] = v;
  }
};

template <class F, class M>
void visit_model(M& m, F& f) {
  f("d_model", m.d_model);
  f("n_heads", m.n_heads);
  f("encoder_layers", m.encoder_layers);
  f("decoder_layers", m.decoder_layers);
  f("num_query", m.num_query);
  f("n_levels", m.n_levels);
  f("n_points", m.n_points);
  f("ffn_dim", m.ffn_dim);
  f("text_layers", m.text_layers);
  f("vision_channels", m.vision_channels);
  f("max_text_len", m.max_text_len);
  f("vocab_size", m.vocab_size);
  f("sigma", m.sigma);
  f("lambda_l1", m.lambda_l1);
  f("lambda_giou", m.lambda_giou);
  f("lambda_conf", m.lambda_conf);
  f("max_frames", m.max_frames);
  f("resolution", m.resolution);
  f("strict_interval", m.strict_interval);
  f("encoder_temporal", m.encoder_temporal);
  f("decoder_temporal", m.decoder_temporal);
  f("finetune_encoder_spatial", m.finetune_encoder_spatial);
  f("finetune_decoder_spatial", m.finetune_decoder_spatial);
  f("temporal_pe", m.temporal_pe);
}

template <class F, class O>
void visit_optim(O& o, F& f) {
  f("lr", o.lr);
  f("weight_decay", o.weight_decay);
  f("beta1", o.beta1);
  f("beta2", o.beta2);
  f("eps", o.eps);
  f("grad_clip", o.grad_clip);
  f("batch_size", o.batch_size);
  f("epochs", o.epochs);
}

template <class F, class D>
void visit_data(D& d, F& f) {
  f("kind", d.kind);
  f("root", d.root);
  f("split", d.split);
  f("version", d.version);
  f("n_videos", d.n_videos);
  f("synth_seed", d.synth_seed);
  f("pair_modulus", d.pair_modulus);
  f("pair_residue", d.pair_residue);
  f("heldout", d.heldout);
}

template <class F, class R>
void visit_run(R& r, F& f) {
  f("seed", r.seed);
  f("out_dir", r.out_dir);
  f("freeze_vision", r.freeze_vision);
  f("freeze_text", r.freeze_text);
  f("checkpoint_every", r.checkpoint_every);
  f("save_checkpoints", r.save_checkpoints);
}

fs::path data_root(const RunConfig& cfg) {
  if (const char* env = std::getenv("STVG_DATA_ROOT"); env && *env) return env;
  return cfg.data.root;
}

}  // namespace


// ---- RunConfig --------------------------------------------------------------

RunConfig RunConfig::from_json(const json& j) {
  RunConfig r;
  Reader top(j, "config");
  visit_run(r, top);
  if (const json* m = top.nested("model")) {
    Reader rd(*m, "model");
    visit_model(r.model, rd);
    rd.finish();
  }
  if (const json* o = top.nested("optimizer")) {
    Reader rd(*o, "optimizer");
    visit_optim(r.optim, rd);
    rd.finish();
  }
  if (const json* d = top.nested("data")) {
    Reader rd(*d, "data");
    visit_data(r.data, rd);
    rd.finish();
  }
  top.finish();
  r.validate();
  return r;
}

json RunConfig::to_json() const {
  json j, m, o, d;
  Writer wj{j}, wm{m}, wo{o}, wd{d};
  visit_run(*this, wj);
  visit_model(model, wm);
  visit_optim(optim, wo);
  visit_data(data, wd);
  j["model"] = std::move(m);
  j["optimizer"] = std::move(o);
  j["data"] = std::move(d);
  return j;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void RunConfig::validate() const {
  model.validate();
  if (!(optim.lr > 0.0)) throw ConfigError("optimizer.lr must be positive");
  if (optim.weight_decay < 0.0) throw ConfigError("optimizer.weight_decay must be >= 0");
  if (optim.batch_size < 1) throw ConfigError("optimizer.batch_size must be >= 1");
  if (optim.epochs < 0) throw ConfigError("optimizer.epochs must be >= 0");
  if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0 && optim.beta2 >= 0.0 && optim.beta2 < 1.0))
    throw ConfigError("optimizer betas must lie in [0, 1)");
  static const std::set<std::string> kinds = {"synthetic", "manifest", "vidstg", "hcstvg", "youcook_interactions"};
  if (!kinds.count(data.kind)) throw ConfigError("data.kind: unknown dataset " + data.kind);
  if (data.pair_modulus < 0 || (data.pair_modulus > 0 && (data.pair_residue < 0 || data.pair_residue >= data.pair_modulus)))
    throw ConfigError("data.pair_modulus/pair_residue out of range");
  if (data.n_videos < 1) throw ConfigError("data.n_videos must be >= 1");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
}

int default_epochs(const std::string& kind) {
  if (kind == "vidstg") return 10;
  if (kind == "hcstvg") return 90;
  return 200;
}

int RunConfig::resolved_epochs() const { return optim.epochs > 0 ? optim.epochs : default_epochs(data.kind); }

std::set<nn::ParamGroup> RunConfig::trainable_groups() const {
  using G = nn::ParamGroup;
  std::set<G> g = {G::Heads};
  if (!freeze_vision) g.insert(G::VisionBackbone);
  if (!freeze_text) g.insert(G::TextBackbone);
  if (model.encoder_temporal) g.insert(G::EncoderTemporal);
  if (model.decoder_temporal) g.insert(G::DecoderTemporal);
  if (model.finetune_encoder_spatial) g.insert(G::EncoderSpatial);
  if (model.finetune_decoder_spatial) {
    g.insert(G::DecoderSpatial);
    g.insert(G::QuerySelection);
  }
  return g;
}

// ---- data -------------------------------------------------------------------

SyntheticSpec synthetic_spec(const RunConfig& cfg) {
  SyntheticSpec s;
  s.n_videos = cfg.data.n_videos;
  s.num_frames = cfg.model.max_frames;
  s.height = cfg.model.resolution;
  s.width = cfg.model.resolution;
  s.strict = cfg.model.strict_interval;
  s.seed = cfg.data.synth_seed;
  s.object_size = std::round(cfg.model.resolution * 14.0 / 64.0);
  s.speed = 1.5 * cfg.model.resolution / 64.0;
  s.max_window = std::min(s.max_window, s.num_frames);
  s.min_window = std::min(s.min_window, s.max_window);
  if (cfg.data.pair_modulus > 0) s.target_pairs = pair_split(s, cfg.data.pair_modulus, cfg.data.pair_residue, !cfg.data.heldout);
  return s;
}

namespace {

DatasetManifest load_real_manifest(const RunConfig& cfg, const fs::path& root) {
  const std::string& k = cfg.data.kind;
  if (k == "manifest") return load_manifest(root / "manifest.json");
  if (k == "vidstg") return load_vidstg(root, cfg.data.split, cfg.model.strict_interval);
  if (k == "hcstvg") return load_hcstvg(root, cfg.data.version, cfg.data.split, cfg.model.strict_interval);
  if (k == "youcook_interactions") return load_youcook_interactions(root);
  throw ConfigError("no manifest for dataset kind " + k);
}

fs::path frames_dir(const RunConfig& cfg, const fs::path& root, const std::string& video) {
  if (cfg.data.kind == "manifest") return root / video;
  return root / "frames" / video;
}

}  // namespace

Tokenizer build_tokenizer(const RunConfig& cfg) {
  if (cfg.data.kind == "synthetic") return synthetic_tokenizer(synthetic_spec(cfg));
  const fs::path root = data_root(cfg);
  if (fs::exists(root / "vocab.txt")) return Tokenizer::from_file(root / "vocab.txt");
  std::set<std::string> words;
  for (const auto& e : load_real_manifest(cfg, root).entries)
    for (auto& w : Tokenizer::split_words(e.annotation.caption)) words.insert(std::move(w));
  std::vector<std::string> v = {std::string(Tokenizer::kPad)};
  v.insert(v.end(), words.begin(), words.end());
  return Tokenizer(std::move(v));
}

std::vector<Sample> samples_from_synthetic(const SyntheticDataset& ds, const Tokenizer& tokenizer, int max_text_len) {
  std::vector<Sample> out;
  out.reserve(ds.videos.size());
  for (const auto& v : ds.videos)
    out.push_back({v.annotation.video_id, v.clip, v.annotation, tokenizer.encode(v.annotation.caption, max_text_len)});
  return out;
}

std::vector<Sample> load_samples(const RunConfig& cfg, const Tokenizer& tokenizer) {
  if (cfg.data.kind == "synthetic")
    return samples_from_synthetic(generate_synthetic(synthetic_spec(cfg)), tokenizer, cfg.model.max_text_len);
  const fs::path root = data_root(cfg);
  const DatasetManifest m = load_real_manifest(cfg, root);
  std::vector<Sample> out;
  for (const auto& e : m.entries) {
    const bool strict = cfg.model.strict_interval && e.annotation.interval.num_frames() > 1;
    try {
      auto sc = sample_frames(load_frame_dir(frames_dir(cfg, root, e.video)), cfg.model.max_frames, e.annotation,
                              cfg.model.resolution, strict);
      out.push_back({e.annotation.video_id, std::move(sc.clip), std::move(sc.annotation),
                     tokenizer.encode(e.annotation.caption, cfg.model.max_text_len)});
    } catch (const DataError& err) {
      log::warn(std::string("rejecting sample ") + e.annotation.video_id + ": " + err.what());
    }
  }
  if (out.empty()) throw DataError("no usable samples in " + root.string());
  return out;
}

// ---- optimizer --------------------------------------------------------------

double AdamW::step(const std::vector<nn::Parameter*>& params) {
  double sq = 0.0;
  for (const auto* p : params)
    for (double g : p->var->grad) sq += g * g;
  const double norm = std::sqrt(sq);
  const double clip = (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / (norm + 1e-6) : 1.0;
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (auto* p : params) {
    ag::Node& n = *p->var;
    if (n.grad.empty()) continue;
    Moments& s = state_[p->name];
    if (s.m.empty()) {
      s.m.assign(n.size(), 0.0);
      s.v.assign(n.size(), 0.0);
    }
    for (std::size_t i = 0; i < n.size(); ++i) {
      const double g = n.grad[i] * clip;
      s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g;
      s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = s.m[i] / c1, vhat = s.v[i] / c2;
      n.value[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * n.value[i]);
    }
  }
  return norm;
}

// ---- training ---------------------------------------------------------------

Trainer::Trainer(const RunConfig& cfg, GroundingModel& model, const std::vector<Sample>& samples)
    : cfg_(cfg), model_(model), samples_(samples), optim_(cfg.optim), rng_(cfg.seed ^ 0x5DEECE66Dull) {
  cfg_.validate();
  if (samples_.empty()) throw DataError("training set is empty");
  model_.apply_toggles(cfg_.model);
  const auto groups = cfg_.trainable_groups();
  for (auto& p : model_.params().all()) {
    const bool train = groups.count(p.group) > 0;
    p.var->requires_grad = train;
    if (train) trainable_.push_back(&p);
  }
  cache_backbone_ = cfg_.freeze_vision && cfg_.freeze_text;
  cache_.resize(samples_.size());
}

const EncodedInputs& Trainer::inputs(std::size_t i) {
  if (!cache_[i] || !cache_backbone_) {
    cache_[i] = std::make_unique<EncodedInputs>(
        model_.encode_inputs(samples_[i].clip, samples_[i].prompt, !cache_backbone_));
  }
  return *cache_[i];
}

double Trainer::run_epoch(TrainResult* log, const TrainHooks& hooks) {
  std::vector<std::size_t> order(samples_.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng_() % i]);

  const std::size_t bs = static_cast<std::size_t>(cfg_.optim.batch_size);
  double epoch_sum = 0.0;
  for (std::size_t b = 0; b < order.size(); b += bs) {
    const std::size_t end = std::min(order.size(), b + bs);
    const double inv = 1.0 / static_cast<double>(end - b);
    model_.params().zero_grad();
    double batch_loss = 0.0;
    for (std::size_t k = b; k < end; ++k) {
      const Sample& s = samples_[order[k]];
      const ModelOutput out = model_.forward(inputs(order[k]));
      const ProposalPrediction props = out.proposals();
      const LossReport rep = total_loss(out.layers, s.annotation, cfg_.model, &props);
      if (!std::isfinite(rep.total)) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch_) + ", batch " +
                             std::to_string(b / bs) + ", sample " + s.id + " (l1=" + std::to_string(rep.l1) +
                             " giou=" + std::to_string(rep.giou) + " kl_s=" + std::to_string(rep.kl_start) +
                             " kl_e=" + std::to_string(rep.kl_end) + ")");
      }
      ag::backward(ag::scale(rep.total_var, inv));
      batch_loss += rep.total * inv;
    }
    optim_.step(trainable_);
    for (const auto* p : trainable_)
      for (double v : p->var->value)
        if (!std::isfinite(v)) throw NumericalError("non-finite parameter " + p->name + " after epoch " + std::to_string(epoch_) + " batch " + std::to_string(b / bs));
    epoch_sum += batch_loss * static_cast<double>(end - b);
    if (log) log->step_losses.push_back(batch_loss);
    if (hooks.on_step) hooks.on_step(optim_.steps(), batch_loss);
  }
  ++epoch_;
  const double mean = epoch_sum / static_cast<double>(samples_.size());
  if (log) log->epoch_losses.push_back(mean);
  if (hooks.on_epoch) hooks.on_epoch(epoch_, mean);
  return mean;
}

TrainResult Trainer::run(const TrainHooks& hooks) {
  TrainResult r;
  for (auto g : nn::kAllGroups) r.checksums_before[g] = model_.params().checksum(g);
  const int epochs = cfg_.resolved_epochs();
  while (epoch_ < epochs) run_epoch(&r, hooks);
  for (auto g : nn::kAllGroups) r.checksums_after[g] = model_.params().checksum(g);
  return r;
}

// ---- evaluation -------------------------------------------------------------

Prediction predict(const GroundingModel& model, const Sample& sample) {
  ag::NoGradGuard guard;
  const ModelOutput out = model.forward(sample.clip, sample.prompt);
  Prediction p;
  p.tube = model.predict_tube(out);
  const FramePredictions& fp = out.final_layer().frames;
  for (int t = 0; t < fp.num_frames; ++t) p.frame_boxes.push_back(fp.box(t, best_query(fp, t)));
  p.distributions = to_distributions(out.final_layer().temporal);
  return p;
}

Predictor model_predictor(const GroundingModel& model) {
  return [&model](const Sample& s) { return predict(model, s); };
}

EvalResult evaluate(const std::vector<Sample>& samples, const Predictor& predictor) {
  if (samples.empty()) throw std::invalid_argument("evaluate: empty sample set");
  EvalResult r;
  std::map<SentenceKind, std::vector<SampleResult>> parts;
  for (const Sample& s : samples) {
    const Prediction p = predictor(s);
    SampleResult sr;
    sr.kind = s.annotation.sentence_kind;
    sr.tiou = tIoU(p.tube.interval, s.annotation.interval);
    sr.viou = vIoU(p.tube, s.annotation);
    if (s.annotation.interval.num_frames() == 1) {
      const int t = s.annotation.interval.start();
      sr.pointing_hit = pointing_game(p.frame_boxes.at(t), s.annotation.boxes.at(t));
    }
    r.samples.push_back(sr);
    if (sr.kind != SentenceKind::Unknown) parts[sr.kind].push_back(sr);
  }
  r.overall = aggregate(r.samples);
  for (const auto& [k, v] : parts) r.by_kind[k] = aggregate(v);
  return r;
}

json EvalResult::to_json() const {
  json j = overall.to_json();
  for (const auto& [k, rep] : by_kind) j[std::string(to_string(k))] = rep.to_json();
  return j;
}

// ---- inference / export -----------------------------------------------------

json tube_to_json(const SpatioTemporalTube& tube, const std::string& video_id, const std::string& caption,
                  int image_width, int image_height, const TemporalDistributions* dists) {
  const auto [ts, te] = interval_to_paper_indexing(tube.interval);
  json boxes = json::array();
  for (int t = tube.interval.start(); t <= tube.interval.end(); ++t) {
    const CornerBox c = box_center_to_corner(tube.box_at(t), image_width, image_height);
    boxes.push_back({{"t", t + 1}, {"x", c.x}, {"y", c.y}, {"w", c.w}, {"h", c.h}});
  }
  json j = {{"schema_version", kTubeSchemaVersion},
            {"video_id", video_id},
            {"caption", caption},
            {"width", image_width},
            {"height", image_height},
            {"t_s", ts},
            {"t_e", te},
            {"score", tube.score},
            {"boxes", std::move(boxes)}};
  if (dists) {
    j["tau_s"] = dists->tau_s;
    j["tau_e"] = dists->tau_e;
  }
  return j;
}

SpatioTemporalTube tube_from_json(const json& j) {
  try {
    if (j.at("schema_version").get<int>() != kTubeSchemaVersion) throw DataError("unsupported tube schema_version");
    const int w = j.at("width").get<int>(), h = j.at("height").get<int>();
    SpatioTemporalTube tube;
    const int ts = j.at("t_s").get<int>(), te = j.at("t_e").get<int>();
    tube.interval = TemporalInterval::from_paper_indexing(ts, te, ts != te);
    tube.score = j.at("score").get<double>();
    for (const json& b : j.at("boxes")) {
      const CornerBox c{b.at("x").get<double>(), b.at("y").get<double>(), b.at("w").get<double>(), b.at("h").get<double>()};
      tube.boxes.push_back(BoundingBox{(c.x + 0.5 * c.w) / w, (c.y + 0.5 * c.h) / h, c.w / w, c.h / h});
    }
    tube.validate();
    return tube;
  } catch (const json::exception& e) {
    throw DataError(std::string("tube json: ") + e.what());
  }
}

std::array<int, 4> box_pixel_rect(const BoundingBox& b, int width, int height) {
  auto px = [](double v, int n) { return std::clamp(static_cast<int>(std::floor(v * n)), 0, n - 1); };
  auto px_end = [](double v, int n) { return std::clamp(static_cast<int>(std::ceil(v * n)) - 1, 0, n - 1); };
  return {px(b.x0(), width), px(b.y0(), height), px_end(b.x1(), width), px_end(b.y1(), height)};
}

std::vector<fs::path> visualize(const SpatioTemporalTube& tube, const VideoClip& clip, const fs::path& out_dir) {
  if (tube.boxes.empty() || static_cast<int>(tube.boxes.size()) != tube.interval.num_frames())
    throw DataError("visualize: tube has no frames");
  if (tube.interval.end() >= clip.num_frames())
    throw DataError("visualize: tube frame " + std::to_string(tube.interval.end()) + " outside the clip");
  fs::create_directories(out_dir);
  static constexpr double kColor[3] = {0.1, 1.0, 0.1};
  std::vector<fs::path> files;
  for (int t = tube.interval.start(); t <= tube.interval.end(); ++t) {
    Image img(clip.width(), clip.height());
    std::copy_n(clip.frame(t), clip.frame_size(), img.rgb.begin());
    const auto r = box_pixel_rect(tube.box_at(t), clip.width(), clip.height());
    draw_rect(img, r[0], r[1], r[2], r[3], kColor);
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04d.ppm", t + 1);
    files.push_back(out_dir / name);
    write_ppm(files.back(), img);
  }
  return files;
}

// ---- ablation ---------------------------------------------------------------

std::vector<std::string> ablation_row_names() {
  return {"naive (frozen spatial modules)", "+ decoder temporal aggregation", "+ encoder temporal aggregation",
          "+ finetuned spatial modules in decoder", "+ finetuned spatial modules in encoder"};
}

std::vector<RunConfig> ablation_matrix(const RunConfig& base) {
  RunConfig r = base;
  r.model.encoder_temporal = false;
  r.model.decoder_temporal = false;
  r.model.finetune_encoder_spatial = false;
  r.model.finetune_decoder_spatial = false;
  std::vector<RunConfig> rows;
  auto push = [&](int i) {
    RunConfig c = r;
    c.out_dir = (fs::path(base.out_dir) / ("ablation_" + std::to_string(i))).string();
    c.validate();
    rows.push_back(std::move(c));
  };
  push(0);
  r.model.decoder_temporal = true;
  push(1);
  r.model.encoder_temporal = true;
  push(2);
  r.model.finetune_decoder_spatial = true;
  push(3);
  r.model.finetune_encoder_spatial = true;
  push(4);
  return rows;
}

}  // namespace stvg
