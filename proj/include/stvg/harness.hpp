#pragma once

// Training, evaluation, inference and overlay export.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "stvg/data_io.hpp"
#include "stvg/metrics.hpp"
#include "stvg/model.hpp"
#include "stvg/synthetic.hpp"

namespace stvg {

inline constexpr int kTubeSchemaVersion = 1;

struct OptimizerConfig {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 0.1;  // global norm; <= 0 disables
  int batch_size = 8;
  int epochs = 0;  // 0 = dataset default
};

struct DatasetConfig {
  std::string kind = "synthetic";  // synthetic | manifest | vidstg | hcstvg | youcook_interactions
  std::string root;                // data root (STVG_DATA_ROOT overrides when set)
  std::string split = "train";
  int version = 1;                 // HC-STVG version
  // Synthetic generation.
  int n_videos = 16;
  std::uint64_t synth_seed = 0;
  // Vocabulary split: keep target pairs with (color + shape) % modulus ==
  // residue when heldout is false, the rest otherwise. modulus 0 = no split.
  int pair_modulus = 0;
  int pair_residue = 0;
  bool heldout = false;
};

struct RunConfig {
  ModelConfig model;
  OptimizerConfig optim;
  DatasetConfig data;
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";
  bool freeze_vision = true;
  bool freeze_text = true;
  int checkpoint_every = 0;  // epochs; 0 = final only
  bool save_checkpoints = true;

  // Unknown keys raise ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  static RunConfig load(const std::filesystem::path& path);
  void validate() const;

  // Epoch count after applying the per-dataset default.
  int resolved_epochs() const;
  std::set<nn::ParamGroup> trainable_groups() const;
};

// VidSTG 10, HC-STVG 90 (full-data values), synthetic desk default 200.
int default_epochs(const std::string& dataset_kind);

struct Sample {
  std::string id;
  VideoClip clip;
  GroundingAnnotation annotation;  // frame indices of `clip`
  TextPrompt prompt;
};

// Synthetic spec implied by a run config.
SyntheticSpec synthetic_spec(const RunConfig& cfg);
Tokenizer build_tokenizer(const RunConfig& cfg);
// Loads, samples and tokenizes the configured dataset. Throws DataError.
std::vector<Sample> load_samples(const RunConfig& cfg, const Tokenizer& tokenizer);
std::vector<Sample> samples_from_synthetic(const SyntheticDataset& ds, const Tokenizer& tokenizer, int max_text_len);

class AdamW {
 public:
  explicit AdamW(const OptimizerConfig& cfg) : cfg_(cfg) {}
  // One update of the given parameters from their accumulated gradients.
  // Returns the pre-clip global gradient norm.
  double step(const std::vector<nn::Parameter*>& params);
  int steps() const { return t_; }

  struct Moments {
    std::vector<double> m, v;
  };
  std::map<std::string, Moments>& state() { return state_; }
  const std::map<std::string, Moments>& state() const { return state_; }
  void set_steps(int t) { t_ = t; }

 private:
  OptimizerConfig cfg_;
  int t_ = 0;
  std::map<std::string, Moments> state_;
};

struct TrainResult {
  std::vector<double> step_losses;
  std::vector<double> epoch_losses;
  std::map<nn::ParamGroup, std::uint64_t> checksums_before;
  std::map<nn::ParamGroup, std::uint64_t> checksums_after;
};

struct TrainHooks {
  std::function<void(int epoch, double mean_loss)> on_epoch;
  std::function<void(int step, double loss)> on_step;
};

class Trainer {
 public:
  Trainer(const RunConfig& cfg, GroundingModel& model, const std::vector<Sample>& samples);

  // Throws NumericalError (naming the sample) on a non-finite loss.
  double run_epoch(TrainResult* log = nullptr, const TrainHooks& hooks = {});
  TrainResult run(const TrainHooks& hooks = {});

  int epoch() const { return epoch_; }
  void set_epoch(int e) { epoch_ = e; }
  AdamW& optimizer() { return optim_; }
  const AdamW& optimizer() const { return optim_; }
  nn::Rng& rng() { return rng_; }
  const std::vector<nn::Parameter*>& trainable() const { return trainable_; }

 private:
  const EncodedInputs& inputs(std::size_t i);

  RunConfig cfg_;
  GroundingModel& model_;
  const std::vector<Sample>& samples_;
  AdamW optim_;
  nn::Rng rng_;
  int epoch_ = 0;
  std::vector<nn::Parameter*> trainable_;
  bool cache_backbone_;
  std::vector<std::unique_ptr<EncodedInputs>> cache_;
};

// ---- checkpoints ------------------------------------------------------------

struct LoadedCheckpoint {
  RunConfig config;
  std::vector<std::string> vocabulary;
  std::unique_ptr<GroundingModel> model;
  int epoch = 0;
  int optimizer_steps = 0;
  std::map<std::string, AdamW::Moments> optimizer_state;
  std::string rng_state;

  Tokenizer tokenizer() const { return Tokenizer(vocabulary); }
};

void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg, const Tokenizer& tokenizer,
                     const GroundingModel& model, const Trainer* trainer = nullptr);
// Throws DataError for a corrupt or incompatible file, including frozen
// parameter checksums that disagree with the header.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// ---- evaluation -------------------------------------------------------------

struct Prediction {
  SpatioTemporalTube tube;
  std::vector<BoundingBox> frame_boxes;  // best query per frame, every frame
  TemporalDistributions distributions;
};

using Predictor = std::function<Prediction(const Sample&)>;

Predictor model_predictor(const GroundingModel& model);
Prediction predict(const GroundingModel& model, const Sample& sample);

struct EvalResult {
  EvalReport overall;
  std::map<SentenceKind, EvalReport> by_kind;
  std::vector<SampleResult> samples;
  nlohmann::json to_json() const;
};

// Pointing-game hits are recorded for single-frame annotations. Throws
// std::invalid_argument on an empty sample set.
EvalResult evaluate(const std::vector<Sample>& samples, const Predictor& predictor);

// ---- inference / export -----------------------------------------------------

nlohmann::json tube_to_json(const SpatioTemporalTube& tube, const std::string& video_id, const std::string& caption,
                            int image_width, int image_height, const TemporalDistributions* dists = nullptr);
SpatioTemporalTube tube_from_json(const nlohmann::json& j);

// One PPM per tube frame with the box outline drawn. Throws DataError for an
// empty tube or frames outside the clip.
std::vector<std::filesystem::path> visualize(const SpatioTemporalTube& tube, const VideoClip& clip,
                                             const std::filesystem::path& out_dir);
// Inclusive pixel rectangle a box is drawn at.
std::array<int, 4> box_pixel_rect(const BoundingBox& b, int width, int height);

// The cumulative five-row toggle ladder, first row fully frozen/no temporal.
std::vector<RunConfig> ablation_matrix(const RunConfig& base);
std::vector<std::string> ablation_row_names();

}  // namespace stvg
