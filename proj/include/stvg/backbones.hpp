#pragma once

// Initial per-frame visual features and per-token text features.
//
// The vision encoder is a three-stage strided patch pyramid (strides 8, 16,
// 32, ...) with one projection to d_model per level plus a fixed 2-D sine
// position code. The text encoder is an embedding table, a fixed 1-D sine
// position code and a small pre-norm self-attention stack. Both are frozen by
// default and have no temporal mixing.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "stvg/autograd.hpp"
#include "stvg/core_types.hpp"
#include "stvg/nn.hpp"

namespace stvg {

struct VisualFeatureMap {
  ag::Var features;  // [T * S, d_model], row = t * S + level_start[l] + y * w_l + x
  int num_frames = 0;
  std::vector<std::pair<int, int>> level_shapes;  // (h_l, w_l)
  std::vector<int> level_start_index;
  std::vector<std::uint8_t> ignore_mask;  // [T * S], true = ignore

  int positions_per_frame() const;
  int level_of(int position) const;
  // Normalized grid center (x, y) of a within-frame position.
  std::pair<double, double> reference_point(int position) const;
  void validate() const;
};

struct TextFeatures {
  ag::Var features;                    // [L, d_model]
  std::vector<std::uint8_t> pad_mask;  // [L], true = padding
  int length() const { return static_cast<int>(pad_mask.size()); }
};

// Level shapes for a frame size: floor(H / 8) x floor(W / 8), halving per level.
std::vector<std::pair<int, int>> pyramid_shapes(int height, int width, int n_levels);

class Tokenizer {
 public:
  static constexpr std::string_view kPad = "<pad>";

  explicit Tokenizer(std::vector<std::string> vocabulary);
  // Newline-delimited token list; "<pad>" is inserted at id 0 when missing.
  static Tokenizer from_file(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  // Lowercase + whitespace split; punctuation at word ends is stripped.
  // Throws TokenizerError for out-of-vocabulary words or empty text.
  TextPrompt encode(std::string_view text, int max_len) const;
  static std::vector<std::string> split_words(std::string_view text);

  int size() const { return static_cast<int>(vocab_.size()); }
  int pad_id() const { return 0; }
  const std::vector<std::string>& vocabulary() const { return vocab_; }
  bool contains(std::string_view word) const;

 private:
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, int> index_;
};

class VisionBackbone {
 public:
  VisionBackbone() = default;
  VisionBackbone(nn::ParamStore& store, const ModelConfig& cfg, nn::Rng& rng);

  // Throws ConfigError if the frame is too small for the coarsest level.
  VisualFeatureMap encode(const VideoClip& video) const;

 private:
  int d_model_ = 0;
  int n_levels_ = 0;
  nn::Linear patch_embed_;
  std::vector<nn::Linear> downsample_;
  std::vector<nn::Linear> level_proj_;
  std::vector<nn::LayerNorm> level_norm_;
};

class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(nn::ParamStore& store, const ModelConfig& cfg, nn::Rng& rng);

  // pad_to > L appends padding tokens flagged in pad_mask.
  TextFeatures encode(const TextPrompt& prompt, int pad_to = 0) const;

 private:
  struct Layer {
    nn::LayerNorm norm1, norm2;
    nn::MultiHeadAttention attn;
    nn::FeedForward ffn;
  };
  int d_model_ = 0;
  int vocab_size_ = 0;
  int max_len_ = 0;
  ag::Var embedding_;
  std::vector<Layer> layers_;
  nn::LayerNorm final_norm_;
};

}  // namespace stvg
