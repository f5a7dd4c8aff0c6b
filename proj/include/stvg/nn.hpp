#pragma once

// Parameter registry and the small layer vocabulary shared by every model
// component (linear, layer norm, MLP, multi-head attention).

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "stvg/autograd.hpp"

namespace stvg::nn {

using Rng = std::mt19937_64;

// Freeze/fine-tune granularity. Every parameter belongs to exactly one group.
enum class ParamGroup : std::uint8_t {
  VisionBackbone,
  TextBackbone,
  EncoderTemporal,
  EncoderSpatial,
  QuerySelection,
  DecoderTemporal,
  DecoderSpatial,
  Heads,
};

inline constexpr ParamGroup kAllGroups[] = {
    ParamGroup::VisionBackbone, ParamGroup::TextBackbone,   ParamGroup::EncoderTemporal,
    ParamGroup::EncoderSpatial, ParamGroup::QuerySelection, ParamGroup::DecoderTemporal,
    ParamGroup::DecoderSpatial, ParamGroup::Heads,
};

std::string_view to_string(ParamGroup g);
ParamGroup group_from_string(std::string_view s);

struct Parameter {
  std::string name;
  ParamGroup group;
  ag::Var var;
};

class ParamStore {
 public:
  ag::Var add(std::string name, ParamGroup group, int rows, int cols, std::vector<double> init);

  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }
  Parameter* find(std::string_view name);
  const Parameter* find(std::string_view name) const;

  // FNV-1a over the raw bytes of every parameter in the group, in
  // registration order.
  std::uint64_t checksum(ParamGroup g) const;
  std::size_t count(ParamGroup g) const;
  std::size_t total_count() const;

  void zero_grad();

 private:
  std::vector<Parameter> params_;
};

std::vector<double> xavier_uniform(int fan_in, int fan_out, Rng& rng);
std::vector<double> uniform_values(std::size_t n, double bound, Rng& rng);
std::vector<double> filled(std::size_t n, double value);

struct Linear {
  ag::Var weight;  // [in, out]
  ag::Var bias;    // [1, out]
  int in = 0;
  int out = 0;

  Linear() = default;
  Linear(ParamStore& store, const std::string& name, ParamGroup group, int in, int out, Rng& rng);
  ag::Var operator()(const ag::Var& x) const { return ag::linear(x, weight, bias); }
  void zero_init();
};

struct LayerNorm {
  ag::Var gamma;
  ag::Var beta;

  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, ParamGroup group, int dim);
  ag::Var operator()(const ag::Var& x) const { return ag::layer_norm(x, gamma, beta); }
};

// Linear layers with ReLU between them (none after the last).
struct Mlp {
  std::vector<Linear> layers;

  Mlp() = default;
  Mlp(ParamStore& store, const std::string& name, ParamGroup group, int in, int hidden, int out,
      int num_layers, Rng& rng);
  ag::Var operator()(const ag::Var& x) const;
  // Zeroes the final layer so the MLP initially outputs exactly zero.
  void zero_last();
};

struct MultiHeadAttention {
  Linear q_proj, k_proj, v_proj, out_proj;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& store, const std::string& name, ParamGroup group, int dim,
                     int heads, Rng& rng);
  ag::Var operator()(const ag::Var& query, const ag::Var& key, const ag::Var& value,
                     const ag::AttentionLayout& layout, ag::AttentionProbs* probs = nullptr) const;
};

// Two-layer position-wise feed-forward block.
struct FeedForward {
  Linear up, down;

  FeedForward() = default;
  FeedForward(ParamStore& store, const std::string& name, ParamGroup group, int dim, int hidden,
              Rng& rng);
  ag::Var operator()(const ag::Var& x) const { return down(ag::relu(up(x))); }
};

}  // namespace stvg::nn
