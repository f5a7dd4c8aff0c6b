#include "stvg/nn.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace stvg::nn {

std::string_view to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::VisionBackbone: return "vision_backbone";
    case ParamGroup::TextBackbone: return "text_backbone";
    case ParamGroup::EncoderTemporal: return "encoder_temporal";
    case ParamGroup::EncoderSpatial: return "encoder_spatial";
    case ParamGroup::QuerySelection: return "query_selection";
    case ParamGroup::DecoderTemporal: return "decoder_temporal";
    case ParamGroup::DecoderSpatial: return "decoder_spatial";
    case ParamGroup::Heads: return "heads";
  }
  return "unknown";
}

ParamGroup group_from_string(std::string_view s) {
  for (ParamGroup g : kAllGroups)
    if (to_string(g) == s) return g;
  throw std::invalid_argument("unknown parameter group: " + std::string(s));
}

ag::Var ParamStore::add(std::string name, ParamGroup group, int rows, int cols, std::vector<double> init) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  ag::Var v = ag::parameter(rows, cols, std::move(init));
  params_.push_back(Parameter{std::move(name), group, v});
  return v;
}

Parameter* ParamStore::find(std::string_view name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

const Parameter* ParamStore::find(std::string_view name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

std::uint64_t ParamStore::checksum(ParamGroup g) const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : params_) {
    if (p.group != g) continue;
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.var->value.data());
    const std::size_t n = p.var->value.size() * sizeof(double);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

std::size_t ParamStore::count(ParamGroup g) const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.group == g) n += p.var->size();
  return n;
}

std::size_t ParamStore::total_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.var->size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.var->grad.clear();
}

std::vector<double> xavier_uniform(int fan_in, int fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  return uniform_values(static_cast<std::size_t>(fan_in) * fan_out, bound, rng);
}

std::vector<double> uniform_values(std::size_t n, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

std::vector<double> filled(std::size_t n, double value) { return std::vector<double>(n, value); }

Linear::Linear(ParamStore& store, const std::string& name, ParamGroup group, int in_dim, int out_dim,
               Rng& rng)
    : in(in_dim), out(out_dim) {
  weight = store.add(name + ".weight", group, in, out, xavier_uniform(in, out, rng));
  bias = store.add(name + ".bias", group, 1, out, filled(out, 0.0));
}

void Linear::zero_init() {
  std::fill(weight->value.begin(), weight->value.end(), 0.0);
  std::fill(bias->value.begin(), bias->value.end(), 0.0);
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& name, ParamGroup group, int dim) {
  gamma = store.add(name + ".gamma", group, 1, dim, filled(dim, 1.0));
  beta = store.add(name + ".beta", group, 1, dim, filled(dim, 0.0));
}

Mlp::Mlp(ParamStore& store, const std::string& name, ParamGroup group, int in, int hidden, int out,
         int num_layers, Rng& rng) {
  if (num_layers < 1) throw std::invalid_argument("Mlp: num_layers must be >= 1");
  for (int i = 0; i < num_layers; ++i) {
    const int a = i == 0 ? in : hidden;
    const int b = i == num_layers - 1 ? out : hidden;
    layers.emplace_back(store, name + "." + std::to_string(i), group, a, b, rng);
  }
}

ag::Var Mlp::operator()(const ag::Var& x) const {
  ag::Var h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](h);
    if (i + 1 < layers.size()) h = ag::relu(h);
  }
  return h;
}

void Mlp::zero_last() { layers.back().zero_init(); }

MultiHeadAttention::MultiHeadAttention(ParamStore& store, const std::string& name, ParamGroup group,
                                       int dim, int num_heads, Rng& rng)
    : q_proj(store, name + ".q", group, dim, dim, rng),
      k_proj(store, name + ".k", group, dim, dim, rng),
      v_proj(store, name + ".v", group, dim, dim, rng),
      out_proj(store, name + ".o", group, dim, dim, rng),
      heads(num_heads) {}

ag::Var MultiHeadAttention::operator()(const ag::Var& query, const ag::Var& key, const ag::Var& value,
                                       const ag::AttentionLayout& layout, ag::AttentionProbs* probs) const {
  return out_proj(ag::attention(q_proj(query), k_proj(key), v_proj(value), heads, layout, probs));
}

FeedForward::FeedForward(ParamStore& store, const std::string& name, ParamGroup group, int dim,
                         int hidden, Rng& rng)
    : up(store, name + ".up", group, dim, hidden, rng), down(store, name + ".down", group, hidden, dim, rng) {}

}  // namespace stvg::nn
