#include "stvg/backbones.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "stvg/positional.hpp"

namespace stvg {

namespace {
constexpr int kPatch = 8;
}

int VisualFeatureMap::positions_per_frame() const {
  int s = 0;
  for (const auto& [h, w] : level_shapes) s += h * w;
  return s;
}

int VisualFeatureMap::level_of(int position) const {
  for (int l = static_cast<int>(level_start_index.size()) - 1; l >= 0; --l)
    if (position >= level_start_index[l]) return l;
  return 0;
}

std::pair<double, double> VisualFeatureMap::reference_point(int position) const {
  const int l = level_of(position);
  const auto [h, w] = level_shapes[l];
  const int local = position - level_start_index[l];
  const int y = local / w, x = local % w;
  return {(x + 0.5) / w, (y + 0.5) / h};
}

void VisualFeatureMap::validate() const {
  if (level_shapes.empty() || level_shapes.size() != level_start_index.size())
    throw ConfigError("feature map: level metadata inconsistent");
  int offset = 0;
  for (std::size_t l = 0; l < level_shapes.size(); ++l) {
    if (level_start_index[l] != offset) throw ConfigError("feature map: level start offsets inconsistent");
    offset += level_shapes[l].first * level_shapes[l].second;
  }
  const int S = positions_per_frame();
  if (!features || features->rows != num_frames * S) throw ConfigError("feature map: row count != T * S");
  if (!ignore_mask.empty() && ignore_mask.size() != static_cast<std::size_t>(num_frames * S))
    throw ConfigError("feature map: mask size != T * S");
}

std::vector<std::pair<int, int>> pyramid_shapes(int height, int width, int n_levels) {
  std::vector<std::pair<int, int>> shapes;
  int h = height / kPatch, w = width / kPatch;
  for (int l = 0; l < n_levels; ++l) {
    if (h < 1 || w < 1)
      throw ConfigError("frame " + std::to_string(height) + "x" + std::to_string(width) +
                        " is smaller than the coarsest stride " + std::to_string(kPatch << (n_levels - 1)));
    shapes.emplace_back(h, w);
    h /= 2;
    w /= 2;
  }
  return shapes;
}

// ---------------------------------------------------------------------------

Tokenizer::Tokenizer(std::vector<std::string> vocabulary) : vocab_(std::move(vocabulary)) {
  if (vocab_.empty() || vocab_.front() != kPad) vocab_.insert(vocab_.begin(), std::string(kPad));
  for (std::size_t i = 0; i < vocab_.size(); ++i) {
    if (!index_.emplace(vocab_[i], static_cast<int>(i)).second)
      throw TokenizerError("duplicate vocabulary entry: " + vocab_[i]);
  }
}

Tokenizer Tokenizer::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocabulary file " + path.string());
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
    if (!line.empty()) words.push_back(line);
  }
  return Tokenizer(std::move(words));
}

void Tokenizer::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write vocabulary file " + path.string());
  for (const auto& w : vocab_) out << w << '\n';
}

std::vector<std::string> Tokenizer::split_words(std::string_view text) {
  std::vector<std::string> words;
  std::istringstream ss{std::string(text)};
  std::string w;
  while (ss >> w) {
    std::string lower;
    for (char c : w) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    auto is_word = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
    const auto b = std::find_if(lower.begin(), lower.end(), is_word);
    const auto e = std::find_if(lower.rbegin(), lower.rend(), is_word).base();
    if (b < e) words.emplace_back(b, e);
  }
  return words;
}

bool Tokenizer::contains(std::string_view word) const { return index_.count(std::string(word)) != 0; }

TextPrompt Tokenizer::encode(std::string_view text, int max_len) const {
  TextPrompt p;
  p.raw_text = std::string(text);
  for (const auto& w : split_words(text)) {
    auto it = index_.find(w);
    if (it == index_.end()) throw TokenizerError("word not in vocabulary: '" + w + "'");
    if (max_len > 0 && static_cast<int>(p.tokens.size()) >= max_len) break;
    p.tokens.push_back(it->second);
  }
  if (p.tokens.empty()) throw TokenizerError("prompt has no tokens: '" + std::string(text) + "'");
  return p;
}

// ---------------------------------------------------------------------------

VisionBackbone::VisionBackbone(nn::ParamStore& store, const ModelConfig& cfg, nn::Rng& rng)
    : d_model_(cfg.d_model), n_levels_(cfg.n_levels) {
  const auto g = nn::ParamGroup::VisionBackbone;
  const int c = cfg.vision_channels;
  patch_embed_ = nn::Linear(store, "vision.patch_embed", g, kPatch * kPatch * 3, c, rng);
  for (int l = 1; l < n_levels_; ++l)
    downsample_.emplace_back(store, "vision.down." + std::to_string(l), g, 4 * c, c, rng);
  for (int l = 0; l < n_levels_; ++l) {
    level_proj_.emplace_back(store, "vision.proj." + std::to_string(l), g, c, d_model_, rng);
    level_norm_.emplace_back(store, "vision.norm." + std::to_string(l), g, d_model_);
  }
}

VisualFeatureMap VisionBackbone::encode(const VideoClip& video) const {
  const int T = video.num_frames();
  VisualFeatureMap map;
  map.num_frames = T;
  map.level_shapes = pyramid_shapes(video.height(), video.width(), n_levels_);

  const auto [h0, w0] = map.level_shapes[0];
  const int patch_dim = kPatch * kPatch * 3;
  std::vector<double> patches(static_cast<std::size_t>(T) * h0 * w0 * patch_dim);
  for (int t = 0; t < T; ++t)
    for (int py = 0; py < h0; ++py)
      for (int px = 0; px < w0; ++px) {
        double* dst = patches.data() + (static_cast<std::size_t>(t * h0 + py) * w0 + px) * patch_dim;
        for (int y = 0; y < kPatch; ++y)
          for (int x = 0; x < kPatch; ++x)
            for (int ch = 0; ch < 3; ++ch)
              *dst++ = video.pixel(t, py * kPatch + y, px * kPatch + x, ch) - 0.5;
      }

  std::vector<ag::Var> levels;
  ag::Var f = ag::relu(patch_embed_(ag::constant(T * h0 * w0, patch_dim, std::move(patches))));
  for (int l = 0; l < n_levels_; ++l) {
    if (l > 0) {
      const auto [ph, pw] = map.level_shapes[l - 1];
      f = ag::relu(downsample_[l - 1](ag::space_to_depth(f, T, ph, pw)));
    }
    levels.push_back(level_norm_[l](level_proj_[l](f)));
  }

  int offset = 0;
  for (const auto& [h, w] : map.level_shapes) {
    map.level_start_index.push_back(offset);
    offset += h * w;
  }
  const int S = offset;

  // Reorder from [level][t][pos] to [t][level][pos] and add the position code.
  std::vector<int> order(static_cast<std::size_t>(T) * S);
  int level_base = 0;
  for (int l = 0; l < n_levels_; ++l) {
    const int area = map.level_shapes[l].first * map.level_shapes[l].second;
    for (int t = 0; t < T; ++t)
      for (int p = 0; p < area; ++p) order[static_cast<std::size_t>(t) * S + map.level_start_index[l] + p] = level_base + t * area + p;
    level_base += T * area;
  }
  ag::Var stacked = ag::gather_rows(ag::concat_rows(levels), order);

  std::vector<double> pos(static_cast<std::size_t>(T) * S * d_model_);
  for (int p = 0; p < S; ++p) {
    const auto [rx, ry] = map.reference_point(p);
    const auto code = sine_position_2d(rx, ry, d_model_);
    for (int t = 0; t < T; ++t) std::copy(code.begin(), code.end(), pos.begin() + (static_cast<std::size_t>(t) * S + p) * d_model_);
  }
  map.features = ag::add(stacked, ag::constant(T * S, d_model_, std::move(pos)));
  map.ignore_mask.assign(static_cast<std::size_t>(T) * S, 0);
  return map;
}

// ---------------------------------------------------------------------------

TextEncoder::TextEncoder(nn::ParamStore& store, const ModelConfig& cfg, nn::Rng& rng)
    : d_model_(cfg.d_model), vocab_size_(cfg.vocab_size), max_len_(cfg.max_text_len) {
  const auto g = nn::ParamGroup::TextBackbone;
  embedding_ = store.add("text.embedding", g, vocab_size_, d_model_, nn::uniform_values(static_cast<std::size_t>(vocab_size_) * d_model_, 1.0, rng));
  for (int i = 0; i < cfg.text_layers; ++i) {
    const std::string n = "text.layer." + std::to_string(i);
    layers_.push_back(Layer{nn::LayerNorm(store, n + ".norm1", g, d_model_), nn::LayerNorm(store, n + ".norm2", g, d_model_),
                            nn::MultiHeadAttention(store, n + ".attn", g, d_model_, cfg.n_heads, rng),
                            nn::FeedForward(store, n + ".ffn", g, d_model_, cfg.ffn_dim, rng)});
  }
  final_norm_ = nn::LayerNorm(store, "text.final_norm", g, d_model_);
}

TextFeatures TextEncoder::encode(const TextPrompt& prompt, int pad_to) const {
  const int L = prompt.length();
  if (L < 1) throw TokenizerError("prompt has no tokens");
  for (int tok : prompt.tokens)
    if (tok < 0 || tok >= vocab_size_) throw TokenizerError("token id " + std::to_string(tok) + " outside vocabulary");
  const int total = std::max(L, pad_to);

  std::vector<int> ids(prompt.tokens);
  ids.resize(total, 0);
  TextFeatures out;
  out.pad_mask.assign(total, 0);
  for (int i = L; i < total; ++i) out.pad_mask[i] = 1;

  ag::Var x = ag::gather_rows(embedding_, ids);
  x = ag::add(x, ag::constant(total, d_model_, temporal_positional_encoding(total, d_model_)));
  ag::AttentionLayout layout = ag::single_group(total, total);
  layout.key_ignore = out.pad_mask;
  for (const auto& layer : layers_) {
    ag::Var h = layer.norm1(x);
    x = ag::add(x, layer.attn(h, h, h, layout));
    x = ag::add(x, layer.ffn(layer.norm2(x)));
  }
  out.features = final_norm_(x);
  return out;
}

}  // namespace stvg
