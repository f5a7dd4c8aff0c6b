#include "stvg/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <tuple>

#include "stvg/errors.hpp"

namespace stvg {
namespace {

std::uint64_t splitmix(std::uint64_t& s) {
  std::uint64_t z = (s += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::pair<double, double> direction(Motion m) {
  switch (m) {
    case Motion::Left: return {-1, 0};
    case Motion::Right: return {1, 0};
    case Motion::Up: return {0, -1};
    case Motion::Down: return {0, 1};
    case Motion::Still: return {0, 0};
  }
  return {0, 0};
}

bool inside(int shape, double dx, double dy, double half) {
  switch (shape % 3) {
    case 0: return std::abs(dx) <= half && std::abs(dy) <= half;
    case 1: return dx * dx + dy * dy <= half * half;
    default: return dy >= -half && dy <= half && std::abs(dx) <= 0.5 * (dy + half);
  }
}

// Start center so that the whole path over `frames` frames stays inside.
std::pair<double, double> place(std::uint64_t& rng, Motion m, int frames, const SyntheticSpec& s) {
  const auto [dx, dy] = direction(m);
  const double half = 0.5 * s.object_size;
  const double travel = s.speed * (frames - 1);
  auto pick = [&](double d, double extent) {
    double lo = half, hi = extent - half;
    if (d > 0) hi -= travel;
    if (d < 0) lo += travel;
    return lo + (hi - lo) * uniform01(rng);
  };
  return {pick(dx, s.width), pick(dy, s.height)};
}

bool overlaps(const SyntheticObject& a, const SyntheticObject& b, double speed, double size) {
  const int lo = std::max(a.first, b.first), hi = std::min(a.last, b.last);
  for (int t = lo; t <= hi; ++t) {
    const auto [ax, ay] = a.center(t, speed);
    const auto [bx, by] = b.center(t, speed);
    if (std::abs(ax - bx) < size + 2 && std::abs(ay - by) < size + 2) return true;
  }
  return false;
}

}  // namespace

double uniform01(std::uint64_t& state) { return static_cast<double>(splitmix(state) >> 11) * 0x1.0p-53; }

int uniform_int(std::uint64_t& state, int lo, int hi) {
  const auto span = static_cast<std::uint64_t>(hi - lo + 1);
  return lo + static_cast<int>(splitmix(state) % span);
}

std::string_view to_string(Motion m) {
  switch (m) {
    case Motion::Left: return "left";
    case Motion::Right: return "right";
    case Motion::Up: return "up";
    case Motion::Down: return "down";
    case Motion::Still: return "still";
  }
  return "still";
}

std::vector<NamedColor> SyntheticSpec::default_colors() {
  return {{"red", {0.9, 0.15, 0.15}},   {"green", {0.15, 0.8, 0.2}},  {"blue", {0.2, 0.3, 0.95}},
          {"yellow", {0.95, 0.9, 0.2}}, {"magenta", {0.9, 0.2, 0.85}}, {"cyan", {0.2, 0.85, 0.9}}};
}

void SyntheticSpec::validate() const {
  if (n_videos < 1) throw ConfigError("synthetic: n_videos must be >= 1");
  if (num_frames < 1 || (strict && num_frames < 2)) throw ConfigError("synthetic: strict intervals need T >= 2");
  if (colors.empty() || shapes.empty() || motions.empty()) throw ConfigError("synthetic: empty vocabulary");
  if (min_window < (strict ? 2 : 1) || max_window < min_window) throw ConfigError("synthetic: bad window range");
  if (min_window > num_frames) throw ConfigError("synthetic: window longer than the video");
  if (object_size + speed * (num_frames - 1) >= std::min(width, height))
    throw ConfigError("synthetic: objects cannot travel inside the frame");
  if (colors.size() * shapes.size() < 2 && max_distractors > 0)
    throw ConfigError("synthetic: distractors need a second (color, shape) pair");
  for (const auto& [c, s] : target_pairs)
    if (c < 0 || s < 0 || c >= static_cast<int>(colors.size()) || s >= static_cast<int>(shapes.size()))
      throw ConfigError("synthetic: target pair out of range");
}

std::pair<double, double> SyntheticObject::center(int t, double speed) const {
  const auto [dx, dy] = direction(motion);
  const double k = speed * (t - first);
  return {x0 + dx * k, y0 + dy * k};
}

std::string synthetic_caption(const SyntheticSpec& spec, int color, int shape, Motion m) {
  const std::string head = "the " + spec.colors.at(color).name + " " + spec.shapes.at(shape);
  if (m == Motion::Still) return head + " stays still";
  return head + " moves " + std::string(to_string(m));
}

std::vector<std::string> synthetic_vocabulary(const SyntheticSpec& spec) {
  std::vector<std::string> v = {"the", "moves", "stays", "still", "left", "right", "up", "down"};
  for (const auto& c : spec.colors) v.push_back(c.name);
  for (const auto& s : spec.shapes) v.push_back(s);
  return v;
}

Tokenizer synthetic_tokenizer(const SyntheticSpec& spec) {
  std::vector<std::string> v = {std::string(Tokenizer::kPad)};
  for (auto& w : synthetic_vocabulary(spec)) v.push_back(std::move(w));
  return Tokenizer(std::move(v));
}

std::vector<std::pair<int, int>> pair_split(const SyntheticSpec& spec, int modulus, int residue, bool keep) {
  std::vector<std::pair<int, int>> out;
  for (int c = 0; c < static_cast<int>(spec.colors.size()); ++c)
    for (int s = 0; s < static_cast<int>(spec.shapes.size()); ++s)
      if (((c + s) % modulus == residue) == keep) out.emplace_back(c, s);
  return out;
}

SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  SyntheticDataset ds;
  ds.spec = spec;
  ds.manifest.kind = DatasetKind::Synthetic;
  ds.manifest.split = "train";
  std::uint64_t rng = spec.seed * 0x2545F4914F6CDD1Dull + 1;

  std::vector<std::pair<int, int>> pairs = spec.target_pairs;
  if (pairs.empty()) pairs = pair_split(spec, 1, 0, true);
  const int nc = static_cast<int>(spec.colors.size()), ns = static_cast<int>(spec.shapes.size());
  const int T = spec.num_frames, W = spec.width, H = spec.height;
  const double half = 0.5 * spec.object_size;

  for (int v = 0; v < spec.n_videos; ++v) {
    std::vector<SyntheticObject> objs;
    SyntheticObject target;
    std::tie(target.color, target.shape) = pairs[uniform_int(rng, 0, static_cast<int>(pairs.size()) - 1)];
    target.motion = spec.motions[uniform_int(rng, 0, static_cast<int>(spec.motions.size()) - 1)];
    const int len = uniform_int(rng, spec.min_window, std::min(spec.max_window, T));
    target.first = uniform_int(rng, 0, T - len);
    target.last = target.first + len - 1;
    std::tie(target.x0, target.y0) = place(rng, target.motion, len, spec);
    objs.push_back(target);

    const int n_dis = uniform_int(rng, 0, spec.max_distractors);
    for (int k = 0; k < n_dis; ++k) {
      for (int attempt = 0; attempt < 32; ++attempt) {
        SyntheticObject d;
        do {
          d.color = uniform_int(rng, 0, nc - 1);
          d.shape = uniform_int(rng, 0, ns - 1);
        } while (d.color == target.color && d.shape == target.shape);
        d.motion = spec.motions[uniform_int(rng, 0, static_cast<int>(spec.motions.size()) - 1)];
        d.first = 0;
        d.last = T - 1;
        std::tie(d.x0, d.y0) = place(rng, d.motion, T, spec);
        bool clash = false;
        for (const auto& o : objs) clash = clash || overlaps(o, d, spec.speed, spec.object_size);
        if (!clash) {
          objs.push_back(d);
          break;
        }
      }
    }

    std::vector<double> pixels(static_cast<std::size_t>(T) * H * W * 3, 0.08);
    for (int t = 0; t < T; ++t) {
      // Distractors first so the target is never hidden.
      for (std::size_t i = objs.size(); i-- > 0;) {
        const SyntheticObject& o = objs[i];
        if (t < o.first || t > o.last) continue;
        const auto [cx, cy] = o.center(t, spec.speed);
        const auto& rgb = spec.colors[o.color].rgb;
        const int x_lo = std::max(0, static_cast<int>(std::floor(cx - half))), x_hi = std::min(W - 1, static_cast<int>(std::ceil(cx + half)));
        const int y_lo = std::max(0, static_cast<int>(std::floor(cy - half))), y_hi = std::min(H - 1, static_cast<int>(std::ceil(cy + half)));
        for (int y = y_lo; y <= y_hi; ++y)
          for (int x = x_lo; x <= x_hi; ++x)
            if (inside(o.shape, x + 0.5 - cx, y + 0.5 - cy, half)) {
              double* p = &pixels[((static_cast<std::size_t>(t) * H + y) * W + x) * 3];
              p[0] = rgb[0];
              p[1] = rgb[1];
              p[2] = rgb[2];
            }
      }
    }

    GroundingAnnotation a;
    char id[32];
    std::snprintf(id, sizeof id, "synth_%04d", v);
    a.video_id = id;
    a.caption = synthetic_caption(spec, target.color, target.shape, target.motion);
    a.sentence_kind = SentenceKind::Declarative;
    a.image_width = W;
    a.image_height = H;
    a.num_frames = T;
    a.interval = TemporalInterval(target.first, target.last, spec.strict);
    for (int t = target.first; t <= target.last; ++t) {
      const auto [cx, cy] = target.center(t, spec.speed);
      a.boxes[t] = BoundingBox{cx / W, cy / H, spec.object_size / W, spec.object_size / H};
    }
    a.validate();

    ds.manifest.entries.push_back({a.video_id, a});
    ds.videos.push_back({VideoClip(T, H, W, std::move(pixels)), std::move(a), std::move(objs)});
  }
  return ds;
}

void save_synthetic(const std::filesystem::path& dir, const SyntheticDataset& ds) {
  std::filesystem::create_directories(dir);
  for (const auto& v : ds.videos) save_frame_dir(dir / v.annotation.video_id, v.clip);
  save_manifest(dir / "manifest.json", ds.manifest);
  synthetic_tokenizer(ds.spec).save(dir / "vocab.txt");
}

}  // namespace stvg
