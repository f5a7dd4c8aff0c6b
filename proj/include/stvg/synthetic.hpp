#pragma once

// Moving-shapes videos with analytic ground-truth tubes.
//
// Each video holds one target shape, visible only inside its interval and
// moving per its motion kind, plus 0-2 distractors that never share the
// target's (color, shape) pair. Captions read "the <color> <shape> moves
// <direction>" or "the <color> <shape> stays still".

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "stvg/backbones.hpp"
#include "stvg/core_types.hpp"
#include "stvg/data_io.hpp"

namespace stvg {

enum class Motion { Left, Right, Up, Down, Still };
inline constexpr Motion kAllMotions[] = {Motion::Left, Motion::Right, Motion::Up, Motion::Down, Motion::Still};
std::string_view to_string(Motion m);

struct NamedColor {
  std::string name;
  std::array<double, 3> rgb;
};

struct SyntheticSpec {
  int n_videos = 16;
  int num_frames = 16;
  int height = 64;
  int width = 64;
  std::vector<NamedColor> colors = default_colors();
  std::vector<std::string> shapes = {"square", "circle", "triangle"};
  std::vector<Motion> motions = {kAllMotions[0], kAllMotions[1], kAllMotions[2], kAllMotions[3], kAllMotions[4]};
  // Allowed (color index, shape index) target pairs; empty = every pair.
  std::vector<std::pair<int, int>> target_pairs;
  int min_window = 4;  // target visibility window, frames
  int max_window = 12;
  int max_distractors = 2;
  double object_size = 14.0;  // pixels
  double speed = 1.5;         // pixels per frame
  bool strict = true;
  std::uint64_t seed = 0;

  static std::vector<NamedColor> default_colors();
  // Throws ConfigError on an inconsistent spec (T < 2 under strict intervals,
  // empty vocabularies, windows that do not fit).
  void validate() const;
};

struct SyntheticObject {
  int color = 0;
  int shape = 0;
  Motion motion = Motion::Still;
  double x0 = 0, y0 = 0;  // pixel center at its first visible frame
  int first = 0, last = 0;
  // Pixel center at frame t.
  std::pair<double, double> center(int t, double speed) const;
};

struct SyntheticVideo {
  VideoClip clip;
  GroundingAnnotation annotation;
  std::vector<SyntheticObject> objects;  // objects[0] is the target
};

struct SyntheticDataset {
  SyntheticSpec spec;
  DatasetManifest manifest;
  std::vector<SyntheticVideo> videos;
};

SyntheticDataset generate_synthetic(const SyntheticSpec& spec);

// Words used by captions, in a fixed order.
std::vector<std::string> synthetic_vocabulary(const SyntheticSpec& spec);
Tokenizer synthetic_tokenizer(const SyntheticSpec& spec);

std::string synthetic_caption(const SyntheticSpec& spec, int color, int shape, Motion m);

// Pairs with (color + shape) % modulus == residue, for vocabulary splits.
std::vector<std::pair<int, int>> pair_split(const SyntheticSpec& spec, int modulus, int residue, bool keep);

// Frame directories, manifest.json and vocab.txt under `dir`.
void save_synthetic(const std::filesystem::path& dir, const SyntheticDataset& ds);

// Portable RNG helpers (identical streams on every platform).
double uniform01(std::uint64_t& state);
int uniform_int(std::uint64_t& state, int lo, int hi);  // inclusive

}  // namespace stvg
