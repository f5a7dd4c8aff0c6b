#pragma once

// Dataset adapters and the canonical on-disk annotation format.
//
// Supported layouts (see tests/fixtures for executable examples):
//   VidSTG     <root>/<split>.json   {"videos": [{vid, frame_count, width, height,
//              temporal_gt: {begin_fid, end_fid (exclusive)}, trajectories:
//              [[{tid, bbox: {xmin, ymin, xmax, ymax}}] per frame],
//              captions: [{target_id, description}], questions: [...]}]}
//   HC-STVG    <root>/v1|v2/<split>.json   {"<video>": {img_num, img_hw: [H, W],
//              st_frame, ed_frame (1-based, inclusive), bbox: [[x, y, w, h] per
//              interval frame], English}}
//   YouCook-Interactions   <root>/annotations.json   [{video_id, frame (0-based),
//              width, height, caption, box: [x, y, w, h]}]
// Frame indices are 0-based in memory.

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "stvg/core_types.hpp"
#include "stvg/image_io.hpp"

namespace stvg {

enum class DatasetKind { VidSTG, HCSTVG, YouCookInteractions, Synthetic };
std::string_view to_string(DatasetKind k);
DatasetKind dataset_kind_from_string(std::string_view s);

struct ManifestEntry {
  std::string video;  // frame directory, relative to the manifest root
  GroundingAnnotation annotation;
};

struct DatasetManifest {
  DatasetKind kind = DatasetKind::Synthetic;
  std::string split;
  std::vector<ManifestEntry> entries;
  int skipped = 0;
  std::vector<std::string> skip_reasons;
};

// Loaders validate every record; invalid ones are skipped, counted and their
// reasons logged. Missing files raise DataError; a malformed document raises
// DataError naming the offending field.
DatasetManifest load_vidstg(const std::filesystem::path& root, const std::string& split, bool strict = true);
DatasetManifest load_hcstvg(const std::filesystem::path& root, int version, const std::string& split,
                            bool strict = true);
DatasetManifest load_youcook_interactions(const std::filesystem::path& root);

// Inverse of each loader's document layout.
nlohmann::json serialize_vidstg(const DatasetManifest& m);
nlohmann::json serialize_hcstvg(const DatasetManifest& m);
nlohmann::json serialize_youcook(const DatasetManifest& m);

// Parsers over in-memory documents (used by the loaders).
DatasetManifest parse_vidstg(const nlohmann::json& doc, const std::string& split, bool strict = true);
DatasetManifest parse_hcstvg(const nlohmann::json& doc, const std::string& split, bool strict = true);
DatasetManifest parse_youcook(const nlohmann::json& doc);

// HC-STVG V2 publishes results on its validation split.
std::string hcstvg_split_name(int version, const std::string& split);

// Canonical annotation JSON: 1-based t_s/t_e, top-left pixel boxes.
nlohmann::json annotation_to_json(const GroundingAnnotation& a);
GroundingAnnotation annotation_from_json(const nlohmann::json& j, bool strict = true);
nlohmann::json manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& m);
DatasetManifest load_manifest(const std::filesystem::path& path);

// Equality up to `tol` on box coordinates; exact elsewhere.
bool annotations_equal(const GroundingAnnotation& a, const GroundingAnnotation& b, double tol = 1e-9);
bool manifests_equal(const DatasetManifest& a, const DatasetManifest& b, double tol = 1e-9);

// Uniform temporal sampling: index k maps to floor(k * T / n), n = min(T, max).
std::vector<int> sample_indices(int num_frames, int max_frames);
// Interval endpoints clamp inward onto sampled frames; sampled frame k takes
// the box of the source frame it shows. Throws DataError when the remapped
// interval is empty (or a single frame under strict mode).
GroundingAnnotation remap_annotation(const GroundingAnnotation& a, const std::vector<int>& indices, bool strict = true);

// Uniform temporal sampling plus shorter-side resize, without annotations.
VideoClip resample_clip(const std::vector<Image>& frames, int max_frames, int resolution);

struct SampledClip {
  VideoClip clip;
  GroundingAnnotation annotation;
};
// Samples up to max_frames frames, resizes the shorter side to `resolution`
// and remaps the annotation. Throws DataError for an empty video.
SampledClip sample_frames(const std::vector<Image>& frames, int max_frames, const GroundingAnnotation& annotation,
                          int resolution, bool strict = true);

// Frame directory of PPM files, read in lexicographic name order.
std::vector<Image> load_frame_dir(const std::filesystem::path& dir);
void save_frame_dir(const std::filesystem::path& dir, const VideoClip& clip);
VideoClip clip_from_images(const std::vector<Image>& frames);

}  // namespace stvg
