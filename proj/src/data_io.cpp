#include "stvg/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "stvg/errors.hpp"
#include "stvg/logging.hpp"

namespace stvg {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct SchemaError : DataError {
  using DataError::DataError;
};

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// Required field of type T; schema violations name the field.
template <class T>
T field(const json& j, const char* name, const std::string& where) {
  if (!j.is_object() || !j.contains(name)) throw SchemaError(where + ": missing field '" + name + "'");
  try {
    return j.at(name).get<T>();
  } catch (const json::exception&) {
    throw SchemaError(where + ": field '" + name + "' has the wrong type");
  }
}

const json& sub(const json& j, const char* name, const std::string& where) {
  if (!j.is_object() || !j.contains(name)) throw SchemaError(where + ": missing field '" + name + "'");
  return j.at(name);
}

void skip(DatasetManifest& m, const std::string& reason) {
  ++m.skipped;
  m.skip_reasons.push_back(reason);
  log::warn("skipping record: " + reason);
}

CornerBox corner_of(const BoundingBox& b, int w, int h) { return box_center_to_corner(b, w, h); }

}  // namespace

std::string_view to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::VidSTG: return "vidstg";
    case DatasetKind::HCSTVG: return "hcstvg";
    case DatasetKind::YouCookInteractions: return "youcook_interactions";
    case DatasetKind::Synthetic: return "synthetic";
  }
  return "synthetic";
}

DatasetKind dataset_kind_from_string(std::string_view s) {
  if (s == "vidstg") return DatasetKind::VidSTG;
  if (s == "hcstvg") return DatasetKind::HCSTVG;
  if (s == "youcook_interactions") return DatasetKind::YouCookInteractions;
  if (s == "synthetic") return DatasetKind::Synthetic;
  throw DataError("unknown dataset kind: " + std::string(s));
}

// ---- VidSTG -----------------------------------------------------------------

DatasetManifest parse_vidstg(const json& doc, const std::string& split, bool strict) {
  DatasetManifest m;
  m.kind = DatasetKind::VidSTG;
  m.split = split;
  const json& videos = sub(doc, "videos", "vidstg");
  if (!videos.is_array()) throw DataError("vidstg: field 'videos' must be an array");
  for (std::size_t i = 0; i < videos.size(); ++i) {
    const json& v = videos[i];
    const std::string where = "vidstg video " + std::to_string(i);
    const auto vid = field<std::string>(v, "vid", where);
    const int frame_count = field<int>(v, "frame_count", where);
    const int width = field<int>(v, "width", where);
    const int height = field<int>(v, "height", where);
    const json& tgt = sub(v, "temporal_gt", where);
    const int begin = field<int>(tgt, "begin_fid", where + ".temporal_gt");
    const int end = field<int>(tgt, "end_fid", where + ".temporal_gt");
    const json& traj = sub(v, "trajectories", where);
    if (!traj.is_array()) throw DataError(where + ": field 'trajectories' must be an array");

    auto add_sentences = [&](const char* key, SentenceKind kind) {
      if (!v.contains(key)) return;
      const json& list = v.at(key);
      if (!list.is_array()) throw DataError(where + ": field '" + key + "' must be an array");
      for (std::size_t s = 0; s < list.size(); ++s) {
        const std::string swhere = where + "." + key + "[" + std::to_string(s) + "]";
        const int target = field<int>(list[s], "target_id", swhere);
        GroundingAnnotation a;
        a.video_id = vid;
        a.caption = field<std::string>(list[s], "description", swhere);
        a.sentence_kind = kind;
        a.image_width = width;
        a.image_height = height;
        a.num_frames = frame_count;
        try {
          a.interval = TemporalInterval(begin, end - 1, strict);
          for (int t = a.interval.start(); t <= a.interval.end(); ++t) {
            if (t >= static_cast<int>(traj.size())) throw DataError("no trajectory entry for frame " + std::to_string(t));
            const json* hit = nullptr;
            for (const json& o : traj[t])
              if (field<int>(o, "tid", swhere) == target) hit = &o;
            if (!hit) throw DataError("target " + std::to_string(target) + " missing at frame " + std::to_string(t));
            const json& bb = sub(*hit, "bbox", swhere);
            const double x0 = field<double>(bb, "xmin", swhere), y0 = field<double>(bb, "ymin", swhere);
            const double x1 = field<double>(bb, "xmax", swhere), y1 = field<double>(bb, "ymax", swhere);
            a.boxes[t] = box_corner_to_center({x0, y0, x1 - x0, y1 - y0}, width, height);
          }
          a.validate();
        } catch (const SchemaError&) {
          throw;
        } catch (const std::exception& e) {
          skip(m, swhere + " (" + vid + "): " + e.what());
          continue;
        }
        m.entries.push_back({vid, std::move(a)});
      }
    };
    add_sentences("captions", SentenceKind::Declarative);
    add_sentences("questions", SentenceKind::Interrogative);
  }
  return m;
}

DatasetManifest load_vidstg(const fs::path& root, const std::string& split, bool strict) {
  return parse_vidstg(read_json(root / (split + ".json")), split, strict);
}

json serialize_vidstg(const DatasetManifest& m) {
  json videos = json::array();
  for (const auto& e : m.entries) {
    const GroundingAnnotation& a = e.annotation;
    const int n = std::max(a.num_frames, a.interval.end() + 1);
    json traj = json::array();
    for (int t = 0; t < n; ++t) {
      json frame = json::array();
      if (auto it = a.boxes.find(t); it != a.boxes.end()) {
        const CornerBox c = corner_of(it->second, a.image_width, a.image_height);
        frame.push_back({{"tid", 0}, {"bbox", {{"xmin", c.x}, {"ymin", c.y}, {"xmax", c.x + c.w}, {"ymax", c.y + c.h}}}});
      }
      traj.push_back(std::move(frame));
    }
    json v = {{"vid", a.video_id},
              {"frame_count", n},
              {"width", a.image_width},
              {"height", a.image_height},
              {"temporal_gt", {{"begin_fid", a.interval.start()}, {"end_fid", a.interval.end() + 1}}},
              {"trajectories", std::move(traj)},
              {"captions", json::array()},
              {"questions", json::array()}};
    const char* key = a.sentence_kind == SentenceKind::Interrogative ? "questions" : "captions";
    v[key].push_back({{"target_id", 0}, {"description", a.caption}});
    videos.push_back(std::move(v));
  }
  return {{"videos", std::move(videos)}};
}

// ---- HC-STVG ----------------------------------------------------------------

std::string hcstvg_split_name(int version, const std::string& split) {
  if (version == 2 && split == "test") return "val";
  return split;
}

DatasetManifest parse_hcstvg(const json& doc, const std::string& split, bool strict) {
  DatasetManifest m;
  m.kind = DatasetKind::HCSTVG;
  m.split = split;
  if (!doc.is_object()) throw DataError("hcstvg: document must be an object keyed by video name");
  for (const auto& [name, r] : doc.items()) {
    const std::string where = "hcstvg record " + name;
    const int img_num = field<int>(r, "img_num", where);
    const auto hw = field<std::vector<int>>(r, "img_hw", where);
    if (hw.size() != 2) throw DataError(where + ": field 'img_hw' must hold [height, width]");
    const int st = field<int>(r, "st_frame", where);
    const int ed = field<int>(r, "ed_frame", where);
    const auto boxes = field<std::vector<std::vector<double>>>(r, "bbox", where);
    GroundingAnnotation a;
    a.video_id = name;
    a.caption = field<std::string>(r, "English", where);
    a.image_height = hw[0];
    a.image_width = hw[1];
    a.num_frames = img_num;
    try {
      a.interval = TemporalInterval::from_paper_indexing(st, ed, strict);
      if (boxes.size() != static_cast<std::size_t>(a.interval.num_frames()))
        throw DataError("bbox count " + std::to_string(boxes.size()) + " does not match interval length");
      for (int k = 0; k < a.interval.num_frames(); ++k) {
        const auto& b = boxes[k];
        if (b.size() != 4) throw DataError("bbox entries must hold [x, y, w, h]");
        a.boxes[a.interval.start() + k] = box_corner_to_center({b[0], b[1], b[2], b[3]}, a.image_width, a.image_height);
      }
      a.validate();
    } catch (const std::exception& e) {
      skip(m, where + ": " + e.what());
      continue;
    }
    m.entries.push_back({name, std::move(a)});
  }
  return m;
}

DatasetManifest load_hcstvg(const fs::path& root, int version, const std::string& split, bool strict) {
  if (version != 1 && version != 2) throw DataError("hcstvg: version must be 1 or 2");
  const std::string name = hcstvg_split_name(version, split);
  DatasetManifest m = parse_hcstvg(read_json(root / ("v" + std::to_string(version)) / (name + ".json")), name, strict);
  return m;
}

json serialize_hcstvg(const DatasetManifest& m) {
  json doc = json::object();
  for (const auto& e : m.entries) {
    const GroundingAnnotation& a = e.annotation;
    json boxes = json::array();
    for (const auto& [t, b] : a.boxes) {
      const CornerBox c = corner_of(b, a.image_width, a.image_height);
      boxes.push_back({c.x, c.y, c.w, c.h});
    }
    const auto [st, ed] = interval_to_paper_indexing(a.interval);
    doc[a.video_id] = {{"img_num", a.num_frames},
                       {"img_hw", {a.image_height, a.image_width}},
                       {"st_frame", st},
                       {"ed_frame", ed},
                       {"bbox", std::move(boxes)},
                       {"English", a.caption}};
  }
  return doc;
}

// ---- YouCook-Interactions ----------------------------------------------------

DatasetManifest parse_youcook(const json& doc) {
  DatasetManifest m;
  m.kind = DatasetKind::YouCookInteractions;
  m.split = "test";
  if (!doc.is_array()) throw DataError("youcook_interactions: document must be an array");
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const json& r = doc[i];
    const std::string where = "youcook_interactions record " + std::to_string(i);
    GroundingAnnotation a;
    a.video_id = field<std::string>(r, "video_id", where);
    a.caption = field<std::string>(r, "caption", where);
    a.image_width = field<int>(r, "width", where);
    a.image_height = field<int>(r, "height", where);
    const int frame = field<int>(r, "frame", where);
    const auto b = field<std::vector<double>>(r, "box", where);
    try {
      if (b.size() != 4) throw DataError("box must hold [x, y, w, h]");
      a.interval = TemporalInterval(frame, frame, false);
      a.boxes[frame] = box_corner_to_center({b[0], b[1], b[2], b[3]}, a.image_width, a.image_height);
      a.validate();
    } catch (const std::exception& e) {
      skip(m, where + ": " + e.what());
      continue;
    }
    m.entries.push_back({a.video_id, std::move(a)});
  }
  return m;
}

DatasetManifest load_youcook_interactions(const fs::path& root) { return parse_youcook(read_json(root / "annotations.json")); }

json serialize_youcook(const DatasetManifest& m) {
  json doc = json::array();
  for (const auto& e : m.entries) {
    const GroundingAnnotation& a = e.annotation;
    const auto& [t, b] = *a.boxes.begin();
    const CornerBox c = corner_of(b, a.image_width, a.image_height);
    doc.push_back({{"video_id", a.video_id},
                   {"frame", t},
                   {"width", a.image_width},
                   {"height", a.image_height},
                   {"caption", a.caption},
                   {"box", {c.x, c.y, c.w, c.h}}});
  }
  return doc;
}

// ---- canonical --------------------------------------------------------------

json annotation_to_json(const GroundingAnnotation& a) {
  const auto [ts, te] = interval_to_paper_indexing(a.interval);
  json boxes = json::array();
  for (const auto& [t, b] : a.boxes) {
    const CornerBox c = corner_of(b, a.image_width, a.image_height);
    boxes.push_back({{"t", t + 1}, {"x", c.x}, {"y", c.y}, {"w", c.w}, {"h", c.h}});
  }
  return {{"video_id", a.video_id},
          {"caption", a.caption},
          {"sentence_kind", std::string(to_string(a.sentence_kind))},
          {"t_s", ts},
          {"t_e", te},
          {"width", a.image_width},
          {"height", a.image_height},
          {"num_frames", a.num_frames},
          {"boxes", std::move(boxes)}};
}

GroundingAnnotation annotation_from_json(const json& j, bool strict) {
  const std::string where = "annotation";
  GroundingAnnotation a;
  a.video_id = field<std::string>(j, "video_id", where);
  a.caption = field<std::string>(j, "caption", where);
  a.sentence_kind = sentence_kind_from_string(j.value("sentence_kind", std::string("unknown")));
  a.image_width = field<int>(j, "width", where);
  a.image_height = field<int>(j, "height", where);
  a.num_frames = j.value("num_frames", 0);
  a.interval = TemporalInterval::from_paper_indexing(field<int>(j, "t_s", where), field<int>(j, "t_e", where), strict);
  for (const json& b : sub(j, "boxes", where)) {
    const int t = field<int>(b, "t", where + ".boxes") - 1;
    a.boxes[t] = box_corner_to_center({field<double>(b, "x", where), field<double>(b, "y", where),
                                       field<double>(b, "w", where), field<double>(b, "h", where)},
                                      a.image_width, a.image_height);
  }
  a.validate();
  return a;
}

json manifest_to_json(const DatasetManifest& m) {
  json entries = json::array();
  for (const auto& e : m.entries) entries.push_back({{"video", e.video}, {"annotation", annotation_to_json(e.annotation)}});
  return {{"schema_version", 1}, {"dataset", std::string(to_string(m.kind))}, {"split", m.split}, {"entries", std::move(entries)}};
}

DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  m.kind = dataset_kind_from_string(field<std::string>(j, "dataset", "manifest"));
  m.split = j.value("split", std::string());
  const bool strict = m.kind != DatasetKind::YouCookInteractions;
  for (const json& e : sub(j, "entries", "manifest"))
    m.entries.push_back({field<std::string>(e, "video", "manifest entry"), annotation_from_json(sub(e, "annotation", "manifest entry"), strict)});
  return m;
}

void save_manifest(const fs::path& path, const DatasetManifest& m) { write_json(path, manifest_to_json(m)); }

DatasetManifest load_manifest(const fs::path& path) { return manifest_from_json(read_json(path)); }

bool annotations_equal(const GroundingAnnotation& a, const GroundingAnnotation& b, double tol) {
  if (a.video_id != b.video_id || a.caption != b.caption || !(a.interval == b.interval) ||
      a.sentence_kind != b.sentence_kind || a.image_width != b.image_width || a.image_height != b.image_height ||
      a.num_frames != b.num_frames || a.boxes.size() != b.boxes.size())
    return false;
  for (const auto& [t, x] : a.boxes) {
    auto it = b.boxes.find(t);
    if (it == b.boxes.end()) return false;
    const BoundingBox& y = it->second;
    if (std::abs(x.cx - y.cx) > tol || std::abs(x.cy - y.cy) > tol || std::abs(x.w - y.w) > tol || std::abs(x.h - y.h) > tol)
      return false;
  }
  return true;
}

bool manifests_equal(const DatasetManifest& a, const DatasetManifest& b, double tol) {
  if (a.kind != b.kind || a.entries.size() != b.entries.size()) return false;
  for (std::size_t i = 0; i < a.entries.size(); ++i)
    if (a.entries[i].video != b.entries[i].video || !annotations_equal(a.entries[i].annotation, b.entries[i].annotation, tol))
      return false;
  return true;
}

// ---- sampling ---------------------------------------------------------------

std::vector<int> sample_indices(int num_frames, int max_frames) {
  if (num_frames < 1) throw DataError("cannot sample an empty video");
  if (max_frames < 1) throw ConfigError("max_frames must be >= 1");
  const int n = std::min(num_frames, max_frames);
  std::vector<int> idx(n);
  for (int k = 0; k < n; ++k) idx[k] = static_cast<int>(static_cast<long long>(k) * num_frames / n);
  return idx;
}

GroundingAnnotation remap_annotation(const GroundingAnnotation& a, const std::vector<int>& indices, bool strict) {
  const int n = static_cast<int>(indices.size());
  int ks = -1, ke = -1;
  for (int k = 0; k < n; ++k) {
    if (ks < 0 && indices[k] >= a.interval.start()) ks = k;
    if (indices[k] <= a.interval.end()) ke = k;
  }
  if (ks < 0 || ke < ks || (strict && ke == ks))
    throw DataError("annotation " + a.video_id + ": interval empty after frame sampling");
  GroundingAnnotation r = a;
  r.interval = TemporalInterval(ks, ke, strict);
  r.num_frames = n;
  r.boxes.clear();
  for (int k = ks; k <= ke; ++k) r.boxes[k] = a.boxes.at(indices[k]);
  return r;
}

VideoClip clip_from_images(const std::vector<Image>& frames) {
  if (frames.empty()) throw DataError("no frames");
  const int w = frames[0].width, h = frames[0].height;
  std::vector<double> data;
  data.reserve(frames.size() * static_cast<std::size_t>(w) * h * 3);
  for (const Image& f : frames) {
    if (f.width != w || f.height != h) throw DataError("frames differ in size");
    data.insert(data.end(), f.rgb.begin(), f.rgb.end());
  }
  return VideoClip(static_cast<int>(frames.size()), h, w, std::move(data));
}

namespace {

VideoClip pick_and_resize(const std::vector<Image>& frames, const std::vector<int>& idx, int resolution) {
  const int w = frames[0].width, h = frames[0].height;
  int nw = w, nh = h;
  if (resolution > 0) {
    if (h <= w) {
      nh = resolution;
      nw = static_cast<int>(std::lround(static_cast<double>(w) * resolution / h));
    } else {
      nw = resolution;
      nh = static_cast<int>(std::lround(static_cast<double>(h) * resolution / w));
    }
  }
  std::vector<Image> picked;
  picked.reserve(idx.size());
  for (int i : idx) picked.push_back(resize_bilinear(frames[i], nw, nh));
  return clip_from_images(picked);
}

}  // namespace

VideoClip resample_clip(const std::vector<Image>& frames, int max_frames, int resolution) {
  return pick_and_resize(frames, sample_indices(static_cast<int>(frames.size()), max_frames), resolution);
}

SampledClip sample_frames(const std::vector<Image>& frames, int max_frames, const GroundingAnnotation& annotation,
                          int resolution, bool strict) {
  const std::vector<int> idx = sample_indices(static_cast<int>(frames.size()), max_frames);
  GroundingAnnotation remapped = remap_annotation(annotation, idx, strict);
  return {pick_and_resize(frames, idx, resolution), std::move(remapped)};
}

std::vector<Image> load_frame_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("frame directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".ppm") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<Image> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(read_ppm(f));
  if (out.empty()) throw DataError("no frames in " + dir.string());
  return out;
}

void save_frame_dir(const fs::path& dir, const VideoClip& clip) {
  fs::create_directories(dir);
  for (int t = 0; t < clip.num_frames(); ++t) {
    Image img(clip.width(), clip.height());
    std::copy_n(clip.frame(t), clip.frame_size(), img.rgb.begin());
    char name[32];
    std::snprintf(name, sizeof name, "%06d.ppm", t);
    write_ppm(dir / name, img);
  }
}

}  // namespace stvg
