#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "stvg/harness.hpp"

namespace stvg {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'S', 'T', 'V', 'G', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

struct Blob {
  std::string name;
  int rows, cols;
  const std::vector<double>* data;
};

}  // namespace

void save_checkpoint(const fs::path& path, const RunConfig& cfg, const Tokenizer& tokenizer, const GroundingModel& model,
                     const Trainer* trainer) {
  std::vector<Blob> blobs;
  for (const auto& p : model.params().all()) blobs.push_back({p.name, p.var->rows, p.var->cols, &p.var->value});
  json header;
  header["format"] = "stvg-checkpoint";
  header["config"] = cfg.to_json();
  header["vocabulary"] = tokenizer.vocabulary();
  header["epoch"] = trainer ? trainer->epoch() : 0;
  json sums = json::object();
  for (auto g : nn::kAllGroups) sums[std::string(nn::to_string(g))] = hex64(model.params().checksum(g));
  header["checksums"] = sums;
  if (trainer) {
    header["optimizer_steps"] = trainer->optimizer().steps();
    std::ostringstream rs;
    rs << const_cast<Trainer*>(trainer)->rng();
    header["rng_state"] = rs.str();
    for (const auto& [name, mom] : trainer->optimizer().state()) {
      blobs.push_back({"adam.m/" + name, 1, static_cast<int>(mom.m.size()), &mom.m});
      blobs.push_back({"adam.v/" + name, 1, static_cast<int>(mom.v.size()), &mom.v});
    }
  }
  json tensors = json::array();
  for (const auto& b : blobs) tensors.push_back({{"name", b.name}, {"rows", b.rows}, {"cols", b.cols}});
  header["tensors"] = std::move(tensors);

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  const std::string text = header.dump();
  const std::uint64_t len = text.size();
  out.write(kMagic, sizeof kMagic);
  out.write(reinterpret_cast<const char*>(&kVersion), sizeof kVersion);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(len));
  for (const auto& b : blobs)
    out.write(reinterpret_cast<const char*>(b.data->data()), static_cast<std::streamsize>(b.data->size() * sizeof(double)));
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw DataError(path.string() + ": not a checkpoint");
  if (version != kVersion) throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  if (len > (1ull << 30)) throw DataError(path.string() + ": corrupt header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError(path.string() + ": truncated header");

  LoadedCheckpoint ck;
  json header;
  try {
    header = json::parse(text);
    ck.config = RunConfig::from_json(header.at("config"));
    ck.vocabulary = header.at("vocabulary").get<std::vector<std::string>>();
    ck.epoch = header.at("epoch").get<int>();
    ck.optimizer_steps = header.value("optimizer_steps", 0);
    ck.rng_state = header.value("rng_state", std::string());
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": bad header: " + e.what());
  }
  ck.model = std::make_unique<GroundingModel>(ck.config.model, ck.config.seed);

  for (const json& t : header.at("tensors")) {
    const std::string name = t.at("name").get<std::string>();
    const int rows = t.at("rows").get<int>(), cols = t.at("cols").get<int>();
    std::vector<double> data(static_cast<std::size_t>(rows) * cols);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!in) throw DataError(path.string() + ": truncated tensor " + name);
    if (name.rfind("adam.m/", 0) == 0) {
      ck.optimizer_state[name.substr(7)].m = std::move(data);
    } else if (name.rfind("adam.v/", 0) == 0) {
      ck.optimizer_state[name.substr(7)].v = std::move(data);
    } else {
      nn::Parameter* p = ck.model->params().find(name);
      if (!p) throw DataError(path.string() + ": unknown parameter " + name);
      if (p->var->rows != rows || p->var->cols != cols) throw DataError(path.string() + ": shape mismatch for " + name);
      p->var->value = std::move(data);
    }
  }
  for (auto g : nn::kAllGroups) {
    const std::string key(nn::to_string(g));
    if (header.at("checksums").value(key, std::string()) != hex64(ck.model->params().checksum(g)))
      throw DataError(path.string() + ": checksum mismatch for group " + key);
  }
  return ck;
}

}  // namespace stvg
