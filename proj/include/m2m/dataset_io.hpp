#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "m2m/config_json.hpp"
#include "m2m/encoders.hpp"
#include "m2m/params.hpp"
#include "m2m/tabular_csv.hpp"
#include "m2m/tensor_io.hpp"

namespace m2m {

namespace fs = std::filesystem;

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(IoError::Kind::kOpen, "cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw IoError(IoError::Kind::kWrite, "write failed: " + path.string());
}

inline std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(IoError::Kind::kOpen, "cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline Json read_json(const fs::path& path) {
  try {
    return Json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(IoError::Kind::kOpen, path.string() + ": invalid JSON: " + e.what());
  }
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(IoError::Kind::kWrite, "cannot create directory " + dir.string() + ": " + ec.message());
}

// On-disk dataset:
//   manifest.json       subject list with file paths, label and fold
//   tabular.csv         one row per subject, manifest order
//   subjects/*.m2mt     fMRI (1,H,W,D,T) and sMRI (1,H,W,D,1) tensors
struct StoredDataset {
  std::vector<VolumeSample> samples;
  std::vector<int> folds;  // -1 when unassigned
  Json generator;          // generator settings, or null
};

inline std::string subject_id(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "sub-%04zu", i);
  return buf;
}

inline void write_dataset(const fs::path& dir, const std::vector<VolumeSample>& samples,
                          const std::vector<int>& folds, const Json& generator = nullptr) {
  if (!folds.empty() && folds.size() != samples.size())
    throw ContractError("fold assignment must cover every subject");
  ensure_dir(dir / "subjects");
  Json subjects = Json::array();
  TabularTable tab;
  const std::size_t F = samples.empty() ? 0 : samples[0].tabular.size();
  for (std::size_t f = 0; f < F; ++f) tab.feature_names.push_back("f" + std::to_string(f + 1));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const VolumeSample& s = samples[i];
    if (s.tabular.size() != F) throw ContractError("subjects disagree on the tabular width");
    const std::string id = subject_id(i);
    const std::string fmri = "subjects/" + id + "_fmri.m2mt";
    const std::string smri = "subjects/" + id + "_smri.m2mt";
    write_tensor(dir / fmri, s.fmri);
    write_tensor(dir / smri, s.smri);
    tab.features.push_back(s.tabular);
    tab.labels.push_back(s.label);
    subjects.push_back(Json{{"id", id}, {"fmri", fmri}, {"smri", smri}, {"label", s.label},
                            {"fold", folds.empty() ? -1 : folds[i]}});
  }
  write_tabular_csv(dir / "tabular.csv", tab);
  Json manifest{{"format", "m2m-dataset"}, {"version", 1}, {"tabular", "tabular.csv"},
                {"generator", generator}, {"subjects", subjects}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline StoredDataset read_dataset(const fs::path& dir) {
  const Json manifest = read_json(dir / "manifest.json");
  try {
    if (manifest.at("format") != "m2m-dataset" || manifest.at("version") != 1)
      throw IoError(IoError::Kind::kBadVersion, (dir / "manifest.json").string() + ": not a version-1 dataset manifest");
    const TabularTable tab = load_tabular_csv(dir / manifest.at("tabular").get<std::string>());
    const Json& subjects = manifest.at("subjects");
    if (tab.rows() != subjects.size())
      throw IoError(IoError::Kind::kTruncated, "tabular.csv has " + std::to_string(tab.rows()) +
                                                   " rows for " + std::to_string(subjects.size()) + " subjects");
    StoredDataset out;
    out.generator = manifest.value("generator", Json(nullptr));
    for (std::size_t i = 0; i < subjects.size(); ++i) {
      const Json& s = subjects[i];
      const int label = s.at("label").get<int>();
      if (label != tab.labels[i])
        throw ContractError("subject " + s.at("id").get<std::string>() + ": manifest and tabular labels differ");
      out.samples.push_back(VolumeSample{read_tensor(dir / s.at("fmri").get<std::string>()),
                                         read_tensor(dir / s.at("smri").get<std::string>()), tab.features[i], label});
      out.folds.push_back(s.value("fold", -1));
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(IoError::Kind::kOpen, (dir / "manifest.json").string() + ": malformed manifest: " + e.what());
  }
}

// Checkpoint: one TensorFile per parameter plus manifest.json. Values are
// stored as float32, so a reload matches to float32 precision.
inline void save_checkpoint(const fs::path& dir, const ParamStore& params, const Json& meta = nullptr) {
  ensure_dir(dir);
  Json entries = Json::array();
  for (const auto& [name, value] : params) {
    const std::string file = name + ".m2mt";
    write_tensor(dir / file, value);
    entries.push_back(Json{{"name", name}, {"file", file}, {"dims", value.dims()}});
  }
  Json manifest{{"format", "m2m-checkpoint"}, {"version", 1}, {"meta", meta}, {"params", entries}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline ParamStore load_checkpoint(const fs::path& dir, Json* meta = nullptr) {
  const Json manifest = read_json(dir / "manifest.json");
  try {
    if (manifest.at("format") != "m2m-checkpoint" || manifest.at("version") != 1)
      throw IoError(IoError::Kind::kBadVersion, (dir / "manifest.json").string() + ": not a version-1 checkpoint");
    ParamStore out;
    for (const Json& e : manifest.at("params")) {
      Tensor t = read_tensor(dir / e.at("file").get<std::string>());
      if (t.dims() != e.at("dims").get<Shape>())
        throw IoError(IoError::Kind::kTruncated, "checkpoint tensor " + e.at("name").get<std::string>() +
                                                     " does not match its manifest dims");
      out.add(e.at("name").get<std::string>(), std::move(t));
    }
    if (meta) *meta = manifest.value("meta", Json(nullptr));
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(IoError::Kind::kOpen, (dir / "manifest.json").string() + ": malformed manifest: " + e.what());
  }
}

}  // namespace m2m
