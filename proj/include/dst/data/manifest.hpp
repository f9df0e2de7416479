#pragma once

// Manifest: one JSON object per line with id, label, length, dim and path
// (relative to the manifest), plus optional split and cue_mask (path of a
// one-byte-per-frame 0/1 file). Feature files hold little-endian float32,
// row-major length x dim, no header.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "dst/data/sample.hpp"
#include "dst/numcore/errors.hpp"
#include "json.hpp"

namespace dst::data {

namespace fs = std::filesystem;

inline constexpr std::size_t kDefaultMaxLength = 326;

inline void write_features(const fs::path& path, const Tensor& features) {
  std::vector<char> bytes(features.size() * 4);
  for (std::size_t i = 0; i < features.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(static_cast<float>(features[i]));
    for (int b = 0; b < 4; ++b) bytes[4 * i + b] = static_cast<char>((u >> (8 * b)) & 0xff);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot write feature file " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<char> read_bytes(const fs::path& path, const std::string& id) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("record '" + id + "': cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Tensor read_features(const fs::path& path, std::size_t length, std::size_t dim, const std::string& id) {
  const auto bytes = read_bytes(path, id);
  if (bytes.size() != length * dim * 4) {
    throw LoadError("record '" + id + "': " + path.string() + " holds " + std::to_string(bytes.size()) +
                    " bytes, expected " + std::to_string(length * dim * 4) + " for " + std::to_string(length) +
                    "x" + std::to_string(dim) + " float32");
  }
  Tensor t = Tensor::matrix(length, dim);
  for (std::size_t i = 0; i < length * dim; ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 * i + b])) << (8 * b);
    t[i] = static_cast<double>(std::bit_cast<float>(u));
  }
  return t;
}

/// Writes feature files (and cue masks when present) under `dir` plus a
/// manifest listing them. Returns the manifest path.
inline fs::path write_dataset(const fs::path& dir, const std::vector<Sample>& samples,
                              const std::string& manifest_name = "manifest.jsonl") {
  fs::create_directories(dir / "features");
  const fs::path manifest = dir / manifest_name;
  std::ofstream out(manifest, std::ios::trunc);
  if (!out) throw LoadError("cannot write manifest " + manifest.string());
  for (const auto& s : samples) {
    nlohmann::ordered_json rec;
    rec["id"] = s.id;
    rec["label"] = s.label;
    rec["length"] = s.valid;
    rec["dim"] = s.dim();
    const std::string rel = "features/" + s.id + ".f32";
    Tensor valid_rows = Tensor::matrix(s.valid, s.dim());
    std::copy(s.features.data(), s.features.data() + s.valid * s.dim(), valid_rows.data());
    write_features(dir / rel, valid_rows);
    rec["path"] = rel;
    if (!s.split.empty()) rec["split"] = s.split;
    if (!s.cue_mask.empty()) {
      const std::string cue = "features/" + s.id + ".cue";
      std::ofstream c(dir / cue, std::ios::binary | std::ios::trunc);
      c.write(reinterpret_cast<const char*>(s.cue_mask.data()), static_cast<std::streamsize>(s.valid));
      rec["cue_mask"] = cue;
    }
    out << rec.dump() << '\n';
  }
  return manifest;
}

struct LoadOptions {
  std::size_t max_length = kDefaultMaxLength;
  std::optional<std::size_t> expected_dim;
};

/// Reads every record of a manifest. Sequences longer than max_length are cut
/// from the end.
inline std::vector<Sample> load(const fs::path& manifest, const LoadOptions& opts = {}) {
  std::ifstream in(manifest);
  if (!in) throw LoadError("cannot open manifest " + manifest.string());
  const fs::path base = manifest.parent_path();
  std::vector<Sample> out;
  std::optional<std::size_t> dim = opts.expected_dim;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = manifest.string() + ":" + std::to_string(lineno);
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(where + ": malformed JSON (" + e.what() + ")");
    }
    Sample s;
    std::size_t length = 0, d = 0;
    std::string path;
    try {
      s.id = rec.at("id").get<std::string>();
      s.label = rec.at("label").get<std::size_t>();
      length = rec.at("length").get<std::size_t>();
      d = rec.at("dim").get<std::size_t>();
      path = rec.at("path").get<std::string>();
      if (rec.contains("split")) s.split = rec["split"].get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(where + ": bad record (" + e.what() + ")");
    }
    if (length == 0) throw LoadError("record '" + s.id + "': zero length");
    if (dim && d != *dim) {
      throw LoadError("record '" + s.id + "': feature dim " + std::to_string(d) + " does not match " +
                      std::to_string(*dim));
    }
    dim = d;
    Tensor full = read_features(base / path, length, d, s.id);
    const std::size_t keep = std::min(length, opts.max_length);
    if (keep < length) {
      Tensor cut = Tensor::matrix(keep, d);
      std::copy(full.data(), full.data() + keep * d, cut.data());
      full = std::move(cut);
    }
    s.features = std::move(full);
    s.valid = keep;
    if (rec.contains("cue_mask")) {
      const auto bytes = read_bytes(base / rec["cue_mask"].get<std::string>(), s.id);
      if (bytes.size() != length) throw LoadError("record '" + s.id + "': cue mask length mismatch");
      s.cue_mask.assign(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(keep));
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace dst::data
