#pragma once

// Activation datasets: in-memory model, the APGT v1 binary format,
// split management, and row selection.
//
// APGT v1 layout (little-endian, no padding):
//   "APGT" | u32 version=1 | u32 header length H | H bytes of JSON header
//   | n*d f32 row-major vectors | n i8 labels | n u16 task ids
// The JSON header carries {n, d, task_names, model, layer, token_position, dtype}.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <concepts>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "probegeo/error.hpp"
#include "probegeo/rng.hpp"

namespace probegeo {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr std::string_view kTokenStop = "stop_token";
inline constexpr std::string_view kTokenBeforeStop = "token_before_stop";

struct DatasetMeta {
  std::string model = "unknown";
  int layer = 0;
  std::string token_position = std::string(kTokenStop);
  std::string dtype = "f32";

  bool operator==(const DatasetMeta&) const = default;
};

struct ActivationDataset {
  RowMatrixF vectors;                   // n x d
  std::vector<std::int8_t> labels;      // +1 correct, -1 incorrect
  std::vector<std::uint16_t> task_ids;  // index into task_names
  std::vector<std::string> task_names;
  DatasetMeta meta;

  std::size_t rows() const { return static_cast<std::size_t>(vectors.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(vectors.cols()); }
  std::size_t task_count() const { return task_names.size(); }

  Matrix vectors_f64() const { return vectors.cast<double>(); }

  Vector labels_f64() const {
    Vector y(static_cast<Eigen::Index>(labels.size()));
    for (std::size_t i = 0; i < labels.size(); ++i) y[static_cast<Eigen::Index>(i)] = labels[i];
    return y;
  }

  int task_index(std::string_view name) const {
    for (std::size_t k = 0; k < task_names.size(); ++k)
      if (task_names[k] == name) return static_cast<int>(k);
    return -1;
  }

  bool operator==(const ActivationDataset& o) const {
    return vectors.rows() == o.vectors.rows() && vectors.cols() == o.vectors.cols() &&
           std::memcmp(vectors.data(), o.vectors.data(), sizeof(float) * vectors.size()) == 0 &&
           labels == o.labels && task_ids == o.task_ids && task_names == o.task_names &&
           meta == o.meta;
  }
};

// Throws DataError naming the first offending row.
inline void validate(const ActivationDataset& ds) {
  const auto n = ds.rows();
  if (n < 1) throw DataError("dataset has no rows (N >= 1 required)");
  if (ds.dim() < 1) throw DataError("dataset has zero dimension (d >= 1 required)");
  if (ds.labels.size() != n) throw DataError("label count does not match row count");
  if (ds.task_ids.size() != n) throw DataError("task id count does not match row count");
  if (ds.task_names.empty()) throw DataError("dataset has no task names");
  if (ds.task_names.size() > 65536) throw DataError("too many tasks for u16 task ids");
  for (std::size_t i = 0; i < n; ++i) {
    if (ds.labels[i] != 1 && ds.labels[i] != -1)
      throw DataError("row " + std::to_string(i) + ": label " + std::to_string(ds.labels[i]) +
                      " not in {-1,+1}");
    if (ds.task_ids[i] >= ds.task_names.size())
      throw DataError("row " + std::to_string(i) + ": task id " + std::to_string(ds.task_ids[i]) +
                      " out of range");
    for (Eigen::Index j = 0; j < ds.vectors.cols(); ++j)
      if (!std::isfinite(ds.vectors(static_cast<Eigen::Index>(i), j)))
        throw DataError("row " + std::to_string(i) + ": non-finite value at dimension " +
                        std::to_string(j));
  }
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xFF));
}
inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
}
inline std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}
inline std::uint16_t get_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

}  // namespace detail

inline nlohmann::json header_json(const ActivationDataset& ds) {
  nlohmann::json h;
  h["n"] = ds.rows();
  h["d"] = ds.dim();
  h["task_names"] = ds.task_names;
  h["model"] = ds.meta.model;
  h["layer"] = ds.meta.layer;
  h["token_position"] = ds.meta.token_position;
  h["dtype"] = "f32";
  return h;
}

inline std::string encode_dataset(const ActivationDataset& ds) {
  validate(ds);
  const std::string header = header_json(ds).dump();
  std::string out;
  out.reserve(12 + header.size() + ds.rows() * (ds.dim() * 4 + 3));
  out.append("APGT");
  detail::put_u32(out, 1);
  detail::put_u32(out, static_cast<std::uint32_t>(header.size()));
  out.append(header);
  for (Eigen::Index i = 0; i < ds.vectors.rows(); ++i)
    for (Eigen::Index j = 0; j < ds.vectors.cols(); ++j)
      detail::put_u32(out, std::bit_cast<std::uint32_t>(ds.vectors(i, j)));
  for (auto l : ds.labels) out.push_back(static_cast<char>(l));
  for (auto t : ds.task_ids) detail::put_u16(out, t);
  return out;
}

inline void write_dataset(const ActivationDataset& ds, const std::filesystem::path& path) {
  detail::write_file(path, encode_dataset(ds));
}

inline ActivationDataset decode_dataset(std::string_view bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 12) throw FormatError("file too short for APGT preamble");
  if (bytes.substr(0, 4) != "APGT")
    throw FormatError("bad magic \"" + std::string(bytes.substr(0, 4)) + "\" (expected APGT)");
  const auto version = detail::get_u32(p + 4);
  if (version != 1) throw FormatError("unsupported APGT version " + std::to_string(version));
  const std::size_t hlen = detail::get_u32(p + 8);
  if (bytes.size() < 12 + hlen) throw FormatError("truncated header");

  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(12, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("header is not valid JSON: ") + e.what());
  }
  ActivationDataset ds;
  std::size_t n = 0, d = 0;
  try {
    n = h.at("n").get<std::size_t>();
    d = h.at("d").get<std::size_t>();
    ds.task_names = h.at("task_names").get<std::vector<std::string>>();
    ds.meta.model = h.at("model").get<std::string>();
    ds.meta.layer = h.at("layer").get<int>();
    ds.meta.token_position = h.at("token_position").get<std::string>();
    ds.meta.dtype = h.at("dtype").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("header missing or mistyped field: ") + e.what());
  }
  if (ds.meta.dtype != "f32") throw FormatError("unsupported dtype " + ds.meta.dtype);

  const std::size_t row_bytes = d * 4 + 1 + 2;
  const std::size_t payload = bytes.size() - 12 - hlen;
  if (payload < n * row_bytes) {
    throw FormatError("truncated payload: header claims N=" + std::to_string(n) +
                      " but payload holds " + std::to_string(row_bytes ? payload / row_bytes : 0) +
                      " rows");
  }
  if (payload != n * row_bytes)
    throw FormatError("header/payload length mismatch: " + std::to_string(payload - n * row_bytes) +
                      " trailing bytes");

  const unsigned char* q = p + 12 + hlen;
  ds.vectors.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j, q += 4)
      ds.vectors(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          std::bit_cast<float>(detail::get_u32(q));
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<std::int8_t>(*q++);
  ds.task_ids.resize(n);
  for (std::size_t i = 0; i < n; ++i, q += 2) ds.task_ids[i] = detail::get_u16(q);
  validate(ds);
  return ds;
}

inline ActivationDataset read_dataset(const std::filesystem::path& path) {
  return decode_dataset(detail::read_file(path));
}

// ---------------------------------------------------------------------------
// Splits

enum class SplitTag : std::uint8_t { train = 0, validation = 1, calibration = 2, test = 3 };

inline constexpr std::array<SplitTag, 4> kAllSplitTags = {SplitTag::train, SplitTag::validation,
                                                          SplitTag::calibration, SplitTag::test};

inline std::string_view to_string(SplitTag t) {
  switch (t) {
    case SplitTag::train: return "train";
    case SplitTag::validation: return "validation";
    case SplitTag::calibration: return "calibration";
    case SplitTag::test: return "test";
  }
  return "?";
}

inline SplitTag split_tag_from_string(std::string_view s) {
  for (auto t : kAllSplitTags)
    if (to_string(t) == s) return t;
  throw ConfigError("unknown split tag '" + std::string(s) + "'");
}

using SplitFractions = std::map<SplitTag, double>;

struct SplitAssignment {
  std::uint64_t seed = 0;
  std::vector<SplitTag> tags;

  bool operator==(const SplitAssignment&) const = default;

  std::size_t count(SplitTag t) const {
    return static_cast<std::size_t>(std::count(tags.begin(), tags.end(), t));
  }
};

inline SplitFractions default_fractions() {
  return {{SplitTag::train, 0.7}, {SplitTag::validation, 0.15}, {SplitTag::test, 0.15}};
}

namespace detail {

// Largest-remainder apportionment: every count is floor or ceil of the exact share.
inline std::vector<std::size_t> apportion(std::size_t n, const std::vector<double>& fractions) {
  std::vector<std::size_t> counts(fractions.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < fractions.size(); ++k) {
    const double exact = fractions[k] * static_cast<double>(n);
    counts[k] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    assigned += counts[k];
    remainders.emplace_back(exact - static_cast<double>(counts[k]), k);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < n && r < remainders.size(); ++r, ++assigned)
    ++counts[remainders[r].second];
  return counts;
}

}  // namespace detail

inline SplitAssignment split(const ActivationDataset& ds, const SplitFractions& fractions,
                             std::uint64_t seed, bool stratify_by_task = true) {
  double total = 0.0;
  std::vector<SplitTag> tags;
  std::vector<double> fr;
  for (const auto& [tag, f] : fractions) {
    if (!(f >= 0.0)) throw ConfigError("split fraction for " + std::string(to_string(tag)) +
                                       " must be non-negative");
    total += f;
    if (f > 0.0) {
      tags.push_back(tag);
      fr.push_back(f);
    }
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw ConfigError("split fractions sum to " + std::to_string(total) + ", expected 1");

  std::vector<std::vector<std::size_t>> groups(stratify_by_task ? ds.task_count() : 1);
  for (std::size_t i = 0; i < ds.rows(); ++i)
    groups[stratify_by_task ? ds.task_ids[i] : 0].push_back(i);

  SplitAssignment out;
  out.seed = seed;
  out.tags.assign(ds.rows(), SplitTag::train);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    auto& rows = groups[g];
    if (rows.empty()) continue;
    if (rows.size() < tags.size()) {
      const std::string who = stratify_by_task ? "task '" + ds.task_names[g] + "'" : "dataset";
      throw DataError(who + " has " + std::to_string(rows.size()) + " rows but " +
                        std::to_string(tags.size()) + " nonempty split tags were requested");
    }
    auto rng = make_rng(seed, "split", g);
    shuffle_in_place(rows, rng);
    const auto counts = detail::apportion(rows.size(), fr);
    std::size_t pos = 0;
    for (std::size_t k = 0; k < tags.size(); ++k)
      for (std::size_t c = 0; c < counts[k]; ++c) out.tags[rows[pos++]] = tags[k];
  }
  return out;
}

inline nlohmann::json to_json(const SplitAssignment& s) {
  nlohmann::json j;
  j["seed"] = s.seed;
  auto& arr = j["tags"] = nlohmann::json::array();
  for (auto t : s.tags) arr.push_back(std::string(to_string(t)));
  return j;
}

inline SplitAssignment split_from_json(const nlohmann::json& j) {
  SplitAssignment s;
  try {
    s.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& t : j.at("tags")) s.tags.push_back(split_tag_from_string(t.get<std::string>()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad split sidecar: ") + e.what());
  }
  return s;
}

inline void write_split(const SplitAssignment& s, const std::filesystem::path& path) {
  detail::write_file(path, to_json(s).dump() + "\n");
}

inline SplitAssignment read_split(const std::filesystem::path& path) {
  try {
    return split_from_json(nlohmann::json::parse(detail::read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("split sidecar is not valid JSON: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Row selection

inline ActivationDataset select_rows(const ActivationDataset& ds,
                                     const std::vector<std::size_t>& rows) {
  if (rows.empty()) throw EmptySelectionError("selection is empty");
  ActivationDataset out;
  out.vectors.resize(static_cast<Eigen::Index>(rows.size()), ds.vectors.cols());
  out.labels.reserve(rows.size());
  out.task_ids.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.vectors.row(static_cast<Eigen::Index>(r)) = ds.vectors.row(static_cast<Eigen::Index>(rows[r]));
    out.labels.push_back(ds.labels[rows[r]]);
    out.task_ids.push_back(ds.task_ids[rows[r]]);
  }
  out.task_names = ds.task_names;
  out.meta = ds.meta;
  return out;
}

// Order-preserving selection by a predicate over (task id, split tag).
template <typename Pred>
  requires std::predicate<Pred, std::size_t, SplitTag>
ActivationDataset subset(const ActivationDataset& ds, const SplitAssignment& split, Pred&& pred) {
  if (split.tags.size() != ds.rows())
    throw DataError("split assignment covers " + std::to_string(split.tags.size()) +
                    " rows, dataset has " + std::to_string(ds.rows()));
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < ds.rows(); ++i)
    if (pred(static_cast<std::size_t>(ds.task_ids[i]), split.tags[i])) rows.push_back(i);
  if (rows.empty()) throw EmptySelectionError("subset predicate selected no rows");
  return select_rows(ds, rows);
}

// Selection by task id only.
template <typename Pred>
  requires std::predicate<Pred, std::size_t>
ActivationDataset subset(const ActivationDataset& ds, Pred&& pred) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < ds.rows(); ++i)
    if (pred(static_cast<std::size_t>(ds.task_ids[i]))) rows.push_back(i);
  if (rows.empty()) throw EmptySelectionError("subset predicate selected no rows");
  return select_rows(ds, rows);
}

// Concatenates datasets with matching d; task names are unified by name.
inline ActivationDataset merge_datasets(const std::vector<ActivationDataset>& parts) {
  if (parts.empty()) throw EmptySelectionError("no datasets to merge");
  ActivationDataset out;
  out.meta = parts.front().meta;
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p.dim() != parts.front().dim())
      throw DataError("cannot merge datasets of dimension " + std::to_string(parts.front().dim()) +
                      " and " + std::to_string(p.dim()));
    n += p.rows();
  }
  out.vectors.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(parts.front().dim()));
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.vectors.middleRows(r, p.vectors.rows()) = p.vectors;
    r += p.vectors.rows();
    for (std::size_t i = 0; i < p.rows(); ++i) {
      const auto& name = p.task_names[p.task_ids[i]];
      int k = out.task_index(name);
      if (k < 0) {
        out.task_names.push_back(name);
        k = static_cast<int>(out.task_names.size() - 1);
      }
      out.labels.push_back(p.labels[i]);
      out.task_ids.push_back(static_cast<std::uint16_t>(k));
    }
  }
  return out;
}

}  // namespace probegeo
