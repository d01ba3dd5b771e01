#pragma once

// Domain data model shared by every module: error type, embedding matrices,
// geotagged image records, the "AEB1" embedding store and JSON Lines manifests.

#include <json.hpp>

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

namespace asymvpr {

enum class ErrorCode {
  BadMagic,
  VersionUnsupported,
  TruncatedPayload,
  CorruptFile,
  IoError,
  MissingField,
  DuplicateId,
  RowOutOfRange,
  ZeroVector,
  DimensionMismatch,
  EmptyGallery,
  UnknownPlace,
  NonFiniteInput,
  EmptySamples,
  NegativeVariance,
  EmptyBatch,
  BadDims,
  ZeroPreNorm,
  ShapeMismatch,
  BadStep,
  NonFiniteGrad,
  MissingRawFeature,
  BankMismatch,
  SeparationInfeasible,
  MissingCoordinates,
  MissingFrame,
  UnknownId,
  NoEvaluableQueries,
  NonFiniteEvaluation,
  KTooLarge,
  BadConfig,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::VersionUnsupported: return "VersionUnsupported";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::CorruptFile: return "CorruptFile";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::MissingField: return "MissingField";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::RowOutOfRange: return "RowOutOfRange";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::EmptyGallery: return "EmptyGallery";
    case ErrorCode::UnknownPlace: return "UnknownPlace";
    case ErrorCode::NonFiniteInput: return "NonFiniteInput";
    case ErrorCode::EmptySamples: return "EmptySamples";
    case ErrorCode::NegativeVariance: return "NegativeVariance";
    case ErrorCode::EmptyBatch: return "EmptyBatch";
    case ErrorCode::BadDims: return "BadDims";
    case ErrorCode::ZeroPreNorm: return "ZeroPreNorm";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::BadStep: return "BadStep";
    case ErrorCode::NonFiniteGrad: return "NonFiniteGrad";
    case ErrorCode::MissingRawFeature: return "MissingRawFeature";
    case ErrorCode::BankMismatch: return "BankMismatch";
    case ErrorCode::SeparationInfeasible: return "SeparationInfeasible";
    case ErrorCode::MissingCoordinates: return "MissingCoordinates";
    case ErrorCode::MissingFrame: return "MissingFrame";
    case ErrorCode::UnknownId: return "UnknownId";
    case ErrorCode::NoEvaluableQueries: return "NoEvaluableQueries";
    case ErrorCode::NonFiniteEvaluation: return "NonFiniteEvaluation";
    case ErrorCode::KTooLarge: return "KTooLarge";
    case ErrorCode::BadConfig: return "BadConfig";
  }
  return "Unknown";
}

/// Exception carrying a machine-checkable error code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

using Vector = std::vector<double>;

/// Dot product with four interleaved partial sums; every module shares this
/// summation order.
inline double dot(std::span<const double> a, std::span<const double> b) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  const std::size_t n = a.size();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

inline double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

/// Unit-length copy of `v`. Throws ZeroVector when the norm is below 1e-12.
inline Vector normalize(std::span<const double> v) {
  const double n = l2_norm(v);
  if (!(n > 1e-12)) throw Error(ErrorCode::ZeroVector, "cannot normalize a vector with norm <= 1e-12");
  Vector out(v.begin(), v.end());
  for (double& x : out) x /= n;
  return out;
}

/// Dense row-major block of `count` embeddings of dimension `dim`.
///
/// Values live in memory as doubles; the on-disk store keeps 32-bit floats.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;
  EmbeddingMatrix(std::size_t count, std::size_t dim, bool normalized = false)
      : count_(count), dim_(dim), normalized_(normalized), data_(count * dim, 0.0) {}
  EmbeddingMatrix(std::size_t count, std::size_t dim, Vector data, bool normalized)
      : count_(count), dim_(dim), normalized_(normalized), data_(std::move(data)) {
    if (data_.size() != count_ * dim_)
      throw Error(ErrorCode::DimensionMismatch, "payload size does not equal count*dim");
  }

  std::size_t count() const { return count_; }
  std::size_t dim() const { return dim_; }
  bool normalized() const { return normalized_; }
  void set_normalized(bool flag) { normalized_ = flag; }

  std::span<const double> row(std::size_t i) const { return {data_.data() + i * dim_, dim_}; }
  std::span<double> row(std::size_t i) { return {data_.data() + i * dim_, dim_}; }

  const Vector& data() const { return data_; }

  void append(std::span<const double> v) {
    if (count_ == 0 && dim_ == 0) dim_ = v.size();
    if (v.size() != dim_) throw Error(ErrorCode::DimensionMismatch, "appended row has wrong dimension");
    data_.insert(data_.end(), v.begin(), v.end());
    ++count_;
  }

  friend bool operator==(const EmbeddingMatrix&, const EmbeddingMatrix&) = default;

 private:
  std::size_t count_ = 0;
  std::size_t dim_ = 0;
  bool normalized_ = false;
  Vector data_;
};

struct GeoTag {
  std::optional<double> lat;
  std::optional<double> lon;
  std::optional<std::uint64_t> frame;

  bool has_coords() const { return lat.has_value() && lon.has_value(); }

  void validate() const {
    if (lat.has_value() != lon.has_value())
      throw Error(ErrorCode::MissingField, "lat and lon must be given together");
    if (!has_coords() && !frame)
      throw Error(ErrorCode::MissingField, "geotag needs lat/lon or frame");
    if (lat && (!(*lat >= -90.0 && *lat <= 90.0)))
      throw Error(ErrorCode::BadConfig, "latitude out of [-90, 90]");
    if (lon && (!(*lon >= -180.0 && *lon <= 180.0)))
      throw Error(ErrorCode::BadConfig, "longitude out of [-180, 180]");
  }

  friend bool operator==(const GeoTag&, const GeoTag&) = default;
};

struct ImageRecord {
  std::string id;
  std::string place_id;
  GeoTag geotag;
  std::optional<Vector> raw_feature;
  std::size_t row = 0;

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

/// Gallery images and their precomputed embeddings; record i may point at any row.
struct GallerySet {
  std::vector<ImageRecord> records;
  EmbeddingMatrix embeddings;

  std::size_t size() const { return records.size(); }
  std::size_t dim() const { return embeddings.dim(); }
  std::span<const double> embedding(std::size_t record) const {
    return embeddings.row(records[record].row);
  }

  void validate() const {
    if (records.size() != embeddings.count())
      throw Error(ErrorCode::DimensionMismatch, "record count differs from embedding count");
    std::unordered_set<std::string> ids;
    for (const auto& r : records) {
      if (!ids.insert(r.id).second) throw Error(ErrorCode::DuplicateId, "duplicate id '" + r.id + "'");
      if (r.row >= embeddings.count())
        throw Error(ErrorCode::RowOutOfRange, "record '" + r.id + "' row out of range");
    }
  }
};

// ---------------------------------------------------------------------------
// AEB1 embedding store
//
//   offset 0  : "AEB1"
//   offset 4  : u32 version (= 1)
//   offset 8  : u32 count
//   offset 12 : u32 dim
//   offset 16 : u8 normalized flag, 3 reserved zero bytes
//   offset 20 : count*dim little-endian f32, row-major
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 4> kStoreMagic{'A', 'E', 'B', '1'};
inline constexpr std::uint32_t kStoreVersion = 1;
inline constexpr std::size_t kStoreHeaderBytes = 20;

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  buf.append(b, 4);
}

inline std::uint32_t get_u32(const char* p) {
  std::uint32_t v;
  std::memcpy(&v, p, 4);
  return v;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IoError, "short write to '" + path + "'");
}

/// Seed mixer for deriving independent generator streams.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xFFFFFFFFu) throw Error(ErrorCode::BadConfig, std::string(what) + " exceeds 32 bits");
  return static_cast<std::uint32_t>(v);
}

}  // namespace detail

inline std::string encode_embedding_store(const EmbeddingMatrix& m) {
  std::string buf;
  buf.reserve(kStoreHeaderBytes + m.data().size() * 4);
  buf.append(kStoreMagic.data(), 4);
  detail::put_u32(buf, kStoreVersion);
  detail::put_u32(buf, detail::checked_u32(m.count(), "count"));
  detail::put_u32(buf, detail::checked_u32(m.dim(), "dim"));
  buf.push_back(m.normalized() ? 1 : 0);
  buf.append(3, '\0');
  for (double x : m.data()) {
    const float f = static_cast<float>(x);
    char b[4];
    std::memcpy(b, &f, 4);
    buf.append(b, 4);
  }
  return buf;
}

inline EmbeddingMatrix decode_embedding_store(std::string_view bytes) {
  if (bytes.size() < kStoreHeaderBytes)
    throw Error(ErrorCode::TruncatedPayload, "file shorter than the store header");
  if (std::memcmp(bytes.data(), kStoreMagic.data(), 4) != 0)
    throw Error(ErrorCode::BadMagic, "expected magic AEB1");
  const auto version = detail::get_u32(bytes.data() + 4);
  if (version != kStoreVersion)
    throw Error(ErrorCode::VersionUnsupported, "store version " + std::to_string(version));
  const std::size_t count = detail::get_u32(bytes.data() + 8);
  const std::size_t dim = detail::get_u32(bytes.data() + 12);
  const auto flag = static_cast<unsigned char>(bytes[16]);
  if (flag > 1) throw Error(ErrorCode::CorruptFile, "normalized flag must be 0 or 1");
  const std::size_t payload = count * dim * 4;
  if (bytes.size() < kStoreHeaderBytes + payload)
    throw Error(ErrorCode::TruncatedPayload, "payload shorter than count*dim floats");
  if (bytes.size() > kStoreHeaderBytes + payload)
    throw Error(ErrorCode::CorruptFile, "trailing bytes after payload");
  Vector data(count * dim);
  const char* p = bytes.data() + kStoreHeaderBytes;
  for (std::size_t i = 0; i < data.size(); ++i, p += 4) {
    float f;
    std::memcpy(&f, p, 4);
    data[i] = f;
  }
  return EmbeddingMatrix(count, dim, std::move(data), flag == 1);
}

inline void write_embedding_store(const std::string& path, const EmbeddingMatrix& m) {
  detail::write_file(path, encode_embedding_store(m));
}

inline EmbeddingMatrix read_embedding_store(const std::string& path) {
  return decode_embedding_store(detail::read_file(path));
}

// ---------------------------------------------------------------------------
// JSON Lines manifest: {"id", "place_id", "row", optional "lat", "lon", "frame"}
// ---------------------------------------------------------------------------

inline ImageRecord parse_manifest_line(const nlohmann::json& j, std::size_t line_no) {
  const auto where = " (line " + std::to_string(line_no) + ")";
  if (!j.is_object()) throw Error(ErrorCode::MissingField, "manifest line is not an object" + where);
  for (const char* key : {"id", "place_id", "row"})
    if (!j.contains(key)) throw Error(ErrorCode::MissingField, std::string("missing '") + key + "'" + where);
  ImageRecord r;
  try {
    r.id = j.at("id").get<std::string>();
    r.place_id = j.at("place_id").get<std::string>();
    const auto row = j.at("row").get<std::int64_t>();
    if (row < 0) throw Error(ErrorCode::RowOutOfRange, "negative row" + where);
    r.row = static_cast<std::size_t>(row);
    if (j.contains("lat")) r.geotag.lat = j.at("lat").get<double>();
    if (j.contains("lon")) r.geotag.lon = j.at("lon").get<double>();
    if (j.contains("frame")) {
      const auto frame = j.at("frame").get<std::int64_t>();
      if (frame < 0) throw Error(ErrorCode::BadConfig, "negative frame" + where);
      r.geotag.frame = static_cast<std::uint64_t>(frame);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MissingField, std::string("malformed field: ") + e.what() + where);
  }
  r.geotag.validate();
  return r;
}

inline std::vector<ImageRecord> parse_manifest(std::istream& in) {
  std::vector<ImageRecord> records;
  std::unordered_set<std::string> ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorCode::CorruptFile, "line " + std::to_string(line_no) + ": " + e.what());
    }
    auto r = parse_manifest_line(j, line_no);
    if (!ids.insert(r.id).second) throw Error(ErrorCode::DuplicateId, "duplicate id '" + r.id + "'");
    records.push_back(std::move(r));
  }
  return records;
}

inline std::vector<ImageRecord> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open '" + path + "'");
  return parse_manifest(in);
}

/// Throws RowOutOfRange if any record points past the paired store.
inline void check_rows(std::span<const ImageRecord> records, std::size_t store_count) {
  for (const auto& r : records)
    if (r.row >= store_count)
      throw Error(ErrorCode::RowOutOfRange, "record '" + r.id + "' row " + std::to_string(r.row) +
                                                " >= store count " + std::to_string(store_count));
}

inline nlohmann::json manifest_line(const ImageRecord& r) {
  nlohmann::json j{{"id", r.id}, {"place_id", r.place_id}, {"row", r.row}};
  if (r.geotag.lat) j["lat"] = *r.geotag.lat;
  if (r.geotag.lon) j["lon"] = *r.geotag.lon;
  if (r.geotag.frame) j["frame"] = *r.geotag.frame;
  return j;
}

inline void write_manifest(const std::string& path, std::span<const ImageRecord> records) {
  std::string out;
  for (const auto& r : records) {
    out += manifest_line(r).dump();
    out += '\n';
  }
  detail::write_file(path, out);
}

/// Group record indices by place_id, in first-appearance order.
inline std::vector<std::pair<std::string, std::vector<std::size_t>>> group_by_place(
    std::span<const ImageRecord> records) {
  std::vector<std::pair<std::string, std::vector<std::size_t>>> groups;
  std::map<std::string, std::size_t> slot;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto [it, inserted] = slot.try_emplace(records[i].place_id, groups.size());
    if (inserted) groups.emplace_back(records[i].place_id, std::vector<std::size_t>{});
    groups[it->second].second.push_back(i);
  }
  return groups;
}

/// Assemble a gallery from a manifest and its embedding store; optionally
/// attach raw features from a second store indexed by the same rows.
inline GallerySet load_gallery(std::vector<ImageRecord> records, EmbeddingMatrix embeddings,
                               const EmbeddingMatrix* raw = nullptr) {
  check_rows(records, embeddings.count());
  if (raw) {
    check_rows(records, raw->count());
    for (auto& r : records) {
      const auto row = raw->row(r.row);
      r.raw_feature = Vector(row.begin(), row.end());
    }
  }
  GallerySet g{std::move(records), std::move(embeddings)};
  g.validate();
  return g;
}

// ---------------------------------------------------------------------------
// JSON header + binary blob container used by the bank and model files.
// Layout: one line of UTF-8 JSON, '\n', then magic(4) version(u32) and a
// payload of little-endian f64 values.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_json_blob(const std::string& path, const nlohmann::json& header,
                            const std::array<char, 4>& magic, std::span<const double> payload) {
  std::string buf = header.dump();
  buf += '\n';
  buf.append(magic.data(), 4);
  put_u32(buf, 1);
  const auto old = buf.size();
  buf.resize(old + payload.size() * 8);
  if (!payload.empty()) std::memcpy(buf.data() + old, payload.data(), payload.size() * 8);
  write_file(path, buf);
}

/// Returns the header and the f64 payload; callers check the payload length.
inline std::pair<nlohmann::json, Vector> read_json_blob(const std::string& path,
                                                         const std::array<char, 4>& magic) {
  const std::string bytes = read_file(path);
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw Error(ErrorCode::CorruptFile, "missing JSON header line");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::CorruptFile, std::string("bad JSON header: ") + e.what());
  }
  const std::size_t off = nl + 1;
  if (bytes.size() < off + 8) throw Error(ErrorCode::TruncatedPayload, "binary section header truncated");
  if (std::memcmp(bytes.data() + off, magic.data(), 4) != 0)
    throw Error(ErrorCode::BadMagic, "unexpected binary section magic");
  if (get_u32(bytes.data() + off + 4) != 1)
    throw Error(ErrorCode::VersionUnsupported, "binary section version");
  const std::size_t have = bytes.size() - off - 8;
  if (have % 8 != 0) throw Error(ErrorCode::TruncatedPayload, "binary payload is not a whole number of f64");
  Vector payload(have / 8);
  if (have) std::memcpy(payload.data(), bytes.data() + off + 8, have);
  return {std::move(header), std::move(payload)};
}

inline void check_payload(std::size_t have, std::size_t expected) {
  if (have < expected) throw Error(ErrorCode::TruncatedPayload, "binary payload truncated");
  if (have > expected) throw Error(ErrorCode::CorruptFile, "trailing bytes after payload");
}

}  // namespace detail

}  // namespace asymvpr
