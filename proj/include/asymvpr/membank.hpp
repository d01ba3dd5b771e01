#pragma once

// Geographical memory bank: per-place centroid and diagonal covariance of the
// frozen gallery embeddings, built in one pass over the gallery.

#include "asymvpr/core.hpp"
#include "asymvpr/geo.hpp"

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace asymvpr {

struct PlaceStats {
  std::string place_id;
  Vector centroid;
  Vector diag_cov;  // population (1/n) variance per dimension
  std::size_t count = 0;

  friend bool operator==(const PlaceStats&, const PlaceStats&) = default;
};

class MemoryBank {
 public:
  MemoryBank() = default;
  MemoryBank(std::vector<PlaceStats> entries, std::size_t dim) : entries_(std::move(entries)), dim_(dim) {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& e = entries_[i];
      if (e.centroid.size() != dim_ || e.diag_cov.size() != dim_)
        throw Error(ErrorCode::DimensionMismatch, "bank entry '" + e.place_id + "' has wrong dimension");
      if (e.count == 0) throw Error(ErrorCode::CorruptFile, "bank entry '" + e.place_id + "' has count 0");
      for (double s : e.diag_cov)
        if (!(s >= 0.0) || !std::isfinite(s))
          throw Error(ErrorCode::NegativeVariance, "bank entry '" + e.place_id + "' has invalid variance");
      if (!index_.emplace(e.place_id, i).second)
        throw Error(ErrorCode::DuplicateId, "duplicate place_id '" + e.place_id + "'");
    }
  }

  std::size_t size() const { return entries_.size(); }
  std::size_t dim() const { return dim_; }
  const std::vector<PlaceStats>& entries() const { return entries_; }
  const PlaceStats& operator[](std::size_t i) const { return entries_[i]; }

  std::optional<std::size_t> find(const std::string& place_id) const {
    auto it = index_.find(place_id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t index_of(const std::string& place_id) const {
    auto i = find(place_id);
    if (!i) throw Error(ErrorCode::UnknownPlace, "place '" + place_id + "' not in bank");
    return *i;
  }

  friend bool operator==(const MemoryBank& a, const MemoryBank& b) {
    return a.dim_ == b.dim_ && a.entries_ == b.entries_;
  }

 private:
  std::vector<PlaceStats> entries_;
  std::size_t dim_ = 0;
  std::map<std::string, std::size_t> index_;
};

/// One pass over the gallery: a running sum per place gives the centroid,
/// Welford updates give the variance. Entries are ordered by place_id.
inline MemoryBank build_bank(const GallerySet& gallery, bool normalize_inputs = true) {
  if (gallery.size() == 0) throw Error(ErrorCode::EmptyGallery, "gallery has no records");
  const std::size_t d = gallery.dim();
  if (d == 0) throw Error(ErrorCode::DimensionMismatch, "gallery embeddings have dimension 0");

  struct Accum {
    Vector sum;
    Vector mean;
    Vector m2;
    std::size_t n = 0;
  };
  std::map<std::string, Accum> acc;
  Vector x(d);
  for (std::size_t i = 0; i < gallery.size(); ++i) {
    const auto& rec = gallery.records[i];
    if (rec.row >= gallery.embeddings.count())
      throw Error(ErrorCode::RowOutOfRange, "record '" + rec.id + "' row out of range");
    const auto e = gallery.embeddings.row(rec.row);
    if (normalize_inputs) {
      x = normalize(e);
    } else {
      x.assign(e.begin(), e.end());
    }
    auto& a = acc[rec.place_id];
    if (a.n == 0) {
      a.sum.assign(d, 0.0);
      a.mean.assign(d, 0.0);
      a.m2.assign(d, 0.0);
    }
    ++a.n;
    const double inv_n = 1.0 / static_cast<double>(a.n);
    for (std::size_t k = 0; k < d; ++k) {
      a.sum[k] += x[k];
      const double delta = x[k] - a.mean[k];
      a.mean[k] += delta * inv_n;
      a.m2[k] += delta * (x[k] - a.mean[k]);
    }
  }

  std::vector<PlaceStats> entries;
  entries.reserve(acc.size());
  for (auto& [place, a] : acc) {
    const double n = static_cast<double>(a.n);
    PlaceStats s{place, std::move(a.sum), std::move(a.m2), a.n};
    for (double& v : s.centroid) v /= n;
    for (double& v : s.diag_cov) v = std::max(0.0, v / n);
    entries.push_back(std::move(s));
  }
  return MemoryBank(std::move(entries), d);
}

/// Mean lat/lon of each bank place's gallery members (nullopt if any member lacks coordinates).
inline std::vector<std::optional<GeoTag>> place_coordinates(const MemoryBank& bank, const GallerySet& gallery) {
  std::vector<double> lat(bank.size(), 0.0), lon(bank.size(), 0.0);
  std::vector<std::size_t> n(bank.size(), 0);
  std::vector<bool> ok(bank.size(), true);
  for (const auto& r : gallery.records) {
    const auto j = bank.index_of(r.place_id);
    if (!r.geotag.has_coords()) {
      ok[j] = false;
      continue;
    }
    lat[j] += *r.geotag.lat;
    lon[j] += *r.geotag.lon;
    ++n[j];
  }
  std::vector<std::optional<GeoTag>> out(bank.size());
  for (std::size_t j = 0; j < bank.size(); ++j) {
    if (!ok[j] || n[j] == 0) continue;
    GeoTag t;
    t.lat = lat[j] / static_cast<double>(n[j]);
    t.lon = lon[j] / static_cast<double>(n[j]);
    out[j] = t;
  }
  return out;
}

/// Indices of bank entries usable as negatives for an image of `place_id`:
/// everything but the place itself, minus places within `exclusion_radius_m`
/// when coordinates are known for both ends.
inline std::vector<std::size_t> negative_set(const MemoryBank& bank, const std::string& place_id,
                                             double exclusion_radius_m = 0.0,
                                             std::span<const std::optional<GeoTag>> place_coords = {}) {
  const std::size_t self = bank.index_of(place_id);
  const bool use_radius = exclusion_radius_m > 0.0 && !place_coords.empty();
  if (use_radius && place_coords.size() != bank.size())
    throw Error(ErrorCode::DimensionMismatch, "place_coords must align with bank entries");
  std::vector<std::size_t> out;
  out.reserve(bank.size());
  for (std::size_t j = 0; j < bank.size(); ++j) {
    if (j == self) continue;
    if (use_radius && place_coords[self] && place_coords[j] &&
        haversine(*place_coords[self], *place_coords[j]) <= exclusion_radius_m)
      continue;
    out.push_back(j);
  }
  return out;
}

// Bank file: one JSON index line {M, d, place_ids, counts}, then an "AEBK"
// section holding M*d centroid doubles followed by M*d variance doubles.
inline constexpr std::array<char, 4> kBankMagic{'A', 'E', 'B', 'K'};

inline void serialize_bank(const MemoryBank& bank, const std::string& path) {
  nlohmann::json index;
  index["format"] = "asymvpr-bank";
  index["M"] = bank.size();
  index["d"] = bank.dim();
  auto& ids = index["place_ids"] = nlohmann::json::array();
  auto& counts = index["counts"] = nlohmann::json::array();
  Vector payload;
  payload.reserve(2 * bank.size() * bank.dim());
  for (const auto& e : bank.entries()) {
    ids.push_back(e.place_id);
    counts.push_back(e.count);
    payload.insert(payload.end(), e.centroid.begin(), e.centroid.end());
  }
  for (const auto& e : bank.entries()) payload.insert(payload.end(), e.diag_cov.begin(), e.diag_cov.end());
  detail::write_json_blob(path, index, kBankMagic, payload);
}

inline MemoryBank deserialize_bank(const std::string& path) {
  auto [index, payload] = detail::read_json_blob(path, kBankMagic);
  std::size_t m = 0, d = 0;
  std::vector<std::string> ids;
  std::vector<std::size_t> counts;
  try {
    m = index.at("M").get<std::size_t>();
    d = index.at("d").get<std::size_t>();
    ids = index.at("place_ids").get<std::vector<std::string>>();
    counts = index.at("counts").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptFile, std::string("bad bank index: ") + e.what());
  }
  if (m == 0) throw Error(ErrorCode::EmptyGallery, "bank file has no entries");
  if (ids.size() != m || counts.size() != m)
    throw Error(ErrorCode::CorruptFile, "bank index lists disagree with M");
  detail::check_payload(payload.size(), 2 * m * d);
  std::vector<PlaceStats> entries(m);
  for (std::size_t j = 0; j < m; ++j) {
    entries[j].place_id = ids[j];
    entries[j].count = counts[j];
    entries[j].centroid.assign(payload.begin() + j * d, payload.begin() + (j + 1) * d);
    entries[j].diag_cov.assign(payload.begin() + (m + j) * d, payload.begin() + (m + j + 1) * d);
  }
  return MemoryBank(std::move(entries), d);
}

}  // namespace asymvpr
