#pragma once

// Synthetic geotagged world: places scattered over a lat/lon box, per-place
// latent descriptors observed through anisotropic view noise, and a frozen
// random two-layer "gallery network" that produces the indexed embeddings.

#include "asymvpr/core.hpp"
#include "asymvpr/geo.hpp"

#include <cstdio>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace asymvpr {

struct WorldConfig {
  std::size_t num_places = 200;
  std::size_t images_per_place = 10;
  std::size_t held_out_queries_per_place = 3;
  std::size_t raw_dim = 64;
  std::size_t gallery_dim = 128;
  std::size_t gallery_hidden = 256;
  double lat_min = 37.50;
  double lat_max = 37.60;
  double lon_min = 126.90;
  double lon_max = 127.00;
  double place_min_separation_m = 100.0;
  double image_jitter_m = 5.0;
  double latent_scale = 1.0;
  double view_noise_scale = 1.0;
  // Per-place, per-dimension noise multipliers are log-uniform in this range.
  double anisotropy_min = 0.2;
  double anisotropy_max = 2.0;
  std::size_t max_attempts = 10000;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_places < 1 || images_per_place < 1 || held_out_queries_per_place < 1)
      throw Error(ErrorCode::BadConfig, "world counts must be >= 1");
    if (raw_dim < 1 || gallery_hidden < 1) throw Error(ErrorCode::BadConfig, "raw_dim and gallery_hidden must be >= 1");
    if (gallery_dim < 2) throw Error(ErrorCode::BadConfig, "gallery_dim must be >= 2");
    if (!(lat_min < lat_max && lon_min < lon_max)) throw Error(ErrorCode::BadConfig, "degenerate map extent");
    if (!(lat_min >= -90.0 && lat_max <= 90.0 && lon_min >= -180.0 && lon_max <= 180.0))
      throw Error(ErrorCode::BadConfig, "map extent outside valid coordinates");
    if (!(place_min_separation_m >= 0.0 && image_jitter_m >= 0.0))
      throw Error(ErrorCode::BadConfig, "distances must be >= 0");
    if (!(view_noise_scale >= 0.0 && latent_scale > 0.0)) throw Error(ErrorCode::BadConfig, "bad noise scales");
    if (!(anisotropy_min > 0.0 && anisotropy_min <= anisotropy_max))
      throw Error(ErrorCode::BadConfig, "need 0 < anisotropy_min <= anisotropy_max");
    if (max_attempts < 1) throw Error(ErrorCode::BadConfig, "max_attempts must be >= 1");
  }
};

/// Fixed random map raw -> normalize(W2 tanh(W1 raw)).
struct FrozenGalleryNetwork {
  std::size_t raw_dim = 0;
  std::size_t hidden = 0;
  std::size_t dim = 0;
  Vector w1;  // hidden x raw_dim
  Vector w2;  // dim x hidden

  friend bool operator==(const FrozenGalleryNetwork&, const FrozenGalleryNetwork&) = default;
};

inline FrozenGalleryNetwork make_gallery_network(std::size_t raw_dim, std::size_t hidden, std::size_t dim,
                                                 std::uint64_t seed) {
  FrozenGalleryNetwork net{raw_dim, hidden, dim, Vector(hidden * raw_dim), Vector(dim * hidden)};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n1(0.0, 1.0 / std::sqrt(static_cast<double>(raw_dim)));
  std::normal_distribution<double> n2(0.0, 1.0 / std::sqrt(static_cast<double>(hidden)));
  for (double& w : net.w1) w = n1(rng);
  for (double& w : net.w2) w = n2(rng);
  return net;
}

inline Vector gallery_forward(const FrozenGalleryNetwork& net, std::span<const double> raw) {
  if (raw.size() != net.raw_dim) throw Error(ErrorCode::DimensionMismatch, "raw feature dimension mismatch");
  Vector h(net.hidden);
  for (std::size_t o = 0; o < net.hidden; ++o) {
    const double* w = net.w1.data() + o * net.raw_dim;
    double s = 0.0;
    for (std::size_t i = 0; i < net.raw_dim; ++i) s += w[i] * raw[i];
    h[o] = std::tanh(s);
  }
  Vector out(net.dim);
  for (std::size_t o = 0; o < net.dim; ++o) {
    const double* w = net.w2.data() + o * net.hidden;
    double s = 0.0;
    for (std::size_t i = 0; i < net.hidden; ++i) s += w[i] * h[i];
    out[o] = s;
  }
  return normalize(out);
}

inline constexpr std::array<char, 4> kGalleryNetMagic{'A', 'E', 'B', 'G'};

inline void save_gallery_network(const FrozenGalleryNetwork& net, const std::string& path) {
  nlohmann::json header{{"format", "asymvpr-gallery-network"},
                        {"raw_dim", net.raw_dim},
                        {"hidden", net.hidden},
                        {"dim", net.dim},
                        {"activation", "tanh"}};
  Vector payload(net.w1);
  payload.insert(payload.end(), net.w2.begin(), net.w2.end());
  detail::write_json_blob(path, header, kGalleryNetMagic, payload);
}

inline FrozenGalleryNetwork load_gallery_network(const std::string& path) {
  auto [header, payload] = detail::read_json_blob(path, kGalleryNetMagic);
  FrozenGalleryNetwork net;
  try {
    net.raw_dim = header.at("raw_dim").get<std::size_t>();
    net.hidden = header.at("hidden").get<std::size_t>();
    net.dim = header.at("dim").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptFile, std::string("bad gallery network header: ") + e.what());
  }
  const std::size_t n1 = net.hidden * net.raw_dim;
  detail::check_payload(payload.size(), n1 + net.dim * net.hidden);
  net.w1.assign(payload.begin(), payload.begin() + n1);
  net.w2.assign(payload.begin() + n1, payload.end());
  return net;
}

struct World {
  GallerySet gallery;                 // records carry raw features; rows follow record order
  std::vector<ImageRecord> queries;   // held out, raw features set; row = index
  FrozenGalleryNetwork net;
  std::vector<GeoTag> place_coords;   // place i has id place_id(i)
  std::vector<Vector> noise_scales;   // per place, per raw dimension
};

inline std::string synth_place_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "p%05zu", i);
  return buf;
}

/// Stack the raw features of `records` into a matrix indexed by record order.
inline EmbeddingMatrix raw_matrix(std::span<const ImageRecord> records) {
  EmbeddingMatrix m;
  for (const auto& r : records) {
    if (!r.raw_feature) throw Error(ErrorCode::MissingRawFeature, "record '" + r.id + "' has no raw feature");
    m.append(*r.raw_feature);
  }
  return m;
}

namespace detail {

// Point uniformly inside a disc of `radius_m` around `center`, in degrees.
inline GeoTag jitter(const GeoTag& center, double radius_m, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double r = radius_m * std::sqrt(u(rng));
  const double theta = 2.0 * std::numbers::pi * u(rng);
  const double m_per_deg = kEarthRadiusM * std::numbers::pi / 180.0;
  GeoTag t;
  t.lat = *center.lat + r * std::cos(theta) / m_per_deg;
  t.lon = *center.lon + r * std::sin(theta) / (m_per_deg * std::cos(*center.lat * std::numbers::pi / 180.0));
  return t;
}

}  // namespace detail

inline World gen_world(const WorldConfig& cfg) {
  cfg.validate();
  World w;
  w.net = make_gallery_network(cfg.raw_dim, cfg.gallery_hidden, cfg.gallery_dim, detail::splitmix64(cfg.seed ^ 0x6e6574ull));

  std::mt19937_64 geo_rng(detail::splitmix64(cfg.seed ^ 0x67656full));
  std::uniform_real_distribution<double> ulat(cfg.lat_min, cfg.lat_max);
  std::uniform_real_distribution<double> ulon(cfg.lon_min, cfg.lon_max);
  for (std::size_t p = 0; p < cfg.num_places; ++p) {
    bool placed = false;
    for (std::size_t attempt = 0; attempt < cfg.max_attempts && !placed; ++attempt) {
      GeoTag c;
      c.lat = ulat(geo_rng);
      c.lon = ulon(geo_rng);
      placed = true;
      for (const auto& other : w.place_coords)
        if (haversine(c, other) < cfg.place_min_separation_m) {
          placed = false;
          break;
        }
      if (placed) w.place_coords.push_back(c);
    }
    if (!placed)
      throw Error(ErrorCode::SeparationInfeasible,
                  "could not place " + std::to_string(cfg.num_places) + " places with the requested separation");
  }

  std::mt19937_64 rng(detail::splitmix64(cfg.seed ^ 0x76696577ull));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> ulog(std::log(cfg.anisotropy_min), std::log(cfg.anisotropy_max));
  const std::size_t per_place = cfg.images_per_place + cfg.held_out_queries_per_place;
  Vector raw(cfg.raw_dim);
  for (std::size_t p = 0; p < cfg.num_places; ++p) {
    Vector latent(cfg.raw_dim);
    for (double& x : latent) x = cfg.latent_scale * normal(rng);
    Vector scales(cfg.raw_dim);
    for (double& s : scales) s = cfg.view_noise_scale * std::exp(ulog(rng));
    const std::string pid = synth_place_id(p);
    for (std::size_t k = 0; k < per_place; ++k) {
      // Round through f32 so the in-memory world equals what the stores hold.
      for (std::size_t i = 0; i < cfg.raw_dim; ++i)
        raw[i] = static_cast<float>(latent[i] + scales[i] * normal(rng));
      ImageRecord r;
      r.place_id = pid;
      r.geotag = detail::jitter(w.place_coords[p], cfg.image_jitter_m, geo_rng);
      r.raw_feature = raw;
      char id[48];
      if (k < cfg.images_per_place) {
        std::snprintf(id, sizeof id, "g%05zu_%03zu", p, k);
        r.id = id;
        r.row = w.gallery.records.size();
        auto g = gallery_forward(w.net, raw);
        for (double& x : g) x = static_cast<float>(x);
        w.gallery.embeddings.append(g);
        w.gallery.records.push_back(std::move(r));
      } else {
        std::snprintf(id, sizeof id, "q%05zu_%03zu", p, k - cfg.images_per_place);
        r.id = id;
        r.row = w.queries.size();
        w.queries.push_back(std::move(r));
      }
    }
    w.noise_scales.push_back(std::move(scales));
  }
  w.gallery.embeddings.set_normalized(true);
  w.gallery.validate();
  return w;
}

}  // namespace asymvpr
