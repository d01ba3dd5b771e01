#pragma once

// RunConfig: one JSON document with world / optim / loss / eval / paths
// sections. Unknown keys and ill-typed values are rejected up front.

#include "asymvpr/optim.hpp"
#include "asymvpr/synth.hpp"

#include <fstream>
#include <set>
#include <string>
#include <vector>

namespace asymvpr {

struct EvalConfig {
  std::string gt_mode = "geo";  // geo | frames | pairs
  double threshold_m = 25.0;
  std::uint64_t window = 3;
  std::vector<std::size_t> ks{1, 5, 10};

  void validate() const {
    if (gt_mode != "geo" && gt_mode != "frames" && gt_mode != "pairs")
      throw Error(ErrorCode::BadConfig, "gt_mode must be geo, frames or pairs");
    if (!(threshold_m >= 0.0)) throw Error(ErrorCode::BadConfig, "threshold_m must be >= 0");
    if (ks.empty()) throw Error(ErrorCode::BadConfig, "ks must not be empty");
    for (std::size_t i = 0; i < ks.size(); ++i)
      if (ks[i] < 1 || (i > 0 && ks[i] <= ks[i - 1]))
        throw Error(ErrorCode::BadConfig, "ks must be >= 1 and strictly ascending");
  }
};

struct PathsConfig {
  std::string out_dir;
};

struct RunConfig {
  WorldConfig world;
  OptimConfig optim;
  std::vector<std::size_t> query_hidden{64};  // hidden widths of the query model
  EvalConfig eval;
  PathsConfig paths;

  void validate() const {
    world.validate();
    optim.validate();
    for (auto h : query_hidden)
      if (h < 1) throw Error(ErrorCode::BadConfig, "query_hidden widths must be >= 1");
    eval.validate();
  }

  /// {raw_dim, hidden..., gallery_dim}
  std::vector<std::size_t> model_dims() const {
    std::vector<std::size_t> d{world.raw_dim};
    d.insert(d.end(), query_hidden.begin(), query_hidden.end());
    d.push_back(world.gallery_dim);
    return d;
  }
};

namespace detail {

// Reads declared keys from one JSON object and rejects anything else.
class Section {
 public:
  Section(const nlohmann::json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw Error(ErrorCode::BadConfig, "section '" + name_ + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw Error(ErrorCode::BadConfig, name_ + "." + key + " has the wrong type");
    }
    if constexpr (std::is_unsigned_v<T>) {
      if (!it->is_number_unsigned()) throw Error(ErrorCode::BadConfig, name_ + "." + key + " must be a non-negative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) throw Error(ErrorCode::BadConfig, name_ + "." + key + " must be a number");
    }
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw Error(ErrorCode::BadConfig, "unknown key '" + name_ + "." + k + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorCode::BadConfig, "config must be a JSON object");
  RunConfig c;
  static const std::set<std::string> sections{"world", "optim", "loss", "eval", "paths"};
  for (const auto& [k, v] : j.items())
    if (!sections.count(k)) throw Error(ErrorCode::BadConfig, "unknown section '" + k + "'");

  if (j.contains("world")) {
    detail::Section s(j["world"], "world");
    auto& w = c.world;
    s.get("num_places", w.num_places);
    s.get("images_per_place", w.images_per_place);
    s.get("held_out_queries_per_place", w.held_out_queries_per_place);
    s.get("raw_dim", w.raw_dim);
    s.get("gallery_dim", w.gallery_dim);
    s.get("gallery_hidden", w.gallery_hidden);
    s.get("lat_min", w.lat_min);
    s.get("lat_max", w.lat_max);
    s.get("lon_min", w.lon_min);
    s.get("lon_max", w.lon_max);
    s.get("place_min_separation_m", w.place_min_separation_m);
    s.get("image_jitter_m", w.image_jitter_m);
    s.get("latent_scale", w.latent_scale);
    s.get("view_noise_scale", w.view_noise_scale);
    s.get("anisotropy_min", w.anisotropy_min);
    s.get("anisotropy_max", w.anisotropy_max);
    s.get("max_attempts", w.max_attempts);
    s.get("seed", w.seed);
    s.finish();
  }
  if (j.contains("optim")) {
    detail::Section s(j["optim"], "optim");
    auto& o = c.optim;
    s.get("lr_max", o.lr_max);
    s.get("lr_min", o.lr_min);
    s.get("epochs", o.epochs);
    s.get("batch_size", o.batch_size);
    s.get("beta1", o.beta1);
    s.get("beta2", o.beta2);
    s.get("eps", o.eps);
    s.get("weight_decay", o.weight_decay);
    std::string mode = to_string(o.loss_mode);
    s.get("loss_mode", mode);
    o.loss_mode = parse_loss_mode(mode);
    s.get("seed", o.seed);
    s.get("exclusion_radius_m", o.exclusion_radius_m);
    s.get("workers", o.workers);
    s.get("query_hidden", c.query_hidden);
    s.finish();
  }
  if (j.contains("loss")) {
    detail::Section s(j["loss"], "loss");
    auto& l = c.optim.loss;
    s.get("tau", l.tau);
    s.get("gamma", l.gamma);
    s.get("K", l.K);
    s.get("negative_subsample", l.negative_subsample);
    s.finish();
  }
  if (j.contains("eval")) {
    detail::Section s(j["eval"], "eval");
    s.get("gt_mode", c.eval.gt_mode);
    s.get("threshold_m", c.eval.threshold_m);
    s.get("window", c.eval.window);
    s.get("ks", c.eval.ks);
    s.finish();
  }
  if (j.contains("paths")) {
    detail::Section s(j["paths"], "paths");
    s.get("out_dir", c.paths.out_dir);
    s.finish();
  }
  c.validate();
  return c;
}

inline RunConfig read_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadConfig, "config is not valid JSON: " + std::string(e.what()));
  }
  return parse_run_config(j);
}

inline nlohmann::json to_json(const RunConfig& c) {
  const auto& w = c.world;
  const auto& o = c.optim;
  return {
      {"world",
       {{"num_places", w.num_places},
        {"images_per_place", w.images_per_place},
        {"held_out_queries_per_place", w.held_out_queries_per_place},
        {"raw_dim", w.raw_dim},
        {"gallery_dim", w.gallery_dim},
        {"gallery_hidden", w.gallery_hidden},
        {"lat_min", w.lat_min},
        {"lat_max", w.lat_max},
        {"lon_min", w.lon_min},
        {"lon_max", w.lon_max},
        {"place_min_separation_m", w.place_min_separation_m},
        {"image_jitter_m", w.image_jitter_m},
        {"latent_scale", w.latent_scale},
        {"view_noise_scale", w.view_noise_scale},
        {"anisotropy_min", w.anisotropy_min},
        {"anisotropy_max", w.anisotropy_max},
        {"max_attempts", w.max_attempts},
        {"seed", w.seed}}},
      {"optim",
       {{"lr_max", o.lr_max},
        {"lr_min", o.lr_min},
        {"epochs", o.epochs},
        {"batch_size", o.batch_size},
        {"beta1", o.beta1},
        {"beta2", o.beta2},
        {"eps", o.eps},
        {"weight_decay", o.weight_decay},
        {"loss_mode", to_string(o.loss_mode)},
        {"seed", o.seed},
        {"exclusion_radius_m", o.exclusion_radius_m},
        {"workers", o.workers},
        {"query_hidden", c.query_hidden}}},
      {"loss", {{"tau", o.loss.tau}, {"gamma", o.loss.gamma}, {"K", o.loss.K}, {"negative_subsample", o.loss.negative_subsample}}},
      {"eval", {{"gt_mode", c.eval.gt_mode}, {"threshold_m", c.eval.threshold_m}, {"window", c.eval.window}, {"ks", c.eval.ks}}},
      {"paths", {{"out_dir", c.paths.out_dir}}}};
}

}  // namespace asymvpr
