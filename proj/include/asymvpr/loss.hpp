#pragma once

// Asymmetric contrastive loss against memory-bank centroids, its implicit
// covariance-augmented upper bound, the explicit sampled form, and the
// Gaussian augmentation sampler. Gradients are taken w.r.t. the query only.

#include "asymvpr/core.hpp"

#include <algorithm>
#include <limits>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace asymvpr {

enum class LossMode { Asym, Implicit, Explicit };

inline const char* to_string(LossMode m) {
  switch (m) {
    case LossMode::Asym: return "asym";
    case LossMode::Implicit: return "implicit";
    case LossMode::Explicit: return "explicit";
  }
  return "?";
}

inline LossMode parse_loss_mode(std::string_view s) {
  if (s == "asym") return LossMode::Asym;
  if (s == "implicit") return LossMode::Implicit;
  if (s == "explicit") return LossMode::Explicit;
  throw Error(ErrorCode::BadConfig, "unknown loss mode '" + std::string(s) + "'");
}

struct LossConfig {
  double tau = 0.05;
  double gamma = 15.0;
  std::size_t K = 1;                   // samples per example in explicit mode
  std::size_t negative_subsample = 0;  // 0 = all negatives

  void validate() const {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw Error(ErrorCode::BadConfig, "tau must be > 0");
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw Error(ErrorCode::BadConfig, "gamma must be >= 0");
    if (K < 1) throw Error(ErrorCode::BadConfig, "K must be >= 1");
  }
};

/// Non-owning view of one training example. `q` is expected to be unit norm
/// (the query model normalizes); `g` and the centroids are used as stored.
struct LossInstance {
  std::span<const double> q;
  std::span<const double> g;
  std::vector<std::span<const double>> negatives;
  std::span<const double> diag_cov;
};

struct LossResult {
  double value = 0.0;
  Vector grad_q;
};

namespace detail {

inline void check_instance(const LossInstance& inst, bool need_cov) {
  const std::size_t d = inst.q.size();
  if (d == 0) throw Error(ErrorCode::DimensionMismatch, "empty query embedding");
  if (inst.g.size() != d) throw Error(ErrorCode::DimensionMismatch, "g dimension differs from q");
  if (!all_finite(inst.q) || !all_finite(inst.g)) throw Error(ErrorCode::NonFiniteInput, "q or g not finite");
  for (const auto& c : inst.negatives) {
    if (c.size() != d) throw Error(ErrorCode::DimensionMismatch, "centroid dimension differs from q");
    if (!all_finite(c)) throw Error(ErrorCode::NonFiniteInput, "centroid not finite");
  }
  if (need_cov) {
    if (inst.diag_cov.size() != d) throw Error(ErrorCode::DimensionMismatch, "diag_cov dimension differs from q");
    for (double s : inst.diag_cov) {
      if (!std::isfinite(s)) throw Error(ErrorCode::NonFiniteInput, "diag_cov not finite");
      if (s < 0.0) throw Error(ErrorCode::NegativeVariance, "diag_cov has a negative entry");
    }
  }
}

struct Contrastive {
  double value = 0.0;
  double neg_mass = 0.0;  // total softmax probability on the negatives
  Vector grad_q;          // from the dot-product logits only
};

// -log softmax of the positive logit q.pos/tau against negatives q.c_j/tau + shift.
inline Contrastive contrastive(std::span<const double> q, std::span<const double> pos,
                               std::span<const std::span<const double>> negs, double tau, double shift) {
  const std::size_t d = q.size();
  Contrastive out;
  out.grad_q.assign(d, 0.0);
  if (negs.empty()) return out;

  const double a0 = dot(q, pos) / tau;
  std::vector<double> a(negs.size());
  double amax = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < negs.size(); ++j) {
    a[j] = dot(q, negs[j]) / tau + shift;
    amax = std::max(amax, a[j]);
  }

  // Subtract the largest logit; log1p keeps precision when the positive dominates.
  if (a0 >= amax) {
    double s = 0.0;
    for (double& x : a) s += (x = std::exp(x - a0));
    out.value = std::log1p(s);
    for (double& x : a) x /= 1.0 + s;
  } else {
    double s = std::exp(a0 - amax);
    for (double& x : a) s += (x = std::exp(x - amax));
    out.value = (amax - a0) + std::log(s);
    for (double& x : a) x /= s;
  }

  double mass = 0.0;
  for (std::size_t j = 0; j < negs.size(); ++j) {
    mass += a[j];
    const auto c = negs[j];
    for (std::size_t i = 0; i < d; ++i) out.grad_q[i] += a[j] * c[i];
  }
  for (std::size_t i = 0; i < d; ++i) out.grad_q[i] = (out.grad_q[i] - mass * pos[i]) / tau;
  out.neg_mass = mass;
  return out;
}

}  // namespace detail

/// sum_i sigma_i q_i^2: the quadratic form q^T Sigma q for diagonal Sigma.
inline double quadratic_form(std::span<const double> q, std::span<const double> diag_cov) {
  if (q.size() != diag_cov.size()) throw Error(ErrorCode::DimensionMismatch, "q and diag_cov differ in size");
  double s = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (diag_cov[i] < 0.0) throw Error(ErrorCode::NegativeVariance, "diag_cov has a negative entry");
    s += diag_cov[i] * q[i] * q[i];
  }
  return s;
}

/// Offset (gamma / 2 tau^2) q^T Sigma q added to every negative logit by the implicit loss.
inline double implicit_regularizer(std::span<const double> q, std::span<const double> diag_cov,
                                   const LossConfig& cfg) {
  return cfg.gamma / (2.0 * cfg.tau * cfg.tau) * quadratic_form(q, diag_cov);
}

inline LossResult asym_loss(const LossInstance& inst, const LossConfig& cfg) {
  cfg.validate();
  detail::check_instance(inst, false);
  auto c = detail::contrastive(inst.q, inst.g, inst.negatives, cfg.tau, 0.0);
  return {c.value, std::move(c.grad_q)};
}

inline LossResult implicit_loss(const LossInstance& inst, const LossConfig& cfg) {
  cfg.validate();
  detail::check_instance(inst, true);
  const double reg = implicit_regularizer(inst.q, inst.diag_cov, cfg);
  auto c = detail::contrastive(inst.q, inst.g, inst.negatives, cfg.tau, reg);
  // d(reg)/dq = (gamma / tau^2) * Sigma q, weighted by the negative softmax mass.
  const double w = c.neg_mass * cfg.gamma / (cfg.tau * cfg.tau);
  for (std::size_t i = 0; i < c.grad_q.size(); ++i) c.grad_q[i] += w * inst.diag_cov[i] * inst.q[i];
  return {c.value, std::move(c.grad_q)};
}

/// Per-negative logits as seen by the softmax in asym or implicit mode.
inline Vector negative_logits(const LossInstance& inst, const LossConfig& cfg, LossMode mode) {
  cfg.validate();
  detail::check_instance(inst, mode == LossMode::Implicit);
  const double shift = mode == LossMode::Implicit ? implicit_regularizer(inst.q, inst.diag_cov, cfg) : 0.0;
  Vector out;
  out.reserve(inst.negatives.size());
  for (const auto& c : inst.negatives) out.push_back(dot(inst.q, c) / cfg.tau + shift);
  return out;
}

/// Mean over the supplied augmented positives of the plain contrastive loss.
/// Negatives carry no regularizer here. Uses a running mean, so a sample list
/// drawn from the same stream as the Monte-Carlo estimator gives the same value.
inline LossResult explicit_loss(const LossInstance& inst, const LossConfig& cfg,
                                std::span<const Vector> samples) {
  cfg.validate();
  detail::check_instance(inst, false);
  if (samples.empty()) throw Error(ErrorCode::EmptySamples, "explicit loss needs at least one sample");
  LossResult out;
  out.grad_q.assign(inst.q.size(), 0.0);
  std::size_t k = 0;
  for (const auto& s : samples) {
    if (s.size() != inst.q.size()) throw Error(ErrorCode::DimensionMismatch, "sample dimension differs from q");
    if (!all_finite(s)) throw Error(ErrorCode::NonFiniteInput, "sample not finite");
    auto c = detail::contrastive(inst.q, s, inst.negatives, cfg.tau, 0.0);
    ++k;
    const double inv = 1.0 / static_cast<double>(k);
    out.value += (c.value - out.value) * inv;
    for (std::size_t i = 0; i < out.grad_q.size(); ++i) out.grad_q[i] += (c.grad_q[i] - out.grad_q[i]) * inv;
  }
  return out;
}

using Rng = std::mt19937_64;

/// One draw of g + sqrt(gamma * sigma) * z, z ~ N(0, I).
inline Vector sample_augmented(std::span<const double> g, std::span<const double> diag_cov, double gamma, Rng& rng) {
  if (g.size() != diag_cov.size()) throw Error(ErrorCode::DimensionMismatch, "g and diag_cov differ in size");
  if (!(gamma >= 0.0)) throw Error(ErrorCode::NegativeVariance, "gamma must be >= 0");
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector out(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(diag_cov[i] >= 0.0)) throw Error(ErrorCode::NegativeVariance, "diag_cov has a negative entry");
    out[i] = g[i] + std::sqrt(gamma * diag_cov[i]) * normal(rng);
  }
  return out;
}

inline Vector sample_augmented(std::span<const double> g, std::span<const double> diag_cov, double gamma,
                               std::uint64_t seed) {
  Rng rng(seed);
  return sample_augmented(g, diag_cov, gamma, rng);
}

/// K consecutive draws from a generator seeded with `seed`.
inline std::vector<Vector> draw_samples(std::span<const double> g, std::span<const double> diag_cov, double gamma,
                                        std::size_t k, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Vector> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(sample_augmented(g, diag_cov, gamma, rng));
  return out;
}

struct BatchLoss {
  double mean = 0.0;
  std::vector<Vector> grads;  // per instance, not scaled by batch size
};

/// Mean loss over a batch; instances are reduced in order.
inline BatchLoss batch_loss(std::span<const LossInstance> instances, const LossConfig& cfg, LossMode mode) {
  if (instances.empty()) throw Error(ErrorCode::EmptyBatch, "batch has no instances");
  if (mode == LossMode::Explicit)
    throw Error(ErrorCode::BadConfig, "batch_loss supports asym and implicit modes; use explicit_loss per sample set");
  BatchLoss out;
  out.grads.reserve(instances.size());
  double sum = 0.0;
  for (const auto& inst : instances) {
    auto r = mode == LossMode::Implicit ? implicit_loss(inst, cfg) : asym_loss(inst, cfg);
    sum += r.value;
    out.grads.push_back(std::move(r.grad_q));
  }
  out.mean = sum / static_cast<double>(instances.size());
  return out;
}

}  // namespace asymvpr
