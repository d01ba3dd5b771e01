#pragma once

// Independent checks for the loss family: Monte-Carlo expectation of the
// augmented loss, the Jensen upper bound, explicit-to-expectation convergence,
// finite-difference gradients, the eigen-sum identity, and a brute-force k-NN
// precompute baseline for cost comparisons against bank construction.

#include "asymvpr/core.hpp"
#include "asymvpr/loss.hpp"
#include "asymvpr/membank.hpp"
#include "asymvpr/model.hpp"

#include <algorithm>
#include <chrono>
#include <functional>
#include <queue>
#include <random>
#include <string>
#include <vector>

namespace asymvpr {

struct McEstimate {
  double estimate = 0.0;
  double stderr_ = 0.0;
};

/// Mean of the per-sample augmented loss over `num_samples` draws of
/// g~ ~ N(g, gamma Sigma) from a generator seeded with `seed`.
inline McEstimate mc_expectation_loss(const LossInstance& inst, const LossConfig& cfg, std::size_t num_samples,
                                      std::uint64_t seed) {
  cfg.validate();
  detail::check_instance(inst, true);
  if (num_samples < 2) throw Error(ErrorCode::BadConfig, "need at least two Monte-Carlo samples");
  Rng rng(seed);
  double mean = 0.0, m2 = 0.0;
  for (std::size_t k = 1; k <= num_samples; ++k) {
    const auto s = sample_augmented(inst.g, inst.diag_cov, cfg.gamma, rng);
    const double x = detail::contrastive(inst.q, s, inst.negatives, cfg.tau, 0.0).value;
    const double delta = x - mean;
    mean += delta * (1.0 / static_cast<double>(k));
    m2 += delta * (x - mean);
  }
  const double n = static_cast<double>(num_samples);
  const double var = std::max(0.0, m2 / (n - 1.0));
  return {mean, std::sqrt(var / n)};
}

struct BoundReport {
  double mc_estimate = 0.0;
  double mc_stderr = 0.0;
  double implicit_value = 0.0;
  double asym_value = 0.0;
  bool holds = false;  // mc_estimate <= implicit_value + 3 mc_stderr
};

inline std::vector<BoundReport> check_jensen_bound(std::span<const LossInstance> instances, const LossConfig& cfg,
                                                   std::size_t num_samples, std::uint64_t seed) {
  std::vector<BoundReport> out;
  out.reserve(instances.size());
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto mc = mc_expectation_loss(instances[i], cfg, num_samples, detail::splitmix64(seed + i));
    BoundReport r;
    r.mc_estimate = mc.estimate;
    r.mc_stderr = mc.stderr_;
    r.implicit_value = implicit_loss(instances[i], cfg).value;
    r.asym_value = asym_loss(instances[i], cfg).value;
    r.holds = r.mc_estimate <= r.implicit_value + 3.0 * r.mc_stderr;
    out.push_back(r);
  }
  return out;
}

struct ConvergenceRow {
  std::size_t K = 0;
  double mean_abs_deviation = 0.0;
};

/// Mean |explicit_K - reference| over `trials` independent K-sample draws,
/// where the reference is a `reference_samples` Monte-Carlo estimate.
inline std::vector<ConvergenceRow> convergence_check(const LossInstance& inst, const LossConfig& cfg,
                                                     std::span<const std::size_t> k_list, std::size_t trials,
                                                     std::uint64_t seed, std::size_t reference_samples = 200000) {
  for (std::size_t i = 1; i < k_list.size(); ++i)
    if (k_list[i] <= k_list[i - 1]) throw Error(ErrorCode::BadConfig, "K list must be strictly ascending");
  if (trials < 1) throw Error(ErrorCode::BadConfig, "trials must be >= 1");
  const double ref = mc_expectation_loss(inst, cfg, reference_samples, seed).estimate;
  std::vector<ConvergenceRow> rows;
  for (std::size_t ki = 0; ki < k_list.size(); ++ki) {
    double sum = 0.0;
    for (std::size_t t = 0; t < trials; ++t) {
      const auto trial_seed = detail::splitmix64(seed ^ detail::splitmix64((ki + 1) * 1000003ull + t + 1));
      const auto samples = draw_samples(inst.g, inst.diag_cov, cfg.gamma, k_list[ki], trial_seed);
      sum += std::abs(explicit_loss(inst, cfg, samples).value - ref);
    }
    rows.push_back({k_list[ki], sum / static_cast<double>(trials)});
  }
  return rows;
}

using ScalarFunction = std::function<double(std::span<const double>)>;

/// Central differences, one coordinate at a time.
inline Vector finite_diff_grad(const ScalarFunction& f, std::span<const double> point, double h = 1e-5) {
  Vector x(point.begin(), point.end());
  Vector grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw Error(ErrorCode::NonFiniteEvaluation, "function not finite near coordinate " + std::to_string(i));
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

/// ||a - b|| / max(||a||, ||b||); 0 when both vanish.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorCode::DimensionMismatch, "relative_error size mismatch");
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
  const double scale = std::max(l2_norm(a), l2_norm(b));
  if (scale == 0.0) return 0.0;
  return std::sqrt(diff) / scale;
}

/// sum_j lambda_j (v_j^T q)^2 with Sigma = diag(sigma) written out as a full
/// eigen-decomposition V = I, Lambda = diag(sigma).
inline double eigen_sum_quadratic_form(std::span<const double> q, std::span<const double> diag_cov) {
  const std::size_t d = q.size();
  if (diag_cov.size() != d) throw Error(ErrorCode::DimensionMismatch, "q and diag_cov differ in size");
  std::vector<Vector> basis(d, Vector(d, 0.0));
  for (std::size_t j = 0; j < d; ++j) basis[j][j] = 1.0;
  double s = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    double proj = 0.0;
    for (std::size_t i = 0; i < d; ++i) proj += basis[j][i] * q[i];
    s += diag_cov[j] * proj * proj;
  }
  return s;
}

inline Vector flatten(const QueryModelParams& p) {
  Vector out;
  out.reserve(p.num_parameters());
  for (const auto& l : p.layers) {
    out.insert(out.end(), l.weight.begin(), l.weight.end());
    out.insert(out.end(), l.bias.begin(), l.bias.end());
  }
  return out;
}

inline void unflatten(std::span<const double> flat, QueryModelParams& p) {
  if (flat.size() != p.num_parameters()) throw Error(ErrorCode::ShapeMismatch, "flat parameter size mismatch");
  std::size_t off = 0;
  for (auto& l : p.layers) {
    std::copy_n(flat.begin() + off, l.weight.size(), l.weight.begin());
    off += l.weight.size();
    std::copy_n(flat.begin() + off, l.bias.size(), l.bias.begin());
    off += l.bias.size();
  }
}

/// Owning storage behind a LossInstance view.
struct OwnedInstance {
  Vector q;
  Vector g;
  std::vector<Vector> negatives;
  Vector diag_cov;

  LossInstance view() const {
    LossInstance v{q, g, {}, diag_cov};
    for (const auto& c : negatives) v.negatives.emplace_back(c);
    return v;
  }
};

struct InstanceSpec {
  std::size_t d_min = 2, d_max = 32;
  std::size_t neg_min = 1, neg_max = 50;
  double sigma_max = 0.05;
};

/// Random unit q, unit-ish g and centroids, and variances in [0, sigma_max].
inline OwnedInstance random_instance(Rng& rng, const InstanceSpec& spec = {}) {
  std::uniform_int_distribution<std::size_t> ud(spec.d_min, spec.d_max);
  std::uniform_int_distribution<std::size_t> un(spec.neg_min, spec.neg_max);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const std::size_t d = ud(rng), n = un(rng);
  auto unit = [&] {
    Vector v(d);
    for (double& x : v) x = normal(rng);
    return normalize(v);
  };
  OwnedInstance inst;
  inst.q = unit();
  inst.g = unit();
  // Shrink the positive toward the query so losses are not saturated at either end.
  const double mix = u01(rng);
  for (std::size_t i = 0; i < d; ++i) inst.g[i] = mix * inst.q[i] + (1.0 - mix) * inst.g[i];
  for (std::size_t j = 0; j < n; ++j) {
    auto c = unit();
    const double shrink = 0.5 + 0.5 * u01(rng);  // centroids of unit vectors are sub-unit
    for (double& x : c) x *= shrink;
    inst.negatives.push_back(std::move(c));
  }
  inst.diag_cov.resize(d);
  for (double& s : inst.diag_cov) s = spec.sigma_max * u01(rng);
  return inst;
}

struct KnnResult {
  std::vector<std::vector<std::size_t>> neighbors;
  double seconds = 0.0;
};

/// Exact top-k neighbours of every gallery row among the other rows (self
/// excluded), by dot product with ties to the lower index. O(N^2 d).
inline KnnResult knn_precompute_baseline(const EmbeddingMatrix& gallery, std::size_t k) {
  const std::size_t n = gallery.count();
  if (k < 1 || k >= n) throw Error(ErrorCode::KTooLarge, "need 1 <= k < N");
  const auto t0 = std::chrono::steady_clock::now();
  KnnResult res;
  res.neighbors.resize(n);
  struct Cand {
    double score;
    std::size_t idx;
  };
  // Heap top is the weakest kept candidate.
  auto weaker = [](const Cand& a, const Cand& b) {
    return a.score > b.score || (a.score == b.score && a.idx < b.idx);
  };
  std::vector<Cand> heap;
  heap.reserve(k + 1);
  for (std::size_t i = 0; i < n; ++i) {
    heap.clear();
    const auto qi = gallery.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const Cand c{dot(qi, gallery.row(j)), j};
      if (heap.size() < k) {
        heap.push_back(c);
        std::push_heap(heap.begin(), heap.end(), weaker);
      } else if (weaker(c, heap.front())) {
        std::pop_heap(heap.begin(), heap.end(), weaker);
        heap.back() = c;
        std::push_heap(heap.begin(), heap.end(), weaker);
      }
    }
    std::sort_heap(heap.begin(), heap.end(), weaker);
    auto& out = res.neighbors[i];
    out.reserve(k);
    for (const auto& c : heap) out.push_back(c.idx);
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

struct BenchRow {
  std::size_t N = 0;
  double bank_s = 0.0;
  double knn_s = 0.0;
  double ratio = 0.0;
};

/// Random unit embeddings with N / places_divisor places, `repeats` timings each, medians reported.
inline std::vector<BenchRow> bench_bank_vs_knn(std::span<const std::size_t> sizes, std::size_t d, std::size_t k,
                                               std::uint64_t seed, std::size_t repeats = 3,
                                               std::size_t places_divisor = 10) {
  if (repeats < 1) throw Error(ErrorCode::BadConfig, "repeats must be >= 1");
  std::vector<BenchRow> rows;
  for (std::size_t n : sizes) {
    Rng rng(detail::splitmix64(seed ^ n));
    std::normal_distribution<double> normal(0.0, 1.0);
    GallerySet g;
    Vector v(d);
    const std::size_t places = std::max<std::size_t>(1, n / places_divisor);
    for (std::size_t i = 0; i < n; ++i) {
      for (double& x : v) x = normal(rng);
      g.embeddings.append(normalize(v));
      ImageRecord r;
      r.id = "img" + std::to_string(i);
      r.place_id = "place" + std::to_string(i % places);
      r.row = i;
      g.records.push_back(std::move(r));
    }
    std::vector<double> bank_t, knn_t;
    for (std::size_t rep = 0; rep < repeats; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto bank = build_bank(g, true);
      bank_t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      if (bank.size() != places) throw Error(ErrorCode::BankMismatch, "unexpected bank size in bench");
      knn_t.push_back(knn_precompute_baseline(g.embeddings, std::min(k, n - 1)).seconds);
    }
    auto median = [](std::vector<double> x) {
      std::sort(x.begin(), x.end());
      return x[x.size() / 2];
    };
    BenchRow row{n, median(bank_t), median(knn_t), 0.0};
    row.ratio = row.knn_s / std::max(row.bank_s, 1e-12);
    rows.push_back(row);
  }
  return rows;
}

inline std::string bench_csv(std::span<const BenchRow> rows) {
  std::ostringstream out;
  out.precision(9);
  out << "N,bank_s,knn_s,ratio\n";
  for (const auto& r : rows) out << r.N << ',' << r.bank_s << ',' << r.knn_s << ',' << r.ratio << '\n';
  return out.str();
}

}  // namespace asymvpr
