#pragma once

// AdamW with cosine learning-rate decay, and the compatibility training loop:
// only the query model is updated; gallery embeddings and bank stay frozen.

#include "asymvpr/core.hpp"
#include "asymvpr/loss.hpp"
#include "asymvpr/membank.hpp"
#include "asymvpr/model.hpp"

#include <algorithm>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <thread>
#include <vector>

namespace asymvpr {

struct OptimConfig {
  double lr_max = 5e-4;
  double lr_min = 1e-4;
  std::size_t epochs = 15;
  std::size_t batch_size = 64;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  LossMode loss_mode = LossMode::Implicit;
  LossConfig loss{};
  std::uint64_t seed = 0;
  double exclusion_radius_m = 0.0;
  std::size_t workers = 1;

  void validate() const {
    if (!(lr_min > 0.0 && lr_min <= lr_max)) throw Error(ErrorCode::BadConfig, "need 0 < lr_min <= lr_max");
    if (epochs < 1) throw Error(ErrorCode::BadConfig, "epochs must be >= 1");
    if (batch_size < 1) throw Error(ErrorCode::BadConfig, "batch_size must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
      throw Error(ErrorCode::BadConfig, "betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw Error(ErrorCode::BadConfig, "eps must be > 0");
    if (!(weight_decay >= 0.0)) throw Error(ErrorCode::BadConfig, "weight_decay must be >= 0");
    if (!(exclusion_radius_m >= 0.0)) throw Error(ErrorCode::BadConfig, "exclusion_radius_m must be >= 0");
    if (workers < 1) throw Error(ErrorCode::BadConfig, "workers must be >= 1");
    loss.validate();
  }
};

/// lr_min + (lr_max - lr_min) (1 + cos(pi step / total)) / 2, exact at both ends.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr_max, double lr_min) {
  if (total_steps < 1) throw Error(ErrorCode::BadStep, "total_steps must be >= 1");
  if (step > total_steps) throw Error(ErrorCode::BadStep, "step beyond total_steps");
  if (step == 0) return lr_max;
  if (step == total_steps) return lr_min;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  const double lr = lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
  return std::clamp(lr, lr_min, lr_max);
}

struct AdamWState {
  std::vector<Vector> m;
  std::vector<Vector> v;
  std::size_t t = 0;
};

/// One decoupled-weight-decay Adam update over parameter blocks.
inline void adamw_step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads,
                       AdamWState& state, double lr, const OptimConfig& cfg) {
  if (params.size() != grads.size()) throw Error(ErrorCode::ShapeMismatch, "parameter/gradient block count differs");
  for (std::size_t b = 0; b < params.size(); ++b) {
    if (params[b].size() != grads[b].size()) throw Error(ErrorCode::ShapeMismatch, "gradient block size differs");
    if (!all_finite(grads[b])) throw Error(ErrorCode::NonFiniteGrad, "non-finite gradient");
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw Error(ErrorCode::ShapeMismatch, "optimizer state has wrong shape");
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t b = 0; b < params.size(); ++b) {
    auto p = params[b];
    auto g = grads[b];
    auto& m = state.m[b];
    auto& v = state.v[b];
    if (m.size() != p.size()) throw Error(ErrorCode::ShapeMismatch, "optimizer state has wrong shape");
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] = p[i] - lr * mhat / (std::sqrt(vhat) + cfg.eps) - lr * cfg.weight_decay * p[i];
    }
  }
}

inline void adamw_step(QueryModelParams& params, const ModelGrads& grads, AdamWState& state, double lr,
                       const OptimConfig& cfg) {
  auto p = params.blocks();
  std::vector<std::span<const double>> g;
  for (const auto& l : grads.layers) {
    g.emplace_back(l.weight);
    g.emplace_back(l.bias);
  }
  adamw_step(p, g, state, lr, cfg);
}

struct TrainLogRow {
  std::size_t epoch = 0;  // 1-based
  std::size_t step = 0;   // optimizer steps taken so far
  double lr = 0.0;        // learning rate of the epoch's last step
  double mean_loss = 0.0;
};

struct TrainResult {
  QueryModelParams params;
  std::vector<TrainLogRow> log;
};

/// Per-example loss and query gradient for one training image.
struct ExampleContext {
  const GallerySet* gallery = nullptr;
  const MemoryBank* bank = nullptr;
  const std::vector<std::vector<std::span<const double>>>* negatives = nullptr;  // per bank entry
  const std::vector<std::size_t>* place_of = nullptr;                            // record -> bank entry
  const OptimConfig* cfg = nullptr;
};

inline double example_loss_and_grad(const ExampleContext& ctx, const QueryModelParams& params, std::size_t record,
                                    std::uint64_t example_seed, ForwardCache& cache, ModelGrads& grads, double scale) {
  const auto& rec = ctx.gallery->records[record];
  const Vector& q = forward(params, *rec.raw_feature, cache);
  const std::size_t place = (*ctx.place_of)[record];
  const auto& stats = (*ctx.bank)[place];
  const auto& lcfg = ctx.cfg->loss;

  LossInstance inst{q, ctx.gallery->embedding(record), (*ctx.negatives)[place], stats.diag_cov};
  if (lcfg.negative_subsample > 0 && lcfg.negative_subsample < inst.negatives.size()) {
    std::mt19937_64 rng(detail::splitmix64(example_seed ^ 0xA5A5A5A5ull));
    std::vector<std::span<const double>> picked;
    std::sample(inst.negatives.begin(), inst.negatives.end(), std::back_inserter(picked), lcfg.negative_subsample,
                rng);
    inst.negatives = std::move(picked);
  }

  LossResult r;
  switch (ctx.cfg->loss_mode) {
    case LossMode::Asym: r = asym_loss(inst, lcfg); break;
    case LossMode::Implicit: r = implicit_loss(inst, lcfg); break;
    case LossMode::Explicit: {
      const auto samples = draw_samples(inst.g, stats.diag_cov, lcfg.gamma, lcfg.K, example_seed);
      r = explicit_loss(inst, lcfg, samples);
      break;
    }
  }
  backward(params, cache, r.grad_q, grads, scale);
  return r.value;
}

/// Trains the query model against frozen gallery embeddings and bank.
/// Results depend only on the inputs, the seed and the worker count.
inline TrainResult train(const GallerySet& gallery, const MemoryBank& bank, QueryModelParams params,
                         const OptimConfig& cfg) {
  cfg.validate();
  params.validate();
  if (gallery.size() == 0) throw Error(ErrorCode::EmptyGallery, "gallery has no records");
  if (bank.dim() != gallery.dim()) throw Error(ErrorCode::BankMismatch, "bank and gallery dimensions differ");
  if (params.output_dim() != gallery.dim())
    throw Error(ErrorCode::ShapeMismatch, "model output dim differs from gallery dim");

  std::vector<std::size_t> place_of(gallery.size());
  for (std::size_t i = 0; i < gallery.size(); ++i) {
    const auto& r = gallery.records[i];
    if (!r.raw_feature) throw Error(ErrorCode::MissingRawFeature, "record '" + r.id + "' has no raw feature");
    if (r.raw_feature->size() != params.input_dim())
      throw Error(ErrorCode::ShapeMismatch, "record '" + r.id + "' raw feature has the wrong dimension");
    auto j = bank.find(r.place_id);
    if (!j) throw Error(ErrorCode::BankMismatch, "place '" + r.place_id + "' missing from bank");
    place_of[i] = *j;
  }

  std::vector<std::optional<GeoTag>> coords;
  if (cfg.exclusion_radius_m > 0.0) coords = place_coordinates(bank, gallery);
  std::vector<std::vector<std::span<const double>>> negatives(bank.size());
  for (std::size_t j = 0; j < bank.size(); ++j)
    for (std::size_t n : negative_set(bank, bank[j].place_id, cfg.exclusion_radius_m, coords))
      negatives[j].emplace_back(bank[n].centroid);

  const ExampleContext ctx{&gallery, &bank, &negatives, &place_of, &cfg};
  const std::size_t n = gallery.size();
  const std::size_t batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.epochs * batches_per_epoch;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 shuffle_rng(cfg.seed);
  AdamWState state;
  TrainResult result;
  const std::size_t workers = std::max<std::size_t>(1, cfg.workers);
  std::vector<ModelGrads> worker_grads(workers, zeros_like(params));
  std::vector<ForwardCache> caches(workers);
  std::vector<double> losses(n);

  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_sum = 0.0;
    double lr = cfg.lr_max;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      const std::size_t bsz = end - start;
      const double scale = 1.0 / static_cast<double>(bsz);
      lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min);

      auto run_chunk = [&](std::size_t w, std::size_t lo, std::size_t hi) {
        auto& g = worker_grads[w];
        for (auto& l : g.layers) {
          std::fill(l.weight.begin(), l.weight.end(), 0.0);
          std::fill(l.bias.begin(), l.bias.end(), 0.0);
        }
        for (std::size_t k = lo; k < hi; ++k) {
          const std::uint64_t seed = detail::splitmix64(cfg.seed ^ detail::splitmix64(step * 1000003ull + k));
          losses[k] = example_loss_and_grad(ctx, params, order[k], seed, caches[w], g, scale);
        }
      };

      const std::size_t used = std::min(workers, bsz);
      if (used == 1) {
        run_chunk(0, start, end);
      } else {
        std::vector<std::jthread> pool;
        const std::size_t per = (bsz + used - 1) / used;
        for (std::size_t w = 0; w < used; ++w) {
          const std::size_t lo = start + w * per;
          const std::size_t hi = std::min(end, lo + per);
          if (lo < hi) pool.emplace_back(run_chunk, w, lo, hi);
        }
      }
      // Fixed-order reduction across workers.
      for (std::size_t w = 1; w < used; ++w)
        for (std::size_t li = 0; li < params.layers.size(); ++li) {
          auto& dst = worker_grads[0].layers[li];
          const auto& src = worker_grads[w].layers[li];
          for (std::size_t i = 0; i < dst.weight.size(); ++i) dst.weight[i] += src.weight[i];
          for (std::size_t i = 0; i < dst.bias.size(); ++i) dst.bias[i] += src.bias[i];
        }
      for (std::size_t k = start; k < end; ++k) epoch_sum += losses[k];

      adamw_step(params, worker_grads[0], state, lr, cfg);
      ++step;
    }
    result.log.push_back({epoch, step, lr, epoch_sum / static_cast<double>(n)});
  }
  result.params = std::move(params);
  return result;
}

inline void write_train_log(const std::string& path, std::span<const TrainLogRow> log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write '" + path + "'");
  out.precision(17);
  out << "epoch,step,lr,mean_loss\n";
  for (const auto& r : log) out << r.epoch << ',' << r.step << ',' << r.lr << ',' << r.mean_loss << '\n';
}

}  // namespace asymvpr
