#pragma once

// Randomized validation suites over the loss, model and sampler: the
// expectation bound, analytic-vs-numeric gradients, the eigen-sum identity
// and explicit-to-expectation convergence.

#include "asymvpr/loss.hpp"
#include "asymvpr/model.hpp"
#include "asymvpr/oracle.hpp"

#include <chrono>
#include <sstream>
#include <string>
#include <vector>

namespace asymvpr {

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string summary;
  double seconds = 0.0;
};

namespace detail {

template <typename F>
SuiteResult timed(const std::string& name, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r = body();
  r.name = name;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline LossConfig random_loss_config(Rng& rng, double gamma_max = 20.0) {
  std::uniform_real_distribution<double> ut(0.05, 1.0), ug(0.0, gamma_max);
  LossConfig c;
  c.tau = ut(rng);
  c.gamma = ug(rng);
  return c;
}

}  // namespace detail

/// Monte-Carlo expectation never exceeds the implicit loss by more than 3 stderr.
inline SuiteResult suite_bound(std::uint64_t seed, std::size_t instances = 200, std::size_t samples = 10000) {
  return detail::timed("bound", [&] {
    Rng rng(seed);
    std::size_t holds = 0;
    double worst = -std::numeric_limits<double>::infinity();  // (mc - implicit) / stderr
    for (std::size_t i = 0; i < instances; ++i) {
      const auto inst = random_instance(rng);
      const auto cfg = detail::random_loss_config(rng);
      const std::vector<LossInstance> one{inst.view()};
      const auto rep = check_jensen_bound(one, cfg, samples, seed + i)[0];
      if (rep.holds) ++holds;
      if (rep.mc_stderr > 0.0) worst = std::max(worst, (rep.mc_estimate - rep.implicit_value) / rep.mc_stderr);
    }
    std::ostringstream s;
    s << holds << "/" << instances << " hold; max (mc - implicit)/stderr = " << worst;
    return SuiteResult{"", holds == instances, s.str(), 0.0};
  });
}

/// Analytic gradients of both losses in q and of implicit_loss through the
/// query model in every parameter, against central differences.
inline SuiteResult suite_grad(std::uint64_t seed, std::size_t instances = 100, double tol = 1e-6) {
  return detail::timed("grad", [&] {
    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> uraw(3, 10), uhid(2, 8);
    std::normal_distribution<double> normal(0.0, 1.0);
    InstanceSpec spec;
    spec.d_max = 8;
    spec.neg_max = 12;
    double worst_q = 0.0, worst_chain = 0.0;
    std::size_t failures = 0;
    for (std::size_t i = 0; i < instances; ++i) {
      const auto inst = random_instance(rng);
      const auto cfg = detail::random_loss_config(rng);
      for (auto mode : {LossMode::Asym, LossMode::Implicit}) {
        auto eval = [&](const LossInstance& v) { return mode == LossMode::Asym ? asym_loss(v, cfg) : implicit_loss(v, cfg); };
        const auto analytic = eval(inst.view()).grad_q;
        const auto numeric = finite_diff_grad(
            [&](std::span<const double> q) {
              auto v = inst.view();
              v.q = q;
              return eval(v).value;
            },
            inst.q);
        const double e = relative_error(analytic, numeric);
        worst_q = std::max(worst_q, e);
        if (!(e <= tol)) ++failures;
      }

      // Full chain: raw -> model -> implicit_loss.
      auto small = random_instance(rng, spec);
      const std::size_t d = small.q.size();
      auto params = init_params({uraw(rng), uhid(rng), d}, rng());
      for (auto& l : params.layers)
        for (double& b : l.bias) b = 0.1 * normal(rng);
      Vector raw(params.input_dim());
      for (double& x : raw) x = normal(rng);
      const auto view = small.view();
      auto loss_of = [&](const QueryModelParams& m) {
        const auto q = forward(m, raw);
        LossInstance v = view;
        v.q = q;
        return implicit_loss(v, cfg);
      };
      const auto at = loss_of(params);
      const auto analytic = flatten(backward(params, raw, at.grad_q));
      const auto numeric = finite_diff_grad(
          [&](std::span<const double> flat) {
            auto m = params;
            unflatten(flat, m);
            return loss_of(m).value;
          },
          flatten(params));
      const double e = relative_error(analytic, numeric);
      worst_chain = std::max(worst_chain, e);
      if (!(e <= tol)) ++failures;
    }
    std::ostringstream s;
    s << instances << " instances; max rel err q-gradient " << worst_q << ", model chain " << worst_chain;
    return SuiteResult{"", failures == 0, s.str(), 0.0};
  });
}

/// quadratic_form agrees with the explicit eigen-basis expansion.
inline SuiteResult suite_eig(std::uint64_t seed, std::size_t instances = 100, double tol = 1e-10) {
  return detail::timed("eig", [&] {
    Rng rng(seed);
    std::uniform_real_distribution<double> usig(0.0, 2.0);
    double worst = 0.0;
    for (std::size_t i = 0; i < instances; ++i) {
      auto inst = random_instance(rng);
      for (double& s : inst.diag_cov) s = usig(rng);
      worst = std::max(worst, std::abs(quadratic_form(inst.q, inst.diag_cov) -
                                       eigen_sum_quadratic_form(inst.q, inst.diag_cov)));
    }
    std::ostringstream s;
    s << instances << " instances; max abs diff " << worst;
    return SuiteResult{"", worst <= tol, s.str(), 0.0};
  });
}

/// Mean |explicit_K - reference| strictly decreases over K = 1, 10, 100, 1000.
inline SuiteResult suite_conv(std::uint64_t seed, std::size_t trials = 50) {
  return detail::timed("conv", [&] {
    Rng rng(seed);
    const auto inst = random_instance(rng);
    LossConfig cfg;
    cfg.tau = 0.1;
    cfg.gamma = 15.0;
    const std::size_t ks[] = {1, 10, 100, 1000};
    const auto rows = convergence_check(inst.view(), cfg, ks, trials, seed);
    bool ok = true;
    std::ostringstream s;
    s << "mean |dev|:";
    for (std::size_t i = 0; i < rows.size(); ++i) {
      s << " K=" << rows[i].K << ":" << rows[i].mean_abs_deviation;
      if (i > 0 && !(rows[i].mean_abs_deviation < rows[i - 1].mean_abs_deviation)) ok = false;
    }
    return SuiteResult{"", ok, s.str(), 0.0};
  });
}

inline const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"bound", "grad", "eig", "conv"};
  return names;
}

inline SuiteResult run_suite(const std::string& name, std::uint64_t seed) {
  if (name == "bound") return suite_bound(seed);
  if (name == "grad") return suite_grad(seed);
  if (name == "eig") return suite_eig(seed);
  if (name == "conv") return suite_conv(seed);
  throw Error(ErrorCode::BadConfig, "unknown suite '" + name + "'");
}

}  // namespace asymvpr
