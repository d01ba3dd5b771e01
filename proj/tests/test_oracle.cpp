#include "asymvpr/oracle.hpp"
#include "asymvpr/eval.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace asymvpr;

namespace {

template <typename F>
void expect_code(ErrorCode code, F&& f) {
  try {
    f();
    ADD_FAILURE() << "expected " << to_string(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

struct LogTwoFixture {
  Vector q{1.0, 0.0};
  Vector g{1.0, 0.0};
  Vector c{0.0, 1.0};
  Vector sigma{1.0, 1.0};
  LossInstance view() const { return {q, g, {c}, sigma}; }
};

LossConfig cfg_of(double tau, double gamma) {
  LossConfig c;
  c.tau = tau;
  c.gamma = gamma;
  return c;
}

EmbeddingMatrix random_rows(Rng& rng, std::size_t n, std::size_t d) {
  std::normal_distribution<double> nd(0.0, 1.0);
  EmbeddingMatrix m(n, d, true);
  Vector v(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (double& x : v) x = nd(rng);
    const auto u = normalize(v);
    std::copy(u.begin(), u.end(), m.row(i).begin());
  }
  return m;
}

double loglog_slope(const std::vector<double>& xs, const std::vector<double>& ys) {
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += std::log(xs[i]) / xs.size();
    my += std::log(ys[i]) / ys.size();
  }
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (std::log(xs[i]) - mx) * (std::log(ys[i]) - my);
    sxx += (std::log(xs[i]) - mx) * (std::log(xs[i]) - mx);
  }
  return sxy / sxx;
}

}  // namespace

TEST(MonteCarlo, GammaZeroIsExact) {
  LogTwoFixture f;
  const auto cfg = cfg_of(0.5, 0.0);
  const auto mc = mc_expectation_loss(f.view(), cfg, 100, 1);
  EXPECT_EQ(mc.estimate, asym_loss(f.view(), cfg).value);
  EXPECT_EQ(mc.stderr_, 0.0);
}

TEST(MonteCarlo, LogTwoBound) {
  LogTwoFixture f;
  const auto mc = mc_expectation_loss(f.view(), cfg_of(1.0, 2.0), 100000, 7);
  EXPECT_LE(mc.estimate, 0.693147 + 3.0 * mc.stderr_);
  EXPECT_GT(mc.stderr_, 0.0);
}

TEST(MonteCarlo, StderrShrinksWithSamples) {
  LogTwoFixture f;
  const auto cfg = cfg_of(1.0, 2.0);
  const auto a = mc_expectation_loss(f.view(), cfg, 20000, 11);
  const auto b = mc_expectation_loss(f.view(), cfg, 40000, 11);
  const double ratio = b.stderr_ / a.stderr_;
  EXPECT_NEAR(ratio, 1.0 / std::sqrt(2.0), 0.2 / std::sqrt(2.0));
}

TEST(MonteCarlo, MatchesExplicitLossWithSameSamples) {
  Rng rng(3);
  const auto inst = random_instance(rng);
  const auto cfg = cfg_of(0.2, 10.0);
  const auto samples = draw_samples(inst.g, inst.diag_cov, cfg.gamma, 500, 99);
  EXPECT_EQ(mc_expectation_loss(inst.view(), cfg, 500, 99).estimate, explicit_loss(inst.view(), cfg, samples).value);
}

TEST(MonteCarlo, TooFewSamples) {
  LogTwoFixture f;
  expect_code(ErrorCode::BadConfig, [&] { mc_expectation_loss(f.view(), cfg_of(1, 1), 1, 0); });
}

TEST(JensenBound, RandomSuiteHolds) {
  Rng rng(5);
  std::uniform_real_distribution<double> ug(0.0, 20.0), ut(0.05, 1.0);
  for (int i = 0; i < 40; ++i) {
    const auto inst = random_instance(rng);
    const auto cfg = cfg_of(ut(rng), ug(rng));
    const std::vector<LossInstance> one{inst.view()};
    const auto r = check_jensen_bound(one, cfg, 2000, 100 + i);
    ASSERT_EQ(r.size(), 1u);
    EXPECT_TRUE(r[0].holds) << "instance " << i << " mc " << r[0].mc_estimate << " implicit " << r[0].implicit_value;
    EXPECT_GE(r[0].mc_stderr, 0.0);
  }
}

TEST(JensenBound, DegenerateInstancesAreExact) {
  Rng rng(6);
  for (int i = 0; i < 10; ++i) {
    auto inst = random_instance(rng);
    const std::vector<LossInstance> one{inst.view()};
    const auto r0 = check_jensen_bound(one, cfg_of(0.1, 0.0), 50, i)[0];
    EXPECT_EQ(r0.implicit_value, r0.asym_value);
    EXPECT_EQ(r0.mc_estimate, r0.asym_value);
    std::fill(inst.diag_cov.begin(), inst.diag_cov.end(), 0.0);
    const std::vector<LossInstance> flat{inst.view()};
    const auto r1 = check_jensen_bound(flat, cfg_of(0.1, 15.0), 50, i)[0];
    EXPECT_EQ(r1.mc_estimate, r1.implicit_value);
    EXPECT_TRUE(r1.holds);
  }
}

TEST(Convergence, DeviationDecreasesWithK) {
  Rng rng(8);
  const auto inst = random_instance(rng);
  const std::size_t ks[] = {1, 10, 100, 1000};
  const auto rows = convergence_check(inst.view(), cfg_of(0.1, 15.0), ks, 50, 3);
  ASSERT_EQ(rows.size(), 4u);
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_LT(rows[i].mean_abs_deviation, rows[i - 1].mean_abs_deviation);
}

TEST(Convergence, GammaZeroHasNoDeviation) {
  Rng rng(9);
  const auto inst = random_instance(rng);
  const std::size_t ks[] = {1, 10, 100};
  for (const auto& r : convergence_check(inst.view(), cfg_of(0.1, 0.0), ks, 5, 3, 1000))
    EXPECT_EQ(r.mean_abs_deviation, 0.0);
}

TEST(Convergence, SelfComparisonIsZero) {
  Rng rng(10);
  const auto inst = random_instance(rng);
  const auto cfg = cfg_of(0.1, 15.0);
  const std::size_t n = 5000;
  const auto ref = mc_expectation_loss(inst.view(), cfg, n, 77).estimate;
  const auto samples = draw_samples(inst.g, inst.diag_cov, cfg.gamma, n, 77);
  EXPECT_EQ(std::abs(explicit_loss(inst.view(), cfg, samples).value - ref), 0.0);
}

TEST(FiniteDiff, Quadratic) {
  const auto g = finite_diff_grad([](std::span<const double> x) { return x[0] * x[0] + x[1] * x[1]; }, Vector{1, 2});
  EXPECT_NEAR(g[0], 2.0, 1e-8);
  EXPECT_NEAR(g[1], 4.0, 1e-8);
}

TEST(FiniteDiff, ConstantAndNonFinite) {
  EXPECT_EQ(finite_diff_grad([](std::span<const double>) { return 3.0; }, Vector{1, 2, 3}), Vector(3, 0.0));
  expect_code(ErrorCode::NonFiniteEvaluation,
              [] { finite_diff_grad([](std::span<const double> x) { return std::log(x[0]); }, Vector{0.0}); });
}

TEST(FiniteDiff, ImplicitLossGradient) {
  Rng rng(12);
  const auto inst = random_instance(rng);
  const auto cfg = cfg_of(0.1, 15.0);
  const auto analytic = implicit_loss(inst.view(), cfg).grad_q;
  const auto numeric = finite_diff_grad(
      [&](std::span<const double> q) {
        auto v = inst.view();
        v.q = q;
        return implicit_loss(v, cfg).value;
      },
      inst.q);
  EXPECT_LE(relative_error(analytic, numeric), 1e-6);
}

TEST(EigenIdentity, MatchesQuadraticForm) {
  Rng rng(13);
  for (int i = 0; i < 100; ++i) {
    const auto inst = random_instance(rng);
    EXPECT_LE(std::abs(eigen_sum_quadratic_form(inst.q, inst.diag_cov) - quadratic_form(inst.q, inst.diag_cov)),
              1e-10);
  }
}

TEST(Knn, OrthonormalTieBreak) {
  EmbeddingMatrix g(4, 4);
  for (std::size_t i = 0; i < 4; ++i) g.row(i)[i] = 1.0;
  const auto r = knn_precompute_baseline(g, 1);
  EXPECT_EQ(r.neighbors[0], (std::vector<std::size_t>{1}));
  EXPECT_EQ(r.neighbors[1], (std::vector<std::size_t>{0}));
  EXPECT_EQ(r.neighbors[2], (std::vector<std::size_t>{0}));
  EXPECT_EQ(r.neighbors[3], (std::vector<std::size_t>{0}));
}

TEST(Knn, KTooLarge) {
  expect_code(ErrorCode::KTooLarge, [] { knn_precompute_baseline(EmbeddingMatrix(4, 2), 4); });
  expect_code(ErrorCode::KTooLarge, [] { knn_precompute_baseline(EmbeddingMatrix(4, 2), 0); });
}

TEST(Knn, MatchesRetrieveGalleryVsGallery) {
  Rng rng(14);
  const auto g = random_rows(rng, 1000, 16);
  const auto knn = knn_precompute_baseline(g, 10);
  const auto ranked = retrieve(g, g, 11);
  for (std::size_t i = 0; i < g.count(); ++i) {
    std::vector<std::size_t> expected;
    for (auto j : ranked[i])
      if (j != i) expected.push_back(j);
    expected.resize(10);
    ASSERT_EQ(knn.neighbors[i], expected) << "row " << i;
  }
}

TEST(Knn, QuadraticScaling) {
  Rng rng(15);
  std::vector<double> ns, ts;
  for (std::size_t n : {2000u, 4000u, 8000u}) {
    const auto g = random_rows(rng, n, 32);
    double best = 1e300;
    for (int rep = 0; rep < 3; ++rep) best = std::min(best, knn_precompute_baseline(g, 10).seconds);
    ns.push_back(static_cast<double>(n));
    ts.push_back(best);
  }
  EXPECT_GE(loglog_slope(ns, ts), 1.8);
}

TEST(Bench, SingletonGivesOneRow) {
  const std::size_t sizes[] = {500};
  const auto rows = bench_bank_vs_knn(sizes, 16, 10, 1, 1);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].N, 500u);
  EXPECT_GT(rows[0].knn_s, 0.0);
  const auto csv = bench_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "N,bank_s,knn_s,ratio");
}
