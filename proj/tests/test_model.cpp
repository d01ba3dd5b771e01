#include "asymvpr/model.hpp"
#include "asymvpr/loss.hpp"
#include "asymvpr/oracle.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

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

Vector random_vector(std::mt19937_64& rng, std::size_t n, double sd = 1.0) {
  std::normal_distribution<double> nd(0.0, sd);
  Vector v(n);
  for (double& x : v) x = nd(rng);
  return v;
}

// Perturbs every bias so biases also receive a nontrivial check.
QueryModelParams random_model(std::initializer_list<std::size_t> dims, std::uint64_t seed) {
  auto p = init_params(dims, seed);
  std::mt19937_64 rng(seed + 1000);
  for (auto& l : p.layers) l.bias = random_vector(rng, l.out, 0.1);
  return p;
}

}  // namespace

TEST(InitParams, Deterministic) {
  EXPECT_EQ(init_params({8, 6, 4}, 3), init_params({8, 6, 4}, 3));
  EXPECT_NE(init_params({8, 6, 4}, 3), init_params({8, 6, 4}, 4));
}

TEST(InitParams, GlorotBound) {
  const auto p = init_params({4, 4}, 0);
  ASSERT_EQ(p.layers.size(), 1u);
  EXPECT_EQ(p.layers[0].weight.size(), 16u);
  EXPECT_EQ(p.layers[0].bias, Vector(4, 0.0));
  for (double w : p.layers[0].weight) EXPECT_LE(std::abs(w), 0.8660254037844386);
}

TEST(InitParams, BadDims) {
  expect_code(ErrorCode::BadDims, [] { init_params({4}, 0); });
  expect_code(ErrorCode::BadDims, [] { init_params({4, 0, 2}, 0); });
  auto p = init_params({4, 3, 5}, 0);
  p.layers[0].weight.resize(4 * 5);
  p.layers[0].out = 5;
  p.layers[0].bias.resize(5);
  expect_code(ErrorCode::BadDims, [&] { p.validate(); });
}

TEST(Forward, IdentityLayer) {
  QueryModelParams p;
  Layer l{3, 3, Vector(9, 0.0), Vector(3, 0.0)};
  for (int i = 0; i < 3; ++i) l.weight[i * 3 + i] = 1.0;
  p.layers.push_back(l);
  const Vector raw{0.6, 0.0, -0.8};
  const auto q = forward(p, raw);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(q[i], raw[i], 1e-15);
}

TEST(Forward, UnitNorm) {
  std::mt19937_64 rng(1);
  const auto p = random_model({16, 12, 8}, 7);
  for (int t = 0; t < 50; ++t) EXPECT_NEAR(l2_norm(forward(p, random_vector(rng, 16, 3.0))), 1.0, 1e-10);
}

TEST(Forward, GoldenSeedZero) {
  const auto p = init_params({4, 3, 2}, 0);
  EXPECT_DOUBLE_EQ(p.layers[0].weight[0], -0.6299402845352882);
  const auto q = forward(p, Vector{0.5, -1.0, 0.25, 2.0});
  EXPECT_NEAR(q[0], -0.8940988629110408, 1e-12);
  EXPECT_NEAR(q[1], 0.4478696499442485, 1e-12);
}

TEST(Forward, Errors) {
  const auto p = init_params({4, 2}, 0);
  expect_code(ErrorCode::ShapeMismatch, [&] { forward(p, Vector{1.0, 2.0}); });
  expect_code(ErrorCode::ZeroPreNorm, [&] { forward(p, Vector{0.0, 0.0, 0.0, 0.0}); });
}

TEST(Forward, LinearModelIsScaleInvariant) {
  std::mt19937_64 rng(2);
  const auto p = init_params({6, 4}, 9);
  for (int t = 0; t < 20; ++t) {
    const auto raw = random_vector(rng, 6);
    auto scaled = raw;
    for (double& x : scaled) x *= 7.5;
    const auto a = forward(p, raw), b = forward(p, scaled);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-14);
  }
}

TEST(Backward, ZeroUpstreamGivesZero) {
  const auto p = random_model({5, 4, 3}, 1);
  const auto g = backward(p, Vector{1, 2, 3, 4, 5}, Vector{0, 0, 0});
  EXPECT_EQ(g, zeros_like(p));
}

TEST(Backward, RadialUpstreamIsAnnihilated) {
  const auto p = random_model({5, 4, 3}, 2);
  const Vector raw{0.3, -1, 2, 0.1, 0.7};
  auto grad_q = forward(p, raw);
  for (double& x : grad_q) x *= 4.0;
  for (double x : flatten(backward(p, raw, grad_q))) EXPECT_NEAR(x, 0.0, 1e-14);
}

TEST(Backward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 10; ++t) {
    const auto p = random_model({6, 5, 4}, 100 + t);
    const auto raw = random_vector(rng, 6);
    const auto up = random_vector(rng, 4);
    const auto analytic = flatten(backward(p, raw, up));
    const auto numeric = finite_diff_grad(
        [&](std::span<const double> flat) {
          auto m = p;
          unflatten(flat, m);
          return dot(up, forward(m, raw));
        },
        flatten(p));
    EXPECT_LE(relative_error(analytic, numeric), 1e-6) << "trial " << t;
  }
}

TEST(Backward, ShapeMismatch) {
  const auto p = random_model({3, 2}, 4);
  expect_code(ErrorCode::ShapeMismatch, [&] { backward(p, Vector{1, 2, 3}, Vector{1, 2, 3}); });
}

TEST(Backward, EndToEndImplicitLoss) {
  std::mt19937_64 rng(4);
  LossConfig cfg;
  cfg.tau = 0.1;
  cfg.gamma = 15.0;
  for (int t = 0; t < 20; ++t) {
    const auto p = random_model({8, 6, 5}, 200 + t);
    const auto raw = random_vector(rng, 8);
    const auto g = normalize(random_vector(rng, 5));
    std::vector<Vector> negs;
    for (int j = 0; j < 6; ++j) {
      auto c = normalize(random_vector(rng, 5));
      for (double& x : c) x *= 0.8;
      negs.push_back(c);
    }
    std::vector<std::span<const double>> neg_views(negs.begin(), negs.end());
    Vector sigma(5);
    std::uniform_real_distribution<double> us(0.0, 0.02);
    for (double& s : sigma) s = us(rng);

    auto loss_of = [&](const QueryModelParams& m) {
      const auto q = forward(m, raw);
      return implicit_loss(LossInstance{q, g, neg_views, sigma}, cfg);
    };
    const auto at = loss_of(p);
    const auto analytic = flatten(backward(p, raw, at.grad_q));
    const auto numeric = finite_diff_grad(
        [&](std::span<const double> flat) {
          auto m = p;
          unflatten(flat, m);
          return loss_of(m).value;
        },
        flatten(p));
    EXPECT_LE(relative_error(analytic, numeric), 1e-6) << "instance " << t;
  }
}

TEST(ModelFile, RoundTrip) {
  const auto p = random_model({7, 5, 3}, 11);
  const auto path = (std::filesystem::temp_directory_path() / "asymvpr_model_roundtrip.model").string();
  save_model(p, path);
  EXPECT_EQ(load_model(path), p);
}

TEST(ModelFile, Truncated) {
  const auto p = random_model({7, 3}, 12);
  const auto path = (std::filesystem::temp_directory_path() / "asymvpr_model_trunc.model").string();
  save_model(p, path);
  const auto bytes = detail::read_file(path);
  detail::write_file(path, bytes.substr(0, bytes.size() - 3));
  expect_code(ErrorCode::TruncatedPayload, [&] { load_model(path); });
}
