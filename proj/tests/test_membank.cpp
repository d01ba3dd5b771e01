#include "asymvpr/membank.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
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

GallerySet make_gallery(const std::vector<std::pair<std::string, Vector>>& items) {
  GallerySet g;
  for (std::size_t i = 0; i < items.size(); ++i) {
    ImageRecord r;
    r.id = "img" + std::to_string(i);
    r.place_id = items[i].first;
    r.row = i;
    r.geotag.frame = i;
    g.records.push_back(r);
    g.embeddings.append(items[i].second);
  }
  return g;
}

GallerySet random_gallery(std::mt19937_64& rng, std::size_t n, std::size_t d, std::size_t places) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> up(0, places - 1);
  std::vector<std::pair<std::string, Vector>> items;
  for (std::size_t i = 0; i < n; ++i) {
    Vector v(d);
    for (double& x : v) x = 0.3 + normal(rng);
    items.emplace_back("p" + std::to_string(up(rng)), v);
  }
  return make_gallery(items);
}

// Two-pass mean then variance, straight from the definitions.
void two_pass(const GallerySet& g, const std::string& place, bool norm, Vector& mean, Vector& var, Vector& sum,
              std::size_t& n) {
  const std::size_t d = g.dim();
  mean.assign(d, 0.0);
  var.assign(d, 0.0);
  sum.assign(d, 0.0);
  n = 0;
  std::vector<Vector> xs;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g.records[i].place_id != place) continue;
    auto e = g.embedding(i);
    xs.push_back(norm ? normalize(e) : Vector(e.begin(), e.end()));
  }
  n = xs.size();
  for (const auto& x : xs)
    for (std::size_t k = 0; k < d; ++k) sum[k] += x[k];
  for (std::size_t k = 0; k < d; ++k) mean[k] = sum[k] / static_cast<double>(n);
  for (const auto& x : xs)
    for (std::size_t k = 0; k < d; ++k) var[k] += (x[k] - mean[k]) * (x[k] - mean[k]);
  for (std::size_t k = 0; k < d; ++k) var[k] /= static_cast<double>(n);
}

}  // namespace

TEST(BuildBank, SingleMember) {
  const auto g = make_gallery({{"p", {0.3, -0.2, 0.9}}});
  const auto bank = build_bank(g, false);
  ASSERT_EQ(bank.size(), 1u);
  EXPECT_EQ(bank[0].centroid, (Vector{0.3, -0.2, 0.9}));
  EXPECT_EQ(bank[0].diag_cov, (Vector{0.0, 0.0, 0.0}));
  EXPECT_EQ(bank[0].count, 1u);
}

TEST(BuildBank, TwoOrthogonalMembers) {
  const auto g = make_gallery({{"p", {1.0, 0.0}}, {"p", {0.0, 1.0}}});
  const auto bank = build_bank(g, true);
  ASSERT_EQ(bank.size(), 1u);
  EXPECT_DOUBLE_EQ(bank[0].centroid[0], 0.5);
  EXPECT_DOUBLE_EQ(bank[0].centroid[1], 0.5);
  EXPECT_DOUBLE_EQ(bank[0].diag_cov[0], 0.25);
  EXPECT_DOUBLE_EQ(bank[0].diag_cov[1], 0.25);
  EXPECT_EQ(bank[0].count, 2u);
}

TEST(BuildBank, CentroidIsNotRenormalized) {
  const auto g = make_gallery({{"p", {1.0, 0.0}}, {"p", {0.0, 1.0}}});
  EXPECT_LT(l2_norm(build_bank(g)[0].centroid), 1.0);
}

TEST(BuildBank, NormalizeFlagMatters) {
  const auto g = make_gallery({{"p", {2.0, 0.0}}, {"p", {0.0, 4.0}}});
  EXPECT_EQ(build_bank(g, false)[0].centroid, (Vector{1.0, 2.0}));
  EXPECT_EQ(build_bank(g, true)[0].centroid, (Vector{0.5, 0.5}));
}

TEST(BuildBank, PermutationInvariant) {
  std::mt19937_64 rng(3);
  auto g = random_gallery(rng, 300, 16, 7);
  const auto a = build_bank(g);
  std::shuffle(g.records.begin(), g.records.end(), rng);
  const auto b = build_bank(g);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t j = 0; j < a.size(); ++j) {
    EXPECT_EQ(a[j].place_id, b[j].place_id);
    EXPECT_EQ(a[j].count, b[j].count);
    for (std::size_t k = 0; k < 16; ++k) {
      EXPECT_NEAR(a[j].centroid[k], b[j].centroid[k], 1e-13);
      EXPECT_NEAR(a[j].diag_cov[k], b[j].diag_cov[k], 1e-13);
    }
  }
}

TEST(BuildBank, MatchesTwoPassOracle) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> ud(1, 64), un(1, 1000), up(1, 20);
  for (int trial = 0; trial < 20; ++trial) {
    const auto g = random_gallery(rng, un(rng), ud(rng), up(rng));
    for (bool norm : {false, true}) {
      const auto bank = build_bank(g, norm);
      for (const auto& e : bank.entries()) {
        Vector mean, var, sum;
        std::size_t n;
        two_pass(g, e.place_id, norm, mean, var, sum, n);
        ASSERT_EQ(e.count, n);
        for (std::size_t k = 0; k < mean.size(); ++k) {
          EXPECT_LE(std::abs(e.centroid[k] - mean[k]), 1e-12 * std::max(1.0, std::abs(mean[k])));
          EXPECT_LE(std::abs(e.diag_cov[k] - var[k]), 1e-12 * std::max(1.0, var[k]));
          EXPECT_LE(std::abs(static_cast<double>(n) * e.centroid[k] - sum[k]),
                    1e-10 * std::max(1.0, std::abs(sum[k])));
        }
      }
    }
  }
}

TEST(BuildBank, Errors) {
  expect_code(ErrorCode::EmptyGallery, [] { build_bank(GallerySet{}); });
}

TEST(BuildBank, RoughlyLinearTime) {
  std::mt19937_64 rng(9);
  std::vector<double> ns, ts;
  for (std::size_t n : {1000u, 10000u, 100000u}) {
    const auto g = random_gallery(rng, n, 32, n / 10);
    double best = 1e9;
    for (int rep = 0; rep < 5; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto b = build_bank(g);
      best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      ASSERT_GT(b.size(), 0u);
    }
    ns.push_back(std::log(static_cast<double>(n)));
    ts.push_back(std::log(best));
  }
  // Least-squares slope in log-log space.
  const double mx = (ns[0] + ns[1] + ns[2]) / 3, my = (ts[0] + ts[1] + ts[2]) / 3;
  double sxy = 0, sxx = 0;
  for (int i = 0; i < 3; ++i) {
    sxy += (ns[i] - mx) * (ts[i] - my);
    sxx += (ns[i] - mx) * (ns[i] - mx);
  }
  EXPECT_LE(sxy / sxx, 1.3) << "slope " << sxy / sxx;
}

TEST(NegativeSet, ExcludesSelf) {
  const auto g = make_gallery({{"p1", {1, 0}}, {"p2", {0, 1}}, {"p3", {1, 1}}});
  const auto bank = build_bank(g);
  EXPECT_EQ(negative_set(bank, "p2"), (std::vector<std::size_t>{0, 2}));
}

TEST(NegativeSet, SinglePlaceBank) {
  const auto bank = build_bank(make_gallery({{"p1", {1, 0}}}));
  EXPECT_TRUE(negative_set(bank, "p1").empty());
}

TEST(NegativeSet, UnknownPlace) {
  const auto bank = build_bank(make_gallery({{"p1", {1, 0}}}));
  expect_code(ErrorCode::UnknownPlace, [&] { negative_set(bank, "nope"); });
}

TEST(NegativeSet, RadiusExcludesNearbyPlace) {
  auto g = make_gallery({{"p1", {1, 0}}, {"p2", {0, 1}}, {"p3", {1, 1}}});
  // p2 sits 0.00009 deg of latitude (about 10.0 m) north of p1; p3 is about 1.1 km away.
  g.records[0].geotag = GeoTag{37.5, 127.0, {}};
  g.records[1].geotag = GeoTag{37.50009, 127.0, {}};
  g.records[2].geotag = GeoTag{37.51, 127.0, {}};
  const auto bank = build_bank(g);
  const auto coords = place_coordinates(bank, g);
  ASSERT_NEAR(haversine(*coords[0], *coords[1]), 10.0, 0.01);
  EXPECT_EQ(negative_set(bank, "p1", 25.0, coords), (std::vector<std::size_t>{2}));
  EXPECT_EQ(negative_set(bank, "p1", 0.0, coords), (std::vector<std::size_t>{1, 2}));
}

TEST(NegativeSet, UnionWithSelfIsEverything) {
  std::mt19937_64 rng(1);
  const auto bank = build_bank(random_gallery(rng, 200, 4, 30));
  for (std::size_t j = 0; j < bank.size(); ++j) {
    auto s = negative_set(bank, bank[j].place_id);
    s.push_back(j);
    std::sort(s.begin(), s.end());
    ASSERT_EQ(s.size(), bank.size());
    for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(s[i], i);
  }
}

TEST(BankFile, RoundTrip) {
  std::mt19937_64 rng(2);
  const auto bank = build_bank(random_gallery(rng, 100, 8, 9));
  const auto path = (std::filesystem::temp_directory_path() / "asymvpr_bank_roundtrip.bank").string();
  serialize_bank(bank, path);
  EXPECT_EQ(deserialize_bank(path), bank);
}

TEST(BankFile, EmptyBankRejected) {
  const auto path = (std::filesystem::temp_directory_path() / "asymvpr_bank_empty.bank").string();
  serialize_bank(MemoryBank({}, 4), path);
  expect_code(ErrorCode::EmptyGallery, [&] { deserialize_bank(path); });
}

TEST(BankFile, CorruptionDetected) {
  std::mt19937_64 rng(4);
  const auto bank = build_bank(random_gallery(rng, 20, 3, 2));
  const auto path = (std::filesystem::temp_directory_path() / "asymvpr_bank_corrupt.bank").string();
  serialize_bank(bank, path);
  auto bytes = detail::read_file(path);
  detail::write_file(path, bytes.substr(0, bytes.size() - 8));
  expect_code(ErrorCode::TruncatedPayload, [&] { deserialize_bank(path); });
  auto nl = bytes.find('\n');
  bytes[nl + 1] = 'Z';
  detail::write_file(path, bytes);
  expect_code(ErrorCode::BadMagic, [&] { deserialize_bank(path); });
}

TEST(BankFile, FixtureHasTwoPlaces) {
  const auto recs = read_manifest(std::string(ASYMVPR_FIXTURES) + "/five_records.jsonl");
  EmbeddingMatrix emb(5, 2);
  for (std::size_t i = 0; i < 5; ++i) emb.row(i)[i % 2] = 1.0;
  const auto bank = build_bank(load_gallery(recs, emb));
  const auto path = (std::filesystem::temp_directory_path() / "asymvpr_bank_fixture.bank").string();
  serialize_bank(bank, path);
  const auto back = deserialize_bank(path);
  EXPECT_EQ(back.size(), 2u);
  EXPECT_EQ(back[back.index_of("p1")].count, 3u);
  EXPECT_EQ(back[back.index_of("p2")].count, 2u);
}
