#pragma once

// Exhaustive asymmetric retrieval, ground truth construction (geodesic
// threshold, frame window, explicit pairs), Recall@k and ranking margins.

#include "asymvpr/core.hpp"
#include "asymvpr/geo.hpp"

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <thread>
#include <unordered_map>
#include <vector>

namespace asymvpr {

/// Relevant gallery indices per query, sorted ascending and unique.
struct GroundTruth {
  std::vector<std::vector<std::size_t>> relevant;

  std::size_t num_queries() const { return relevant.size(); }
};

inline GroundTruth build_gt_geo(std::span<const ImageRecord> queries, std::span<const ImageRecord> gallery,
                                double threshold_m = 25.0) {
  GroundTruth gt;
  gt.relevant.resize(queries.size());
  for (const auto& g : gallery)
    if (!g.geotag.has_coords()) throw Error(ErrorCode::MissingCoordinates, "gallery '" + g.id + "' has no lat/lon");
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const auto& q = queries[qi];
    if (!q.geotag.has_coords()) throw Error(ErrorCode::MissingCoordinates, "query '" + q.id + "' has no lat/lon");
    for (std::size_t gi = 0; gi < gallery.size(); ++gi)
      if (haversine(q.geotag, gallery[gi].geotag) <= threshold_m) gt.relevant[qi].push_back(gi);
  }
  return gt;
}

inline GroundTruth build_gt_frames(std::span<const ImageRecord> queries, std::span<const ImageRecord> gallery,
                                   std::uint64_t window = 3) {
  GroundTruth gt;
  gt.relevant.resize(queries.size());
  for (const auto& g : gallery)
    if (!g.geotag.frame) throw Error(ErrorCode::MissingFrame, "gallery '" + g.id + "' has no frame index");
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const auto& q = queries[qi];
    if (!q.geotag.frame) throw Error(ErrorCode::MissingFrame, "query '" + q.id + "' has no frame index");
    const auto fq = *q.geotag.frame;
    for (std::size_t gi = 0; gi < gallery.size(); ++gi) {
      const auto fg = *gallery[gi].geotag.frame;
      const auto diff = fq > fg ? fq - fg : fg - fq;
      if (diff <= window) gt.relevant[qi].push_back(gi);
    }
  }
  return gt;
}

/// Ground truth from JSON Lines {"query_id", "gallery_id"}; duplicates collapse.
inline GroundTruth build_gt_pairs(std::istream& pairs, std::span<const ImageRecord> queries,
                                  std::span<const ImageRecord> gallery) {
  std::unordered_map<std::string, std::size_t> qidx, gidx;
  for (std::size_t i = 0; i < queries.size(); ++i) qidx.emplace(queries[i].id, i);
  for (std::size_t i = 0; i < gallery.size(); ++i) gidx.emplace(gallery[i].id, i);
  std::vector<std::set<std::size_t>> sets(queries.size());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(pairs, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::string qid, gid;
    try {
      const auto j = nlohmann::json::parse(line);
      qid = j.at("query_id").get<std::string>();
      gid = j.at("gallery_id").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::MissingField, "pair line " + std::to_string(line_no) + ": " + e.what());
    }
    auto qi = qidx.find(qid);
    if (qi == qidx.end()) throw Error(ErrorCode::UnknownId, "unknown query id '" + qid + "'");
    auto gi = gidx.find(gid);
    if (gi == gidx.end()) throw Error(ErrorCode::UnknownId, "unknown gallery id '" + gid + "'");
    sets[qi->second].insert(gi->second);
  }
  GroundTruth gt;
  for (auto& s : sets) gt.relevant.emplace_back(s.begin(), s.end());
  return gt;
}

inline GroundTruth build_gt_pairs(const std::string& path, std::span<const ImageRecord> queries,
                                  std::span<const ImageRecord> gallery) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open '" + path + "'");
  return build_gt_pairs(in, queries, gallery);
}

using Rankings = std::vector<std::vector<std::size_t>>;

/// Top-k gallery rows per query by dot product, descending, ties to the lower index.
inline Rankings retrieve(const EmbeddingMatrix& queries, const EmbeddingMatrix& gallery, std::size_t k,
                         std::size_t workers = 1) {
  if (k < 1) throw Error(ErrorCode::BadConfig, "k must be >= 1");
  if (queries.count() > 0 && gallery.count() > 0 && queries.dim() != gallery.dim())
    throw Error(ErrorCode::DimensionMismatch, "query and gallery dimensions differ");
  const std::size_t n = gallery.count();
  const std::size_t keep = std::min(k, n);
  Rankings out(queries.count());

  auto work = [&](std::size_t lo, std::size_t hi) {
    std::vector<double> score(n);
    std::vector<std::size_t> idx(n);
    for (std::size_t qi = lo; qi < hi; ++qi) {
      const auto q = queries.row(qi);
      for (std::size_t g = 0; g < n; ++g) {
        score[g] = dot(q, gallery.row(g));
        idx[g] = g;
      }
      auto better = [&](std::size_t a, std::size_t b) {
        return score[a] > score[b] || (score[a] == score[b] && a < b);
      };
      std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep), idx.end(), better);
      out[qi].assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep));
    }
  };

  const std::size_t nq = queries.count();
  const std::size_t used = std::max<std::size_t>(1, std::min(workers, nq));
  if (used == 1) {
    work(0, nq);
  } else {
    std::vector<std::jthread> pool;
    const std::size_t per = (nq + used - 1) / used;
    for (std::size_t w = 0; w < used; ++w) {
      const std::size_t lo = w * per, hi = std::min(nq, lo + per);
      if (lo < hi) pool.emplace_back(work, lo, hi);
    }
  }
  return out;
}

struct MarginStats {
  double mean = 0.0;
  double min = 0.0;
  double fraction_positive = 0.0;
  std::size_t count = 0;
};

struct RetrievalReport {
  std::map<std::size_t, double> recall_at;  // k -> percentage
  std::size_t num_queries_evaluated = 0;
  std::size_t num_queries_excluded = 0;     // empty ground truth
  std::optional<MarginStats> margin;
};

inline RetrievalReport recall_at_k(const Rankings& rankings, const GroundTruth& gt, std::span<const std::size_t> ks) {
  if (rankings.size() != gt.num_queries())
    throw Error(ErrorCode::DimensionMismatch, "rankings and ground truth cover different query counts");
  if (ks.empty()) throw Error(ErrorCode::BadConfig, "no k values requested");
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (ks[i] < 1) throw Error(ErrorCode::BadConfig, "k must be >= 1");
    if (i > 0 && ks[i] <= ks[i - 1]) throw Error(ErrorCode::BadConfig, "ks must be strictly ascending");
  }
  RetrievalReport rep;
  std::vector<std::size_t> hits(ks.size(), 0);
  for (std::size_t qi = 0; qi < rankings.size(); ++qi) {
    const auto& rel = gt.relevant[qi];
    if (rel.empty()) {
      ++rep.num_queries_excluded;
      continue;
    }
    ++rep.num_queries_evaluated;
    // Rank (0-based) of the first relevant hit, if any.
    std::size_t first = std::numeric_limits<std::size_t>::max();
    for (std::size_t r = 0; r < rankings[qi].size(); ++r)
      if (std::binary_search(rel.begin(), rel.end(), rankings[qi][r])) {
        first = r;
        break;
      }
    for (std::size_t i = 0; i < ks.size(); ++i)
      if (first < ks[i]) ++hits[i];
  }
  if (rep.num_queries_evaluated == 0)
    throw Error(ErrorCode::NoEvaluableQueries, "every query has empty ground truth");
  for (std::size_t i = 0; i < ks.size(); ++i)
    rep.recall_at[ks[i]] = 100.0 * static_cast<double>(hits[i]) / static_cast<double>(rep.num_queries_evaluated);
  return rep;
}

/// Per query: best relevant similarity minus best non-relevant similarity.
/// Queries with no relevant or no non-relevant items are skipped.
inline MarginStats margin_report(const EmbeddingMatrix& queries, const EmbeddingMatrix& gallery,
                                 const GroundTruth& gt) {
  if (queries.count() != gt.num_queries())
    throw Error(ErrorCode::DimensionMismatch, "query count differs from ground truth");
  if (queries.count() > 0 && gallery.count() > 0 && queries.dim() != gallery.dim())
    throw Error(ErrorCode::DimensionMismatch, "query and gallery dimensions differ");
  MarginStats st;
  st.min = std::numeric_limits<double>::infinity();
  double sum = 0.0;
  std::size_t positive = 0;
  std::vector<char> is_rel(gallery.count());
  for (std::size_t qi = 0; qi < queries.count(); ++qi) {
    const auto& rel = gt.relevant[qi];
    if (rel.empty() || rel.size() == gallery.count()) continue;
    std::fill(is_rel.begin(), is_rel.end(), 0);
    for (auto g : rel) is_rel[g] = 1;
    double best_pos = -std::numeric_limits<double>::infinity();
    double best_neg = -std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < gallery.count(); ++g) {
      const double s = dot(queries.row(qi), gallery.row(g));
      if (is_rel[g])
        best_pos = std::max(best_pos, s);
      else
        best_neg = std::max(best_neg, s);
    }
    const double m = best_pos - best_neg;
    sum += m;
    st.min = std::min(st.min, m);
    if (m > 0.0) ++positive;
    ++st.count;
  }
  if (st.count == 0) throw Error(ErrorCode::NoEvaluableQueries, "no query has both relevant and non-relevant items");
  st.mean = sum / static_cast<double>(st.count);
  st.fraction_positive = static_cast<double>(positive) / static_cast<double>(st.count);
  return st;
}

inline nlohmann::json report_json(const RetrievalReport& rep) {
  nlohmann::json j;
  auto& r = j["recall_at"] = nlohmann::json::object();
  for (const auto& [k, v] : rep.recall_at) r["R@" + std::to_string(k)] = v;
  j["num_queries_evaluated"] = rep.num_queries_evaluated;
  j["num_queries_excluded"] = rep.num_queries_excluded;
  if (rep.margin) {
    j["margin"] = {{"mean", rep.margin->mean},
                   {"min", rep.margin->min},
                   {"fraction_positive", rep.margin->fraction_positive},
                   {"count", rep.margin->count}};
  }
  return j;
}

/// CSV rows "metric,value".
inline std::string report_csv(const RetrievalReport& rep) {
  std::ostringstream out;
  out.precision(17);
  out << "metric,value\n";
  for (const auto& [k, v] : rep.recall_at) out << "R@" << k << ',' << v << '\n';
  out << "num_queries_evaluated," << rep.num_queries_evaluated << '\n';
  out << "num_queries_excluded," << rep.num_queries_excluded << '\n';
  if (rep.margin) {
    out << "margin_mean," << rep.margin->mean << '\n';
    out << "margin_min," << rep.margin->min << '\n';
    out << "margin_fraction_positive," << rep.margin->fraction_positive << '\n';
  }
  return out.str();
}

}  // namespace asymvpr
