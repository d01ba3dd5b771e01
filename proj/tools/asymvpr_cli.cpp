// asymvpr: synthetic world generation, memory bank construction, query model
// training, embedding, evaluation, validation suites and timing benches.
//
// Exit codes: 0 success, 1 validation failure, 2 bad input.

#include "asymvpr/config.hpp"
#include "asymvpr/eval.hpp"
#include "asymvpr/membank.hpp"
#include "asymvpr/model.hpp"
#include "asymvpr/oracle.hpp"
#include "asymvpr/optim.hpp"
#include "asymvpr/suites.hpp"
#include "asymvpr/synth.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace asymvpr;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitBadInput = 2;

// Fixed file names written by `synth`.
constexpr const char* kGalleryEmbeddings = "gallery_embeddings.aeb";
constexpr const char* kGalleryRaw = "gallery_raw.aeb";
constexpr const char* kGalleryManifest = "gallery.jsonl";
constexpr const char* kQueryRaw = "query_raw.aeb";
constexpr const char* kQueryManifest = "queries.jsonl";
constexpr const char* kGalleryNet = "gallery_net.bin";

struct Common {
  std::size_t workers = 1;
  bool deterministic = false;
  std::optional<std::uint64_t> seed;

  std::size_t effective_workers() const { return deterministic ? 1 : std::max<std::size_t>(1, workers); }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--workers", c.workers, "Worker threads")->check(CLI::PositiveNumber);
  cmd->add_flag("--deterministic", c.deterministic, "Force single-worker reductions");
  cmd->add_option("--seed", c.seed, "Override the configured seed");
}

std::vector<std::size_t> parse_size_list(const std::string& s, const char* what) {
  std::vector<std::size_t> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size() || v < 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw Error(ErrorCode::BadConfig, std::string("bad ") + what + " entry '" + item + "'");
    }
  }
  if (out.empty()) throw Error(ErrorCode::BadConfig, std::string(what) + " is empty");
  return out;
}

RunConfig load_config(const std::string& path) { return path.empty() ? RunConfig{} : read_run_config(path); }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Rows of `store` in manifest order.
EmbeddingMatrix gather_rows(std::span<const ImageRecord> records, const EmbeddingMatrix& store) {
  check_rows(records, store.count());
  EmbeddingMatrix out(records.size(), store.dim(), store.normalized());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto src = store.row(records[i].row);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string config, out_dir;
  Common common;
};

int cmd_synth(const SynthArgs& a) {
  auto cfg = load_config(a.config);
  if (a.common.seed) cfg.world.seed = *a.common.seed;
  const std::string dir = a.out_dir.empty() ? cfg.paths.out_dir : a.out_dir;
  if (dir.empty()) throw Error(ErrorCode::BadConfig, "no output directory (use --out-dir or paths.out_dir)");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error(ErrorCode::IoError, "cannot create output directory '" + dir + "'");

  const auto w = gen_world(cfg.world);
  const fs::path d(dir);
  write_embedding_store((d / kGalleryEmbeddings).string(), w.gallery.embeddings);
  write_embedding_store((d / kGalleryRaw).string(), raw_matrix(w.gallery.records));
  write_manifest((d / kGalleryManifest).string(), w.gallery.records);
  write_embedding_store((d / kQueryRaw).string(), raw_matrix(w.queries));
  write_manifest((d / kQueryManifest).string(), w.queries);
  save_gallery_network(w.net, (d / kGalleryNet).string());
  std::cout << "places=" << cfg.world.num_places << " gallery=" << w.gallery.size() << " queries=" << w.queries.size()
            << " dim=" << w.gallery.dim() << " out=" << dir << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct BuildBankArgs {
  std::string embeddings, manifest, out;
  bool normalize = true;
};

int cmd_build_bank(const BuildBankArgs& a) {
  auto gallery = load_gallery(read_manifest(a.manifest), read_embedding_store(a.embeddings));
  const auto t0 = std::chrono::steady_clock::now();
  const auto bank = build_bank(gallery, a.normalize);
  const double elapsed = seconds_since(t0);
  serialize_bank(bank, a.out);
  std::cout << "M=" << bank.size() << " d=" << bank.dim() << " elapsed_s=" << elapsed << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, embeddings, raw, manifest, bank, out_model, log;
  std::string loss_mode;
  std::optional<std::size_t> epochs;
  Common common;
};

int cmd_train(const TrainArgs& a) {
  auto cfg = load_config(a.config);
  if (!a.loss_mode.empty()) cfg.optim.loss_mode = parse_loss_mode(a.loss_mode);
  if (a.epochs) cfg.optim.epochs = *a.epochs;
  if (a.common.seed) cfg.optim.seed = *a.common.seed;
  cfg.optim.workers = a.common.effective_workers();
  cfg.validate();

  const auto raw = read_embedding_store(a.raw);
  const auto gallery = load_gallery(read_manifest(a.manifest), read_embedding_store(a.embeddings), &raw);
  const auto bank = deserialize_bank(a.bank);

  std::vector<std::size_t> dims{raw.dim()};
  dims.insert(dims.end(), cfg.query_hidden.begin(), cfg.query_hidden.end());
  dims.push_back(gallery.dim());
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = train(gallery, bank, init_params(dims, cfg.optim.seed), cfg.optim);
  save_model(result.params, a.out_model);
  if (!a.log.empty()) write_train_log(a.log, result.log);
  std::cout << "mode=" << to_string(cfg.optim.loss_mode) << " epochs=" << cfg.optim.epochs
            << " first_loss=" << result.log.front().mean_loss << " final_loss=" << result.log.back().mean_loss
            << " elapsed_s=" << seconds_since(t0) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct EmbedArgs {
  std::string model, raw, out;
};

int cmd_embed(const EmbedArgs& a) {
  const auto params = load_model(a.model);
  const auto raw = read_embedding_store(a.raw);
  EmbeddingMatrix out(raw.count(), params.output_dim(), true);
  ForwardCache cache;
  for (std::size_t i = 0; i < raw.count(); ++i) {
    const auto& q = forward(params, raw.row(i), cache);
    std::copy(q.begin(), q.end(), out.row(i).begin());
  }
  write_embedding_store(a.out, out);
  std::cout << "embedded=" << out.count() << " dim=" << out.dim() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string config, queries, query_manifest, gallery, gallery_manifest, pairs, out_json, out_csv;
  std::string gt_mode, ks;
  std::optional<double> threshold;
  std::optional<std::uint64_t> window;
  bool margin = true;
  Common common;
};

int cmd_eval(const EvalArgs& a) {
  auto cfg = load_config(a.config);
  auto& ec = cfg.eval;
  if (!a.gt_mode.empty()) ec.gt_mode = a.gt_mode;
  if (a.threshold) ec.threshold_m = *a.threshold;
  if (a.window) ec.window = *a.window;
  if (!a.ks.empty()) ec.ks = parse_size_list(a.ks, "ks");
  ec.validate();

  const auto qrecs = read_manifest(a.query_manifest);
  const auto grecs = read_manifest(a.gallery_manifest);
  const auto qmat = gather_rows(qrecs, read_embedding_store(a.queries));
  const auto gmat = gather_rows(grecs, read_embedding_store(a.gallery));

  GroundTruth gt;
  if (ec.gt_mode == "geo") {
    gt = build_gt_geo(qrecs, grecs, ec.threshold_m);
  } else if (ec.gt_mode == "frames") {
    gt = build_gt_frames(qrecs, grecs, ec.window);
  } else {
    if (a.pairs.empty()) throw Error(ErrorCode::BadConfig, "--gt-mode pairs needs --pairs");
    gt = build_gt_pairs(a.pairs, qrecs, grecs);
  }

  const auto rankings = retrieve(qmat, gmat, ec.ks.back(), a.common.effective_workers());
  auto report = recall_at_k(rankings, gt, ec.ks);
  if (a.margin) {
    try {
      report.margin = margin_report(qmat, gmat, gt);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NoEvaluableQueries) throw;
    }
  }
  const auto j = report_json(report);
  if (!a.out_json.empty()) detail::write_file(a.out_json, j.dump(2) + "\n");
  if (!a.out_csv.empty()) detail::write_file(a.out_csv, report_csv(report));
  std::cout << j.dump(2) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct ValidateArgs {
  std::string suite = "all";
  Common common;
};

int cmd_validate(const ValidateArgs& a) {
  std::vector<std::string> names;
  if (a.suite == "all")
    names = suite_names();
  else
    names = {a.suite};
  const std::uint64_t seed = a.common.seed.value_or(0);
  bool ok = true;
  for (const auto& n : names) {
    const auto r = run_suite(n, seed);
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << " (" << r.seconds << " s): " << r.summary << '\n';
    ok = ok && r.passed;
  }
  return ok ? kExitOk : kExitValidation;
}

// ---------------------------------------------------------------------------

struct BenchArgs {
  std::string sizes = "2000,8000,20000";
  std::size_t dim = 128;
  std::size_t k = 100;
  std::size_t repeats = 3;
  std::string out;
  Common common;
};

int cmd_bench(const BenchArgs& a) {
  const auto sizes = parse_size_list(a.sizes, "sizes");
  const auto rows = bench_bank_vs_knn(sizes, a.dim, a.k, a.common.seed.value_or(0), a.repeats);
  const auto csv = bench_csv(rows);
  if (!a.out.empty()) detail::write_file(a.out, csv);
  std::cout << csv;
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Asymmetric place recognition toolkit"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic geotagged world");
  s->add_option("--config", synth.config, "RunConfig JSON")->check(CLI::ExistingFile);
  s->add_option("--out-dir", synth.out_dir, "Output directory");
  add_common(s, synth.common);

  BuildBankArgs bb;
  auto* b = app.add_subcommand("build-bank", "Build the per-place memory bank");
  b->add_option("--embeddings", bb.embeddings, "Gallery embedding store")->required();
  b->add_option("--manifest", bb.manifest, "Gallery manifest")->required();
  b->add_option("--out", bb.out, "Bank file")->required();
  b->add_flag("--normalize,!--no-normalize", bb.normalize, "L2-normalize embeddings first (default on)");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the query model");
  t->add_option("--config", tr.config, "RunConfig JSON")->check(CLI::ExistingFile);
  t->add_option("--embeddings", tr.embeddings, "Gallery embedding store")->required();
  t->add_option("--raw", tr.raw, "Gallery raw feature store")->required();
  t->add_option("--manifest", tr.manifest, "Gallery manifest")->required();
  t->add_option("--bank", tr.bank, "Bank file")->required();
  t->add_option("--out", tr.out_model, "Model file")->required();
  t->add_option("--log", tr.log, "Training log CSV");
  t->add_option("--loss-mode", tr.loss_mode, "asym | implicit | explicit");
  t->add_option("--epochs", tr.epochs, "Override epochs");
  add_common(t, tr.common);

  EmbedArgs em;
  auto* e = app.add_subcommand("embed", "Embed raw features with a trained model");
  e->add_option("--model", em.model, "Model file")->required();
  e->add_option("--raw", em.raw, "Raw feature store")->required();
  e->add_option("--out", em.out, "Output embedding store")->required();

  EvalArgs ev;
  auto* v = app.add_subcommand("eval", "Retrieval evaluation");
  v->add_option("--config", ev.config, "RunConfig JSON")->check(CLI::ExistingFile);
  v->add_option("--queries", ev.queries, "Query embedding store")->required();
  v->add_option("--query-manifest", ev.query_manifest, "Query manifest")->required();
  v->add_option("--gallery", ev.gallery, "Gallery embedding store")->required();
  v->add_option("--gallery-manifest", ev.gallery_manifest, "Gallery manifest")->required();
  v->add_option("--gt-mode", ev.gt_mode, "geo | frames | pairs");
  v->add_option("--threshold", ev.threshold, "Geo threshold in metres");
  v->add_option("--window", ev.window, "Frame window");
  v->add_option("--pairs", ev.pairs, "Ground-truth pair file (JSON Lines)");
  v->add_option("--ks", ev.ks, "Comma-separated k values");
  v->add_option("--out-json", ev.out_json, "Report JSON path");
  v->add_option("--out-csv", ev.out_csv, "Report CSV path");
  v->add_flag("--margin,!--no-margin", ev.margin, "Include ranking margins (default on)");
  add_common(v, ev.common);

  ValidateArgs va;
  auto* va_cmd = app.add_subcommand("validate", "Run oracle validation suites");
  va_cmd->add_option("--suite", va.suite, "bound | grad | eig | conv | all")
      ->check(CLI::IsMember({"bound", "grad", "eig", "conv", "all"}));
  add_common(va_cmd, va.common);

  BenchArgs be;
  auto* bn = app.add_subcommand("bench", "Time bank build against brute-force k-NN precompute");
  bn->add_option("--sizes", be.sizes, "Comma-separated gallery sizes");
  bn->add_option("--dim", be.dim, "Embedding dimension")->check(CLI::PositiveNumber);
  bn->add_option("--k", be.k, "Neighbours per item")->check(CLI::PositiveNumber);
  bn->add_option("--repeats", be.repeats, "Timing repeats (median reported)")->check(CLI::PositiveNumber);
  bn->add_option("--out", be.out, "CSV output path");
  add_common(bn, be.common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitBadInput;
  }

  try {
    if (*s) return cmd_synth(synth);
    if (*b) return cmd_build_bank(bb);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_embed(em);
    if (*v) return cmd_eval(ev);
    if (*va_cmd) return cmd_validate(va);
    if (*bn) return cmd_bench(be);
  } catch (const Error& err) {
    std::cerr << "error [" << to_string(err.code()) << "]: " << err.what() << '\n';
    return kExitBadInput;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitBadInput;
  }
  return kExitBadInput;
}
