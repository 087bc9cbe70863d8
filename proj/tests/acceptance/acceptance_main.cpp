// Acceptance harness: exercises the end-to-end guarantees the library makes
// and prints exactly one PASS/FAIL line per check. Exit code is the number of
// failed checks. Pass check numbers as arguments to run a subset, e.g.
// `acceptance 6 7`. Artifacts (trajectories, tables, audited datasets) land
// in ./acceptance_artifacts.

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "abc/batching.hpp"
#include "abc/checkpoint.hpp"
#include "abc/corpus.hpp"
#include "abc/encoder.hpp"
#include "abc/evalsuite.hpp"
#include "abc/gradcheck.hpp"
#include "abc/graph.hpp"
#include "abc/mining.hpp"
#include "abc/objective.hpp"
#include "abc/rng.hpp"
#include "abc/tensor.hpp"
#include "abc/trainer.hpp"
#include "json.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;
using namespace abc;

namespace {

struct Outcome {
  bool ok = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

const fs::path& artifacts_dir() {
  static const fs::path dir = [] {
    fs::path p = "acceptance_artifacts";
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os << text;
}

std::string slurp(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

EncoderConfig resolved_encoder(const Corpus& corpus, std::size_t d_model, std::size_t n_layers,
                               std::size_t n_heads) {
  EncoderConfig e;
  e.vocab_size = corpus.layout.vocab_size;
  e.d_model = d_model;
  e.n_layers = n_layers;
  e.n_heads = n_heads;
  e.max_seq = corpus.max_query_len();
  e.validate();
  return e;
}

// ---------------------------------------------------------------------------
// Shared fixtures, built on first use so subset runs stay cheap.

// 200 training images with a warm-up scorer and a strict k=7 mined dataset.
struct MiningFixture {
  Corpus corpus;
  EncoderConfig enc;
  RunResult boot;
  MiningConfig mc;
  MinedDataset mined;
};

const MiningFixture& mining_fixture() {
  static const MiningFixture fx = [] {
    MiningFixture f;
    WorldConfig wc;
    wc.n_images = 200;
    wc.n_aspects = 4;
    wc.n_bench_images = 0;
    wc.seed = 101;
    f.corpus = generate_world(wc);
    f.enc = resolved_encoder(f.corpus, 16, 1, 2);

    TrainConfig tc;
    tc.steps = 250;
    tc.lr = 1e-3;
    tc.batch_queries = 32;
    tc.batch_candidates = 32;
    tc.lora_rank = 4;
    tc.lora_alpha = 8.0;
    tc.eval_every = 0;
    tc.seed = 7;
    f.boot = run_bootstrap(f.enc, f.corpus, tc);

    f.mc.epsilon = 0.95;
    f.mc.k = 7;
    f.mc.window = 100;
    f.mc.seed = 55;
    f.mined = build_mined_dataset(f.boot.params, f.boot.params.lora.has_value(), f.corpus,
                                  f.mc, 64, /*allow_fewer=*/false);
    return f;
  }();
  return fx;
}

// Instruction-following pipeline at benchmark scale: 200 held-out images in
// groups of five, three independently seeded training runs.
struct SeparationRun {
  std::uint64_t seed = 0;
  RunResult stage1;
  RunResult stage2;
  double instructed = 0.0;
  double blind = 0.0;
};

struct SeparationFixture {
  Corpus corpus;
  std::vector<BenchRecord> bench;
  EncoderConfig enc;
  std::vector<SeparationRun> runs;
  double build_seconds = 0.0;
};

const SeparationFixture& separation_fixture() {
  static const SeparationFixture fx = [] {
    Clock::time_point t0 = Clock::now();
    SeparationFixture f;
    WorldConfig wc;
    wc.n_images = 320;
    wc.n_aspects = 5;
    wc.n_bench_images = 200;
    wc.seed = 202;
    f.corpus = generate_world(wc);
    f.bench = generate_ctrlbench(f.corpus, 200);
    f.enc = resolved_encoder(f.corpus, 32, 1, 2);

    for (std::uint64_t s : {1, 2, 3}) {
      SeparationRun run;
      run.seed = s;

      TrainConfig boot;
      boot.steps = 150;
      boot.lr = 1e-3;
      boot.batch_queries = 16;
      boot.batch_candidates = 16;
      boot.lora_rank = 4;
      boot.lora_alpha = 8.0;
      boot.eval_every = 0;
      boot.seed = 100 + s;
      RunResult warm = run_bootstrap(f.enc, f.corpus, boot);

      MiningConfig mc;
      mc.epsilon = 0.95;
      mc.k = 7;
      mc.window = 100;
      mc.seed = 200 + s;
      MinedDataset mined = build_mined_dataset(warm.params, warm.params.lora.has_value(),
                                               f.corpus, mc, 64, /*allow_fewer=*/true);

      TrainConfig s1;
      s1.steps = 400;
      s1.lr = 1e-3;
      s1.batch_queries = 8;
      s1.batch_candidates = 32;
      s1.lora_rank = 4;
      s1.lora_alpha = 8.0;
      s1.eval_every = 0;
      s1.seed = 300 + s;
      run.stage1 = run_stage1(f.enc, f.corpus, mined, s1);

      TrainConfig s2;
      s2.steps = 100;
      s2.lr = 1e-3;
      s2.images_per_batch = 8;
      s2.group_size = 5;
      s2.lora_rank = 4;
      s2.lora_alpha = 8.0;
      s2.eval_every = 0;
      s2.seed = 400 + s;
      Checkpoint stage1_ckpt{run.stage1.params, run.stage1.meta};
      run.stage2 = run_stage2(stage1_ckpt, f.corpus, s2);

      Checkpoint stage2_ckpt{run.stage2.params, run.stage2.meta};
      run.instructed = eval_ctrlbench(stage2_ckpt, f.corpus, f.bench, true, {1})
                           .metrics.at("within_image_R@1");
      run.blind = eval_ctrlbench(stage2_ckpt, f.corpus, f.bench, false, {1})
                      .metrics.at("within_image_R@1");
      f.runs.push_back(std::move(run));
    }
    f.build_seconds = seconds_since(t0);
    return f;
  }();
  return fx;
}

// ---------------------------------------------------------------------------
// 1. Finite-difference gradient audit of the whole training loss.

Outcome check_gradients() {
  Clock::time_point t0 = Clock::now();
  WorldConfig wc;
  wc.n_images = 8;
  wc.n_aspects = 4;
  wc.seed = 17;
  Corpus corpus = generate_world(wc);
  EncoderConfig enc = resolved_encoder(corpus, 16, 1, 2);
  EncoderParams params = init_params(enc, 3);
  attach_lora(params, 2, 4.0, 11);

  // Conditioning, not production state: 0.02-sigma init buries gradients
  // below finite-difference resolution and a zero head_B sits exactly on the
  // SELU kink, where central differences straddle both branches.
  Rng cond(123);
  for (auto& [name, t] : params.tensors) {
    if (name == "log_tau") continue;
    if (name == "head_B") {
      for (double& v : t.data) v = cond.normal(0.0, 0.3);
    } else {
      for (double& v : t.data) v *= 25.0;
    }
  }
  for (auto& [target, pair] : params.lora->pairs) {
    for (double& v : pair.down.data) v *= 25.0;
    for (double& v : pair.up.data) v = cond.normal(0.0, 0.1);
  }

  std::vector<TokenSeq> queries = {corpus.images[0].tokens, corpus.images[1].tokens};
  std::vector<TokenSeq> candidates;
  for (std::size_t c = 0; c < 8; ++c) candidates.push_back(corpus.captions[c].tokens);
  BatchLayout layout;
  layout.n_queries = 2;
  layout.n_candidates = 8;
  layout.pos_index = {0, 4};
  layout.owner = {0, 0, 0, 0, 1, 1, 1, 1};
  layout.validate(true);

  // Every leaf trainable: temperature, adapter, head, and the base weights
  // the loss flows through.
  ParamMap pm;
  for (const auto& [name, t] : params.tensors) pm[name] = {t, true};
  for (const auto& [target, pair] : params.lora->pairs) {
    pm["lora." + target + ".down"] = {pair.down, true};
    pm["lora." + target + ".up"] = {pair.up, true};
  }

  auto builder = [&](Graph& g, const std::map<std::string, NodeId>& leaves) {
    std::vector<NodeId> qn, cn;
    for (const TokenSeq& q : queries) qn.push_back(encode_node(g, leaves, params, q, true));
    for (const TokenSeq& c : candidates) cn.push_back(encode_node(g, leaves, params, c, true));
    NodeId s = similarity_node(g, g.concat_rows(qn), g.concat_rows(cn));
    return contrastive_loss_node(g, s, layout, leaves.at("log_tau"));
  };

  GradcheckOptions opts;  // h = 1e-5, relative tolerance 1e-4
  opts.probes_per_leaf = 4;
  GradcheckReport rep = gradcheck(builder, pm, opts);
  double secs = seconds_since(t0);

  bool ok = rep.passed && secs < 10.0;
  return {ok, fmt("2 queries x 8 candidates, every leaf probed: max rel err %.2e over %zu "
                  "coords (tol 1e-4, h 1e-5), %.1f s (budget 10 s)",
                  rep.max_rel_err, rep.coords_checked, secs)};
}

// ---------------------------------------------------------------------------
// 2. Loss agrees with a direct-summation reference on every small layout.

BatchLayout general_layout(std::size_t n, std::size_t m) {
  BatchLayout l;
  l.n_queries = n;
  l.n_candidates = m;
  for (std::size_t i = 0; i < n; ++i) l.pos_index.push_back(i);
  for (std::size_t j = 0; j < m; ++j) l.owner.push_back(j % n);
  l.validate(false);
  return l;
}

Outcome check_loss_oracle() {
  Rng rng(29);
  double max_diff = 0.0;
  double max_uniform = 0.0;
  std::size_t layouts = 0;
  for (std::size_t n = 1; n <= 3; ++n) {
    for (std::size_t m = n; m <= 3 * n; ++m) {
      const BatchLayout layout = general_layout(n, m);
      ++layouts;
      for (int trial = 0; trial < 3; ++trial) {
        Tensor q = oracle::random_unit_rows(rng, n, 6);
        Tensor c = oracle::random_unit_rows(rng, m, 6);
        Tensor s = similarity_matrix(q, c);
        for (double tau : {1.0, 0.3, 0.07}) {
          const double want = oracle::contrastive_loss(s, layout, tau);
          const double got = contrastive_loss_value(s, layout, tau);
          Graph g;
          NodeId loss = contrastive_loss_node(g, g.constant(s), layout,
                                              g.constant(Tensor::scalar(std::log(tau))));
          const double got_node = g.value(loss).at(0);
          max_diff = std::max({max_diff, std::abs(got - want), std::abs(got_node - want)});
        }
      }
      Tensor flat = Tensor::full({n, m}, 0.3);
      max_uniform = std::max(max_uniform,
                             std::abs(contrastive_loss_value(flat, layout, 0.07) -
                                      std::log(static_cast<double>(m))));
    }
  }
  bool ok = max_diff <= 1e-12 && max_uniform <= 1e-9;
  return {ok, fmt("%zu layouts (N 1..3, M N..3N), 3 draws x 3 temperatures each: max |loss - "
                  "reference| %.2e (tol 1e-12); uniform-similarity max |loss - ln M| %.2e "
                  "(tol 1e-9)",
                  layouts, max_diff, max_uniform)};
}

// ---------------------------------------------------------------------------
// 3. Exhaustive audit of a mined-negative file from a 200-image corpus.

Outcome check_mining_audit() {
  const MiningFixture& fx = mining_fixture();
  const std::size_t A = fx.corpus.config.n_aspects;
  const std::size_t n_train = fx.corpus.n_train_images();

  fs::path path = artifacts_dir() / "mined.jsonl";
  save_mined(fx.mined, path.string());
  MinedDataset disk = load_mined(path.string());

  if (disk.size() != n_train)
    return {false, fmt("expected %zu records, file holds %zu", n_train, disk.size())};

  // Recompute the full score table the miner saw.
  std::vector<std::size_t> image_indices(n_train);
  for (std::size_t i = 0; i < n_train; ++i) image_indices[i] = i;
  std::vector<std::size_t> caption_indices;
  std::map<std::string, std::size_t> col_of;
  for (std::size_t i = 0; i < n_train; ++i)
    for (std::size_t a = 0; a < A; ++a) {
      col_of[fx.corpus.captions[fx.corpus.caption_index(i, a)].id] = caption_indices.size();
      caption_indices.push_back(fx.corpus.caption_index(i, a));
    }
  Tensor scores = score_corpus(fx.boot.params, fx.boot.params.lora.has_value(), fx.corpus,
                               image_indices, caption_indices, 64);

  std::size_t audited = 0;
  for (std::size_t i = 0; i < disk.size(); ++i) {
    const MinedRecord& rec = disk[i];
    if (rec.image_id != image_id(i)) return {false, "record order does not follow the corpus"};
    if (rec.neg.size() != fx.mc.k)
      return {false, fmt("%s: %zu negatives, expected %zu", rec.image_id.c_str(),
                         rec.neg.size(), fx.mc.k)};

    const std::size_t pos_col = col_of.at(rec.pos);
    if (scores.at(i, pos_col) != rec.pos_score)
      return {false, rec.image_id + ": stored positive score differs from recomputation"};

    // Window rule: eligible columns sorted hardest-first, truncated.
    std::vector<std::size_t> eligible;
    for (std::size_t j = 0; j < caption_indices.size(); ++j)
      if (j != pos_col && scores.at(i, j) <= fx.mc.epsilon * rec.pos_score) eligible.push_back(j);
    std::sort(eligible.begin(), eligible.end(), [&](std::size_t a, std::size_t b) {
      if (scores.at(i, a) != scores.at(i, b)) return scores.at(i, a) > scores.at(i, b);
      return a < b;
    });
    if (eligible.size() > fx.mc.window) eligible.resize(fx.mc.window);
    std::set<std::size_t> pool(eligible.begin(), eligible.end());

    std::set<std::string> seen;
    for (std::size_t j = 0; j < rec.neg.size(); ++j) {
      if (rec.neg[j] == rec.pos) return {false, rec.image_id + ": positive listed as negative"};
      if (!seen.insert(rec.neg[j]).second)
        return {false, rec.image_id + ": duplicate negative " + rec.neg[j]};
      if (!(rec.neg_scores[j] <= fx.mc.epsilon * rec.pos_score))
        return {false, rec.image_id + ": negative above the epsilon threshold"};
      const std::size_t col = col_of.at(rec.neg[j]);
      if (scores.at(i, col) != rec.neg_scores[j])
        return {false, rec.image_id + ": stored negative score differs from recomputation"};
      if (pool.find(col) == pool.end())
        return {false, rec.image_id + ": negative drawn outside the candidate window"};
      ++audited;
    }
  }

  // Determinism: an identical pass writes an identical file.
  MinedDataset again = build_mined_dataset(fx.boot.params, fx.boot.params.lora.has_value(),
                                           fx.corpus, fx.mc, 32, false);
  fs::path path2 = artifacts_dir() / "mined_repeat.jsonl";
  save_mined(again, path2.string());
  bool repeat_equal = slurp(path) == slurp(path2);
  fs::remove(path2);
  if (!repeat_equal) return {false, "re-mining with the same seed changed the file"};

  return {true, fmt("%zu negatives across %zu records audited from disk: threshold 0.95, "
                    "window rule, stored-score fidelity, and per-seed determinism all hold",
                    audited, disk.size())};
}

// ---------------------------------------------------------------------------
// 4. Instruction stage leaves everything but its own adapter untouched.

Outcome check_stage2_freeze() {
  const SeparationFixture& fx = separation_fixture();
  const SeparationRun& run = fx.runs.front();

  EncoderParams fused = lora_fuse(run.stage1.params);
  std::vector<std::string> names = base_tensor_names(fused.config);
  std::size_t checked = 0;
  for (const std::string& name : names) {
    if (!bitwise_equal(run.stage2.params.tensor(name), fused.tensor(name)))
      return {false, "tensor " + name + " moved during the instruction stage"};
    ++checked;
  }
  if (!run.stage2.params.lora.has_value())
    return {false, "instruction stage produced no adapter"};

  std::size_t embeddings = 0;
  for (std::size_t c = 0; c < fx.corpus.captions.size(); c += 97) {
    Tensor a = encode(run.stage2.params, fx.corpus.captions[c].tokens, false);
    Tensor b = encode(fused, fx.corpus.captions[c].tokens, false);
    if (!bitwise_equal(a, b))
      return {false, "candidate embedding changed for " + fx.corpus.captions[c].id};
    ++embeddings;
  }
  return {true, fmt("after the 100-step instruction stage: %zu base/head/temperature tensors "
                    "and %zu candidate embeddings are bit-identical to the fused "
                    "pretrained model",
                    checked, embeddings)};
}

// ---------------------------------------------------------------------------
// 5. Encoding through the adapter equals encoding after fusing it.

Outcome check_fuse_equivalence() {
  EncoderConfig enc;
  enc.vocab_size = 64;
  enc.d_model = 32;
  enc.n_layers = 2;
  enc.n_heads = 4;
  enc.max_seq = 24;
  enc.validate();
  EncoderParams params = init_params(enc, 5);
  attach_lora(params, 4, 8.0, 6);
  Rng rng(77);
  for (auto& [target, pair] : params.lora->pairs)
    for (double& v : pair.up.data) v = rng.normal(0.0, 0.1);

  EncoderParams fused = lora_fuse(params);
  double max_diff = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t len = 1 + rng.bounded(enc.max_seq);
    TokenSeq seq;
    for (std::size_t t = 0; t < len; ++t)
      seq.push_back(static_cast<int32_t>(4 + rng.bounded(enc.vocab_size - 4)));
    Tensor a = encode(params, seq, true);
    Tensor b = encode(fused, seq, false);
    for (std::size_t j = 0; j < a.data.size(); ++j)
      max_diff = std::max(max_diff, std::abs(a.data[j] - b.data[j]));
  }
  return {max_diff <= 1e-9,
          fmt("100 random inputs through a rank-4 adapter: max |adapter - fused| %.2e "
              "(tol 1e-9)",
              max_diff)};
}

// ---------------------------------------------------------------------------
// 6. Instructed retrieval beats the blind ceiling on held-out images.

Outcome check_instruction_separation() {
  const SeparationFixture& fx = separation_fixture();
  const double p = 1.0 / static_cast<double>(fx.corpus.config.n_aspects);
  const double sigma = std::sqrt(p * (1.0 - p) / static_cast<double>(fx.bench.size()));
  const double floor = p + 3.0 * sigma;

  nlohmann::ordered_json doc;
  doc["bench_queries"] = fx.bench.size();
  doc["chance"] = p;
  doc["three_sigma"] = 3.0 * sigma;
  doc["runs"] = nlohmann::ordered_json::array();

  bool ok = true;
  std::string inst_list, blind_list;
  for (const SeparationRun& run : fx.runs) {
    doc["runs"].push_back(nlohmann::ordered_json{{"seed", run.seed},
                                                 {"instructed_within_image_R@1", run.instructed},
                                                 {"blind_within_image_R@1", run.blind}});
    ok = ok && run.instructed > floor && std::abs(run.blind - p) <= 3.0 * sigma;
    inst_list += fmt("%s%.3f", inst_list.empty() ? "" : "/", run.instructed);
    blind_list += fmt("%s%.3f", blind_list.empty() ? "" : "/", run.blind);
  }
  write_text(artifacts_dir() / "instruction_separation.json", doc.dump(2) + "\n");

  ok = ok && fx.build_seconds < 900.0;
  return {ok, fmt("1000 held-out queries, 3 seeds: instructed within-image R@1 %s (must beat "
                  "%.3f), blind %s (chance %.2f within +/-%.3f), pipeline %.0f s "
                  "(budget 900 s)",
                  inst_list.c_str(), floor, blind_list.c_str(), p, 3.0 * sigma,
                  fx.build_seconds)};
}

// ---------------------------------------------------------------------------
// 7. Random negatives drive the temperature strictly below mined negatives.

Outcome check_temperature_dynamics() {
  const MiningFixture& fx = mining_fixture();
  TrainConfig cfg;
  cfg.steps = 350;
  cfg.lr = 1e-3;
  cfg.batch_queries = 4;
  cfg.batch_candidates = 16;
  cfg.lora_rank = 4;
  cfg.lora_alpha = 8.0;
  cfg.eval_every = 0;
  cfg.seed = 0;  // per-pair seeds come from the experiment
  std::vector<std::uint64_t> seeds = {11, 12, 13};
  std::vector<TauRunPair> pairs = run_tau_experiment(fx.enc, fx.corpus, fx.mined, cfg, seeds);

  nlohmann::ordered_json doc;
  doc["tau_init"] = cfg.tau_init;
  doc["steps"] = cfg.steps;
  doc["runs"] = nlohmann::ordered_json::array();
  bool ok = true;
  std::string detail;
  for (const TauRunPair& pr : pairs) {
    doc["runs"].push_back(nlohmann::ordered_json{{"seed", pr.seed},
                                                 {"tau_mined", pr.tau_mined},
                                                 {"tau_random", pr.tau_random},
                                                 {"mined_diverged", pr.mined_diverged},
                                                 {"random_diverged", pr.random_diverged}});
    if (pr.mined_diverged || pr.tau_mined.empty() || pr.tau_random.empty()) {
      ok = false;
      detail += fmt("%sseed %llu: mined run incomplete", detail.empty() ? "" : "; ",
                    static_cast<unsigned long long>(pr.seed));
      continue;
    }
    const double tm = pr.tau_mined.back();
    const double tr = pr.tau_random.back();
    ok = ok && tr < tm;
    detail += fmt("%sseed %llu: %.4f vs %.4f", detail.empty() ? "" : "; ",
                  static_cast<unsigned long long>(pr.seed), tm, tr);
  }
  write_text(artifacts_dir() / "tau_experiment.json", doc.dump(2) + "\n");
  return {ok, fmt("final temperature mined vs random over %zu paired runs — %s; random must "
                  "stay strictly lower; trajectories in acceptance_artifacts/"
                  "tau_experiment.json",
                  pairs.size(), detail.c_str())};
}

// ---------------------------------------------------------------------------
// 8. Same config and seed reproduce the run bit for bit; saves are stable.

Outcome check_determinism() {
  const MiningFixture& fx = mining_fixture();
  TrainConfig cfg;
  cfg.steps = 40;
  cfg.lr = 1e-3;
  cfg.batch_queries = 4;
  cfg.batch_candidates = 16;
  cfg.lora_rank = 2;
  cfg.lora_alpha = 4.0;
  cfg.eval_every = 10;
  cfg.seed = 9;

  RunResult a = run_stage1(fx.enc, fx.corpus, fx.mined, cfg);
  RunResult b = run_stage1(fx.enc, fx.corpus, fx.mined, cfg);

  fs::path tmp = fs::temp_directory_path() / "abc-acceptance";
  fs::create_directories(tmp);
  save_checkpoint((tmp / "a.abce").string(), a.params, a.meta);
  save_checkpoint((tmp / "b.abce").string(), b.params, b.meta);
  save_metrics(a.metrics, (tmp / "a.jsonl").string());
  save_metrics(b.metrics, (tmp / "b.jsonl").string());
  bool ckpt_equal = slurp(tmp / "a.abce") == slurp(tmp / "b.abce");
  bool metrics_equal = slurp(tmp / "a.jsonl") == slurp(tmp / "b.jsonl");

  Checkpoint loaded = load_checkpoint((tmp / "a.abce").string());
  save_checkpoint((tmp / "c.abce").string(), loaded.params, loaded.meta);
  bool roundtrip_equal = slurp(tmp / "a.abce") == slurp(tmp / "c.abce");
  fs::remove_all(tmp);

  bool ok = ckpt_equal && metrics_equal && roundtrip_equal;
  return {ok, fmt("two identically seeded 40-step runs: checkpoints byte-identical (%s), "
                  "metrics byte-identical (%s), save-load-save stable (%s)",
                  ckpt_equal ? "yes" : "NO", metrics_equal ? "yes" : "NO",
                  roundtrip_equal ? "yes" : "NO")};
}

// ---------------------------------------------------------------------------
// 9. Batch-scaling harness completes and reports a well-formed table.

Outcome check_scaling_harness() {
  const MiningFixture& fx = mining_fixture();
  TrainConfig cfg;
  cfg.steps = 12;
  cfg.lr = 1e-3;
  cfg.batch_queries = 2;
  cfg.batch_candidates = 8;
  cfg.lora_rank = 2;
  cfg.lora_alpha = 4.0;
  cfg.eval_every = 0;
  cfg.seed = 21;
  std::vector<ScalingRow> rows = run_scaling_experiment(fx.enc, fx.corpus, fx.mined, cfg);

  if (rows.size() != 4) return {false, fmt("expected 4 rows, got %zu", rows.size())};
  const char* labels[4] = {"4x-batch", "base-batch", "base-batch-2x-steps",
                           "base-batch-4x-steps"};
  nlohmann::ordered_json doc;
  doc["rows"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const ScalingRow& r = rows[i];
    if (r.label != labels[i]) return {false, "unexpected row label " + r.label};
    if (!r.diverged && !std::isfinite(r.final_loss))
      return {false, r.label + ": non-finite loss without a divergence flag"};
    doc["rows"].push_back(nlohmann::ordered_json{{"label", r.label},
                                                 {"batch_queries", r.batch_queries},
                                                 {"batch_candidates", r.batch_candidates},
                                                 {"steps", r.steps},
                                                 {"samples_seen", r.samples_seen},
                                                 {"final_loss", r.final_loss},
                                                 {"val_acc", r.val_acc},
                                                 {"diverged", r.diverged}});
  }
  if (rows[0].samples_seen != rows[3].samples_seen)
    return {false, "4x-batch and 4x-steps rows saw different candidate counts"};

  // Directionality is recorded, never asserted: these runs are far too small
  // to promise an ordering.
  std::string direction =
      rows[0].val_acc > rows[3].val_acc
          ? "4x-batch ahead"
          : (rows[0].val_acc < rows[3].val_acc ? "equal-samples-steps ahead" : "tie");
  doc["direction_observed"] = direction;
  write_text(artifacts_dir() / "scaling.json", doc.dump(2) + "\n");
  return {true, fmt("4 runs complete, sample accounting consistent (%zu candidates each for "
                    "the matched pair); observed direction: %s (recorded, not asserted)",
                    rows[0].samples_seen, direction.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
  struct Check {
    int number;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Check> checks = {
      {1, "gradient-check", check_gradients},
      {2, "loss-oracle", check_loss_oracle},
      {3, "mining-audit", check_mining_audit},
      {4, "stage2-freeze", check_stage2_freeze},
      {5, "fuse-equivalence", check_fuse_equivalence},
      {6, "instruction-separation", check_instruction_separation},
      {7, "temperature-dynamics", check_temperature_dynamics},
      {8, "determinism", check_determinism},
      {9, "scaling-harness", check_scaling_harness},
  };

  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const Check& c : checks) {
    if (!wanted.empty() && wanted.find(c.number) == wanted.end()) continue;
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s: %d %s — %s\n", out.ok ? "PASS" : "FAIL", c.number, c.name,
                out.detail.c_str());
    std::fflush(stdout);
    if (!out.ok) ++failures;
  }
  if (wanted.empty() || wanted.size() > 1)
    std::printf("%s: %d of %zu checks failed\n", failures == 0 ? "OK" : "BAD", failures,
                wanted.empty() ? checks.size() : wanted.size());
  return failures;
}
