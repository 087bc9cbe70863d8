#include "abc/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "abc/batching.hpp"
#include "abc/checkpoint.hpp"
#include "abc/corpus.hpp"
#include "abc/evalsuite.hpp"
#include "abc/log.hpp"
#include "abc/mining.hpp"
#include "abc/trainer.hpp"

namespace fs = std::filesystem;

namespace abc {
namespace {

constexpr const char* kVersion = "v1.0.0";

// Config-content problems exit with code 3 and a message naming the field.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CliOptions {
  std::string config_path;
  std::string out;
  std::uint64_t seed = 0;
  bool has_seed = false;
  bool allow_fewer = false;
  bool paper_scale = false;
  std::string model_override;
};

using Clock = std::chrono::steady_clock;

double elapsed_s(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ---- config file plumbing --------------------------------------------------

nlohmann::json load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: " + std::string(e.what()));
  }
}

void require_object(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected a JSON object");
}

void allow_fields(const nlohmann::json& j, const std::string& path,
                  std::initializer_list<const char*> names) {
  require_object(j, path);
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* n : names) known = known || key == n;
    if (!known) throw ConfigError(path + "." + key + ": unexpected field");
  }
}

nlohmann::json section(const nlohmann::json& j, const char* key) {
  return j.contains(key) ? j.at(key) : nlohmann::json::object();
}

std::size_t get_size(const nlohmann::json& j, const std::string& path, const char* key,
                     std::size_t def) {
  if (!j.contains(key)) return def;
  const auto& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0)
    throw ConfigError(path + "." + key + ": expected a non-negative integer");
  return v.get<std::size_t>();
}

std::uint64_t get_u64(const nlohmann::json& j, const std::string& path, const char* key,
                      std::uint64_t def) {
  if (!j.contains(key)) return def;
  const auto& v = j.at(key);
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() &&
                                 v.get<long long>() < 0))
    throw ConfigError(path + "." + key + ": expected a non-negative integer");
  return v.get<std::uint64_t>();
}

double get_num(const nlohmann::json& j, const std::string& path, const char* key, double def) {
  if (!j.contains(key)) return def;
  const auto& v = j.at(key);
  if (!v.is_number()) throw ConfigError(path + "." + key + ": expected a number");
  return v.get<double>();
}

bool get_bool(const nlohmann::json& j, const std::string& path, const char* key, bool def) {
  if (!j.contains(key)) return def;
  const auto& v = j.at(key);
  if (!v.is_boolean()) throw ConfigError(path + "." + key + ": expected a boolean");
  return v.get<bool>();
}

std::string get_str(const nlohmann::json& j, const std::string& path, const char* key,
                    const std::string& def) {
  if (!j.contains(key)) return def;
  const auto& v = j.at(key);
  if (!v.is_string()) throw ConfigError(path + "." + key + ": expected a string");
  return v.get<std::string>();
}

std::string need_str(const nlohmann::json& j, const std::string& path, const char* key) {
  if (!j.contains(key)) throw ConfigError(path + "." + key + ": required field is missing");
  return get_str(j, path, key, "");
}

std::vector<std::size_t> get_size_list(const nlohmann::json& j, const std::string& path,
                                       const char* key, std::vector<std::size_t> def) {
  if (!j.contains(key)) return def;
  const auto& v = j.at(key);
  if (!v.is_array()) throw ConfigError(path + "." + key + ": expected an array of integers");
  std::vector<std::size_t> out;
  for (const auto& e : v) {
    if (!e.is_number_integer() || e.get<long long>() < 0)
      throw ConfigError(path + "." + key + ": expected non-negative integers");
    out.push_back(e.get<std::size_t>());
  }
  if (out.empty()) throw ConfigError(path + "." + key + ": must not be empty");
  return out;
}

std::vector<std::uint64_t> get_u64_list(const nlohmann::json& j, const std::string& path,
                                        const char* key, std::vector<std::uint64_t> def) {
  std::vector<std::size_t> raw =
      get_size_list(j, path, key, std::vector<std::size_t>(def.begin(), def.end()));
  return {raw.begin(), raw.end()};
}

// ---- presets ----------------------------------------------------------------

// Desk defaults finish the whole pipeline in minutes on one core. The
// --paper-scale presets carry the documented full-scale hyperparameters
// (nothing here asserts they fit on a desk machine).
TrainConfig bootstrap_defaults(bool paper) {
  TrainConfig c;
  c.steps = paper ? 1000 : 300;
  c.lr = paper ? 4e-5 : 1e-3;
  c.batch_queries = paper ? 256 : 32;
  c.batch_candidates = paper ? 256 : 32;
  c.lora_rank = paper ? 64 : 8;
  c.lora_alpha = paper ? 128.0 : 16.0;
  c.eval_every = 50;
  c.seed = 7;
  return c;
}

TrainConfig pretrain_defaults(bool paper) {
  TrainConfig c;
  c.steps = paper ? 4000 : 500;
  c.lr = paper ? 4e-5 : 1e-3;
  c.batch_queries = paper ? 512 : 16;
  c.batch_candidates = paper ? 4096 : 128;
  c.lora_rank = paper ? 64 : 8;
  c.lora_alpha = paper ? 128.0 : 16.0;
  c.eval_every = 50;
  c.seed = 7;
  return c;
}

TrainConfig finetune_defaults(bool paper) {
  TrainConfig c;
  c.steps = 100;
  c.lr = paper ? 4e-5 : 1e-3;
  c.images_per_batch = paper ? 128 : 8;
  c.group_size = 4;
  c.lora_rank = paper ? 16 : 4;
  c.lora_alpha = paper ? 32.0 : 8.0;
  c.eval_every = 20;
  c.seed = 7;
  return c;
}

TrainConfig exp_tau_defaults(bool paper) {
  TrainConfig c = pretrain_defaults(paper);
  if (paper) {
    c.steps = 1000;
    c.batch_queries = 128;
    c.batch_candidates = 1024;
  } else {
    c.steps = 150;
  }
  return c;
}

EncoderConfig encoder_defaults(bool paper) {
  EncoderConfig e;
  e.vocab_size = 0;  // resolved from the corpus
  e.d_model = paper ? 512 : 64;
  e.n_layers = paper ? 8 : 2;
  e.n_heads = paper ? 8 : 2;
  e.max_seq = 0;  // resolved from the corpus
  return e;
}

WorldConfig world_defaults(bool paper) {
  WorldConfig w;
  if (paper) {
    w.n_images = 2000;
    w.n_aspects = 5;
    w.n_bench_images = 1000;
  } else {
    w.n_images = 100;
    w.n_aspects = 4;
    w.n_bench_images = 20;
  }
  return w;
}

// ---- section parsers ---------------------------------------------------------

WorldConfig parse_world(const nlohmann::json& j, WorldConfig w) {
  allow_fields(j, "world",
               {"n_images", "n_aspects", "values_per_aspect", "paraphrases_per_aspect",
                "noise_tokens_per_image", "n_bench_images", "seed"});
  w.n_images = get_size(j, "world", "n_images", w.n_images);
  w.n_aspects = get_size(j, "world", "n_aspects", w.n_aspects);
  w.values_per_aspect = get_size(j, "world", "values_per_aspect", w.values_per_aspect);
  w.paraphrases_per_aspect = get_size(j, "world", "paraphrases_per_aspect", w.paraphrases_per_aspect);
  w.noise_tokens_per_image = get_size(j, "world", "noise_tokens_per_image", w.noise_tokens_per_image);
  w.n_bench_images = get_size(j, "world", "n_bench_images", w.n_bench_images);
  w.seed = get_u64(j, "world", "seed", w.seed);
  return w;
}

EncoderConfig parse_encoder(const nlohmann::json& j, EncoderConfig e) {
  allow_fields(j, "encoder",
               {"vocab_size", "d_model", "n_layers", "n_heads", "max_seq", "attn_mode",
                "head_hidden"});
  e.vocab_size = get_size(j, "encoder", "vocab_size", e.vocab_size);
  e.d_model = get_size(j, "encoder", "d_model", e.d_model);
  e.n_layers = get_size(j, "encoder", "n_layers", e.n_layers);
  e.n_heads = get_size(j, "encoder", "n_heads", e.n_heads);
  e.max_seq = get_size(j, "encoder", "max_seq", e.max_seq);
  e.head_hidden = get_size(j, "encoder", "head_hidden", e.head_hidden);
  std::string mode = get_str(j, "encoder", "attn_mode", to_string(e.attn_mode));
  try {
    e.attn_mode = attn_mode_from_string(mode);
  } catch (const std::exception&) {
    throw ConfigError("encoder.attn_mode: expected 'causal' or 'bidirectional', got '" + mode +
                      "'");
  }
  return e;
}

// 0-valued vocab/max_seq resolve from the corpus so configs stay portable
// across world sizes.
void resolve_encoder(EncoderConfig& e, const Corpus& corpus) {
  if (e.vocab_size == 0) e.vocab_size = corpus.layout.vocab_size;
  if (e.max_seq == 0) e.max_seq = corpus.max_query_len();
  try {
    e.validate();
  } catch (const std::exception& ex) {
    throw ConfigError(std::string("encoder: ") + ex.what());
  }
}

TrainConfig parse_train(const nlohmann::json& j, TrainConfig c, const CliOptions& o) {
  allow_fields(j, "train",
               {"steps", "lr", "beta1", "beta2", "weight_decay", "warmup_frac", "batch_queries",
                "batch_candidates", "images_per_batch", "group_size", "lora_rank", "lora_alpha",
                "tau_init", "seed", "eval_every"});
  c.steps = get_size(j, "train", "steps", c.steps);
  c.lr = get_num(j, "train", "lr", c.lr);
  c.beta1 = get_num(j, "train", "beta1", c.beta1);
  c.beta2 = get_num(j, "train", "beta2", c.beta2);
  c.weight_decay = get_num(j, "train", "weight_decay", c.weight_decay);
  c.warmup_frac = get_num(j, "train", "warmup_frac", c.warmup_frac);
  c.batch_queries = get_size(j, "train", "batch_queries", c.batch_queries);
  c.batch_candidates = get_size(j, "train", "batch_candidates", c.batch_candidates);
  c.images_per_batch = get_size(j, "train", "images_per_batch", c.images_per_batch);
  c.group_size = get_size(j, "train", "group_size", c.group_size);
  c.lora_rank = get_size(j, "train", "lora_rank", c.lora_rank);
  c.lora_alpha = get_num(j, "train", "lora_alpha", c.lora_alpha);
  c.tau_init = get_num(j, "train", "tau_init", c.tau_init);
  c.seed = get_u64(j, "train", "seed", c.seed);
  c.eval_every = get_size(j, "train", "eval_every", c.eval_every);
  if (o.has_seed) c.seed = o.seed;
  try {
    c.validate();
  } catch (const std::exception& ex) {
    throw ConfigError(std::string("train: ") + ex.what());
  }
  return c;
}

// ---- echoes: every resolved value lands in run_meta.json --------------------

nlohmann::ordered_json echo_world(const WorldConfig& w) {
  return {{"n_images", w.n_images},
          {"n_aspects", w.n_aspects},
          {"values_per_aspect", w.values_per_aspect},
          {"paraphrases_per_aspect", w.paraphrases_per_aspect},
          {"noise_tokens_per_image", w.noise_tokens_per_image},
          {"n_bench_images", w.n_bench_images},
          {"seed", w.seed}};
}

nlohmann::ordered_json echo_encoder(const EncoderConfig& e) {
  return {{"vocab_size", e.vocab_size}, {"d_model", e.d_model},
          {"n_layers", e.n_layers},     {"n_heads", e.n_heads},
          {"max_seq", e.max_seq},       {"attn_mode", to_string(e.attn_mode)},
          {"head_hidden", e.head_hidden}};
}

nlohmann::ordered_json echo_train(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"lr", c.lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"weight_decay", c.weight_decay},
          {"warmup_frac", c.warmup_frac},
          {"batch_queries", c.batch_queries},
          {"batch_candidates", c.batch_candidates},
          {"images_per_batch", c.images_per_batch},
          {"group_size", c.group_size},
          {"lora_rank", c.lora_rank},
          {"lora_alpha", c.lora_alpha},
          {"tau_init", c.tau_init},
          {"seed", c.seed},
          {"eval_every", c.eval_every}};
}

void write_json_file(const nlohmann::ordered_json& j, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  os << j.dump(2) << "\n";
  if (!os) throw std::runtime_error("write to '" + path + "' failed");
}

void write_run_meta(const std::string& dir, const std::string& command,
                    const nlohmann::ordered_json& config_echo,
                    std::optional<std::uint64_t> seed, Clock::time_point t0) {
  nlohmann::ordered_json m;
  m["command"] = command;
  m["version"] = kVersion;
  if (seed)
    m["seed"] = *seed;
  else
    m["seed"] = nullptr;
  m["config"] = config_echo;
  m["wall_time_s"] = elapsed_s(t0);
  write_json_file(m, dir + "/run_meta.json");
}

std::string out_dir_of(const CliOptions& o) {
  fs::create_directories(o.out);
  return o.out;
}

void check_ks(const std::vector<std::size_t>& ks, std::size_t pool, const char* what) {
  for (std::size_t k : ks)
    if (k == 0 || k > pool)
      throw ConfigError("ks: cutoff " + std::to_string(k) + " outside the " + what + " pool of " +
                        std::to_string(pool));
}

std::string metric_line(const EvalReport& r) {
  std::string s = r.task + ":";
  for (const auto& [k, v] : r.metrics) s += " " + k + "=" + std::to_string(v);
  return s;
}

// ---- commands ----------------------------------------------------------------

int cmd_gen_world(const CliOptions& o, Clock::time_point t0) {
  WorldConfig wc = parse_world(load_config(o.config_path), world_defaults(o.paper_scale));
  if (o.has_seed) wc.seed = o.seed;
  try {
    wc.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("world: ") + e.what());
  }
  Corpus corpus = generate_world(wc);
  ValidationReport rep = validate_corpus(corpus);
  if (!rep.ok) throw std::runtime_error("generated corpus failed validation: " + rep.violation);
  std::string out = out_dir_of(o);
  save_corpus(corpus, out);
  if (wc.n_bench_images > 0)
    save_ctrlbench(generate_ctrlbench(corpus, wc.n_bench_images), out + "/ctrlbench.jsonl");
  log_line(LogLevel::kInfo, "gen-world: " + std::to_string(corpus.images.size()) + " images, " +
                                std::to_string(corpus.captions.size()) + " captions, " +
                                std::to_string(corpus.instructions.size()) + " instructions");
  write_run_meta(out, "gen-world", echo_world(wc), wc.seed, t0);
  return 0;
}

int cmd_bootstrap(const CliOptions& o, Clock::time_point t0) {
  nlohmann::json j = load_config(o.config_path);
  allow_fields(j, "config", {"corpus", "encoder", "train"});
  std::string corpus_dir = need_str(j, "config", "corpus");
  EncoderConfig ec = parse_encoder(section(j, "encoder"), encoder_defaults(o.paper_scale));
  TrainConfig tc = parse_train(section(j, "train"), bootstrap_defaults(o.paper_scale), o);
  Corpus corpus = load_corpus(corpus_dir);
  resolve_encoder(ec, corpus);

  RunResult r = run_bootstrap(ec, corpus, tc);
  std::string out = out_dir_of(o);
  save_checkpoint(out + "/boot.abce", r.params, r.meta);
  save_metrics(r.metrics, out + "/metrics.jsonl");
  log_line(LogLevel::kInfo,
           "bootstrap: final loss " + std::to_string(r.metrics.steps.back().loss));
  nlohmann::ordered_json echo{
      {"corpus", corpus_dir}, {"encoder", echo_encoder(ec)}, {"train", echo_train(tc)}};
  write_run_meta(out, "bootstrap", echo, tc.seed, t0);
  return 0;
}

int cmd_mine(const CliOptions& o, Clock::time_point t0) {
  nlohmann::json j = load_config(o.config_path);
  allow_fields(j, "mine", {"corpus", "model", "epsilon", "k", "window", "seed", "chunk_size"});
  std::string corpus_dir = need_str(j, "mine", "corpus");
  std::string model =
      o.model_override.empty() ? need_str(j, "mine", "model") : o.model_override;
  MiningConfig mc;
  mc.epsilon = get_num(j, "mine", "epsilon", mc.epsilon);
  mc.k = get_size(j, "mine", "k", mc.k);
  mc.window = get_size(j, "mine", "window", mc.window);
  mc.seed = get_u64(j, "mine", "seed", mc.seed);
  if (o.has_seed) mc.seed = o.seed;
  std::size_t chunk = get_size(j, "mine", "chunk_size", 64);
  if (chunk == 0) throw ConfigError("mine.chunk_size: must be at least 1");
  try {
    mc.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("mine: ") + e.what());
  }

  Corpus corpus = load_corpus(corpus_dir);
  Checkpoint ckpt = load_checkpoint(model);
  if (ckpt.meta.stage != "bootstrap")
    throw std::runtime_error("mine: scoring checkpoint must come from the warm-up stage, got '" +
                             ckpt.meta.stage + "'");

  MinedDataset ds = build_mined_dataset(ckpt.params, ckpt.params.lora.has_value(), corpus, mc,
                                        chunk, o.allow_fewer);
  ValidationReport rep = validate_mined(ds, mc.epsilon);
  if (!rep.ok) throw std::runtime_error("mined dataset failed validation: " + rep.violation);

  // --out may name the .jsonl file directly, or a directory to drop
  // mined.jsonl into.
  std::string mined_path, meta_dir;
  if (o.out.ends_with(".jsonl")) {
    mined_path = o.out;
    fs::path parent = fs::path(o.out).parent_path();
    meta_dir = parent.empty() ? "." : parent.string();
    fs::create_directories(meta_dir);
  } else {
    meta_dir = out_dir_of(o);
    mined_path = meta_dir + "/mined.jsonl";
  }
  save_mined(ds, mined_path);
  log_line(LogLevel::kInfo, "mine: " + std::to_string(ds.size()) + " records -> " + mined_path);
  nlohmann::ordered_json echo{{"corpus", corpus_dir}, {"model", model},
                              {"epsilon", mc.epsilon}, {"k", mc.k},
                              {"window", mc.window},   {"seed", mc.seed},
                              {"chunk_size", chunk},   {"allow_fewer", o.allow_fewer}};
  write_run_meta(meta_dir, "mine", echo, mc.seed, t0);
  return 0;
}

int cmd_pretrain(const CliOptions& o, Clock::time_point t0) {
  nlohmann::json j = load_config(o.config_path);
  allow_fields(j, "config", {"corpus", "mined", "negative_source", "encoder", "train"});
  std::string corpus_dir = need_str(j, "config", "corpus");
  std::string mined_path = need_str(j, "config", "mined");
  std::string source = get_str(j, "config", "negative_source", "mined");
  if (source != "mined" && source != "uniform")
    throw ConfigError("negative_source: expected 'mined' or 'uniform', got '" + source + "'");

  EncoderConfig ec = parse_encoder(section(j, "encoder"), encoder_defaults(o.paper_scale));
  TrainConfig tc = parse_train(section(j, "train"), pretrain_defaults(o.paper_scale), o);
  Corpus corpus = load_corpus(corpus_dir);
  MinedDataset mined = load_mined(mined_path);
  resolve_encoder(ec, corpus);

  NegativeSource src =
      source == "mined" ? NegativeSource::kMined : NegativeSource::kUniformRandom;
  RunResult r = run_stage1(ec, corpus, mined, tc, src);
  std::string out = out_dir_of(o);
  save_checkpoint(out + "/stage1.abce", r.params, r.meta);
  save_metrics(r.metrics, out + "/metrics.jsonl");
  log_line(LogLevel::kInfo, "pretrain: final loss " +
                                std::to_string(r.metrics.steps.back().loss) + ", tau " +
                                std::to_string(r.metrics.steps.back().tau));
  nlohmann::ordered_json echo{{"corpus", corpus_dir},
                              {"mined", mined_path},
                              {"negative_source", source},
                              {"encoder", echo_encoder(ec)},
                              {"train", echo_train(tc)}};
  write_run_meta(out, "pretrain", echo, tc.seed, t0);
  return 0;
}

int cmd_finetune(const CliOptions& o, Clock::time_point t0) {
  nlohmann::json j = load_config(o.config_path);
  allow_fields(j, "config", {"corpus", "stage1", "train"});
  std::string corpus_dir = need_str(j, "config", "corpus");
  std::string stage1_path = need_str(j, "config", "stage1");

  TrainConfig tc = parse_train(section(j, "train"), finetune_defaults(o.paper_scale), o);
  Corpus corpus = load_corpus(corpus_dir);
  Checkpoint stage1 = load_checkpoint(stage1_path);

  RunResult r = run_stage2(stage1, corpus, tc);
  std::string out = out_dir_of(o);
  save_checkpoint(out + "/stage2.abce", r.params, r.meta);
  save_metrics(r.metrics, out + "/metrics.jsonl");
  log_line(LogLevel::kInfo,
           "finetune: final loss " + std::to_string(r.metrics.steps.back().loss));
  nlohmann::ordered_json echo{
      {"corpus", corpus_dir}, {"stage1", stage1_path}, {"train", echo_train(tc)}};
  write_run_meta(out, "finetune", echo, tc.seed, t0);
  return 0;
}

int cmd_eval_retrieval(const CliOptions& o, Clock::time_point t0) {
  nlohmann::json j = load_config(o.config_path);
  allow_fields(j, "config", {"corpus", "ckpt", "ks", "ranks"});
  std::string corpus_dir = need_str(j, "config", "corpus");
  std::string ckpt_path = need_str(j, "config", "ckpt");
  std::vector<std::size_t> ks = get_size_list(j, "config", "ks", {1, 5, 10});
  bool dump_ranks = get_bool(j, "config", "ranks", true);

  Corpus corpus = load_corpus(corpus_dir);
  check_ks(ks, corpus.images.size(), "retrieval");
  Checkpoint ckpt = load_checkpoint(ckpt_path);

  EvalReport i2t = eval_retrieval(ckpt, corpus, RetrievalDirection::kImageToText, ks);
  EvalReport t2i = eval_retrieval(ckpt, corpus, RetrievalDirection::kTextToImage, ks);
  std::string out = out_dir_of(o);
  save_report(i2t, out + "/retrieval_i2t.json",
              dump_ranks ? out + "/retrieval_i2t_ranks.jsonl" : "");
  save_report(t2i, out + "/retrieval_t2i.json",
              dump_ranks ? out + "/retrieval_t2i_ranks.jsonl" : "");
  log_line(LogLevel::kInfo, metric_line(i2t));
  log_line(LogLevel::kInfo, metric_line(t2i));
  nlohmann::ordered_json echo{
      {"corpus", corpus_dir}, {"ckpt", ckpt_path}, {"ks", ks}, {"ranks", dump_ranks}};
  write_run_meta(out, "eval-retrieval", echo, std::nullopt, t0);
  return 0;
}

int cmd_eval_classify(const CliOptions& o, Clock::time_point t0) {
  nlohmann::json j = load_config(o.config_path);
  allow_fields(j, "config", {"corpus", "ckpt", "aspect", "template", "ranks"});
  std::string corpus_dir = need_str(j, "config", "corpus");
  std::string ckpt_path = need_str(j, "config", "ckpt");
  std::size_t aspect = get_size(j, "config", "aspect", 0);
  bool dump_ranks = get_bool(j, "config", "ranks", true);

  Corpus corpus = load_corpus(corpus_dir);
  if (aspect >= corpus.config.n_aspects)
    throw ConfigError("aspect: " + std::to_string(aspect) + " outside the corpus's " +
                      std::to_string(corpus.config.n_aspects) + " aspects");
  TokenSeq tmpl = default_class_template(corpus);
  if (j.contains("template")) {
    const auto& v = j.at("template");
    if (!v.is_array()) throw ConfigError("template: expected an array of token ids");
    tmpl.clear();
    for (const auto& e : v) {
      if (!e.is_number_integer()) throw ConfigError("template: expected integers");
      tmpl.push_back(e.get<std::int32_t>());
    }
    if (std::find(tmpl.begin(), tmpl.end(), kLabelSlot) == tmpl.end())
      throw ConfigError("template: missing the label slot (" + std::to_string(kLabelSlot) + ")");
  }
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  ClassTask task = make_class_task(corpus, aspect);
  EvalReport r = eval_classification(ckpt, corpus, task, tmpl);
  std::string out = out_dir_of(o);
  save_report(r, out + "/classification.json",
              dump_ranks ? out + "/classification_ranks.jsonl" : "");
  log_line(LogLevel::kInfo, metric_line(r));
  nlohmann::ordered_json echo{{"corpus", corpus_dir},
                              {"ckpt", ckpt_path},
                              {"aspect", aspect},
                              {"template", tmpl},
                              {"ranks", dump_ranks}};
  write_run_meta(out, "eval-classify", echo, std::nullopt, t0);
  return 0;
}

int cmd_eval_ctrlbench(const CliOptions& o, Clock::time_point t0) {
  nlohmann::json j = load_config(o.config_path);
  allow_fields(j, "config", {"corpus", "ckpt", "bench", "ks", "ranks"});
  std::string corpus_dir = need_str(j, "config", "corpus");
  std::string ckpt_path = need_str(j, "config", "ckpt");
  std::string bench_path = need_str(j, "config", "bench");
  std::vector<std::size_t> ks = get_size_list(j, "config", "ks", {1, 5, 10});
  bool dump_ranks = get_bool(j, "config", "ranks", true);

  Corpus corpus = load_corpus(corpus_dir);
  auto bench = load_ctrlbench(bench_path);
  check_ks(ks, bench.size(), "benchmark");
  Checkpoint ckpt = load_checkpoint(ckpt_path);

  EvalReport inst = eval_ctrlbench(ckpt, corpus, bench, true, ks);
  EvalReport blind = eval_ctrlbench(ckpt, corpus, bench, false, ks);
  std::string out = out_dir_of(o);
  save_report(inst, out + "/ctrlbench_instructed.json",
              dump_ranks ? out + "/ctrlbench_instructed_ranks.jsonl" : "");
  save_report(blind, out + "/ctrlbench_blind.json",
              dump_ranks ? out + "/ctrlbench_blind_ranks.jsonl" : "");
  log_line(LogLevel::kInfo, metric_line(inst));
  log_line(LogLevel::kInfo, metric_line(blind));
  nlohmann::ordered_json echo{{"corpus", corpus_dir},
                              {"ckpt", ckpt_path},
                              {"bench", bench_path},
                              {"ks", ks},
                              {"ranks", dump_ranks}};
  write_run_meta(out, "eval-ctrlbench", echo, std::nullopt, t0);
  return 0;
}

int cmd_exp_tau(const CliOptions& o, Clock::time_point t0) {
  nlohmann::json j = load_config(o.config_path);
  allow_fields(j, "config", {"corpus", "mined", "encoder", "train", "seeds"});
  std::string corpus_dir = need_str(j, "config", "corpus");
  std::string mined_path = need_str(j, "config", "mined");
  std::vector<std::uint64_t> seeds = get_u64_list(j, "config", "seeds", {1, 2, 3});
  EncoderConfig ec = parse_encoder(section(j, "encoder"), encoder_defaults(o.paper_scale));
  TrainConfig tc = parse_train(section(j, "train"), exp_tau_defaults(o.paper_scale), o);

  Corpus corpus = load_corpus(corpus_dir);
  MinedDataset mined = load_mined(mined_path);
  resolve_encoder(ec, corpus);

  auto pairs = run_tau_experiment(ec, corpus, mined, tc, seeds);
  nlohmann::ordered_json doc;
  doc["tau_init"] = tc.tau_init;
  doc["seeds"] = seeds;
  doc["runs"] = nlohmann::ordered_json::array();
  for (const TauRunPair& p : pairs) {
    nlohmann::ordered_json run;
    run["seed"] = p.seed;
    run["tau_mined"] = p.tau_mined;
    run["tau_random"] = p.tau_random;
    run["mined_diverged"] = p.mined_diverged;
    run["random_diverged"] = p.random_diverged;
    run["final_tau_mined"] = p.tau_mined.empty() ? nullptr : nlohmann::ordered_json(p.tau_mined.back());
    run["final_tau_random"] =
        p.tau_random.empty() ? nullptr : nlohmann::ordered_json(p.tau_random.back());
    doc["runs"].push_back(std::move(run));
    log_line(LogLevel::kInfo,
             "exp-tau seed " + std::to_string(p.seed) + ": mined tau " +
                 (p.tau_mined.empty() ? "—" : std::to_string(p.tau_mined.back())) +
                 ", random tau " +
                 (p.tau_random.empty() ? "—" : std::to_string(p.tau_random.back())));
  }
  std::string out = out_dir_of(o);
  write_json_file(doc, out + "/tau_experiment.json");
  nlohmann::ordered_json echo{{"corpus", corpus_dir},
                              {"mined", mined_path},
                              {"encoder", echo_encoder(ec)},
                              {"train", echo_train(tc)},
                              {"seeds", seeds}};
  write_run_meta(out, "exp-tau", echo, tc.seed, t0);
  return 0;
}

int cmd_exp_arch(const CliOptions& o, Clock::time_point t0) {
  nlohmann::json j = load_config(o.config_path);
  allow_fields(j, "config", {"corpus", "mined", "encoder", "train", "ranks"});
  std::string corpus_dir = need_str(j, "config", "corpus");
  std::string mined_path = need_str(j, "config", "mined");
  std::vector<std::size_t> ranks = get_size_list(j, "config", "ranks", {2, 8});
  for (std::size_t r : ranks)
    if (r == 0) throw ConfigError("ranks: adapter rank must be at least 1");
  EncoderConfig ec = parse_encoder(section(j, "encoder"), encoder_defaults(o.paper_scale));
  TrainConfig tc = parse_train(section(j, "train"), exp_tau_defaults(o.paper_scale), o);

  Corpus corpus = load_corpus(corpus_dir);
  MinedDataset mined = load_mined(mined_path);
  resolve_encoder(ec, corpus);

  auto rows = run_arch_ablation(ec, corpus, mined, tc, ranks);
  nlohmann::ordered_json doc;
  doc["rows"] = nlohmann::ordered_json::array();
  for (const AblationRow& r : rows) {
    doc["rows"].push_back(nlohmann::ordered_json{{"attn_mode", r.attn_mode},
                                                 {"lora_rank", r.lora_rank},
                                                 {"final_loss", r.final_loss},
                                                 {"val_acc", r.val_acc},
                                                 {"tau", r.tau},
                                                 {"diverged", r.diverged}});
    log_line(LogLevel::kInfo, "exp-arch " + r.attn_mode + " rank " +
                                  std::to_string(r.lora_rank) + ": val acc " +
                                  std::to_string(r.val_acc));
  }
  std::string out = out_dir_of(o);
  write_json_file(doc, out + "/arch_ablation.json");
  nlohmann::ordered_json echo{{"corpus", corpus_dir},
                              {"mined", mined_path},
                              {"encoder", echo_encoder(ec)},
                              {"train", echo_train(tc)},
                              {"ranks", ranks}};
  write_run_meta(out, "exp-arch", echo, tc.seed, t0);
  return 0;
}

int cmd_exp_scaling(const CliOptions& o, Clock::time_point t0) {
  nlohmann::json j = load_config(o.config_path);
  allow_fields(j, "config", {"corpus", "mined", "encoder", "train"});
  std::string corpus_dir = need_str(j, "config", "corpus");
  std::string mined_path = need_str(j, "config", "mined");
  EncoderConfig ec = parse_encoder(section(j, "encoder"), encoder_defaults(o.paper_scale));
  TrainConfig tc = parse_train(section(j, "train"), exp_tau_defaults(o.paper_scale), o);

  Corpus corpus = load_corpus(corpus_dir);
  MinedDataset mined = load_mined(mined_path);
  resolve_encoder(ec, corpus);

  auto rows = run_scaling_experiment(ec, corpus, mined, tc);
  nlohmann::ordered_json doc;
  doc["rows"] = nlohmann::ordered_json::array();
  for (const ScalingRow& r : rows) {
    doc["rows"].push_back(nlohmann::ordered_json{{"label", r.label},
                                                 {"batch_queries", r.batch_queries},
                                                 {"batch_candidates", r.batch_candidates},
                                                 {"steps", r.steps},
                                                 {"samples_seen", r.samples_seen},
                                                 {"final_loss", r.final_loss},
                                                 {"val_acc", r.val_acc},
                                                 {"diverged", r.diverged}});
  }
  // Directionality is recorded for the table, never asserted: desk-scale
  // runs are too noisy to promise the full-scale ordering.
  auto direction = [](double big, double small_many) {
    if (big > small_many) return "4x-batch-higher-val-acc";
    if (big < small_many) return "equal-samples-steps-higher-val-acc";
    return "tie";
  };
  if (!rows[0].diverged && !rows[3].diverged)
    doc["direction"]["batch_4x_vs_equal_samples"] = direction(rows[0].val_acc, rows[3].val_acc);
  else
    doc["direction"]["batch_4x_vs_equal_samples"] = "indeterminate";
  if (!rows[1].diverged && !rows[2].diverged && !rows[3].diverged)
    doc["direction"]["step_doubling_loss"] =
        (rows[1].final_loss > rows[2].final_loss && rows[2].final_loss > rows[3].final_loss)
            ? "monotone-decreasing"
            : "non-monotone";
  else
    doc["direction"]["step_doubling_loss"] = "indeterminate";
  std::string out = out_dir_of(o);
  write_json_file(doc, out + "/scaling.json");
  log_line(LogLevel::kInfo,
           "exp-scaling: " + doc["direction"]["batch_4x_vs_equal_samples"].get<std::string>());
  nlohmann::ordered_json echo{{"corpus", corpus_dir},
                              {"mined", mined_path},
                              {"encoder", echo_encoder(ec)},
                              {"train", echo_train(tc)}};
  write_run_meta(out, "exp-scaling", echo, tc.seed, t0);
  return 0;
}

int cmd_validate(const CliOptions& o, Clock::time_point t0) {
  nlohmann::json j = load_config(o.config_path);
  allow_fields(j, "config", {"corpus", "mined", "bench", "epsilon"});
  std::string corpus_dir = need_str(j, "config", "corpus");
  double epsilon = get_num(j, "config", "epsilon", 0.95);

  Corpus corpus = load_corpus(corpus_dir);
  ValidationReport rep = validate_corpus(corpus);
  nlohmann::ordered_json checked;
  checked["corpus"] = rep.ok;
  bool ok = rep.ok;
  std::string violation = rep.ok ? "" : "corpus: " + rep.violation;

  if (ok && j.contains("mined")) {
    std::string path = need_str(j, "config", "mined");
    try {
      ValidationReport mrep = validate_mined(load_mined(path), epsilon);
      checked["mined"] = mrep.ok;
      if (!mrep.ok) {
        ok = false;
        violation = "mined: " + mrep.violation;
      }
    } catch (const std::exception& e) {
      checked["mined"] = false;
      ok = false;
      violation = "mined: " + std::string(e.what());
    }
  }

  if (ok && j.contains("bench")) {
    std::string path = need_str(j, "config", "bench");
    try {
      auto bench = load_ctrlbench(path);
      std::map<std::string, std::size_t> ins_by_id;
      for (std::size_t i = 0; i < corpus.instructions.size(); ++i)
        ins_by_id.emplace(corpus.instructions[i].id, i);
      bool brec_ok = true;
      for (const BenchRecord& rec : bench) {
        std::size_t img = corpus.image_index(rec.image_id);
        std::size_t cap = corpus.caption_index_of(rec.positive_caption_id);
        auto it = ins_by_id.find(rec.instruction_id);
        if (it == ins_by_id.end())
          throw std::runtime_error("unknown instruction '" + rec.instruction_id + "'");
        const InstructionRec& ins = corpus.instructions[it->second];
        if (corpus.captions[cap].image != img || ins.image != img ||
            ins.aspect != corpus.captions[cap].aspect || ins.split != "bench") {
          ok = false;
          brec_ok = false;
          violation = "bench: record for " + rec.image_id + " is inconsistent";
          break;
        }
      }
      checked["bench"] = brec_ok;
    } catch (const std::exception& e) {
      checked["bench"] = false;
      ok = false;
      violation = "bench: " + std::string(e.what());
    }
  }

  nlohmann::ordered_json doc;
  doc["ok"] = ok;
  doc["violation"] = violation;
  doc["checked"] = checked;
  std::string out = out_dir_of(o);
  write_json_file(doc, out + "/validation.json");
  log_line(ok ? LogLevel::kInfo : LogLevel::kError,
           ok ? "validate: all artifacts pass" : "validate: " + violation);
  nlohmann::ordered_json echo{{"corpus", corpus_dir}, {"epsilon", epsilon}};
  if (j.contains("mined")) echo["mined"] = j.at("mined");
  if (j.contains("bench")) echo["bench"] = j.at("bench");
  write_run_meta(out, "validate", echo, std::nullopt, t0);
  return ok ? 0 : 1;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"two-stage contrastive multimodal embedding pipeline"};
  app.require_subcommand(1);
  CliOptions o;

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen-world", "generate the synthetic corpus (and benchmark when configured)"},
      {"bootstrap", "warm-up training with in-batch negatives"},
      {"mine", "score the corpus and mine hard negatives"},
      {"pretrain", "contrastive pretraining over mined negatives"},
      {"finetune", "instruction fine-tuning against the frozen pretrained model"},
      {"eval-retrieval", "caption-pool retrieval in both directions"},
      {"eval-classify", "template-based zero-shot classification"},
      {"eval-ctrlbench", "instruction-following benchmark, instructed and blind"},
      {"exp-tau", "paired mined-vs-random temperature dynamics experiment"},
      {"exp-arch", "attention-mode x adapter-rank ablation grid"},
      {"exp-scaling", "batch-size scaling and step-doubling harness"},
      {"validate", "validate corpus, mined-negative, and benchmark artifacts"},
  };
  for (const auto& [name, desc] : commands) {
    CLI::App* s = app.add_subcommand(name, desc);
    s->add_option("--config", o.config_path, "JSON config file")->required();
    s->add_option("--out", o.out, "output directory")->required();
    s->add_option("--seed", o.seed, "override the config's seed");
    s->add_flag("--paper-scale", o.paper_scale,
                "use the documented full-scale defaults instead of desk defaults");
    if (name == "mine") {
      s->add_flag("--allow-fewer", o.allow_fewer,
                  "accept images with fewer than k eligible negatives");
      s->add_option("--model", o.model_override, "scoring checkpoint (overrides the config)");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << std::flush;
    return 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  o.has_seed = sub->count("--seed") > 0;
  const std::string cmd = sub->get_name();
  const Clock::time_point t0 = Clock::now();

  try {
    if (cmd == "gen-world") return cmd_gen_world(o, t0);
    if (cmd == "bootstrap") return cmd_bootstrap(o, t0);
    if (cmd == "mine") return cmd_mine(o, t0);
    if (cmd == "pretrain") return cmd_pretrain(o, t0);
    if (cmd == "finetune") return cmd_finetune(o, t0);
    if (cmd == "eval-retrieval") return cmd_eval_retrieval(o, t0);
    if (cmd == "eval-classify") return cmd_eval_classify(o, t0);
    if (cmd == "eval-ctrlbench") return cmd_eval_ctrlbench(o, t0);
    if (cmd == "exp-tau") return cmd_exp_tau(o, t0);
    if (cmd == "exp-arch") return cmd_exp_arch(o, t0);
    if (cmd == "exp-scaling") return cmd_exp_scaling(o, t0);
    if (cmd == "validate") return cmd_validate(o, t0);
    std::cerr << "unknown command '" << cmd << "'\n" << app.help() << std::flush;
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "[error] " << cmd << ": " << e.what() << "\n";
    return 1;
  }
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("abc");
  for (const std::string& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace abc
