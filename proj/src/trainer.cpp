#include "abc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "abc/jsonl.hpp"
#include "abc/log.hpp"
#include "abc/objective.hpp"
#include "abc/rng.hpp"
#include "json.hpp"

namespace abc {

namespace {

constexpr double kTauFloor = 1e-3;

// Unified name resolution across base tensors and adapter tensors.
Tensor& resolve_param(EncoderParams& params, const std::string& name) {
  if (name.rfind("lora.", 0) == 0) {
    if (!params.lora) throw std::out_of_range("no adapter attached, cannot resolve '" + name + "'");
    bool down = name.size() > 5 && name.compare(name.size() - 5, 5, ".down") == 0;
    bool up = name.size() > 3 && name.compare(name.size() - 3, 3, ".up") == 0;
    if (!down && !up) throw std::out_of_range("malformed adapter tensor name '" + name + "'");
    std::string target = name.substr(5, name.size() - 5 - (down ? 5 : 3));
    auto it = params.lora->pairs.find(target);
    if (it == params.lora->pairs.end())
      throw std::out_of_range("adapter has no target '" + target + "'");
    return down ? it->second.down : it->second.up;
  }
  return params.tensor(name);
}

}  // namespace

bool adamw_step(EncoderParams& params, const std::map<std::string, Tensor>& grads,
                AdamState& state, const OptimConfig& opt, double lr_now) {
  for (const auto& [name, g] : grads)
    if (!g.all_finite()) return false;

  state.t += 1;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.t));
  for (const auto& [name, g] : grads) {
    if (params.is_frozen(name))
      throw std::logic_error("gradient for frozen tensor '" + name + "'");
    Tensor& w = resolve_param(params, name);
    if (!w.same_shape(g))
      throw std::invalid_argument("gradient shape mismatch for '" + name + "'");
    Tensor& m = state.m.try_emplace(name, Tensor::zeros(w.shape)).first->second;
    Tensor& v = state.v.try_emplace(name, Tensor::zeros(w.shape)).first->second;
    for (std::size_t i = 0; i < w.numel(); ++i) {
      m.data[i] = opt.beta1 * m.data[i] + (1.0 - opt.beta1) * g.data[i];
      v.data[i] = opt.beta2 * v.data[i] + (1.0 - opt.beta2) * g.data[i] * g.data[i];
      const double mhat = m.data[i] / bc1;
      const double vhat = v.data[i] / bc2;
      const double old = w.data[i];
      w.data[i] = old - lr_now * (mhat / (std::sqrt(vhat) + opt.eps) + opt.weight_decay * old);
    }
  }
  return true;
}

double lr_schedule(double lr, double warmup_frac, std::size_t step, std::size_t total) {
  if (!(warmup_frac >= 0.0 && warmup_frac < 1.0))
    throw std::invalid_argument("lr_schedule: warmup_frac must lie in [0, 1)");
  const auto warmup = static_cast<std::size_t>(
      std::ceil(warmup_frac * static_cast<double>(total)));
  if (step < warmup) return lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  return lr;
}

bool clamp_tau_floor(EncoderParams& params) {
  if (params.tau() >= kTauFloor) return false;
  params.tensor("log_tau") = Tensor::scalar(std::log(kTauFloor));
  return true;
}

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("train: lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw std::invalid_argument("train: betas must lie in [0, 1)");
  if (weight_decay < 0.0) throw std::invalid_argument("train: weight_decay must be nonnegative");
  if (!(warmup_frac >= 0.0 && warmup_frac < 1.0))
    throw std::invalid_argument("train: warmup_frac must lie in [0, 1)");
  if (batch_queries == 0 || batch_candidates == 0 || images_per_batch == 0 || group_size == 0)
    throw std::invalid_argument("train: batch geometry must be positive");
  if (lora_rank == 0) throw std::invalid_argument("train: lora_rank must be at least 1");
  if (!(lora_alpha > 0.0)) throw std::invalid_argument("train: lora_alpha must be positive");
  if (!(tau_init > 0.0)) throw std::invalid_argument("train: tau_init must be positive");
}

DivergedError::DivergedError(RunMetrics metrics_, std::size_t at_step_)
    : std::runtime_error("training diverged at step " + std::to_string(at_step_)),
      metrics(std::move(metrics_)),
      at_step(at_step_) {}

std::uint64_t train_config_hash(const EncoderConfig& enc, const TrainConfig& cfg) {
  nlohmann::ordered_json j;
  j["encoder"] = encoder_config_to_json(enc);
  j["steps"] = cfg.steps;
  j["lr"] = cfg.lr;
  j["beta1"] = cfg.beta1;
  j["beta2"] = cfg.beta2;
  j["weight_decay"] = cfg.weight_decay;
  j["warmup_frac"] = cfg.warmup_frac;
  j["batch_queries"] = cfg.batch_queries;
  j["batch_candidates"] = cfg.batch_candidates;
  j["images_per_batch"] = cfg.images_per_batch;
  j["group_size"] = cfg.group_size;
  j["lora_rank"] = cfg.lora_rank;
  j["lora_alpha"] = cfg.lora_alpha;
  j["tau_init"] = cfg.tau_init;
  j["eval_every"] = cfg.eval_every;
  return mix_seed(0xabc0ffee, j.dump());
}

void save_metrics(const RunMetrics& metrics, const std::string& path) {
  std::vector<nlohmann::ordered_json> rows;
  rows.reserve(metrics.steps.size());
  for (const auto& s : metrics.steps) {
    nlohmann::ordered_json row{
        {"step", s.step}, {"loss", s.loss}, {"tau", s.tau}, {"grad_norm", s.grad_norm}};
    if (s.val_acc) row["val_acc"] = *s.val_acc;
    rows.push_back(std::move(row));
  }
  write_jsonl(path, rows);
}

namespace {

struct LoopBatch {
  std::vector<TokenSeq> queries;
  std::vector<TokenSeq> cand_tokens;  // either these ...
  Tensor cand_rows;                   // ... or precomputed rows (numel > 0)
  BatchLayout layout;
};

struct StepEval {
  double loss = 0.0;
  double acc = 0.0;
  GradMap grads;
  double grad_norm = 0.0;
};

StepEval eval_batch(const EncoderParams& params, const LoopBatch& batch, bool use_lora,
                    bool want_grads) {
  Graph g;
  auto leaves = add_param_leaves(g, params, use_lora);
  std::vector<NodeId> qn;
  qn.reserve(batch.queries.size());
  for (const TokenSeq& q : batch.queries) qn.push_back(encode_node(g, leaves, params, q, use_lora));
  NodeId qmat = g.concat_rows(qn);
  NodeId cmat;
  if (batch.cand_rows.numel() > 0) {
    cmat = g.constant(batch.cand_rows);
  } else {
    std::vector<NodeId> cn;
    cn.reserve(batch.cand_tokens.size());
    for (const TokenSeq& c : batch.cand_tokens)
      cn.push_back(encode_node(g, leaves, params, c, use_lora));
    cmat = g.concat_rows(cn);
  }
  NodeId s = similarity_node(g, qmat, cmat);
  NodeId loss = contrastive_loss_node(g, s, batch.layout, leaves.at("log_tau"));

  StepEval out;
  out.loss = g.value(loss).at(0);
  const Tensor& sv = g.value(s);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < batch.layout.n_queries; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < batch.layout.n_candidates; ++j)
      if (sv.at(i, j) > sv.at(i, best)) best = j;
    if (best == batch.layout.pos_index[i]) ++hits;
  }
  out.acc = static_cast<double>(hits) / static_cast<double>(batch.layout.n_queries);

  if (want_grads) {
    out.grads = g.backward(loss);
    double sq = 0.0;
    for (const auto& [name, grad] : out.grads)
      for (double v : grad.data) sq += v * v;
    out.grad_norm = std::sqrt(sq);
  }
  return out;
}

using EpochProvider = std::function<std::vector<LoopBatch>(std::size_t epoch)>;

RunMetrics train_loop(EncoderParams& params, const EncoderConfig& enc, const TrainConfig& cfg,
                      const EpochProvider& provider, bool use_lora) {
  RunMetrics metrics;
  metrics.seed = cfg.seed;
  metrics.config_hash = train_config_hash(enc, cfg);
  AdamState state;
  OptimConfig opt{cfg.lr, cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay};

  std::vector<LoopBatch> batches;
  std::size_t epoch = 0;
  std::size_t next = 0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    if (next == batches.size()) {
      batches = provider(epoch++);
      next = 0;
      if (batches.empty()) throw std::invalid_argument("train: epoch produced no batches");
    }
    const LoopBatch& batch = batches[next++];
    StepEval ev = eval_batch(params, batch, use_lora, true);
    bool ok = std::isfinite(ev.loss) &&
              adamw_step(params, ev.grads, state, opt,
                         lr_schedule(cfg.lr, cfg.warmup_frac, step, cfg.steps));
    StepMetrics sm;
    sm.step = step;
    sm.loss = ev.loss;
    sm.tau = params.tau();
    sm.grad_norm = ev.grad_norm;
    if (cfg.eval_every != 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps))
      sm.val_acc = ev.acc;
    metrics.steps.push_back(sm);
    if (!ok) {
      metrics.diverged = true;
      throw DivergedError(std::move(metrics), step);
    }
    if (clamp_tau_floor(params)) {
      if (!metrics.diverged)
        log_line(LogLevel::kInfo, "train: tau hit the " + std::to_string(kTauFloor) +
                                      " floor at step " + std::to_string(step));
      metrics.diverged = true;
    }
  }
  return metrics;
}

void check_model_fits_corpus(const EncoderConfig& enc, const Corpus& corpus) {
  if (enc.vocab_size < corpus.layout.vocab_size)
    throw std::invalid_argument("train: encoder vocab " + std::to_string(enc.vocab_size) +
                                " is smaller than the corpus vocabulary " +
                                std::to_string(corpus.layout.vocab_size));
  if (enc.max_seq < corpus.max_query_len())
    throw std::invalid_argument("train: encoder max_seq " + std::to_string(enc.max_seq) +
                                " cannot hold the longest query of " +
                                std::to_string(corpus.max_query_len()) + " tokens");
}

EncoderParams fresh_adapter_model(const EncoderConfig& enc, const TrainConfig& cfg) {
  EncoderParams params = init_params(enc, cfg.seed);
  attach_lora(params, cfg.lora_rank, cfg.lora_alpha, mix_seed(cfg.seed, "lora"));
  params.tensor("log_tau") = Tensor::scalar(std::log(cfg.tau_init));
  params.freeze_all_base();
  params.frozen.erase("head_A");
  params.frozen.erase("head_B");
  params.frozen.erase("log_tau");
  return params;
}

}  // namespace

RunResult run_bootstrap(const EncoderConfig& enc, const Corpus& corpus, const TrainConfig& cfg) {
  enc.validate();
  cfg.validate();
  check_model_fits_corpus(enc, corpus);
  EncoderParams params = fresh_adapter_model(enc, cfg);
  auto provider = [&](std::size_t epoch) {
    auto raw = build_bootstrap_epoch(corpus, cfg.batch_queries, cfg.seed, epoch);
    std::vector<LoopBatch> out;
    out.reserve(raw.size());
    for (auto& b : raw)
      out.push_back({std::move(b.queries), std::move(b.candidates), Tensor{}, std::move(b.layout)});
    return out;
  };
  RunMetrics metrics = train_loop(params, enc, cfg, provider, true);
  return {std::move(params), CheckpointMeta{"bootstrap", cfg.steps, cfg.seed}, std::move(metrics)};
}

RunResult run_stage1(const EncoderConfig& enc, const Corpus& corpus, const MinedDataset& mined,
                     const TrainConfig& cfg, NegativeSource source, const EncoderParams* init) {
  enc.validate();
  cfg.validate();
  check_model_fits_corpus(enc, corpus);
  EncoderParams params;
  if (init == nullptr) {
    params = fresh_adapter_model(enc, cfg);
  } else {
    params = *init;
    if (params.config.d_model != enc.d_model || params.config.n_layers != enc.n_layers ||
        params.config.n_heads != enc.n_heads || params.config.vocab_size != enc.vocab_size ||
        params.config.max_seq != enc.max_seq || params.config.attn_mode != enc.attn_mode)
      throw std::invalid_argument("stage-1 warm start: init geometry differs from the config");
    if (!params.lora.has_value())
      attach_lora(params, cfg.lora_rank, cfg.lora_alpha, mix_seed(cfg.seed, "lora"));
    params.tensor("log_tau") = Tensor::scalar(std::log(cfg.tau_init));
    params.freeze_all_base();
    params.frozen.erase("head_A");
    params.frozen.erase("head_B");
    params.frozen.erase("log_tau");
  }
  auto provider = [&](std::size_t epoch) {
    auto raw = build_pretrain_epoch(corpus, mined, cfg.batch_queries, cfg.batch_candidates,
                                    cfg.seed, epoch, source);
    std::vector<LoopBatch> out;
    out.reserve(raw.size());
    for (auto& b : raw)
      out.push_back({std::move(b.queries), std::move(b.candidates), Tensor{}, std::move(b.layout)});
    return out;
  };
  RunMetrics metrics = train_loop(params, enc, cfg, provider, true);
  return {std::move(params), CheckpointMeta{"1", cfg.steps, cfg.seed}, std::move(metrics)};
}

RunResult run_stage2(const Checkpoint& stage1, const Corpus& corpus, const TrainConfig& cfg) {
  cfg.validate();
  if (stage1.meta.stage != "1")
    throw std::invalid_argument("stage-2 training needs a stage-1 checkpoint, got stage '" +
                                stage1.meta.stage + "'");
  const EncoderConfig& enc = stage1.params.config;
  check_model_fits_corpus(enc, corpus);

  EncoderParams params = lora_fuse(stage1.params);
  params.freeze_all_base();  // tau and head included; only the new adapter trains
  attach_lora(params, cfg.lora_rank, cfg.lora_alpha, mix_seed(cfg.seed, "lora2"));

  // Candidate embeddings come from the frozen fused weights, computed once.
  // Keeping them out of the graph realizes the stop-gradient exactly.
  const std::size_t n_caps = corpus.n_train_images() * corpus.config.n_aspects;
  std::vector<Tensor> cap_emb(n_caps);
  for (std::size_t c = 0; c < n_caps; ++c)
    cap_emb[c] = encode(params, corpus.captions[c].tokens, /*use_lora=*/false);

  const std::size_t d = enc.d_model;
  auto provider = [&](std::size_t epoch) {
    auto raw =
        build_finetune_epoch(corpus, cfg.images_per_batch, cfg.group_size, cfg.seed, epoch);
    std::vector<LoopBatch> out;
    out.reserve(raw.size());
    for (auto& b : raw) {
      Tensor rows = Tensor::zeros({b.candidate_captions.size(), d});
      for (std::size_t j = 0; j < b.candidate_captions.size(); ++j)
        std::copy(cap_emb[b.candidate_captions[j]].data.begin(),
                  cap_emb[b.candidate_captions[j]].data.end(),
                  rows.data.begin() + static_cast<std::ptrdiff_t>(j * d));
      out.push_back({std::move(b.queries), {}, std::move(rows), std::move(b.layout)});
    }
    return out;
  };
  RunMetrics metrics = train_loop(params, enc, cfg, provider, true);
  return {std::move(params), CheckpointMeta{"2", cfg.steps, cfg.seed}, std::move(metrics)};
}

std::vector<TauRunPair> run_tau_experiment(const EncoderConfig& enc, const Corpus& corpus,
                                           const MinedDataset& mined, const TrainConfig& cfg,
                                           const std::vector<std::uint64_t>& seeds,
                                           const EncoderParams* init) {
  if (seeds.empty()) throw std::invalid_argument("tau experiment: need at least one seed");
  std::vector<TauRunPair> out;
  out.reserve(seeds.size());
  for (std::uint64_t seed : seeds) {
    TrainConfig c = cfg;
    c.seed = seed;
    TauRunPair pair;
    pair.seed = seed;
    auto arm = [&](NegativeSource source, std::vector<double>* taus) {
      try {
        RunResult r = run_stage1(enc, corpus, mined, c, source, init);
        for (const auto& s : r.metrics.steps) taus->push_back(s.tau);
        return r.metrics.diverged;
      } catch (const DivergedError& e) {
        for (const auto& s : e.metrics.steps) taus->push_back(s.tau);
        return true;
      }
    };
    pair.mined_diverged = arm(NegativeSource::kMined, &pair.tau_mined);
    pair.random_diverged = arm(NegativeSource::kUniformRandom, &pair.tau_random);
    out.push_back(std::move(pair));
  }
  return out;
}

std::vector<AblationRow> run_arch_ablation(const EncoderConfig& enc, const Corpus& corpus,
                                           const MinedDataset& mined, const TrainConfig& cfg,
                                           const std::vector<std::size_t>& ranks) {
  if (ranks.empty()) throw std::invalid_argument("ablation: need at least one rank");
  std::vector<AblationRow> out;
  for (AttnMode mode : {AttnMode::kCausal, AttnMode::kBidirectional}) {
    for (std::size_t rank : ranks) {
      EncoderConfig e = enc;
      e.attn_mode = mode;
      TrainConfig c = cfg;
      c.lora_rank = rank;
      c.lora_alpha = 2.0 * static_cast<double>(rank);
      if (c.eval_every == 0) c.eval_every = c.steps;
      AblationRow row;
      row.attn_mode = to_string(mode);
      row.lora_rank = rank;
      try {
        RunResult r = run_stage1(e, corpus, mined, c);
        const StepMetrics& last = r.metrics.steps.back();
        row.final_loss = last.loss;
        row.val_acc = last.val_acc.value_or(0.0);
        row.tau = last.tau;
        row.diverged = r.metrics.diverged;
      } catch (const DivergedError& e2) {
        row.diverged = true;
        if (!e2.metrics.steps.empty()) {
          row.final_loss = e2.metrics.steps.back().loss;
          row.tau = e2.metrics.steps.back().tau;
        }
      }
      out.push_back(std::move(row));
    }
  }
  return out;
}

std::vector<ScalingRow> run_scaling_experiment(const EncoderConfig& enc, const Corpus& corpus,
                                               const MinedDataset& mined, const TrainConfig& cfg) {
  auto one = [&](const char* label, std::size_t batch_scale, std::size_t steps) {
    TrainConfig c = cfg;
    c.steps = steps;
    c.batch_queries = cfg.batch_queries * batch_scale;
    c.batch_candidates = cfg.batch_candidates * batch_scale;
    if (c.eval_every == 0) c.eval_every = steps;
    ScalingRow row;
    row.label = label;
    row.batch_queries = c.batch_queries;
    row.batch_candidates = c.batch_candidates;
    row.steps = steps;
    row.samples_seen = steps * c.batch_candidates;
    try {
      RunResult r = run_stage1(enc, corpus, mined, c);
      const StepMetrics& last = r.metrics.steps.back();
      row.final_loss = last.loss;
      row.val_acc = last.val_acc.value_or(0.0);
      row.diverged = r.metrics.diverged;
    } catch (const DivergedError& e2) {
      row.diverged = true;
      if (!e2.metrics.steps.empty()) row.final_loss = e2.metrics.steps.back().loss;
    }
    return row;
  };
  std::vector<ScalingRow> out;
  out.push_back(one("4x-batch", 4, cfg.steps));
  out.push_back(one("base-batch", 1, cfg.steps));
  out.push_back(one("base-batch-2x-steps", 1, cfg.steps * 2));
  // Equal candidates seen to the 4x-batch run.
  out.push_back(one("base-batch-4x-steps", 1, cfg.steps * 4));
  return out;
}

}  // namespace abc
