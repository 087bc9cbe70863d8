#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "abc/batching.hpp"
#include "abc/checkpoint.hpp"
#include "abc/corpus.hpp"
#include "abc/mining.hpp"

namespace abc {

struct OptimConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-3;
};

struct AdamState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  std::size_t t = 0;  // completed steps
};

// Decoupled AdamW with bias correction: both the adaptive term and the decay
// term read the pre-step parameter. Applies nothing and returns false when
// any gradient is non-finite; tensors absent from `grads` are untouched.
bool adamw_step(EncoderParams& params, const std::map<std::string, Tensor>& grads,
                AdamState& state, const OptimConfig& opt, double lr_now);

// Linear warmup over ceil(warmup_frac * total) steps, then constant.
double lr_schedule(double lr, double warmup_frac, std::size_t step, std::size_t total);

// Pins tau at the 1e-3 floor; returns true when it had to clamp.
bool clamp_tau_floor(EncoderParams& params);

struct TrainConfig {
  std::size_t steps = 100;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-3;
  double warmup_frac = 0.03;
  std::size_t batch_queries = 16;     // N (bootstrap and mined-negative stages)
  std::size_t batch_candidates = 128;  // M; bootstrap forces M = N
  std::size_t images_per_batch = 8;   // instruction stage
  std::size_t group_size = 4;         // instruction stage
  std::size_t lora_rank = 8;
  double lora_alpha = 16.0;
  double tau_init = 0.07;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;  // 0 = never
  void validate() const;
};

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0.0;
  double tau = 0.0;
  double grad_norm = 0.0;
  std::optional<double> val_acc;  // retrieval accuracy over the step's batch
};

struct RunMetrics {
  std::vector<StepMetrics> steps;
  bool diverged = false;  // NaN gradients or the tau floor engaged
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
};

struct RunResult {
  EncoderParams params;
  CheckpointMeta meta;
  RunMetrics metrics;
};

class DivergedError : public std::runtime_error {
 public:
  DivergedError(RunMetrics metrics_, std::size_t at_step_);
  RunMetrics metrics;
  std::size_t at_step;
};

std::uint64_t train_config_hash(const EncoderConfig& enc, const TrainConfig& cfg);

// Per-step rows: {"step","loss","tau","grad_norm"} plus "val_acc" when measured.
void save_metrics(const RunMetrics& metrics, const std::string& path);

// Warm-up stage: positives-only batches (M = N), adapter + head + tau train,
// base frozen. Produces the scoring model for negative mining.
RunResult run_bootstrap(const EncoderConfig& enc, const Corpus& corpus, const TrainConfig& cfg);

// Mined-negative stage: each query faces its positive plus M/N - 1 negatives.
// `source` swaps mined negatives for uniform random ones (the control arm of
// the temperature experiment). Starts from a fresh base init unless `init` is
// given, in which case training continues from those weights — the scoring
// model that produced the mined dataset is the natural choice, since its own
// near-misses are what the mined negatives are. Either way tau restarts at
// cfg.tau_init and the stage-1 trainability rules (adapter + head + tau) are
// reapplied.
RunResult run_stage1(const EncoderConfig& enc, const Corpus& corpus, const MinedDataset& mined,
                     const TrainConfig& cfg, NegativeSource source = NegativeSource::kMined,
                     const EncoderParams* init = nullptr);

// Instruction stage: fuses the stage-1 adapter into the base, freezes
// everything (head and tau included), and trains a fresh low-rank adapter on
// instruction-bearing queries. Candidate embeddings are precomputed once with
// the frozen fused weights and enter the loss as constants.
RunResult run_stage2(const Checkpoint& stage1, const Corpus& corpus, const TrainConfig& cfg);

struct TauRunPair {
  std::uint64_t seed = 0;
  std::vector<double> tau_mined;   // per step, equal length by construction
  std::vector<double> tau_random;
  bool mined_diverged = false;
  bool random_diverged = false;
};

// Paired runs per seed differing only in the negative source. When `init` is
// given both arms warm-start from it (tau reset to cfg.tau_init), mirroring a
// pretraining run that continues from the mining scorer.
std::vector<TauRunPair> run_tau_experiment(const EncoderConfig& enc, const Corpus& corpus,
                                           const MinedDataset& mined, const TrainConfig& cfg,
                                           const std::vector<std::uint64_t>& seeds,
                                           const EncoderParams* init = nullptr);

struct AblationRow {
  std::string attn_mode;
  std::size_t lora_rank = 0;
  double final_loss = 0.0;
  double val_acc = 0.0;
  double tau = 0.0;
  bool diverged = false;
};

// attention-mode x adapter-rank grid; outcomes recorded, no direction asserted.
std::vector<AblationRow> run_arch_ablation(const EncoderConfig& enc, const Corpus& corpus,
                                           const MinedDataset& mined, const TrainConfig& cfg,
                                           const std::vector<std::size_t>& ranks);

struct ScalingRow {
  std::string label;
  std::size_t batch_queries = 0;
  std::size_t batch_candidates = 0;
  std::size_t steps = 0;
  std::size_t samples_seen = 0;  // steps * batch candidates
  double final_loss = 0.0;
  double val_acc = 0.0;
  bool diverged = false;
};

// cfg holds the base batch geometry. One run at 4x that batch, then a
// step-doubling series at the base batch whose last row (4x the steps) has
// seen exactly as many candidates as the big-batch run.
std::vector<ScalingRow> run_scaling_experiment(const EncoderConfig& enc, const Corpus& corpus,
                                               const MinedDataset& mined, const TrainConfig& cfg);

}  // namespace abc
