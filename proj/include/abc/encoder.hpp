#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "abc/graph.hpp"
#include "abc/tensor.hpp"

namespace abc {

// Reserved token ids. BOS/EOS are reserved but unused by the current corpus.
inline constexpr int32_t kPadId = 0;
inline constexpr int32_t kSepInstrId = 1;
inline constexpr int32_t kBosId = 2;
inline constexpr int32_t kEosId = 3;
inline constexpr int32_t kNumReservedIds = 4;

using TokenSeq = std::vector<int32_t>;

enum class AttnMode { kCausal, kBidirectional };

std::string to_string(AttnMode mode);
AttnMode attn_mode_from_string(const std::string& s);

struct EncoderConfig {
  std::size_t vocab_size = 64;
  std::size_t d_model = 16;
  std::size_t n_layers = 1;
  std::size_t n_heads = 2;
  std::size_t max_seq = 32;
  AttnMode attn_mode = AttnMode::kBidirectional;
  std::size_t head_hidden = 0;  // 0 means d_model

  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t head_width() const { return head_hidden == 0 ? d_model : head_hidden; }
};

struct LoraPair {
  Tensor down;  // [d_in x r]
  Tensor up;    // [r x d_out], zero at attach time
};

struct LoraAdapter {
  std::size_t rank = 0;
  double alpha = 0.0;
  std::map<std::string, LoraPair> pairs;  // keyed by target weight name

  double scale() const { return alpha / static_cast<double>(rank); }
  std::vector<std::string> targets() const;
};

// Parameter names: "tok_emb", "pos_emb", "layer<i>.attn.{q,k,v,o}<h>",
// "layer<i>.ffn.w1", "layer<i>.ffn.w2", "head_A", "head_B", "log_tau".
// Adapter tensors live under "lora.<target>.down" / "lora.<target>.up".
struct EncoderParams {
  EncoderConfig config;
  std::map<std::string, Tensor> tensors;
  std::optional<LoraAdapter> lora;
  std::set<std::string> frozen;

  const Tensor& tensor(const std::string& name) const;
  Tensor& tensor(const std::string& name);
  bool is_frozen(const std::string& name) const { return frozen.count(name) != 0; }
  double tau() const;

  // Base names followed by adapter names, both in sorted order.
  std::vector<std::string> all_names(bool with_lora) const;

  void freeze_all_base();
};

// Weight names the architecture defines for a config, sorted.
std::vector<std::string> base_tensor_names(const EncoderConfig& config);
// Linear maps eligible as adapter targets: every attention projection and
// both feed-forward weights. Embeddings and the output head stay excluded.
std::vector<std::string> default_lora_targets(const EncoderConfig& config);

EncoderParams init_params(const EncoderConfig& config, uint64_t seed);

// Fresh adapter over `targets` (default: default_lora_targets). down is
// Gaussian, up is zero, so the adapter starts as an exact no-op.
void attach_lora(EncoderParams& params, std::size_t rank, double alpha, uint64_t seed,
                 std::vector<std::string> targets = {});

// W += scale * down * up for every target, adapter removed.
EncoderParams lora_fuse(const EncoderParams& params);

// [image] or [image, SEP_INSTR, instruction].
TokenSeq assemble_query(const TokenSeq& image_tokens, const std::optional<TokenSeq>& instruction_tokens,
                        std::size_t max_seq);

// Registers every parameter tensor as a named graph leaf (adapter tensors only
// when use_lora). Trainability follows the frozen set.
std::map<std::string, NodeId> add_param_leaves(Graph& g, const EncoderParams& params, bool use_lora);

// Forward pass producing a unit-norm rank-1 embedding node.
NodeId encode_node(Graph& g, const std::map<std::string, NodeId>& leaves, const EncoderParams& params,
                   const TokenSeq& tokens, bool use_lora);

// Value-only convenience wrapper over encode_node.
Tensor encode(const EncoderParams& params, const TokenSeq& tokens, bool use_lora);

// Residual head on a rank-1 vector: x + selu(x . head_B) . head_A.
Tensor mlp_head(const EncoderParams& params, const Tensor& x);

}  // namespace abc
