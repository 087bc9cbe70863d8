#include "abc/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "abc/rng.hpp"

namespace abc {
namespace {

Tensor gaussian(Rng& rng, std::vector<std::size_t> shape, double std_dev) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = rng.normal() * std_dev;
  return t;
}

std::string layer_prefix(std::size_t l) { return "layer" + std::to_string(l); }

}  // namespace

std::string to_string(AttnMode mode) {
  return mode == AttnMode::kCausal ? "causal" : "bidirectional";
}

AttnMode attn_mode_from_string(const std::string& s) {
  if (s == "causal") return AttnMode::kCausal;
  if (s == "bidirectional") return AttnMode::kBidirectional;
  throw std::invalid_argument("unknown attention mode '" + s + "'");
}

void EncoderConfig::validate() const {
  if (vocab_size < static_cast<std::size_t>(kNumReservedIds))
    throw std::invalid_argument("vocab_size must cover the reserved token ids");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
    throw std::invalid_argument("d_model must be a positive multiple of n_heads");
  if (max_seq < 1) throw std::invalid_argument("max_seq must be at least 1");
}

std::vector<std::string> LoraAdapter::targets() const {
  std::vector<std::string> out;
  out.reserve(pairs.size());
  for (const auto& [name, _] : pairs) out.push_back(name);
  return out;
}

const Tensor& EncoderParams::tensor(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw std::out_of_range("no parameter tensor named '" + name + "'");
  return it->second;
}

Tensor& EncoderParams::tensor(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw std::out_of_range("no parameter tensor named '" + name + "'");
  return it->second;
}

double EncoderParams::tau() const { return std::exp(tensor("log_tau").at(0)); }

std::vector<std::string> EncoderParams::all_names(bool with_lora) const {
  std::vector<std::string> out;
  for (const auto& [name, _] : tensors) out.push_back(name);
  if (with_lora && lora) {
    for (const auto& [target, _] : lora->pairs) {
      out.push_back("lora." + target + ".down");
      out.push_back("lora." + target + ".up");
    }
  }
  return out;
}

void EncoderParams::freeze_all_base() {
  for (const auto& [name, _] : tensors) frozen.insert(name);
}

std::vector<std::string> base_tensor_names(const EncoderConfig& config) {
  std::vector<std::string> names = {"tok_emb", "pos_emb", "head_A", "head_B", "log_tau"};
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const std::string p = layer_prefix(l);
    for (std::size_t h = 0; h < config.n_heads; ++h) {
      for (const char* k : {"q", "k", "v", "o"})
        names.push_back(p + ".attn." + k + std::to_string(h));
    }
    names.push_back(p + ".ffn.w1");
    names.push_back(p + ".ffn.w2");
  }
  std::sort(names.begin(), names.end());
  return names;
}

std::vector<std::string> default_lora_targets(const EncoderConfig& config) {
  std::vector<std::string> out;
  for (const std::string& name : base_tensor_names(config)) {
    if (name.find(".attn.") != std::string::npos || name.find(".ffn.") != std::string::npos)
      out.push_back(name);
  }
  return out;
}

EncoderParams init_params(const EncoderConfig& config, uint64_t seed) {
  config.validate();
  EncoderParams p;
  p.config = config;
  const std::size_t d = config.d_model;
  const std::size_t hd = config.head_dim();
  const std::size_t hh = config.head_width();

  auto gauss = [&](const std::string& name, std::vector<std::size_t> shape) {
    Rng rng(mix_seed(seed, name));
    p.tensors[name] = gaussian(rng, std::move(shape), 0.02);
  };

  gauss("tok_emb", {config.vocab_size, d});
  gauss("pos_emb", {config.max_seq, d});
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const std::string pre = layer_prefix(l);
    for (std::size_t h = 0; h < config.n_heads; ++h) {
      const std::string hs = std::to_string(h);
      gauss(pre + ".attn.q" + hs, {d, hd});
      gauss(pre + ".attn.k" + hs, {d, hd});
      gauss(pre + ".attn.v" + hs, {d, hd});
      gauss(pre + ".attn.o" + hs, {hd, d});
    }
    gauss(pre + ".ffn.w1", {d, 2 * d});
    gauss(pre + ".ffn.w2", {2 * d, d});
  }
  gauss("head_A", {hh, d});
  p.tensors["head_B"] = Tensor::zeros({d, hh});  // head starts as the identity map
  p.tensors["log_tau"] = Tensor::scalar(std::log(0.07));
  return p;
}

void attach_lora(EncoderParams& params, std::size_t rank, double alpha, uint64_t seed,
                 std::vector<std::string> targets) {
  if (rank == 0) throw std::invalid_argument("adapter rank must be positive");
  if (targets.empty()) targets = default_lora_targets(params.config);
  LoraAdapter adapter;
  adapter.rank = rank;
  adapter.alpha = alpha;
  for (const std::string& target : targets) {
    const Tensor& w = params.tensor(target);
    if (w.rank() != 2) throw std::invalid_argument("adapter target '" + target + "' is not a matrix");
    LoraPair pair;
    Rng rng(mix_seed(seed, "lora." + target));
    pair.down = gaussian(rng, {w.shape[0], rank}, 0.02);
    pair.up = Tensor::zeros({rank, w.shape[1]});
    adapter.pairs.emplace(target, std::move(pair));
  }
  params.lora = std::move(adapter);
}

EncoderParams lora_fuse(const EncoderParams& params) {
  if (!params.lora) throw std::logic_error("lora_fuse: no active adapter");
  EncoderParams fused = params;
  const LoraAdapter& a = *params.lora;
  const double scale = a.scale();
  for (const auto& [target, pair] : a.pairs) {
    Tensor& w = fused.tensor(target);
    const std::size_t rows = w.shape[0], cols = w.shape[1], r = a.rank;
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t k = 0; k < r; ++k) {
        const double dv = scale * pair.down.at(i, k);
        if (dv == 0.0) continue;
        for (std::size_t j = 0; j < cols; ++j) w.at(i, j) += dv * pair.up.at(k, j);
      }
  }
  fused.lora.reset();
  return fused;
}

TokenSeq assemble_query(const TokenSeq& image_tokens, const std::optional<TokenSeq>& instruction_tokens,
                        std::size_t max_seq) {
  if (!instruction_tokens) {
    if (image_tokens.size() > max_seq)
      throw std::length_error("query needs " + std::to_string(image_tokens.size()) +
                              " positions but max_seq is " + std::to_string(max_seq));
    return image_tokens;
  }
  TokenSeq out = image_tokens;
  out.push_back(kSepInstrId);
  out.insert(out.end(), instruction_tokens->begin(), instruction_tokens->end());
  if (out.size() > max_seq)
    throw std::length_error("query needs " + std::to_string(out.size()) +
                            " positions but max_seq is " + std::to_string(max_seq));
  return out;
}

std::map<std::string, NodeId> add_param_leaves(Graph& g, const EncoderParams& params, bool use_lora) {
  std::map<std::string, NodeId> leaves;
  for (const auto& [name, value] : params.tensors)
    leaves[name] = g.leaf(value, name, !params.is_frozen(name));
  if (use_lora && params.lora) {
    for (const auto& [target, pair] : params.lora->pairs) {
      const std::string down = "lora." + target + ".down";
      const std::string up = "lora." + target + ".up";
      leaves[down] = g.leaf(pair.down, down, !params.is_frozen(down));
      leaves[up] = g.leaf(pair.up, up, !params.is_frozen(up));
    }
  }
  return leaves;
}

namespace {

NodeId node_for(const std::map<std::string, NodeId>& leaves, const std::string& name) {
  auto it = leaves.find(name);
  if (it == leaves.end()) throw std::logic_error("encode: leaf map is missing '" + name + "'");
  return it->second;
}

// x . W, plus the scaled low-rank delta when the adapter covers W.
NodeId proj(Graph& g, const std::map<std::string, NodeId>& leaves, const EncoderParams& params,
            NodeId input, const std::string& weight, bool use_lora) {
  NodeId out = g.matmul(input, node_for(leaves, weight));
  if (use_lora && params.lora) {
    auto it = params.lora->pairs.find(weight);
    if (it != params.lora->pairs.end()) {
      NodeId delta = g.matmul(g.matmul(input, node_for(leaves, "lora." + weight + ".down")),
                              node_for(leaves, "lora." + weight + ".up"));
      out = g.add(out, g.scalar_mul(delta, params.lora->scale()));
    }
  }
  return out;
}

}  // namespace

NodeId encode_node(Graph& g, const std::map<std::string, NodeId>& leaves, const EncoderParams& params,
                   const TokenSeq& tokens, bool use_lora) {
  const EncoderConfig& cfg = params.config;
  if (tokens.empty()) throw std::invalid_argument("encode: empty token sequence");
  if (tokens.size() > cfg.max_seq)
    throw std::length_error("encode: sequence of " + std::to_string(tokens.size()) +
                            " tokens exceeds max_seq " + std::to_string(cfg.max_seq));
  std::size_t live = 0;
  for (int32_t t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size)
      throw std::out_of_range("encode: token id " + std::to_string(t) + " outside vocabulary of " +
                              std::to_string(cfg.vocab_size));
    if (t != kPadId) ++live;
  }
  if (live == 0) throw std::invalid_argument("encode: sequence has no non-PAD tokens");

  const std::size_t L = tokens.size();
  const std::size_t d = cfg.d_model;

  std::vector<int32_t> pos_ids(L);
  std::iota(pos_ids.begin(), pos_ids.end(), 0);
  NodeId x = g.add(g.embedding(node_for(leaves, "tok_emb"), tokens),
                   g.embedding(node_for(leaves, "pos_emb"), pos_ids));

  // PAD never participates as a key; causal rows see positions up to themselves.
  std::vector<uint8_t> mask(L * L, 0);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < L; ++j) {
      const bool visible = cfg.attn_mode == AttnMode::kBidirectional || j <= i;
      mask[i * L + j] = (visible && tokens[j] != kPadId) ? 1 : 0;
    }

  const double norm_gain = std::sqrt(static_cast<double>(d));
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = layer_prefix(l);
    NodeId n1 = g.scalar_mul(g.l2_normalize(x), norm_gain);
    NodeId attn = kNoNode;
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const std::string hs = std::to_string(h);
      NodeId q = proj(g, leaves, params, n1, pre + ".attn.q" + hs, use_lora);
      NodeId k = proj(g, leaves, params, n1, pre + ".attn.k" + hs, use_lora);
      NodeId v = proj(g, leaves, params, n1, pre + ".attn.v" + hs, use_lora);
      NodeId weights = g.masked_softmax(g.scalar_mul(g.matmul(q, k, false, true), attn_scale), mask);
      NodeId head_out = proj(g, leaves, params, g.matmul(weights, v), pre + ".attn.o" + hs, use_lora);
      attn = (attn == kNoNode) ? head_out : g.add(attn, head_out);
    }
    x = g.add(x, attn);
    NodeId n2 = g.scalar_mul(g.l2_normalize(x), norm_gain);
    NodeId hidden = g.selu(proj(g, leaves, params, n2, pre + ".ffn.w1", use_lora));
    x = g.add(x, proj(g, leaves, params, hidden, pre + ".ffn.w2", use_lora));
  }

  // Mean over non-PAD positions as a single weighted-sum row.
  Tensor pool = Tensor::zeros({L});
  for (std::size_t i = 0; i < L; ++i)
    if (tokens[i] != kPadId) pool.at(i) = 1.0 / static_cast<double>(live);
  NodeId pooled = g.matmul(g.constant(std::move(pool)), x);

  NodeId head_in = g.matmul(pooled, node_for(leaves, "head_B"));
  NodeId y = g.add(pooled, g.matmul(g.selu(head_in), node_for(leaves, "head_A")));
  return g.l2_normalize(y);
}

Tensor encode(const EncoderParams& params, const TokenSeq& tokens, bool use_lora) {
  Graph g;
  auto leaves = add_param_leaves(g, params, use_lora);
  return g.value(encode_node(g, leaves, params, tokens, use_lora));
}

Tensor mlp_head(const EncoderParams& params, const Tensor& x) {
  if (x.rank() != 1 || x.shape[0] != params.config.d_model)
    throw std::invalid_argument("mlp_head expects a d_model vector, got " + shape_str(x.shape));
  Graph g;
  NodeId in = g.constant(x);
  NodeId hidden = g.selu(g.matmul(in, g.constant(params.tensor("head_B"))));
  NodeId y = g.add(in, g.matmul(hidden, g.constant(params.tensor("head_A"))));
  return g.value(y);
}

}  // namespace abc
