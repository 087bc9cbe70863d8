#include "abc/evalsuite.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <stdexcept>
#include <unordered_map>

#include "abc/jsonl.hpp"
#include "abc/objective.hpp"

namespace abc {
namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

void feed(std::uint64_t& h, const void* bytes, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
}

void feed_u64(std::uint64_t& h, std::uint64_t v) { feed(h, &v, sizeof v); }
void feed_str(std::uint64_t& h, const std::string& s) {
  feed_u64(h, s.size());
  feed(h, s.data(), s.size());
}
void feed_tokens(std::uint64_t& h, const TokenSeq& t) {
  feed_u64(h, t.size());
  feed(h, t.data(), t.size() * sizeof(TokenSeq::value_type));
}
// Tensors hash at storage precision so a checkpoint fingerprints the same
// before and after a disk round trip.
void feed_tensor(std::uint64_t& h, const Tensor& t) {
  feed_u64(h, t.rank());
  for (std::size_t d : t.shape) feed_u64(h, d);
  for (double v : t.data) {
    auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    feed(h, &bits, sizeof bits);
  }
}

std::uint64_t checkpoint_fingerprint(const Checkpoint& ckpt) {
  std::uint64_t h = kFnvOffset;
  feed_str(h, ckpt.meta.stage);
  feed_u64(h, ckpt.meta.step);
  feed_u64(h, ckpt.meta.seed);
  feed_u64(h, params_fingerprint(ckpt.params));
  return h;
}

struct LoraPolicy {
  bool query = false;
  bool candidate = false;
};

// Adapters trained against frozen candidate embeddings (stage 2) only make
// sense on the query side, and only when the query carries an instruction;
// every other checkpoint applies its adapter everywhere.
LoraPolicy lora_policy(const Checkpoint& ckpt, bool use_instructions) {
  if (!ckpt.params.lora) return {};
  if (ckpt.meta.stage == "2") return {use_instructions, false};
  return {true, true};
}

Tensor encode_set(const EncoderParams& params, const std::vector<TokenSeq>& seqs, bool use_lora) {
  if (seqs.empty()) throw std::invalid_argument("cannot evaluate an empty query or pool set");
  Tensor out = Tensor::zeros({seqs.size(), params.config.d_model});
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    Tensor e = encode(params, seqs[i], use_lora);
    std::copy(e.data.begin(), e.data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(i * params.config.d_model));
  }
  return out;
}

std::size_t designated_caption(const Corpus& corpus, std::size_t image) {
  return corpus.caption_index(image, image % corpus.config.n_aspects);
}

}  // namespace

std::uint64_t params_fingerprint(const EncoderParams& params) {
  std::uint64_t h = kFnvOffset;
  const EncoderConfig& c = params.config;
  feed_u64(h, c.vocab_size);
  feed_u64(h, c.d_model);
  feed_u64(h, c.n_layers);
  feed_u64(h, c.n_heads);
  feed_u64(h, c.max_seq);
  feed_str(h, to_string(c.attn_mode));
  feed_u64(h, c.head_hidden);
  for (const auto& [name, t] : params.tensors) {
    feed_str(h, name);
    feed_tensor(h, t);
  }
  if (params.lora) {
    feed_u64(h, params.lora->rank);
    auto alpha = std::bit_cast<std::uint64_t>(params.lora->alpha);
    feed_u64(h, alpha);
    for (const auto& [target, pair] : params.lora->pairs) {
      feed_str(h, target);
      feed_tensor(h, pair.down);
      feed_tensor(h, pair.up);
    }
  }
  for (const auto& name : params.frozen) feed_str(h, name);
  return h;
}

std::uint64_t corpus_fingerprint(const Corpus& corpus) {
  std::uint64_t h = kFnvOffset;
  const WorldConfig& c = corpus.config;
  feed_u64(h, c.n_images);
  feed_u64(h, c.n_aspects);
  feed_u64(h, c.values_per_aspect);
  feed_u64(h, c.paraphrases_per_aspect);
  feed_u64(h, c.noise_tokens_per_image);
  feed_u64(h, c.n_bench_images);
  feed_u64(h, c.seed);
  for (const auto& img : corpus.images) {
    feed_str(h, img.id);
    feed_tokens(h, img.tokens);
  }
  for (const auto& cap : corpus.captions) {
    feed_str(h, cap.id);
    feed_u64(h, cap.image);
    feed_u64(h, cap.aspect);
    feed_tokens(h, cap.tokens);
  }
  for (const auto& ins : corpus.instructions) {
    feed_str(h, ins.id);
    feed_u64(h, ins.image);
    feed_u64(h, ins.aspect);
    feed_u64(h, ins.paraphrase);
    feed_str(h, ins.split);
    feed_tokens(h, ins.tokens);
  }
  return h;
}

std::size_t rank_in_row(const Tensor& S, std::size_t row, std::size_t gt) {
  if (S.rank() != 2) throw std::invalid_argument("similarity matrix must be rank 2");
  const std::size_t n = S.shape[1];
  if (row >= S.shape[0]) throw std::out_of_range("query row out of range");
  if (gt >= n) throw std::out_of_range("ground-truth candidate out of range");
  const double* r = S.data.data() + row * n;
  const double s = r[gt];
  std::size_t rank = 1;
  for (std::size_t j = 0; j < n; ++j) {
    if (j == gt) continue;
    if (r[j] > s || (r[j] == s && j < gt)) ++rank;
  }
  return rank;
}

std::map<std::string, double> recall_at_k(const Tensor& S, const std::vector<std::size_t>& gt,
                                          const std::vector<std::size_t>& ks) {
  if (S.rank() != 2) throw std::invalid_argument("similarity matrix must be rank 2");
  if (gt.size() != S.shape[0])
    throw std::invalid_argument("one ground-truth candidate per query row required");
  if (ks.empty()) throw std::invalid_argument("no cutoffs requested");
  for (std::size_t k : ks)
    if (k == 0 || k > S.shape[1])
      throw std::invalid_argument("recall cutoff " + std::to_string(k) + " outside pool of " +
                                  std::to_string(S.shape[1]));

  std::vector<std::size_t> ranks(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) ranks[i] = rank_in_row(S, i, gt[i]);

  std::map<std::string, double> out;
  for (std::size_t k : ks) {
    std::size_t hits = 0;
    for (std::size_t r : ranks) hits += (r <= k) ? 1 : 0;
    out["R@" + std::to_string(k)] = static_cast<double>(hits) / static_cast<double>(gt.size());
  }
  return out;
}

EvalReport eval_retrieval(const Checkpoint& ckpt, const Corpus& corpus, RetrievalDirection dir,
                          const std::vector<std::size_t>& ks) {
  const std::size_t n = corpus.images.size();
  LoraPolicy policy = lora_policy(ckpt, /*use_instructions=*/false);

  std::vector<TokenSeq> image_seqs(n), caption_seqs(n);
  std::vector<std::string> image_ids(n), caption_ids(n);
  for (std::size_t i = 0; i < n; ++i) {
    image_seqs[i] = corpus.images[i].tokens;
    image_ids[i] = corpus.images[i].id;
    const CaptionRec& cap = corpus.captions[designated_caption(corpus, i)];
    caption_seqs[i] = cap.tokens;
    caption_ids[i] = cap.id;
  }

  const bool i2t = dir == RetrievalDirection::kImageToText;
  Tensor q = encode_set(ckpt.params, i2t ? image_seqs : caption_seqs, policy.query);
  Tensor c = encode_set(ckpt.params, i2t ? caption_seqs : image_seqs, policy.candidate);
  Tensor S = similarity_matrix(q, c);

  std::vector<std::size_t> gt(n);
  for (std::size_t i = 0; i < n; ++i) gt[i] = i;

  EvalReport report;
  report.task = i2t ? "retrieval/image-to-text" : "retrieval/text-to-image";
  report.metrics = recall_at_k(S, gt, ks);
  report.ckpt_hash = checkpoint_fingerprint(ckpt);
  report.corpus_hash = corpus_fingerprint(corpus);
  report.n_queries = n;
  const auto& qids = i2t ? image_ids : caption_ids;
  for (std::size_t i = 0; i < n; ++i) report.ranks.push_back({qids[i], rank_in_row(S, i, i)});
  return report;
}

ClassTask make_class_task(const Corpus& corpus, std::size_t aspect) {
  if (aspect >= corpus.config.n_aspects) throw std::out_of_range("aspect out of range");
  ClassTask task;
  task.aspect = aspect;
  // Classes sorted by token content so the label order cannot depend on
  // image order.
  std::map<TokenSeq, std::size_t> seen;
  std::vector<TokenSeq> values(corpus.images.size());
  for (std::size_t i = 0; i < corpus.images.size(); ++i) {
    const TokenSeq& cap = corpus.captions[corpus.caption_index(i, aspect)].tokens;
    if (cap.size() <= 1) throw std::runtime_error("caption too short to carry a value");
    values[i] = TokenSeq(cap.begin() + 1, cap.end());
    seen.emplace(values[i], 0);
  }
  for (auto& [tokens, idx] : seen) {
    idx = task.labels.size();
    task.labels.push_back(tokens);
  }
  for (std::size_t i = 0; i < corpus.images.size(); ++i) {
    task.image_indices.push_back(i);
    task.truth.push_back(seen.at(values[i]));
  }
  return task;
}

TokenSeq default_class_template(const Corpus& corpus) {
  return {corpus.layout.template_token, kLabelSlot};
}

EvalReport eval_classification(const Checkpoint& ckpt, const Corpus& corpus, const ClassTask& task,
                               const TokenSeq& tmpl) {
  if (task.labels.empty()) throw std::invalid_argument("no class labels");
  if (std::find(tmpl.begin(), tmpl.end(), kLabelSlot) == tmpl.end())
    throw std::invalid_argument("classification template has no label slot");
  if (task.truth.size() != task.image_indices.size())
    throw std::invalid_argument("one truth label per image required");

  std::vector<TokenSeq> rendered;
  for (const TokenSeq& label : task.labels) {
    TokenSeq seq;
    for (std::int32_t tok : tmpl) {
      if (tok == kLabelSlot)
        seq.insert(seq.end(), label.begin(), label.end());
      else
        seq.push_back(tok);
    }
    rendered.push_back(std::move(seq));
  }

  std::vector<TokenSeq> queries;
  for (std::size_t idx : task.image_indices) queries.push_back(corpus.images.at(idx).tokens);

  LoraPolicy policy = lora_policy(ckpt, /*use_instructions=*/false);
  Tensor q = encode_set(ckpt.params, queries, policy.query);
  Tensor c = encode_set(ckpt.params, rendered, policy.candidate);
  Tensor S = similarity_matrix(q, c);

  EvalReport report;
  report.task = "classification";
  report.ckpt_hash = checkpoint_fingerprint(ckpt);
  report.corpus_hash = corpus_fingerprint(corpus);
  report.n_queries = task.image_indices.size();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < task.image_indices.size(); ++i) {
    std::size_t rank = rank_in_row(S, i, task.truth[i]);
    hits += (rank == 1) ? 1 : 0;
    report.ranks.push_back({corpus.images[task.image_indices[i]].id, rank});
  }
  report.metrics["accuracy"] = static_cast<double>(hits) / static_cast<double>(task.truth.size());
  return report;
}

EvalReport eval_ctrlbench(const Checkpoint& ckpt, const Corpus& corpus,
                          const std::vector<BenchRecord>& bench, bool use_instructions,
                          const std::vector<std::size_t>& ks) {
  if (bench.empty()) throw std::invalid_argument("benchmark is empty");

  std::unordered_map<std::string, std::size_t> ins_by_id;
  for (std::size_t i = 0; i < corpus.instructions.size(); ++i)
    ins_by_id.emplace(corpus.instructions[i].id, i);

  const std::size_t n = bench.size();
  std::vector<TokenSeq> queries(n), pool(n);
  std::vector<std::size_t> query_image(n), pool_image(n);
  for (std::size_t i = 0; i < n; ++i) {
    const BenchRecord& rec = bench[i];
    std::size_t img = corpus.image_index(rec.image_id);
    std::size_t cap = corpus.caption_index_of(rec.positive_caption_id);
    auto ins = ins_by_id.find(rec.instruction_id);
    if (ins == ins_by_id.end())
      throw std::runtime_error("benchmark references unknown instruction '" + rec.instruction_id +
                               "'");
    query_image[i] = img;
    pool_image[i] = corpus.captions[cap].image;
    pool[i] = corpus.captions[cap].tokens;
    queries[i] = use_instructions
                     ? assemble_query(corpus.images[img].tokens,
                                      corpus.instructions[ins->second].tokens,
                                      ckpt.params.config.max_seq)
                     : corpus.images[img].tokens;
  }

  LoraPolicy policy = lora_policy(ckpt, use_instructions);
  Tensor q = encode_set(ckpt.params, queries, policy.query);
  Tensor c = encode_set(ckpt.params, pool, policy.candidate);
  Tensor S = similarity_matrix(q, c);

  std::vector<std::size_t> gt(n);
  for (std::size_t i = 0; i < n; ++i) gt[i] = i;

  EvalReport report;
  report.task = use_instructions ? "ctrlbench/instructed" : "ctrlbench/blind";
  report.metrics = recall_at_k(S, gt, ks);
  report.ckpt_hash = checkpoint_fingerprint(ckpt);
  report.corpus_hash = corpus_fingerprint(corpus);
  report.n_queries = n;
  for (std::size_t i = 0; i < n; ++i)
    report.ranks.push_back({bench[i].instruction_id, rank_in_row(S, i, i)});

  // Within-image mode: rank the positive against its own image's captions
  // only. Every caption of the image matches it, so a model that ignores the
  // instruction has no signal at all here and lands at 1/group.
  std::size_t within_hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = S.data.data() + i * n;
    const double s = row[i];
    bool top = true;
    for (std::size_t j = 0; j < n && top; ++j) {
      if (j == i || pool_image[j] != query_image[i]) continue;
      if (row[j] > s || (row[j] == s && j < i)) top = false;
    }
    within_hits += top ? 1 : 0;
  }
  report.metrics["within_image_R@1"] = static_cast<double>(within_hits) / static_cast<double>(n);
  return report;
}

void save_report(const EvalReport& report, const std::string& json_path,
                 const std::string& ranks_path) {
  char buf[19];
  nlohmann::ordered_json j;
  j["task"] = report.task;
  j["metrics"] = report.metrics;
  std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(report.ckpt_hash));
  j["ckpt_hash"] = buf;
  std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(report.corpus_hash));
  j["corpus_hash"] = buf;
  j["n_queries"] = report.n_queries;
  std::ofstream os(json_path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open '" + json_path + "' for writing");
  os << j.dump(2) << "\n";
  if (!os) throw std::runtime_error("write to '" + json_path + "' failed");

  if (!ranks_path.empty()) {
    std::vector<nlohmann::ordered_json> rows;
    for (const RankRow& r : report.ranks)
      rows.push_back(nlohmann::ordered_json{{"query_id", r.query_id}, {"rank", r.rank}});
    write_jsonl(ranks_path, rows);
  }
}

}  // namespace abc
