#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "abc/checkpoint.hpp"
#include "abc/corpus.hpp"
#include "abc/tensor.hpp"

namespace abc {

enum class RetrievalDirection { kImageToText, kTextToImage };

struct RankRow {
  std::string query_id;
  std::size_t rank = 0;  // 1-based rank of the positive candidate
};

struct EvalReport {
  std::string task;
  std::map<std::string, double> metrics;
  std::uint64_t ckpt_hash = 0;
  std::uint64_t corpus_hash = 0;
  std::size_t n_queries = 0;
  std::vector<RankRow> ranks;
};

// Fraction of queries whose positive lands in the top k of its row. Ties
// rank the smaller candidate index first, so tables are reproducible.
// Keys are "R@<k>". k of 0 or beyond the pool is an error.
std::map<std::string, double> recall_at_k(const Tensor& S, const std::vector<std::size_t>& gt,
                                          const std::vector<std::size_t>& ks);

// 1-based rank of candidate `gt` within row `row` of S under the same
// ascending-index tie rule recall_at_k uses.
std::size_t rank_in_row(const Tensor& S, std::size_t row, std::size_t gt);

// Provenance fingerprints quoted in every report, stable across runs and
// processes for identical inputs.
std::uint64_t params_fingerprint(const EncoderParams& params);
std::uint64_t corpus_fingerprint(const Corpus& corpus);

// Caption-pool retrieval without instructions: each image pairs with one
// designated caption (aspect = image ordinal mod n_aspects) so every query
// has exactly one correct candidate.
EvalReport eval_retrieval(const Checkpoint& ckpt, const Corpus& corpus, RetrievalDirection dir,
                          const std::vector<std::size_t>& ks);

// Zero-shot style classification over one aspect: classes are the distinct
// attribute values that aspect takes in the corpus, each rendered through a
// prompt template.
struct ClassTask {
  std::size_t aspect = 0;
  std::vector<std::size_t> image_indices;  // queries
  std::vector<std::size_t> truth;          // index into labels per query
  std::vector<TokenSeq> labels;            // the raw value tokens per class
};

ClassTask make_class_task(const Corpus& corpus, std::size_t aspect);

// The slot the label tokens are spliced into. Token ids are non-negative, so
// this can never collide with a real token.
inline constexpr std::int32_t kLabelSlot = -1;

// [template_token, slot]: "a photo of a <label>" reduced to its skeleton.
TokenSeq default_class_template(const Corpus& corpus);

EvalReport eval_classification(const Checkpoint& ckpt, const Corpus& corpus, const ClassTask& task,
                               const TokenSeq& tmpl);

// Instruction-following benchmark. Queries are bench images, optionally
// fused with their instruction; the pool is every bench caption. Metrics
// carry the global-pool R@k plus "within_image_R@1", where each query ranks
// only its own image's captions — there a blind model scores 1/group exactly
// in expectation.
EvalReport eval_ctrlbench(const Checkpoint& ckpt, const Corpus& corpus,
                          const std::vector<BenchRecord>& bench, bool use_instructions,
                          const std::vector<std::size_t>& ks);

// report.json; ranks.jsonl too when ranks_path is non-empty.
void save_report(const EvalReport& report, const std::string& json_path,
                 const std::string& ranks_path = "");

}  // namespace abc
