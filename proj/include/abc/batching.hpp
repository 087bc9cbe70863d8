#pragma once

#include <cstdint>
#include <vector>

#include "abc/corpus.hpp"
#include "abc/mining.hpp"
#include "abc/objective.hpp"

namespace abc {

enum class NegativeSource { kMined, kUniformRandom };

struct PretrainBatch {
  std::vector<TokenSeq> queries;     // images
  std::vector<TokenSeq> candidates;  // captions, one block of slots per query
  BatchLayout layout;
  std::vector<std::size_t> query_images;        // corpus image index per query
  std::vector<std::size_t> candidate_captions;  // corpus caption index per slot
};

struct FinetuneBatch {
  std::vector<TokenSeq> queries;     // image + SEP + instruction
  std::vector<TokenSeq> candidates;  // each query's positive caption (N == M)
  BatchLayout layout;
  std::vector<std::size_t> query_images;
  std::vector<std::size_t> candidate_captions;
};

// Positives-only epoch (M == N) for the warm-up stage. The positive aspect
// of each image is re-drawn every epoch. Every training image appears exactly
// once per epoch; a trailing partial batch is dropped.
std::vector<PretrainBatch> build_bootstrap_epoch(const Corpus& corpus, std::size_t n,
                                                 std::uint64_t seed, std::size_t epoch);

// Mined-negative epoch: n queries by m candidate slots, m % n == 0. Each
// query block holds its record's positive plus m/n - 1 negatives — subsampled
// per epoch without replacement when the record carries more — or uniform
// random train captions for the control arm.
std::vector<PretrainBatch> build_pretrain_epoch(const Corpus& corpus, const MinedDataset& mined,
                                                std::size_t n, std::size_t m, std::uint64_t seed,
                                                std::size_t epoch,
                                                NegativeSource source = NegativeSource::kMined);

// Instruction epoch: groups of group_size same-image queries with pairwise
// distinct aspects and training-split paraphrases only; the candidate set is
// exactly the queries' positives, so sibling captions of each image act as
// in-batch negatives. group_size == 1 is allowed but warned: it leaves no
// same-image negative to disambiguate.
std::vector<FinetuneBatch> build_finetune_epoch(const Corpus& corpus, std::size_t images_per_batch,
                                                std::size_t group_size, std::uint64_t seed,
                                                std::size_t epoch);

}  // namespace abc
