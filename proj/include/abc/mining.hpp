#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "abc/corpus.hpp"
#include "abc/encoder.hpp"
#include "abc/rng.hpp"
#include "abc/tensor.hpp"

namespace abc {

struct MiningConfig {
  double epsilon = 0.95;   // negatives must score at most epsilon * positive
  std::size_t k = 7;       // negatives per query
  std::size_t window = 100;  // pool keeps this many best-scoring eligible
  std::uint64_t seed = 0;
  void validate() const;
};

class InsufficientNegativesError : public std::runtime_error {
 public:
  InsufficientNegativesError(std::size_t eligible, std::size_t requested, const std::string& context);
  std::size_t eligible;
  std::size_t requested;
};

struct MinedRecord {
  std::string image_id;
  std::string pos;  // positive caption id
  std::vector<std::string> neg;
  double pos_score = 0.0;
  std::vector<double> neg_scores;
};

using MinedDataset = std::vector<MinedRecord>;

// Dense image-by-caption cosine table, computed in row chunks so peak memory
// tracks chunk_size * captions. Every entry is an independent dot product, so
// the chunk size can never change a value.
Tensor score_corpus(const EncoderParams& params, bool use_lora, const Corpus& corpus,
                    const std::vector<std::size_t>& image_indices,
                    const std::vector<std::size_t>& caption_indices, std::size_t chunk_size);

// Pick negative candidate positions for one score row. Eligible positions
// score at most epsilon * scores[positive]; the pool keeps the `window`
// best-scoring eligible positions (ties by ascending position) and k are
// drawn uniformly without replacement. Fewer than k eligible positions is an
// error unless allow_fewer.
std::vector<std::size_t> mine(const std::vector<double>& scores, std::size_t positive,
                              const MiningConfig& config, Rng& rng, bool allow_fewer = false);

// One record per training image; the positive caption is a seeded uniform
// aspect draw. Bench images and their captions never participate.
MinedDataset build_mined_dataset(const EncoderParams& params, bool use_lora, const Corpus& corpus,
                                 const MiningConfig& config, std::size_t chunk_size,
                                 bool allow_fewer = false);

// Re-checks the threshold and distinctness invariants from the records alone.
ValidationReport validate_mined(const MinedDataset& dataset, double epsilon);

void save_mined(const MinedDataset& dataset, const std::string& path);
MinedDataset load_mined(const std::string& path);

}  // namespace abc
