#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "abc/encoder.hpp"

namespace abc {

// Synthetic world: each image is a bag of per-aspect attribute values plus
// noise; each aspect yields one caption (marker + value) and several
// instruction paraphrases (prefix + marker). Every caption of an image is a
// correct description, so only an instruction disambiguates which one a
// query wants.
struct WorldConfig {
  std::size_t n_images = 100;
  std::size_t n_aspects = 4;
  // Distinct values available per aspect. 0 = one per image (minimum that
  // keeps captions globally unique; every image draws a distinct value).
  std::size_t values_per_aspect = 0;
  std::size_t paraphrases_per_aspect = 3;  // last one is held out of training
  std::size_t noise_tokens_per_image = 3;
  std::size_t n_bench_images = 0;  // tail images reserved for the benchmark
  std::uint64_t seed = 0;

  std::size_t values() const { return values_per_aspect == 0 ? n_images : values_per_aspect; }
  void validate() const;
};

// Token-id blocks, a pure function of the config. Ids 0..3 are the reserved
// control tokens from the encoder.
struct VocabLayout {
  std::int32_t template_token = 0;  // classification prompt prefix
  std::int32_t noise_begin = 0;
  std::size_t noise_count = 0;
  std::int32_t marker_begin = 0;   // one marker token per aspect
  std::int32_t prefix_begin = 0;   // kPrefixLen tokens per (aspect, paraphrase)
  std::int32_t value_begin = 0;    // disjoint alphabet block per aspect
  std::size_t value_alphabet = 0;  // symbols per aspect block
  std::size_t n_paraphrases = 0;
  std::size_t vocab_size = 0;

  std::int32_t marker(std::size_t aspect) const;
  std::int32_t prefix(std::size_t aspect, std::size_t paraphrase, std::size_t j) const;
  std::int32_t value_symbol(std::size_t aspect, std::size_t symbol) const;
};

inline constexpr std::size_t kValueLen = 2;   // tokens per attribute value
inline constexpr std::size_t kPrefixLen = 2;  // tokens per instruction prefix
inline constexpr std::size_t kNoiseAlphabet = 16;

VocabLayout vocab_layout(const WorldConfig& config);

struct ImageRec {
  std::string id;
  TokenSeq tokens;
};

struct CaptionRec {
  std::string id;
  std::size_t image = 0;
  std::size_t aspect = 0;
  TokenSeq tokens;
};

struct InstructionRec {
  std::string id;
  std::size_t image = 0;
  std::size_t aspect = 0;
  std::size_t paraphrase = 0;
  TokenSeq tokens;
  std::string split;  // "train" | "bench" | "held-out-paraphrase"
};

struct Corpus {
  WorldConfig config;
  VocabLayout layout;
  std::vector<ImageRec> images;
  std::vector<CaptionRec> captions;          // image-major: image*A + aspect
  std::vector<InstructionRec> instructions;  // (image*A + aspect)*P + paraphrase

  std::size_t caption_index(std::size_t image, std::size_t aspect) const;
  std::size_t instruction_index(std::size_t image, std::size_t aspect, std::size_t paraphrase) const;
  std::size_t image_index(const std::string& id) const;      // throws on unknown id
  std::size_t caption_index_of(const std::string& id) const; // throws on unknown id
  std::size_t n_train_images() const { return images.size() - config.n_bench_images; }
  bool in_bench(std::size_t image) const { return image >= n_train_images(); }
  std::size_t max_query_len() const;  // longest image+SEP+instruction sequence
};

struct BenchRecord {
  std::string image_id;
  std::string instruction_id;
  std::string positive_caption_id;
};

std::string image_id(std::size_t index);
std::string caption_id(std::size_t index);
std::string instruction_id(std::size_t index);

Corpus generate_world(const WorldConfig& config);

// One (instruction, positive caption) record per aspect for the last
// n_bench_images of the corpus, using only the held-out paraphrase.
std::vector<BenchRecord> generate_ctrlbench(const Corpus& corpus, std::size_t n_bench_images);

struct ValidationReport {
  bool ok = true;
  std::string violation;  // first violation found, empty when ok
};

ValidationReport validate_corpus(const Corpus& corpus);

void save_corpus(const Corpus& corpus, const std::string& dir);
Corpus load_corpus(const std::string& dir);
void save_ctrlbench(const std::vector<BenchRecord>& records, const std::string& path);
std::vector<BenchRecord> load_ctrlbench(const std::string& path);

}  // namespace abc
