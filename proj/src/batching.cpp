#include "abc/batching.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

#include "abc/log.hpp"
#include "abc/rng.hpp"

namespace abc {

namespace {

std::vector<std::size_t> shuffled_train_images(const Corpus& corpus, std::uint64_t stream) {
  std::vector<std::size_t> order(corpus.n_train_images());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(stream);
  rng.shuffle(order);
  return order;
}

BatchLayout block_layout(std::size_t n, std::size_t group) {
  BatchLayout layout;
  layout.n_queries = n;
  layout.n_candidates = n * group;
  layout.pos_index.resize(n);
  layout.owner.resize(n * group);
  for (std::size_t i = 0; i < n; ++i) layout.pos_index[i] = i * group;
  for (std::size_t j = 0; j < n * group; ++j) layout.owner[j] = j / group;
  return layout;
}

}  // namespace

std::vector<PretrainBatch> build_bootstrap_epoch(const Corpus& corpus, std::size_t n,
                                                 std::uint64_t seed, std::size_t epoch) {
  if (n == 0) throw std::invalid_argument("batching: batch size must be positive");
  if (n > corpus.n_train_images())
    throw std::invalid_argument("batching: batch size " + std::to_string(n) + " exceeds the " +
                                std::to_string(corpus.n_train_images()) + " training images");
  const std::size_t A = corpus.config.n_aspects;
  auto order = shuffled_train_images(corpus, mix_seed(seed, "bootstrap.epoch", epoch));

  std::vector<PretrainBatch> out;
  out.reserve(order.size() / n);
  for (std::size_t b = 0; b + n <= order.size(); b += n) {
    PretrainBatch batch;
    batch.layout = block_layout(n, 1);
    for (std::size_t q = 0; q < n; ++q) {
      std::size_t img = order[b + q];
      std::size_t aspect =
          Rng(mix_seed(mix_seed(seed, "bootstrap.aspect", epoch), img)).bounded(A);
      std::size_t cap = corpus.caption_index(img, aspect);
      batch.queries.push_back(corpus.images[img].tokens);
      batch.candidates.push_back(corpus.captions[cap].tokens);
      batch.query_images.push_back(img);
      batch.candidate_captions.push_back(cap);
    }
    batch.layout.validate(true);
    out.push_back(std::move(batch));
  }
  return out;
}

std::vector<PretrainBatch> build_pretrain_epoch(const Corpus& corpus, const MinedDataset& mined,
                                                std::size_t n, std::size_t m, std::uint64_t seed,
                                                std::size_t epoch, NegativeSource source) {
  if (n == 0 || m == 0) throw std::invalid_argument("batching: batch sizes must be positive");
  if (m % n != 0)
    throw std::invalid_argument("batching: candidate count " + std::to_string(m) +
                                " is not a multiple of query count " + std::to_string(n));
  const std::size_t per = m / n - 1;  // negatives per query
  if (mined.empty()) throw std::invalid_argument("batching: mined dataset is empty");
  if (n > mined.size())
    throw std::invalid_argument("batching: batch size exceeds the mined record count");
  if (source == NegativeSource::kMined)
    for (const auto& rec : mined)
      if (rec.neg.size() < per)
        throw std::invalid_argument("batching: record for image " + rec.image_id + " carries " +
                                    std::to_string(rec.neg.size()) + " negatives, batch needs " +
                                    std::to_string(per));

  const std::size_t A = corpus.config.n_aspects;
  const std::size_t n_train_caps = corpus.n_train_images() * A;
  std::vector<std::size_t> order(mined.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng(mix_seed(seed, "pretrain.epoch", epoch)).shuffle(order);

  std::vector<PretrainBatch> out;
  out.reserve(order.size() / n);
  for (std::size_t b = 0; b + n <= order.size(); b += n) {
    PretrainBatch batch;
    batch.layout = block_layout(n, per + 1);
    for (std::size_t q = 0; q < n; ++q) {
      const MinedRecord& rec = mined[order[b + q]];
      std::size_t img = corpus.image_index(rec.image_id);
      std::size_t pos_cap = corpus.caption_index_of(rec.pos);
      batch.queries.push_back(corpus.images[img].tokens);
      batch.query_images.push_back(img);
      batch.candidates.push_back(corpus.captions[pos_cap].tokens);
      batch.candidate_captions.push_back(pos_cap);

      Rng rng(mix_seed(mix_seed(seed, "pretrain.neg", epoch), order[b + q]));
      std::vector<std::size_t> caps;
      if (source == NegativeSource::kMined) {
        std::vector<std::size_t> picks = rng.sample_without_replacement(rec.neg.size(), per);
        for (std::size_t p : picks) caps.push_back(corpus.caption_index_of(rec.neg[p]));
      } else {
        // Uniform over training captions, skipping the positive.
        std::vector<std::size_t> picks = rng.sample_without_replacement(n_train_caps - 1, per);
        for (std::size_t p : picks) caps.push_back(p >= pos_cap ? p + 1 : p);
      }
      for (std::size_t cap : caps) {
        batch.candidates.push_back(corpus.captions[cap].tokens);
        batch.candidate_captions.push_back(cap);
      }
    }
    batch.layout.validate(true);
    out.push_back(std::move(batch));
  }
  return out;
}

std::vector<FinetuneBatch> build_finetune_epoch(const Corpus& corpus, std::size_t images_per_batch,
                                                std::size_t group_size, std::uint64_t seed,
                                                std::size_t epoch) {
  const std::size_t A = corpus.config.n_aspects;
  const std::size_t P = corpus.config.paraphrases_per_aspect;
  if (images_per_batch == 0 || group_size == 0)
    throw std::invalid_argument("batching: batch geometry must be positive");
  if (group_size > A)
    throw std::invalid_argument("batching: group size " + std::to_string(group_size) +
                                " exceeds the " + std::to_string(A) + " aspects per image");
  if (images_per_batch > corpus.n_train_images())
    throw std::invalid_argument("batching: images per batch exceeds the training images");
  if (group_size == 1)
    log_line(LogLevel::kInfo,
             "batching: group size 1 leaves no same-image negatives; instructions carry no "
             "training signal against sibling captions");

  auto order = shuffled_train_images(corpus, mix_seed(seed, "finetune.epoch", epoch));
  std::vector<FinetuneBatch> out;
  out.reserve(order.size() / images_per_batch);
  for (std::size_t b = 0; b + images_per_batch <= order.size(); b += images_per_batch) {
    FinetuneBatch batch;
    batch.layout = block_layout(images_per_batch * group_size, 1);
    for (std::size_t g = 0; g < images_per_batch; ++g) {
      std::size_t img = order[b + g];
      Rng rng(mix_seed(mix_seed(seed, "finetune.pick", epoch), img));
      std::vector<std::size_t> aspects;
      if (group_size == A) {
        aspects.resize(A);
        for (std::size_t a = 0; a < A; ++a) aspects[a] = a;
      } else {
        aspects = rng.sample_without_replacement(A, group_size);
      }
      for (std::size_t a : aspects) {
        std::size_t p = rng.bounded(P - 1);  // training paraphrases only
        const InstructionRec& ins = corpus.instructions[corpus.instruction_index(img, a, p)];
        if (ins.split != "train")
          throw std::logic_error("batching: picked a non-training instruction");
        const TokenSeq& image_tokens = corpus.images[img].tokens;
        std::size_t need = image_tokens.size() + 1 + ins.tokens.size();
        batch.queries.push_back(assemble_query(image_tokens, ins.tokens, need));
        batch.query_images.push_back(img);
        std::size_t cap = corpus.caption_index(img, a);
        batch.candidates.push_back(corpus.captions[cap].tokens);
        batch.candidate_captions.push_back(cap);
      }
    }
    batch.layout.validate(true);
    out.push_back(std::move(batch));
  }
  return out;
}

}  // namespace abc
