#include "abc/mining.hpp"

#include <algorithm>
#include <set>

#include "abc/jsonl.hpp"
#include "abc/objective.hpp"
#include "json.hpp"

namespace abc {

void MiningConfig::validate() const {
  if (!(epsilon >= 0.0 && epsilon <= 1.0))
    throw std::invalid_argument("mining: epsilon must lie in [0, 1]");
  if (k < 1) throw std::invalid_argument("mining: k must be at least 1");
  if (window < k) throw std::invalid_argument("mining: window must be at least k");
}

InsufficientNegativesError::InsufficientNegativesError(std::size_t eligible_,
                                                       std::size_t requested_,
                                                       const std::string& context)
    : std::runtime_error((context.empty() ? std::string() : context + ": ") + "only " +
                         std::to_string(eligible_) + " eligible negatives, need " +
                         std::to_string(requested_)),
      eligible(eligible_),
      requested(requested_) {}

Tensor score_corpus(const EncoderParams& params, bool use_lora, const Corpus& corpus,
                    const std::vector<std::size_t>& image_indices,
                    const std::vector<std::size_t>& caption_indices, std::size_t chunk_size) {
  if (chunk_size == 0) throw std::invalid_argument("score_corpus: chunk_size must be positive");
  for (std::size_t i : image_indices)
    if (i >= corpus.images.size())
      throw std::out_of_range("score_corpus: image index " + std::to_string(i) +
                              " not in corpus");
  for (std::size_t c : caption_indices)
    if (c >= corpus.captions.size())
      throw std::out_of_range("score_corpus: caption index " + std::to_string(c) +
                              " not in corpus");

  const std::size_t n = image_indices.size();
  const std::size_t m = caption_indices.size();
  const std::size_t d = params.config.d_model;
  Tensor cap_emb = Tensor::zeros({m, d});
  for (std::size_t c = 0; c < m; ++c) {
    Tensor e = encode(params, corpus.captions[caption_indices[c]].tokens, use_lora);
    std::copy(e.data.begin(), e.data.end(), cap_emb.data.begin() + static_cast<std::ptrdiff_t>(c * d));
  }

  Tensor out = Tensor::zeros({n, m});
  for (std::size_t row0 = 0; row0 < n; row0 += chunk_size) {
    std::size_t rows = std::min(chunk_size, n - row0);
    Tensor q = Tensor::zeros({rows, d});
    for (std::size_t r = 0; r < rows; ++r) {
      Tensor e = encode(params, corpus.images[image_indices[row0 + r]].tokens, use_lora);
      std::copy(e.data.begin(), e.data.end(), q.data.begin() + static_cast<std::ptrdiff_t>(r * d));
    }
    Tensor s = similarity_matrix(q, cap_emb);
    std::copy(s.data.begin(), s.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(row0 * m));
  }
  return out;
}

std::vector<std::size_t> mine(const std::vector<double>& scores, std::size_t positive,
                              const MiningConfig& config, Rng& rng, bool allow_fewer) {
  config.validate();
  if (positive >= scores.size()) throw std::out_of_range("mine: positive index out of range");
  const double threshold = config.epsilon * scores[positive];

  std::vector<std::size_t> eligible;
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (j != positive && scores[j] <= threshold) eligible.push_back(j);

  if (eligible.size() < config.k && !allow_fewer)
    throw InsufficientNegativesError(eligible.size(), config.k, "");

  // Hardest-first pool: highest score wins, ascending position breaks ties.
  std::sort(eligible.begin(), eligible.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  if (eligible.size() > config.window) eligible.resize(config.window);

  std::size_t k_eff = std::min(config.k, eligible.size());
  std::vector<std::size_t> picks = rng.sample_without_replacement(eligible.size(), k_eff);
  std::vector<std::size_t> out;
  out.reserve(k_eff);
  for (std::size_t p : picks) out.push_back(eligible[p]);
  return out;
}

MinedDataset build_mined_dataset(const EncoderParams& params, bool use_lora, const Corpus& corpus,
                                 const MiningConfig& config, std::size_t chunk_size,
                                 bool allow_fewer) {
  config.validate();
  const std::size_t A = corpus.config.n_aspects;
  const std::size_t n_train = corpus.n_train_images();
  if (n_train == 0) throw std::invalid_argument("mining: corpus has no training images");

  std::vector<std::size_t> image_indices(n_train);
  for (std::size_t i = 0; i < n_train; ++i) image_indices[i] = i;
  std::vector<std::size_t> caption_indices;
  caption_indices.reserve(n_train * A);
  for (std::size_t i = 0; i < n_train; ++i)
    for (std::size_t a = 0; a < A; ++a) caption_indices.push_back(corpus.caption_index(i, a));

  Tensor scores = score_corpus(params, use_lora, corpus, image_indices, caption_indices, chunk_size);

  MinedDataset out;
  out.reserve(n_train);
  for (std::size_t i = 0; i < n_train; ++i) {
    std::size_t aspect = Rng(mix_seed(config.seed, "mine.aspect", i)).bounded(A);
    std::size_t pos_col = i * A + aspect;
    std::vector<double> row(scores.data.begin() + static_cast<std::ptrdiff_t>(i * caption_indices.size()),
                            scores.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * caption_indices.size()));
    Rng rng(mix_seed(config.seed, "mine.neg", i));
    std::vector<std::size_t> negs;
    try {
      negs = mine(row, pos_col, config, rng, allow_fewer);
    } catch (const InsufficientNegativesError& e) {
      throw InsufficientNegativesError(e.eligible, e.requested, "image " + corpus.images[i].id);
    }
    MinedRecord rec;
    rec.image_id = corpus.images[i].id;
    rec.pos = corpus.captions[caption_indices[pos_col]].id;
    rec.pos_score = row[pos_col];
    for (std::size_t j : negs) {
      rec.neg.push_back(corpus.captions[caption_indices[j]].id);
      rec.neg_scores.push_back(row[j]);
    }
    out.push_back(std::move(rec));
  }
  return out;
}

ValidationReport validate_mined(const MinedDataset& dataset, double epsilon) {
  for (const auto& rec : dataset) {
    if (rec.neg.size() != rec.neg_scores.size())
      return {false, "image " + rec.image_id + ": neg/neg_scores length mismatch"};
    std::set<std::string> seen;
    for (std::size_t j = 0; j < rec.neg.size(); ++j) {
      if (rec.neg[j] == rec.pos)
        return {false, "image " + rec.image_id + ": positive listed as negative"};
      if (!seen.insert(rec.neg[j]).second)
        return {false, "image " + rec.image_id + ": duplicate negative " + rec.neg[j]};
      if (!(rec.neg_scores[j] <= epsilon * rec.pos_score))
        return {false, "image " + rec.image_id + ": negative " + rec.neg[j] +
                           " scores above the epsilon threshold"};
    }
  }
  return {};
}

void save_mined(const MinedDataset& dataset, const std::string& path) {
  std::vector<nlohmann::ordered_json> rows;
  rows.reserve(dataset.size());
  for (const auto& rec : dataset)
    rows.push_back({{"image_id", rec.image_id},
                    {"pos", rec.pos},
                    {"neg", rec.neg},
                    {"pos_score", rec.pos_score},
                    {"neg_scores", rec.neg_scores}});
  write_jsonl(path, rows);
}

MinedDataset load_mined(const std::string& path) {
  auto rows = read_jsonl(path);
  MinedDataset out;
  out.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& row = rows[r];
    try {
      MinedRecord rec;
      rec.image_id = row.at("image_id").get<std::string>();
      rec.pos = row.at("pos").get<std::string>();
      rec.neg = row.at("neg").get<std::vector<std::string>>();
      rec.pos_score = row.at("pos_score").get<double>();
      rec.neg_scores = row.at("neg_scores").get<std::vector<double>>();
      out.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path + " line " + std::to_string(r + 1) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace abc
