#include "abc/corpus.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <unordered_map>

#include "abc/jsonl.hpp"
#include "abc/rng.hpp"
#include "json.hpp"

namespace abc {

namespace {

std::string padded_id(const char* prefix, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%06zu", prefix, index);
  return std::string(buf);
}

}  // namespace

std::string image_id(std::size_t index) { return padded_id("img", index); }
std::string caption_id(std::size_t index) { return padded_id("cap", index); }
std::string instruction_id(std::size_t index) { return padded_id("ins", index); }

void WorldConfig::validate() const {
  if (n_images == 0) throw std::invalid_argument("world: n_images must be positive");
  if (n_aspects < 2) throw std::invalid_argument("world: n_aspects must be at least 2");
  if (paraphrases_per_aspect < 2)
    throw std::invalid_argument("world: paraphrases_per_aspect must be at least 2 (one is held out)");
  if (n_bench_images > n_images)
    throw std::invalid_argument("world: n_bench_images exceeds n_images");
  if (values() < n_images)
    throw std::invalid_argument(
        "world: vocabulary too small to deduplicate captions; need at least one distinct "
        "value per image per aspect (values_per_aspect >= n_images)");
}

std::int32_t VocabLayout::marker(std::size_t aspect) const {
  return marker_begin + static_cast<std::int32_t>(aspect);
}

std::int32_t VocabLayout::prefix(std::size_t aspect, std::size_t paraphrase, std::size_t j) const {
  std::size_t per_aspect = kPrefixLen * n_paraphrases;
  return prefix_begin + static_cast<std::int32_t>(aspect * per_aspect + paraphrase * kPrefixLen + j);
}

std::int32_t VocabLayout::value_symbol(std::size_t aspect, std::size_t symbol) const {
  return value_begin + static_cast<std::int32_t>(aspect * value_alphabet + symbol);
}

VocabLayout vocab_layout(const WorldConfig& config) {
  config.validate();
  VocabLayout out;
  // Alphabet sized so the tuple space is at least 4x oversubscribed; keeps the
  // rejection sampler for distinct value tuples fast.
  std::size_t s = 2;
  while (s * s < 4 * config.values()) ++s;
  out.value_alphabet = s;
  out.n_paraphrases = config.paraphrases_per_aspect;

  std::int32_t next = kNumReservedIds;
  out.template_token = next++;
  out.noise_begin = next;
  out.noise_count = kNoiseAlphabet;
  next += static_cast<std::int32_t>(kNoiseAlphabet);
  out.marker_begin = next;
  next += static_cast<std::int32_t>(config.n_aspects);
  out.prefix_begin = next;
  next += static_cast<std::int32_t>(config.n_aspects * config.paraphrases_per_aspect * kPrefixLen);
  out.value_begin = next;
  next += static_cast<std::int32_t>(config.n_aspects * s);
  out.vocab_size = static_cast<std::size_t>(next);
  return out;
}

std::size_t Corpus::caption_index(std::size_t image, std::size_t aspect) const {
  return image * config.n_aspects + aspect;
}

std::size_t Corpus::instruction_index(std::size_t image, std::size_t aspect,
                                      std::size_t paraphrase) const {
  return (image * config.n_aspects + aspect) * config.paraphrases_per_aspect + paraphrase;
}

std::size_t Corpus::image_index(const std::string& id) const {
  for (std::size_t i = 0; i < images.size(); ++i)
    if (images[i].id == id) return i;
  throw std::out_of_range("unknown image id '" + id + "'");
}

std::size_t Corpus::caption_index_of(const std::string& id) const {
  for (std::size_t c = 0; c < captions.size(); ++c)
    if (captions[c].id == id) return c;
  throw std::out_of_range("unknown caption id '" + id + "'");
}

std::size_t Corpus::max_query_len() const {
  std::size_t max_img = 0, max_ins = 0;
  for (const auto& im : images) max_img = std::max(max_img, im.tokens.size());
  for (const auto& in : instructions) max_ins = std::max(max_ins, in.tokens.size());
  return max_img + 1 + max_ins;
}

Corpus generate_world(const WorldConfig& config) {
  config.validate();
  Corpus corpus;
  corpus.config = config;
  corpus.layout = vocab_layout(config);
  const VocabLayout& L = corpus.layout;
  const std::size_t A = config.n_aspects;
  const std::size_t P = config.paraphrases_per_aspect;
  const std::size_t V = config.values();

  // Distinct value tuples per aspect, then a distinct tuple per image. Both
  // steps are what keep captions globally unique. Tuples are canonicalized to
  // sorted order so no two values of an aspect are permutations of each other:
  // captions then stay distinguishable even for an order-blind encoder.
  std::vector<std::vector<std::array<std::int32_t, kValueLen>>> values(A);
  for (std::size_t a = 0; a < A; ++a) {
    Rng rng(mix_seed(config.seed, "world.values", a));
    std::set<std::uint64_t> seen;
    std::size_t attempts = 0;
    while (values[a].size() < V) {
      if (++attempts > 100 * V + 1000)
        throw std::runtime_error("world: value sampling stalled; alphabet too small");
      std::array<std::int32_t, kValueLen> tuple{};
      for (std::size_t j = 0; j < kValueLen; ++j)
        tuple[j] = L.value_symbol(a, rng.bounded(L.value_alphabet));
      std::sort(tuple.begin(), tuple.end());
      std::uint64_t key = 0;
      for (std::int32_t tok : tuple)
        key = key * L.value_alphabet + static_cast<std::uint64_t>(tok);
      if (seen.insert(key).second) values[a].push_back(tuple);
    }
  }

  std::vector<std::vector<std::size_t>> assignment(A);
  for (std::size_t a = 0; a < A; ++a) {
    Rng rng(mix_seed(config.seed, "world.assign", a));
    assignment[a] = rng.sample_without_replacement(V, config.n_images);
  }

  corpus.images.reserve(config.n_images);
  corpus.captions.reserve(config.n_images * A);
  corpus.instructions.reserve(config.n_images * A * P);
  for (std::size_t i = 0; i < config.n_images; ++i) {
    TokenSeq tokens;
    for (std::size_t a = 0; a < A; ++a)
      for (std::size_t j = 0; j < kValueLen; ++j)
        tokens.push_back(values[a][assignment[a][i]][j]);
    Rng rng(mix_seed(config.seed, "world.image", i));
    for (std::size_t t = 0; t < config.noise_tokens_per_image; ++t) {
      std::size_t pos = rng.bounded(tokens.size() + 1);
      std::int32_t tok = L.noise_begin + static_cast<std::int32_t>(rng.bounded(L.noise_count));
      tokens.insert(tokens.begin() + static_cast<std::ptrdiff_t>(pos), tok);
    }
    corpus.images.push_back({image_id(i), std::move(tokens)});

    bool bench = i >= config.n_images - config.n_bench_images;
    for (std::size_t a = 0; a < A; ++a) {
      TokenSeq cap;
      cap.push_back(L.marker(a));
      for (std::size_t j = 0; j < kValueLen; ++j) cap.push_back(values[a][assignment[a][i]][j]);
      corpus.captions.push_back({caption_id(i * A + a), i, a, std::move(cap)});

      for (std::size_t p = 0; p < P; ++p) {
        TokenSeq ins;
        for (std::size_t j = 0; j < kPrefixLen; ++j) ins.push_back(L.prefix(a, p, j));
        ins.push_back(L.marker(a));
        std::string split = bench ? "bench" : (p + 1 == P ? "held-out-paraphrase" : "train");
        corpus.instructions.push_back(
            {instruction_id((i * A + a) * P + p), i, a, p, std::move(ins), std::move(split)});
      }
    }
  }
  return corpus;
}

std::vector<BenchRecord> generate_ctrlbench(const Corpus& corpus, std::size_t n_bench_images) {
  if (n_bench_images == 0) throw std::invalid_argument("ctrlbench: n_bench_images must be positive");
  if (n_bench_images > corpus.config.n_bench_images)
    throw std::invalid_argument(
        "ctrlbench: corpus reserves " + std::to_string(corpus.config.n_bench_images) +
        " bench images, requested " + std::to_string(n_bench_images));
  const std::size_t A = corpus.config.n_aspects;
  const std::size_t P = corpus.config.paraphrases_per_aspect;
  std::vector<BenchRecord> out;
  out.reserve(n_bench_images * A);
  for (std::size_t i = corpus.images.size() - n_bench_images; i < corpus.images.size(); ++i) {
    if (!corpus.in_bench(i)) throw std::logic_error("ctrlbench: image overlaps the training split");
    for (std::size_t a = 0; a < A; ++a) {
      const auto& ins = corpus.instructions[corpus.instruction_index(i, a, P - 1)];
      if (ins.split != "bench") throw std::logic_error("ctrlbench: instruction not in bench split");
      out.push_back({corpus.images[i].id, ins.id, corpus.captions[corpus.caption_index(i, a)].id});
    }
  }
  return out;
}

namespace {

ValidationReport fail(std::string why) { return {false, std::move(why)}; }

int token_block(const VocabLayout& L, const WorldConfig& cfg, std::int32_t tok,
                std::size_t* aspect_out) {
  // 0 reserved, 1 template, 2 noise, 3 marker, 4 prefix, 5 value, -1 out of range
  if (tok < 0 || static_cast<std::size_t>(tok) >= L.vocab_size) return -1;
  if (tok < kNumReservedIds) return 0;
  if (tok == L.template_token) return 1;
  if (tok >= L.noise_begin && tok < L.noise_begin + static_cast<std::int32_t>(L.noise_count)) return 2;
  if (tok >= L.marker_begin && tok < L.marker_begin + static_cast<std::int32_t>(cfg.n_aspects)) {
    *aspect_out = static_cast<std::size_t>(tok - L.marker_begin);
    return 3;
  }
  if (tok >= L.prefix_begin && tok < L.value_begin) {
    *aspect_out = static_cast<std::size_t>(tok - L.prefix_begin) /
                  (kPrefixLen * cfg.paraphrases_per_aspect);
    return 4;
  }
  *aspect_out = static_cast<std::size_t>(tok - L.value_begin) / L.value_alphabet;
  return 5;
}

}  // namespace

ValidationReport validate_corpus(const Corpus& corpus) {
  const WorldConfig& cfg = corpus.config;
  const VocabLayout& L = corpus.layout;
  try {
    cfg.validate();
  } catch (const std::exception& e) {
    return fail(std::string("config: ") + e.what());
  }
  const std::size_t A = cfg.n_aspects;
  const std::size_t P = cfg.paraphrases_per_aspect;
  if (corpus.images.size() != cfg.n_images)
    return fail("expected " + std::to_string(cfg.n_images) + " images, found " +
                std::to_string(corpus.images.size()));
  if (corpus.captions.size() != cfg.n_images * A)
    return fail("expected " + std::to_string(cfg.n_images * A) + " captions, found " +
                std::to_string(corpus.captions.size()));
  if (corpus.instructions.size() != cfg.n_images * A * P)
    return fail("expected " + std::to_string(cfg.n_images * A * P) + " instructions, found " +
                std::to_string(corpus.instructions.size()));

  std::set<TokenSeq> caption_texts;
  for (std::size_t i = 0; i < cfg.n_images; ++i) {
    const TokenSeq& img = corpus.images[i].tokens;
    for (std::int32_t tok : img) {
      std::size_t aspect = 0;
      int block = token_block(L, cfg, tok, &aspect);
      if (block != 2 && block != 5)
        return fail("image " + corpus.images[i].id + ": token " + std::to_string(tok) +
                    " is neither noise nor an aspect value");
    }
    for (std::size_t a = 0; a < A; ++a) {
      const CaptionRec& cap = corpus.captions[corpus.caption_index(i, a)];
      if (cap.image != i || cap.aspect != a)
        return fail("caption " + cap.id + ": stored under wrong (image, aspect) slot");
      if (cap.tokens.size() != 1 + kValueLen)
        return fail("caption " + cap.id + ": expected " + std::to_string(1 + kValueLen) +
                    " tokens");
      if (cap.tokens[0] != L.marker(a))
        return fail("caption " + cap.id + ": missing aspect marker");
      // Value tokens must come from this aspect's block and match the image's
      // value for the aspect exactly (the world is noiseless per aspect).
      TokenSeq from_image;
      for (std::int32_t tok : img) {
        std::size_t aspect = 0;
        if (token_block(L, cfg, tok, &aspect) == 5 && aspect == a) from_image.push_back(tok);
      }
      TokenSeq cap_value(cap.tokens.begin() + 1, cap.tokens.end());
      for (std::int32_t tok : cap_value) {
        std::size_t aspect = 0;
        if (token_block(L, cfg, tok, &aspect) != 5 || aspect != a)
          return fail("caption " + cap.id + ": value token outside its aspect alphabet");
      }
      if (from_image != cap_value)
        return fail("caption " + cap.id + ": value tokens do not match its image");
      if (!caption_texts.insert(cap.tokens).second)
        return fail("caption " + cap.id + ": duplicate caption text");

      for (std::size_t p = 0; p < P; ++p) {
        const InstructionRec& ins = corpus.instructions[corpus.instruction_index(i, a, p)];
        if (ins.image != i || ins.aspect != a || ins.paraphrase != p)
          return fail("instruction " + ins.id + ": stored under wrong slot");
        if (ins.tokens.size() != kPrefixLen + 1)
          return fail("instruction " + ins.id + ": expected " + std::to_string(kPrefixLen + 1) +
                      " tokens");
        for (std::size_t j = 0; j < kPrefixLen; ++j)
          if (ins.tokens[j] != L.prefix(a, p, j))
            return fail("instruction " + ins.id + ": prefix tokens do not match (aspect, paraphrase)");
        if (ins.tokens[kPrefixLen] != L.marker(a))
          return fail("instruction " + ins.id + ": missing aspect marker");
        std::string expect = corpus.in_bench(i)
                                 ? "bench"
                                 : (p + 1 == P ? "held-out-paraphrase" : "train");
        if (ins.split != expect)
          return fail("instruction " + ins.id + ": split '" + ins.split + "', expected '" +
                      expect + "'");
      }
    }
  }
  return {};
}

void save_corpus(const Corpus& corpus, const std::string& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json world;
  world["n_images"] = corpus.config.n_images;
  world["n_aspects"] = corpus.config.n_aspects;
  world["values_per_aspect"] = corpus.config.values_per_aspect;
  world["paraphrases_per_aspect"] = corpus.config.paraphrases_per_aspect;
  world["noise_tokens_per_image"] = corpus.config.noise_tokens_per_image;
  world["n_bench_images"] = corpus.config.n_bench_images;
  world["seed"] = corpus.config.seed;
  world["vocab_size"] = corpus.layout.vocab_size;
  world["max_query_len"] = corpus.max_query_len();
  {
    std::ofstream os(dir + "/world.json", std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + dir + "/world.json' for writing");
    os << world.dump(2) << '\n';
  }

  std::vector<nlohmann::ordered_json> rows;
  rows.reserve(corpus.images.size());
  for (const auto& im : corpus.images) rows.push_back({{"id", im.id}, {"tokens", im.tokens}});
  write_jsonl(dir + "/images.jsonl", rows);

  rows.clear();
  for (const auto& cap : corpus.captions)
    rows.push_back({{"id", cap.id},
                    {"image_id", corpus.images[cap.image].id},
                    {"aspect", cap.aspect},
                    {"tokens", cap.tokens}});
  write_jsonl(dir + "/captions.jsonl", rows);

  rows.clear();
  for (const auto& ins : corpus.instructions)
    rows.push_back({{"id", ins.id},
                    {"image_id", corpus.images[ins.image].id},
                    {"aspect", ins.aspect},
                    {"paraphrase", ins.paraphrase},
                    {"tokens", ins.tokens},
                    {"split", ins.split}});
  write_jsonl(dir + "/instructions.jsonl", rows);
}

namespace {

TokenSeq tokens_from_json(const nlohmann::json& j, const std::string& where) {
  if (!j.is_array()) throw std::runtime_error(where + ": 'tokens' must be an array");
  TokenSeq out;
  out.reserve(j.size());
  for (const auto& v : j) out.push_back(v.get<std::int32_t>());
  return out;
}

}  // namespace

Corpus load_corpus(const std::string& dir) {
  std::ifstream is(dir + "/world.json");
  if (!is) throw std::runtime_error("cannot open '" + dir + "/world.json'");
  nlohmann::json world = nlohmann::json::parse(is);
  Corpus corpus;
  corpus.config.n_images = world.at("n_images").get<std::size_t>();
  corpus.config.n_aspects = world.at("n_aspects").get<std::size_t>();
  corpus.config.values_per_aspect = world.at("values_per_aspect").get<std::size_t>();
  corpus.config.paraphrases_per_aspect = world.at("paraphrases_per_aspect").get<std::size_t>();
  corpus.config.noise_tokens_per_image = world.at("noise_tokens_per_image").get<std::size_t>();
  corpus.config.n_bench_images = world.at("n_bench_images").get<std::size_t>();
  corpus.config.seed = world.at("seed").get<std::uint64_t>();
  corpus.config.validate();
  corpus.layout = vocab_layout(corpus.config);
  const std::size_t A = corpus.config.n_aspects;
  const std::size_t P = corpus.config.paraphrases_per_aspect;

  auto image_rows = read_jsonl(dir + "/images.jsonl");
  std::unordered_map<std::string, std::size_t> image_by_id;
  corpus.images.resize(image_rows.size());
  for (std::size_t r = 0; r < image_rows.size(); ++r) {
    const auto& row = image_rows[r];
    std::string where = dir + "/images.jsonl line " + std::to_string(r + 1);
    ImageRec rec;
    rec.id = row.at("id").get<std::string>();
    rec.tokens = tokens_from_json(row.at("tokens"), where);
    if (!image_by_id.emplace(rec.id, r).second)
      throw std::runtime_error(where + ": duplicate image id '" + rec.id + "'");
    corpus.images[r] = std::move(rec);
  }

  auto caption_rows = read_jsonl(dir + "/captions.jsonl");
  corpus.captions.resize(caption_rows.size());
  std::vector<bool> cap_seen(caption_rows.size(), false);
  for (std::size_t r = 0; r < caption_rows.size(); ++r) {
    const auto& row = caption_rows[r];
    std::string where = dir + "/captions.jsonl line " + std::to_string(r + 1);
    CaptionRec rec;
    rec.id = row.at("id").get<std::string>();
    auto it = image_by_id.find(row.at("image_id").get<std::string>());
    if (it == image_by_id.end())
      throw std::runtime_error(where + ": unknown image id");
    rec.image = it->second;
    rec.aspect = row.at("aspect").get<std::size_t>();
    if (rec.aspect >= A) throw std::runtime_error(where + ": aspect out of range");
    rec.tokens = tokens_from_json(row.at("tokens"), where);
    std::size_t slot = rec.image * A + rec.aspect;
    if (slot >= corpus.captions.size() || cap_seen[slot])
      throw std::runtime_error(where + ": duplicate or out-of-range (image, aspect)");
    cap_seen[slot] = true;
    corpus.captions[slot] = std::move(rec);
  }

  auto ins_rows = read_jsonl(dir + "/instructions.jsonl");
  corpus.instructions.resize(ins_rows.size());
  std::vector<bool> ins_seen(ins_rows.size(), false);
  for (std::size_t r = 0; r < ins_rows.size(); ++r) {
    const auto& row = ins_rows[r];
    std::string where = dir + "/instructions.jsonl line " + std::to_string(r + 1);
    InstructionRec rec;
    rec.id = row.at("id").get<std::string>();
    auto it = image_by_id.find(row.at("image_id").get<std::string>());
    if (it == image_by_id.end())
      throw std::runtime_error(where + ": unknown image id");
    rec.image = it->second;
    rec.aspect = row.at("aspect").get<std::size_t>();
    rec.paraphrase = row.at("paraphrase").get<std::size_t>();
    if (rec.aspect >= A || rec.paraphrase >= P)
      throw std::runtime_error(where + ": aspect or paraphrase out of range");
    rec.tokens = tokens_from_json(row.at("tokens"), where);
    rec.split = row.at("split").get<std::string>();
    if (rec.split != "train" && rec.split != "bench" && rec.split != "held-out-paraphrase")
      throw std::runtime_error(where + ": unknown split '" + rec.split + "'");
    std::size_t slot = (rec.image * A + rec.aspect) * P + rec.paraphrase;
    if (slot >= corpus.instructions.size() || ins_seen[slot])
      throw std::runtime_error(where + ": duplicate or out-of-range (image, aspect, paraphrase)");
    ins_seen[slot] = true;
    corpus.instructions[slot] = std::move(rec);
  }
  return corpus;
}

void save_ctrlbench(const std::vector<BenchRecord>& records, const std::string& path) {
  std::vector<nlohmann::ordered_json> rows;
  rows.reserve(records.size());
  for (const auto& rec : records)
    rows.push_back({{"image_id", rec.image_id},
                    {"instruction_id", rec.instruction_id},
                    {"positive_caption_id", rec.positive_caption_id}});
  write_jsonl(path, rows);
}

std::vector<BenchRecord> load_ctrlbench(const std::string& path) {
  auto rows = read_jsonl(path);
  std::vector<BenchRecord> out;
  out.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& row = rows[r];
    try {
      out.push_back({row.at("image_id").get<std::string>(),
                     row.at("instruction_id").get<std::string>(),
                     row.at("positive_caption_id").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path + " line " + std::to_string(r + 1) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace abc
