#include "abc/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace abc {
namespace {

constexpr char kMagic[4] = {'A', 'B', 'C', 'E'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& os, uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

void write_u64(std::ostream& os, uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

void write_f32(std::ostream& os, float v) { write_u32(os, std::bit_cast<uint32_t>(v)); }

uint32_t read_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw std::runtime_error(std::string("truncated checkpoint while reading ") + what);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

uint64_t read_u64(std::istream& is, const char* what) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8))
    throw std::runtime_error(std::string("truncated checkpoint while reading ") + what);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

void write_record(std::ostream& os, const std::string& name, const Tensor& t) {
  write_u32(os, static_cast<uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_u32(os, static_cast<uint32_t>(t.rank()));
  for (std::size_t dim : t.shape) write_u64(os, dim);
  for (double v : t.data) write_f32(os, static_cast<float>(v));
}

}  // namespace

nlohmann::ordered_json encoder_config_to_json(const EncoderConfig& config) {
  return nlohmann::ordered_json{
      {"vocab_size", config.vocab_size}, {"d_model", config.d_model},
      {"n_layers", config.n_layers},     {"n_heads", config.n_heads},
      {"max_seq", config.max_seq},       {"attn_mode", to_string(config.attn_mode)},
      {"head_hidden", config.head_hidden}};
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.max_seq = j.at("max_seq").get<std::size_t>();
  c.attn_mode = attn_mode_from_string(j.at("attn_mode").get<std::string>());
  c.head_hidden = j.value("head_hidden", static_cast<std::size_t>(0));
  c.validate();
  return c;
}

void save_checkpoint(const std::string& path, const EncoderParams& params, const CheckpointMeta& meta) {
  if (meta.stage != "bootstrap" && meta.stage != "1" && meta.stage != "2")
    throw std::invalid_argument("unknown checkpoint stage '" + meta.stage + "'");

  nlohmann::ordered_json j;
  j["config"] = encoder_config_to_json(params.config);
  j["stage"] = meta.stage;
  j["step"] = meta.step;
  // Records store f32, so quote the temperature a loader will actually see;
  // this keeps save -> load -> save byte-identical.
  j["tau"] = std::exp(static_cast<double>(static_cast<float>(params.tensor("log_tau").at(0))));
  j["seed"] = meta.seed;
  if (params.lora) {
    j["lora"] = {{"rank", params.lora->rank},
                 {"alpha", params.lora->alpha},
                 {"targets", params.lora->targets()}};
  } else {
    j["lora"] = nullptr;
  }
  j["frozen"] = params.frozen;
  const std::string meta_bytes = j.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  os.write(kMagic, 4);
  write_u32(os, kVersion);
  write_u32(os, static_cast<uint32_t>(meta_bytes.size()));
  os.write(meta_bytes.data(), static_cast<std::streamsize>(meta_bytes.size()));
  for (const auto& [name, t] : params.tensors) write_record(os, name, t);
  if (params.lora) {
    for (const auto& [target, pair] : params.lora->pairs) {
      write_record(os, "lora." + target + ".down", pair.down);
      write_record(os, "lora." + target + ".up", pair.up);
    }
  }
  if (!os) throw std::runtime_error("write to '" + path + "' failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != std::string(kMagic, 4))
    throw std::runtime_error("'" + path + "' is not a checkpoint (bad magic)");
  const uint32_t version = read_u32(is, "version");
  if (version != kVersion)
    throw std::runtime_error("checkpoint version " + std::to_string(version) + " unsupported");
  const uint32_t meta_len = read_u32(is, "metadata length");
  std::string meta_bytes(meta_len, '\0');
  if (!is.read(meta_bytes.data(), meta_len))
    throw std::runtime_error("truncated checkpoint while reading metadata");
  const nlohmann::json j = nlohmann::json::parse(meta_bytes);

  Checkpoint ckpt;
  ckpt.params.config = encoder_config_from_json(j.at("config"));
  ckpt.meta.stage = j.at("stage").get<std::string>();
  ckpt.meta.step = j.at("step").get<uint64_t>();
  ckpt.meta.seed = j.at("seed").get<uint64_t>();
  for (const auto& name : j.at("frozen")) ckpt.params.frozen.insert(name.get<std::string>());

  if (!j.at("lora").is_null()) {
    LoraAdapter adapter;
    adapter.rank = j["lora"].at("rank").get<std::size_t>();
    adapter.alpha = j["lora"].at("alpha").get<double>();
    for (const auto& t : j["lora"].at("targets")) adapter.pairs[t.get<std::string>()] = LoraPair{};
    ckpt.params.lora = std::move(adapter);
  }

  while (is.peek() != std::char_traits<char>::eof()) {
    const uint32_t name_len = read_u32(is, "tensor name length");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len))
      throw std::runtime_error("truncated checkpoint while reading a tensor name");
    const uint32_t rank = read_u32(is, "tensor rank");
    std::vector<std::size_t> shape(rank);
    std::size_t numel = 1;
    for (uint32_t i = 0; i < rank; ++i) {
      shape[i] = static_cast<std::size_t>(read_u64(is, "tensor dimension"));
      numel *= shape[i];
    }
    Tensor t = Tensor::zeros(shape);
    for (std::size_t i = 0; i < numel; ++i)
      t.data[i] = static_cast<double>(std::bit_cast<float>(read_u32(is, "tensor data")));

    if (name.rfind("lora.", 0) == 0) {
      const bool is_down = name.size() > 5 && name.rfind(".down") == name.size() - 5;
      const bool is_up = name.size() > 3 && name.rfind(".up") == name.size() - 3;
      if (!ckpt.params.lora || (!is_down && !is_up))
        throw std::runtime_error("checkpoint has stray adapter tensor '" + name + "'");
      const std::string target = name.substr(5, name.size() - 5 - (is_down ? 5 : 3));
      auto it = ckpt.params.lora->pairs.find(target);
      if (it == ckpt.params.lora->pairs.end())
        throw std::runtime_error("checkpoint adapter tensor '" + name + "' has no declared target");
      (is_down ? it->second.down : it->second.up) = std::move(t);
    } else {
      ckpt.params.tensors[name] = std::move(t);
    }
  }

  for (const std::string& name : base_tensor_names(ckpt.params.config))
    if (!ckpt.params.tensors.count(name))
      throw std::runtime_error("checkpoint is missing tensor '" + name + "'");
  if (ckpt.params.lora) {
    for (const auto& [target, pair] : ckpt.params.lora->pairs)
      if (pair.down.numel() == 0 || pair.up.numel() == 0)
        throw std::runtime_error("checkpoint adapter target '" + target + "' has missing tensors");
  }
  return ckpt;
}

}  // namespace abc
