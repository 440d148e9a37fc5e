// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0

#include "tristream/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"
#include "tristream/error.hpp"

namespace tristream {

using json = nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little);

namespace {

constexpr char kMagic[5] = {'S', 'O', 'M', 'N', 'I'};

const char* top_input_name(TopInput t) {
  return t == TopInput::BottomEncoding ? "bottom_encoding" : "embedding";
}

TopInput parse_top_input(const std::string& s) {
  if (s == "bottom_encoding") return TopInput::BottomEncoding;
  if (s == "embedding") return TopInput::Embedding;
  throw DataError("unknown top_input '" + s + "'");
}

class Writer {
 public:
  template <typename U>
  void put(U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(U));
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}
  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, data_ + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  const std::uint8_t* take(std::size_t n) {
    need(n);
    const auto* p = data_ + pos_;
    pos_ += n;
    return p;
  }
  std::size_t remaining() const { return size_ - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > size_ - pos_) throw DataError("checkpoint is truncated");
  }
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t size) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_to_json(const ModelConfig& c) {
  json j;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["ffn_mult"] = c.ffn_mult;
  j["n_core_layers"] = c.n_core_layers;
  j["n_bottom_layers"] = c.n_bottom_layers;
  j["n_top_layers"] = c.n_top_layers;
  j["text_size"] = c.text_size;
  j["unit_size"] = c.unit_size;
  j["fusion_type"] = to_string(c.fusion_type);
  j["fusion_window"] = c.fusion_window;
  j["wait_k"] = c.wait_k;
  j["max_units_per_token"] = c.max_units_per_token;
  j["vision_feature_dim"] = c.vision_feature_dim;
  j["vision_tokens_per_image"] = c.vision_tokens_per_image;
  j["top_input"] = top_input_name(c.top_input);
  j["remove_input_blanks"] = c.remove_input_blanks;
  j["rope_base"] = c.rope_base;
  j["norm_eps"] = c.norm_eps;
  return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
  ModelConfig c;
  try {
    const auto j = json::parse(text);
    c.d_model = j.at("d_model");
    c.n_heads = j.at("n_heads");
    c.ffn_mult = j.at("ffn_mult");
    c.n_core_layers = j.at("n_core_layers");
    c.n_bottom_layers = j.at("n_bottom_layers");
    c.n_top_layers = j.at("n_top_layers");
    c.text_size = j.at("text_size");
    c.unit_size = j.at("unit_size");
    c.fusion_type = parse_fusion_type(j.at("fusion_type").get<std::string>());
    c.fusion_window = j.at("fusion_window");
    c.wait_k = j.at("wait_k");
    c.max_units_per_token = j.at("max_units_per_token");
    c.vision_feature_dim = j.at("vision_feature_dim");
    c.vision_tokens_per_image = j.at("vision_tokens_per_image");
    c.top_input = parse_top_input(j.at("top_input").get<std::string>());
    c.remove_input_blanks = j.at("remove_input_blanks");
    c.rope_base = j.at("rope_base");
    c.norm_eps = j.at("norm_eps");
    c.validate();
  } catch (const json::exception& e) {
    throw DataError(std::string("bad model config block: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("bad model config block: ") + e.what());
  }
  return c;
}

bool same_architecture(const ModelConfig& a, const ModelConfig& b) {
  return a.d_model == b.d_model && a.n_heads == b.n_heads && a.ffn_mult == b.ffn_mult &&
         a.n_core_layers == b.n_core_layers && a.n_bottom_layers == b.n_bottom_layers &&
         a.n_top_layers == b.n_top_layers && a.text_size == b.text_size &&
         a.unit_size == b.unit_size && a.fusion_type == b.fusion_type &&
         a.vision_feature_dim == b.vision_feature_dim &&
         a.vision_tokens_per_image == b.vision_tokens_per_image &&
         a.top_input == b.top_input && a.remove_input_blanks == b.remove_input_blanks &&
         a.rope_base == b.rope_base && a.norm_eps == b.norm_eps;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes.insert(w.bytes.end(), std::begin(kMagic), std::end(kMagic));
  w.put(kCheckpointVersion);
  w.put(ckpt.stage);
  w.put_string(config_to_json(ckpt.config));
  w.put(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    w.put_string(name);
    w.put(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.put(static_cast<std::uint64_t>(d));
  }
  for (const auto& [name, t] : ckpt.tensors) {
    const auto data = t.data();
    const auto* p = reinterpret_cast<const std::uint8_t*>(data.data());
    w.bytes.insert(w.bytes.end(), p, p + data.size() * sizeof(float));
  }
  w.put(fnv1a64(w.bytes.data(), w.bytes.size()));
  return std::move(w.bytes);
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < sizeof(kMagic) + sizeof(std::uint64_t) ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw DataError("not a checkpoint (bad magic)");
  }
  const std::size_t body = bytes.size() - sizeof(std::uint64_t);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body, sizeof stored);
  if (stored != fnv1a64(bytes.data(), body)) {
    throw DataError("checkpoint checksum mismatch (file corrupt or truncated)");
  }
  Reader r(bytes.data() + sizeof(kMagic), body - sizeof(kMagic));
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.stage = r.get<std::uint32_t>();
  ckpt.config = config_from_json(r.get_string());
  const auto count = r.get<std::uint32_t>();
  std::vector<std::pair<std::string, Shape>> dir;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.get_string();
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw DataError("tensor '" + name + "' has implausible rank");
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k)
      shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    dir.emplace_back(std::move(name), std::move(shape));
  }
  for (auto& [name, shape] : dir) {
    const std::size_t n = shape_numel(shape);
    if (n > r.remaining() / sizeof(float)) throw DataError("checkpoint payload is truncated");
    const auto* p = r.take(n * sizeof(float));
    std::vector<float> data(n);
    std::memcpy(data.data(), p, n * sizeof(float));
    ckpt.tensors.emplace_back(name, Tensor<float>(shape, std::move(data)));
  }
  if (r.remaining() != 0) throw DataError("trailing bytes after checkpoint payload");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

template <typename T>
Checkpoint make_checkpoint(const ModelConfig& config, const ModelParams<T>& params,
                           std::uint32_t stage) {
  Checkpoint ckpt{config, stage, {}};
  for (const auto& [name, t] : params.named()) {
    std::vector<float> data(t.data().begin(), t.data().end());
    ckpt.tensors.emplace_back(name, Tensor<float>(t.shape(), std::move(data)));
  }
  return ckpt;
}

template <typename T>
ModelParams<T> checkpoint_params(const Checkpoint& ckpt, const ModelConfig& config) {
  if (!same_architecture(ckpt.config, config)) {
    throw DataError("checkpoint architecture " + config_to_json(ckpt.config) +
                    " does not match requested " + config_to_json(config));
  }
  auto stored = ModelParams<float>::from_named(config, ckpt.tensors);
  return cast_params<T, float>(config, stored);
}

template <typename T>
ModelParams<T> transplant_params(const Checkpoint& ckpt, const ModelConfig& config,
                                 const std::vector<std::string>& fresh, std::uint64_t seed) {
  auto params = ModelParams<T>::init(config, seed);
  for (auto& [name, t] : params.named()) {
    if (std::any_of(fresh.begin(), fresh.end(),
                    [&](const std::string& p) { return name.rfind(p, 0) == 0; }))
      continue;
    auto it = std::find_if(ckpt.tensors.begin(), ckpt.tensors.end(),
                           [&](const auto& e) { return e.first == name; });
    if (it == ckpt.tensors.end()) {
      throw DataError("checkpoint has no tensor '" + name + "'");
    }
    if (it->second.shape() != t.shape()) {
      throw DataError("checkpoint tensor '" + name + "' is " +
                      shape_string(it->second.shape()) + ", expected " +
                      shape_string(t.shape()));
    }
    auto src = it->second.data();
    auto dst = t.mutable_data();
    std::transform(src.begin(), src.end(), dst.begin(),
                   [](float x) { return static_cast<T>(x); });
  }
  return params;
}

template ModelParams<float> transplant_params(const Checkpoint&, const ModelConfig&,
                                              const std::vector<std::string>&,
                                              std::uint64_t);
template ModelParams<double> transplant_params(const Checkpoint&, const ModelConfig&,
                                               const std::vector<std::string>&,
                                               std::uint64_t);

template Checkpoint make_checkpoint(const ModelConfig&, const ModelParams<float>&,
                                    std::uint32_t);
template Checkpoint make_checkpoint(const ModelConfig&, const ModelParams<double>&,
                                    std::uint32_t);
template ModelParams<float> checkpoint_params(const Checkpoint&, const ModelConfig&);
template ModelParams<double> checkpoint_params(const Checkpoint&, const ModelConfig&);

}  // namespace tristream
