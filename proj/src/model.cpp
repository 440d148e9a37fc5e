// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0

#include "tristream/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "tristream/error.hpp"

namespace tristream {

const char* to_string(FusionType type) {
  switch (type) {
    case FusionType::Attention:
      return "attention";
    case FusionType::AddInput:
      return "add_input";
    case FusionType::AddPerLayer:
      return "add_per_layer";
  }
  return "?";
}

FusionType parse_fusion_type(const std::string& name) {
  if (name == "attention") return FusionType::Attention;
  if (name == "add_input") return FusionType::AddInput;
  if (name == "add_per_layer") return FusionType::AddPerLayer;
  throw ConfigError("unknown fusion type '" + name +
                    "' (expected attention, add_input or add_per_layer)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError(what); };
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
    fail("d_model must be a positive multiple of n_heads");
  if (head_dim() % 2 != 0) fail("head dimension must be even for rotary positions");
  if (ffn_mult < 1) fail("ffn_mult must be >= 1");
  if (n_core_layers < 1 || n_bottom_layers < 1 || n_top_layers < 1)
    fail("every stack needs at least one layer");
  if (fusion_window < 0) fail("fusion window must be >= 1 (or 0 for unbounded)");
  if (wait_k < 1) fail("wait-k lag must be >= 1");
  if (max_units_per_token < 1) fail("max_units_per_token must be >= 1");
  if (vision_feature_dim < 1 || vision_tokens_per_image < 1)
    fail("vision feature block must be non-empty");
  (void)vocab();  // checks text/unit sizes
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.ffn_mult = 2;
  c.n_core_layers = 1;
  c.n_bottom_layers = 1;
  c.n_top_layers = 1;
  c.text_size = 8;
  c.unit_size = 12;
  c.fusion_window = 2;
  c.wait_k = 2;
  c.vision_feature_dim = 4;
  c.vision_tokens_per_image = 2;
  return c;
}

WindowRange fusion_window(std::int64_t aligned, std::int64_t window,
                          std::int64_t text_len) {
  if (aligned < 0) {
    throw SchedulingError("negative alignment count " + std::to_string(aligned));
  }
  if (window < 0) throw ConfigError("fusion window must be >= 0");
  if (aligned + 1 > text_len) {
    throw SchedulingError("fusion window ends at text position " +
                          std::to_string(aligned + 1) + " but only " +
                          std::to_string(text_len) + " exist");
  }
  WindowRange r;
  r.last = aligned + 1;
  r.first = window == kUnboundedWindow ? 1 : std::max<std::int64_t>(1, aligned + 2 - window);
  return r;
}

namespace {

template <typename T, typename ParamsT, typename F>
void visit_blocks(const std::string& prefix, ParamsT& blocks, F&& f) {
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    auto& b = blocks[i];
    const std::string p = prefix + "." + std::to_string(i) + ".";
    f(p + "attn_norm", b.attn_norm);
    f(p + "wq", b.wq);
    f(p + "wk", b.wk);
    f(p + "wv", b.wv);
    f(p + "wo", b.wo);
    if (b.cq.defined()) {
      f(p + "fusion_norm", b.fusion_norm);
      f(p + "cq", b.cq);
      f(p + "ck", b.ck);
      f(p + "cv", b.cv);
      f(p + "co", b.co);
    }
    f(p + "ffn_norm", b.ffn_norm);
    f(p + "w1", b.w1);
    f(p + "w2", b.w2);
  }
}

// Visits every parameter as (name, tensor handle&) in checkpoint order.
template <typename T, typename F>
void visit_params(ModelParams<T>& p, F&& f) {
  f("embed", p.embed);
  f("vision.w1", p.vision_w1);
  f("vision.b1", p.vision_b1);
  f("vision.w2", p.vision_w2);
  f("vision.b2", p.vision_b2);
  visit_blocks<T>("bottom", p.bottom, f);
  f("bottom_norm", p.bottom_norm);
  f("ctc_head", p.ctc_head);
  visit_blocks<T>("core", p.core, f);
  f("core_norm", p.core_norm);
  f("text_head", p.text_head);
  f("top_start", p.top_start);
  visit_blocks<T>("top", p.top, f);
  f("top_norm", p.top_norm);
  f("unit_head", p.unit_head);
}

template <typename T>
ModelParams<T> skeleton(const ModelConfig& c) {
  c.validate();
  const std::size_t d = static_cast<std::size_t>(c.d_model);
  const std::size_t f = d * static_cast<std::size_t>(c.ffn_mult);
  const std::size_t v = static_cast<std::size_t>(c.vocab().total_size());
  auto block = [&](bool fusion) {
    BlockWeights<T> b;
    b.attn_norm = Tensor<T>({d});
    b.wq = Tensor<T>({d, d});
    b.wk = Tensor<T>({d, d});
    b.wv = Tensor<T>({d, d});
    b.wo = Tensor<T>({d, d});
    if (fusion) {
      b.fusion_norm = Tensor<T>({d});
      b.cq = Tensor<T>({d, d});
      b.ck = Tensor<T>({d, d});
      b.cv = Tensor<T>({d, d});
      b.co = Tensor<T>({d, d});
    }
    b.ffn_norm = Tensor<T>({d});
    b.w1 = Tensor<T>({d, f});
    b.w2 = Tensor<T>({f, d});
    return b;
  };
  ModelParams<T> p;
  p.embed = Tensor<T>({v, d});
  const std::size_t vf = static_cast<std::size_t>(c.vision_feature_dim);
  p.vision_w1 = Tensor<T>({vf, d});
  p.vision_b1 = Tensor<T>({d});
  p.vision_w2 = Tensor<T>({d, d});
  p.vision_b2 = Tensor<T>({d});
  for (std::int64_t i = 0; i < c.n_bottom_layers; ++i) p.bottom.push_back(block(false));
  p.bottom_norm = Tensor<T>({d});
  p.ctc_head = Tensor<T>({d, v});
  for (std::int64_t i = 0; i < c.n_core_layers; ++i) p.core.push_back(block(false));
  p.core_norm = Tensor<T>({d});
  p.text_head = Tensor<T>({d, static_cast<std::size_t>(c.text_size)});
  p.top_start = Tensor<T>({1, d});
  const bool attn = c.fusion_type == FusionType::Attention;
  for (std::int64_t i = 0; i < c.n_top_layers; ++i) p.top.push_back(block(attn));
  p.top_norm = Tensor<T>({d});
  p.unit_head = Tensor<T>({d, static_cast<std::size_t>(c.unit_classes())});
  return p;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

template <typename T>
ModelParams<T> ModelParams<T>::init(const ModelConfig& config,
                                    std::uint64_t seed) {
  ModelParams p = skeleton<T>(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  visit_params(p, [&](const std::string& name, Tensor<T>& t) {
    auto data = t.mutable_data();
    if (ends_with(name, "norm")) {
      std::fill(data.begin(), data.end(), T(1));
      return;
    }
    if (name == "vision.b1" || name == "vision.b2") return;  // zeros
    double stddev = 1.0;
    if (t.rank() == 2 && name != "embed" && name != "top_start") {
      stddev = 1.0 / std::sqrt(static_cast<double>(t.dim(0)));
      if (ends_with(name, ".wo") || ends_with(name, ".w2") || ends_with(name, ".co"))
        stddev *= 0.5;
    }
    for (auto& x : data) x = static_cast<T>(normal(rng) * stddev);
  });
  p.set_requires_grad(true);
  return p;
}

template <typename T>
NamedTensors<T> ModelParams<T>::named() const {
  NamedTensors<T> out;
  auto& self = const_cast<ModelParams&>(*this);
  visit_params(self, [&](const std::string& name, Tensor<T>& t) {
    out.emplace_back(name, t);
  });
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Shape>> ModelParams<T>::layout(
    const ModelConfig& config) {
  std::vector<std::pair<std::string, Shape>> out;
  auto p = skeleton<T>(config);
  visit_params(p, [&](const std::string& name, Tensor<T>& t) {
    out.emplace_back(name, t.shape());
  });
  return out;
}

template <typename T>
ModelParams<T> ModelParams<T>::from_named(const ModelConfig& config,
                                          const NamedTensors<T>& tensors) {
  std::map<std::string, Tensor<T>> by_name;
  for (const auto& [name, t] : tensors) {
    if (!by_name.emplace(name, t).second) {
      throw DataError("parameter '" + name + "' appears more than once");
    }
  }
  ModelParams p = skeleton<T>(config);
  visit_params(p, [&](const std::string& name, Tensor<T>& t) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("missing parameter '" + name + "'");
    if (it->second.shape() != t.shape()) {
      throw DataError("parameter '" + name + "' has shape " +
                      shape_string(it->second.shape()) + ", config expects " +
                      shape_string(t.shape()));
    }
    t = it->second;
    by_name.erase(it);
  });
  if (!by_name.empty()) {
    throw DataError("unexpected parameter '" + by_name.begin()->first +
                    "' for this configuration");
  }
  return p;
}

template <typename T>
ModelParams<T> ModelParams<T>::clone() const {
  ModelParams p = *this;
  visit_params(p, [](const std::string&, Tensor<T>& t) {
    t = t.clone(t.requires_grad());
  });
  return p;
}

template <typename T>
void ModelParams<T>::set_requires_grad(bool flag) {
  visit_params(*this, [flag](const std::string&, Tensor<T>& t) {
    t.set_requires_grad(flag);
  });
}

template <typename T>
void ModelParams<T>::zero_grad() {
  visit_params(*this, [](const std::string&, Tensor<T>& t) { t.zero_grad(); });
}

template <typename To, typename From>
ModelParams<To> cast_params(const ModelConfig& config,
                            const ModelParams<From>& params) {
  NamedTensors<To> converted;
  for (const auto& [name, t] : params.named()) {
    std::vector<To> data(t.data().begin(), t.data().end());
    converted.emplace_back(name, Tensor<To>(t.shape(), std::move(data),
                                            t.requires_grad()));
  }
  return ModelParams<To>::from_named(config, converted);
}

template <typename T>
Model<T>::Model(ModelConfig config, ModelParams<T> params)
    : config_(std::move(config)), vocab_(config_.vocab()),
      params_(std::move(params)) {
  config_.validate();
  // Shape check against the configuration.
  (void)ModelParams<T>::from_named(config_, params_.named());
}

template <typename T>
Tensor<T> Model<T>::run_block(const BlockWeights<T>& w, const Tensor<T>& input,
                              LayerCache<T>* cache, std::size_t offset,
                              const Tensor<T>* text,
                              const AttentionMask* window_mask,
                              std::span<const std::size_t> aligned_rows) const {
  const std::size_t n = input.dim(0);
  const auto heads = static_cast<std::size_t>(config_.n_heads);
  const T eps = static_cast<T>(config_.norm_eps);
  const T base = static_cast<T>(config_.rope_base);
  std::vector<std::size_t> pos(n);
  std::iota(pos.begin(), pos.end(), offset);

  auto h = rms_norm(input, w.attn_norm, eps);
  auto q = rope(matmul(h, w.wq), std::span<const std::size_t>(pos), heads, base);
  auto k = rope(matmul(h, w.wk), std::span<const std::size_t>(pos), heads, base);
  auto v = matmul(h, w.wv);
  if (cache) {
    if (cache->k.defined() && cache->k.dim(0) > 0) {
      const Tensor<T> ks[2] = {cache->k, k};
      const Tensor<T> vs[2] = {cache->v, v};
      k = concat_rows(std::span<const Tensor<T>>(ks));
      v = concat_rows(std::span<const Tensor<T>>(vs));
    }
    cache->k = k;
    cache->v = v;
  }
  auto mask = AttentionMask::causal(n, k.dim(0), offset);
  auto x = add(input, matmul(masked_attention(q, k, v, mask, heads), w.wo));

  if (text) {
    if (config_.fusion_type == FusionType::Attention) {
      auto hf = rms_norm(x, w.fusion_norm, eps);
      // queries sit at their aligned text position, so scores see the offset j - N_i
      std::vector<std::size_t> text_pos(text->dim(0));
      std::iota(text_pos.begin(), text_pos.end(), std::size_t{0});
      auto cq = rope(matmul(hf, w.cq), aligned_rows, heads, base);
      auto ck = rope(matmul(*text, w.ck), std::span<const std::size_t>(text_pos), heads, base);
      auto fused = masked_attention(cq, ck, matmul(*text, w.cv), *window_mask, heads);
      x = add(x, matmul(fused, w.co));
    } else if (config_.fusion_type == FusionType::AddPerLayer) {
      x = add(x, gather_rows(*text, aligned_rows));
    }
  }

  auto h2 = rms_norm(x, w.ffn_norm, eps);
  return add(x, matmul(silu(matmul(h2, w.w1)), w.w2));
}

template <typename T>
Tensor<T> Model<T>::run_stack(const std::vector<BlockWeights<T>>& blocks,
                              Tensor<T> x, StackCache<T>* cache,
                              const Tensor<T>* text,
                              const AttentionMask* window_mask,
                              std::span<const std::size_t> aligned_rows) const {
  if (cache && cache->layers.size() != blocks.size()) {
    cache->layers.resize(blocks.size());
  }
  const std::size_t offset = cache ? cache->length : 0;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    x = run_block(blocks[i], x, cache ? &cache->layers[i] : nullptr, offset,
                  text, window_mask, aligned_rows);
  }
  if (cache) cache->length += x.dim(0);
  return x;
}

template <typename T>
Tensor<T> Model<T>::bottom_forward(std::span<const TokenId> units,
                                   StackCache<T>* cache) const {
  for (TokenId id : units) {
    if (!vocab_.is_unit(id)) {
      throw DataError("bottom stack input id " + std::to_string(id) +
                      " is not a speech unit");
    }
  }
  const auto d = static_cast<std::size_t>(config_.d_model);
  if (units.empty()) return Tensor<T>({0, d});
  auto x = embedding(params_.embed, units);
  x = run_stack(params_.bottom, x, cache);
  return rms_norm(x, params_.bottom_norm, static_cast<T>(config_.norm_eps));
}

template <typename T>
Tensor<T> Model<T>::ctc_logits(const Tensor<T>& h_units) const {
  return matmul(h_units, params_.ctc_head);
}

template <typename T>
Tensor<T> Model<T>::vision_encode(const Tensor<T>& features) const {
  const Shape expected{static_cast<std::size_t>(config_.vision_tokens_per_image),
                       static_cast<std::size_t>(config_.vision_feature_dim)};
  if (features.shape() != expected) {
    throw DimensionError("vision features " + shape_string(features.shape()) +
                         " do not match configured " + shape_string(expected));
  }
  auto h = gelu(add_row(matmul(features, params_.vision_w1), params_.vision_b1));
  return add_row(matmul(h, params_.vision_w2), params_.vision_b2);
}

template <typename T>
Tensor<T> Model<T>::embed_tokens(std::span<const TokenId> ids) const {
  const auto d = static_cast<std::size_t>(config_.d_model);
  if (ids.empty()) return Tensor<T>({0, d});
  return embedding(params_.embed, ids);
}

template <typename T>
CoreOutput<T> Model<T>::core_forward(const Tensor<T>& context,
                                     StackCache<T>* cache) const {
  if (context.rank() != 2 || context.dim(0) == 0) {
    throw ConfigError("core stack needs a non-empty context");
  }
  auto x = run_stack(params_.core, context, cache);
  CoreOutput<T> out;
  out.hidden = rms_norm(x, params_.core_norm, static_cast<T>(config_.norm_eps));
  out.logits = matmul(out.hidden, params_.text_head);
  return out;
}

template <typename T>
Tensor<T> Model<T>::top_forward(const Tensor<T>& inputs, const Tensor<T>& text,
                                std::span<const std::int64_t> counts,
                                StackCache<T>* cache) const {
  const std::size_t n = inputs.dim(0);
  if (counts.size() != n) {
    throw DimensionError("top_forward: " + std::to_string(counts.size()) +
                         " alignment counts for " + std::to_string(n) + " rows");
  }
  const auto text_len = static_cast<std::int64_t>(text.rank() == 2 ? text.dim(0) : 0);
  AttentionMask mask(n, static_cast<std::size_t>(text_len));
  std::vector<std::size_t> aligned(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = fusion_window(counts[i], config_.fusion_window, text_len);
    mask.allow_range(i, static_cast<std::size_t>(r.first - 1),
                     static_cast<std::size_t>(r.last));
    aligned[i] = static_cast<std::size_t>(r.last - 1);
  }
  Tensor<T> x = inputs;
  if (config_.fusion_type == FusionType::AddInput) {
    x = add(x, gather_rows(text, std::span<const std::size_t>(aligned)));
  }
  x = run_stack(params_.top, x, cache, &text, &mask,
                std::span<const std::size_t>(aligned));
  auto h = rms_norm(x, params_.top_norm, static_cast<T>(config_.norm_eps));
  return matmul(h, params_.unit_head);
}

template <typename T>
Tensor<T> Model<T>::top_inputs(const Tensor<T>& unit_encodings) const {
  const Tensor<T> parts[2] = {params_.top_start, unit_encodings};
  return concat_rows(std::span<const Tensor<T>>(parts));
}

template <typename T>
Tensor<T> Model<T>::unit_encodings(std::span<const TokenId> units,
                                   const Tensor<T>& bottom_states) const {
  if (config_.top_input == TopInput::Embedding) return embed_tokens(units);
  return bottom_states;
}

template struct ModelParams<float>;
template struct ModelParams<double>;
template class Model<float>;
template class Model<double>;
template ModelParams<float> cast_params(const ModelConfig&, const ModelParams<double>&);
template ModelParams<double> cast_params(const ModelConfig&, const ModelParams<float>&);
template ModelParams<float> cast_params(const ModelConfig&, const ModelParams<float>&);
template ModelParams<double> cast_params(const ModelConfig&, const ModelParams<double>&);

}  // namespace tristream
