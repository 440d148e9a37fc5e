// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0
//
// The layered decoder-only stack: bottom speech layers (units -> text-like
// states, read by the CTC head), the core language stack over
// [vision : speech : text], and top speech layers that predict the next unit
// while fusing a window of core text states chosen by the CTC alignment.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tristream/ops.hpp"
#include "tristream/tensor.hpp"
#include "tristream/vocab.hpp"

namespace tristream {

enum class FusionType { Attention, AddInput, AddPerLayer };

const char* to_string(FusionType type);
// Accepts "attention", "add_input", "add_per_layer". Throws ConfigError.
FusionType parse_fusion_type(const std::string& name);

// What the top stack consumes for previously generated units.
enum class TopInput { BottomEncoding, Embedding };

// Fusion window size meaning "every text position so far".
inline constexpr std::int64_t kUnboundedWindow = 0;

struct ModelConfig {
  std::int64_t d_model = 64;
  std::int64_t n_heads = 4;
  std::int64_t ffn_mult = 4;
  std::int64_t n_core_layers = 4;
  std::int64_t n_bottom_layers = 2;
  std::int64_t n_top_layers = 2;
  std::int64_t text_size = 64;
  std::int64_t unit_size = 96;
  FusionType fusion_type = FusionType::Attention;
  std::int64_t fusion_window = 5;  // kUnboundedWindow for W = infinity
  std::int64_t wait_k = 3;
  std::int64_t max_units_per_token = 20;
  std::int64_t vision_feature_dim = 32;
  std::int64_t vision_tokens_per_image = 16;
  TopInput top_input = TopInput::BottomEncoding;
  bool remove_input_blanks = false;
  double rope_base = 10000.0;
  double norm_eps = 1e-6;

  // Throws ConfigError on any violated invariant.
  void validate() const;
  MultimodalVocab vocab() const { return MultimodalVocab(text_size, unit_size); }
  std::int64_t head_dim() const { return d_model / n_heads; }
  // Unit head width: every unit plus the trailing unit-eos symbol.
  std::int64_t unit_classes() const { return unit_size + 1; }
  std::int64_t unit_eos_index() const { return unit_size; }

  // A small configuration for finite-difference checks.
  static ModelConfig tiny();

  bool operator==(const ModelConfig&) const = default;
};

// Inclusive 1-based range of text positions fused for a unit whose
// alignment count is `aligned`. Throws SchedulingError when the range would
// end past `text_len`.
struct WindowRange {
  std::int64_t first = 1;
  std::int64_t last = 1;
  bool operator==(const WindowRange&) const = default;
};
WindowRange fusion_window(std::int64_t aligned, std::int64_t window,
                          std::int64_t text_len);

template <typename T>
struct BlockWeights {
  Tensor<T> attn_norm, wq, wk, wv, wo;
  // Cross-attention fusion (top stack with FusionType::Attention only).
  Tensor<T> fusion_norm, cq, ck, cv, co;
  Tensor<T> ffn_norm, w1, w2;
};

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
struct ModelParams {
  Tensor<T> embed;  // [|V_omni|, d]
  Tensor<T> vision_w1, vision_b1, vision_w2, vision_b2;
  std::vector<BlockWeights<T>> bottom;
  Tensor<T> bottom_norm, ctc_head;  // ctc_head: [d, |V_omni|]
  std::vector<BlockWeights<T>> core;
  Tensor<T> core_norm, text_head;  // text_head: [d, text_size]
  Tensor<T> top_start;             // [1, d], top-stack input before any unit
  std::vector<BlockWeights<T>> top;
  Tensor<T> top_norm, unit_head;  // unit_head: [d, unit_size + 1]

  static ModelParams init(const ModelConfig& config, std::uint64_t seed);

  // Stable, unique names in a fixed order. The tensors are handles onto the
  // live parameters.
  NamedTensors<T> named() const;
  // Expected shapes in the same order as named().
  static std::vector<std::pair<std::string, Shape>> layout(
      const ModelConfig& config);
  // Rebuilds parameters from named tensors; throws DataError on missing,
  // duplicated or misshapen entries.
  static ModelParams from_named(const ModelConfig& config,
                                const NamedTensors<T>& tensors);

  ModelParams clone() const;
  void set_requires_grad(bool flag);
  void zero_grad();
};

template <typename T>
struct LayerCache {
  Tensor<T> k, v;  // rotated keys and values of every processed position
};

// Key/value cache of one stack. `length` is the number of positions
// processed so far.
template <typename T>
struct StackCache {
  std::vector<LayerCache<T>> layers;
  std::size_t length = 0;
};

template <typename T>
struct CoreOutput {
  Tensor<T> hidden;  // normalized core states [L, d]
  Tensor<T> logits;  // text logits [L, text_size]
};

template <typename T>
class Model {
 public:
  Model(ModelConfig config, ModelParams<T> params);

  const ModelConfig& config() const { return config_; }
  const MultimodalVocab& vocab() const { return vocab_; }
  ModelParams<T>& params() { return params_; }
  const ModelParams<T>& params() const { return params_; }

  // H_U for unit ids, normalized output of the bottom stack, [n, d]. With a
  // cache the units continue the cached sequence.
  Tensor<T> bottom_forward(std::span<const TokenId> units,
                           StackCache<T>* cache = nullptr) const;
  // Per-frame CTC logits over the merged vocabulary.
  Tensor<T> ctc_logits(const Tensor<T>& h_units) const;

  // H_V: two-layer perceptron projection of vision features.
  Tensor<T> vision_encode(const Tensor<T>& features) const;

  Tensor<T> embed_tokens(std::span<const TokenId> ids) const;

  // Core stack over context rows (vision, speech, then text embeddings).
  // Logits at every position predict the next text token.
  CoreOutput<T> core_forward(const Tensor<T>& context,
                             StackCache<T>* cache = nullptr) const;

  // Top stack. `inputs` are the rows appended to the top sequence (top_start
  // first, then encodings of generated units); counts[i] is the alignment
  // count N for row i, choosing the text window fused into it. `text` holds
  // the core states of the text generated so far. Returns unit logits
  // [rows, unit_size + 1].
  Tensor<T> top_forward(const Tensor<T>& inputs, const Tensor<T>& text,
                        std::span<const std::int64_t> counts,
                        StackCache<T>* cache = nullptr) const;

  // Top-stack inputs for teacher forcing: [top_start ; encodings of units].
  Tensor<T> top_inputs(const Tensor<T>& unit_encodings) const;
  // Encoding fed to the top stack for the given units (bottom-stack states
  // or raw embeddings, per config).
  Tensor<T> unit_encodings(std::span<const TokenId> units,
                           const Tensor<T>& bottom_states) const;

 private:
  Tensor<T> run_block(const BlockWeights<T>& w, const Tensor<T>& x,
                      LayerCache<T>* cache, std::size_t offset,
                      const Tensor<T>* text, const AttentionMask* window_mask,
                      std::span<const std::size_t> aligned_rows) const;
  Tensor<T> run_stack(const std::vector<BlockWeights<T>>& blocks, Tensor<T> x,
                      StackCache<T>* cache, const Tensor<T>* text = nullptr,
                      const AttentionMask* window_mask = nullptr,
                      std::span<const std::size_t> aligned_rows = {}) const;

  ModelConfig config_;
  MultimodalVocab vocab_;
  ModelParams<T> params_;
};

// Converts parameters between precisions (e.g. float checkpoints into a
// double model).
template <typename To, typename From>
ModelParams<To> cast_params(const ModelConfig& config,
                            const ModelParams<From>& params);

extern template struct ModelParams<float>;
extern template struct ModelParams<double>;
extern template class Model<float>;
extern template class Model<double>;

}  // namespace tristream
