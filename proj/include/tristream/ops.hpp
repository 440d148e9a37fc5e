// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable ops over Tensor. Matrices are row-major rank-2 tensors;
// vectors used as per-column parameters (norm scales, biases) may be rank 1.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "tristream/tensor.hpp"

namespace tristream {

// Boolean attention pattern: allowed(q, k) says whether query row q may read
// key row k.
class AttentionMask {
 public:
  AttentionMask() = default;
  AttentionMask(std::size_t queries, std::size_t keys, bool fill = false);

  // Query i sits at absolute position offset + i and may read keys [0, offset+i].
  static AttentionMask causal(std::size_t queries, std::size_t keys,
                              std::size_t offset = 0);

  std::size_t queries() const { return queries_; }
  std::size_t keys() const { return keys_; }
  bool allowed(std::size_t q, std::size_t k) const {
    return bits_[q * keys_ + k] != 0;
  }
  void set(std::size_t q, std::size_t k, bool value = true) {
    bits_[q * keys_ + k] = value ? 1 : 0;
  }
  // Allows keys [begin, end) for query q.
  void allow_range(std::size_t q, std::size_t begin, std::size_t end);

 private:
  std::size_t queries_ = 0;
  std::size_t keys_ = 0;
  std::vector<std::uint8_t> bits_;
};

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);
// a[m, n] + bias[n], bias broadcast over rows.
template <typename T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& bias);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> silu(const Tensor<T>& x);
// tanh approximation
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

// Max-subtracted softmax along `axis`. Non-finite input raises NumericError.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& x);

// x / rms(x) * scale, row-wise.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& scale, T eps = T(1e-6));

// Rows of `table` selected by `ids` (rows may repeat).
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int64_t> ids);
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows);
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end);
// Row-wise concatenation; all inputs share the column count. Empty
// (zero-row) inputs are allowed.
template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts);

// Rotary position embedding applied independently per head: pairs
// (2j, 2j+1) of each head are rotated by positions[i] * base^(-2j/head_dim).
template <typename T>
Tensor<T> rope(const Tensor<T>& x, std::span<const std::size_t> positions,
               std::size_t n_heads, T base = T(10000));

// Multi-head scaled dot-product attention. q is [queries, n_heads*head_dim],
// k and v are [keys, n_heads*head_dim]. Masked positions get exactly zero
// weight; a query row with no allowed key raises ConfigError.
template <typename T>
Tensor<T> masked_attention(const Tensor<T>& q, const Tensor<T>& k,
                           const Tensor<T>& v, const AttentionMask& mask,
                           std::size_t n_heads);

// Mean token cross-entropy of logits[rows, classes] against targets; rows
// whose target is negative are ignored. Returns a scalar (zero when every
// row is ignored).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits,
                        std::span<const std::int64_t> targets);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

// Weighted sum of scalar tensors: sum_i weights[i] * terms[i].
template <typename T>
Tensor<T> weighted_sum(std::span<const Tensor<T>> terms,
                       std::span<const T> weights);

namespace testing {
// Negative control for gradient checks: while enabled, the silu backward
// rule is deliberately wrong.
void set_fault_injection(bool enabled);
bool fault_injection();
}  // namespace testing

}  // namespace tristream
