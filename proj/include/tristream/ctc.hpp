// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0
//
// CTC over the merged vocabulary: loss by the forward-backward recursion in
// log space, greedy decoding, and the incremental alignment counts that gate
// streaming speech generation.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tristream/tensor.hpp"
#include "tristream/vocab.hpp"

namespace tristream {

// Merge adjacent repeats, then drop blanks. A blank between two equal labels
// keeps both.
std::vector<TokenId> collapse(std::span<const TokenId> path, TokenId blank);

// Minimum frame count that can carry `target`: one frame per label plus one
// separating blank for every adjacent equal pair.
std::size_t ctc_min_frames(std::span<const TokenId> target);
bool ctc_feasible(std::size_t frames, std::span<const TokenId> target);

// Greedy CTC path with the per-prefix collapsed lengths N_1..N_n.
class CtcAlignment {
 public:
  CtcAlignment() = default;
  explicit CtcAlignment(TokenId blank) : blank_(blank), last_emit_(blank) {}

  // Appends one path symbol. Returns true when it starts a new collapsed label
  // (non-blank and different from the previous frame's symbol).
  bool push(TokenId id);

  TokenId blank() const { return blank_; }
  const std::vector<TokenId>& path() const { return path_; }
  const std::vector<std::int64_t>& prefix_counts() const { return counts_; }
  // Collapsed length of the whole path so far.
  std::int64_t count() const { return counts_.empty() ? 0 : counts_.back(); }
  // Collapsed labels so far.
  const std::vector<TokenId>& text() const { return text_; }
  // Last symbol that could merge with the next frame; reset to blank by a
  // blank frame.
  TokenId last_emit() const { return last_emit_; }
  std::size_t size() const { return path_.size(); }

 private:
  TokenId blank_ = 0;
  TokenId last_emit_ = 0;
  std::vector<TokenId> path_;
  std::vector<std::int64_t> counts_;
  std::vector<TokenId> text_;
};

// Argmax over label ids [0, num_labels) plus the blank, ties to the lowest
// id. Label ids at or above num_labels (speech units in the merged
// vocabulary) are never chosen.
template <typename T>
TokenId ctc_frame_argmax(std::span<const T> frame, std::int64_t num_labels,
                         TokenId blank);

template <typename T>
CtcAlignment ctc_greedy_decode(const Tensor<T>& logits, std::int64_t num_labels,
                               TokenId blank);

// Streams one more frame into `align`; returns the chosen symbol.
template <typename T>
TokenId extend_alignment(CtcAlignment& align, std::span<const T> frame_logits,
                         std::int64_t num_labels);

// Keeps the rows of `h` whose path symbol is not blank.
template <typename T>
Tensor<T> remove_blanks(const Tensor<T>& h, const CtcAlignment& align);

// -log sum over all paths collapsing to `target` of prod_t softmax(logits_t).
// Infeasible targets give +inf with no gradient attached.
template <typename T>
Tensor<T> ctc_loss(const Tensor<T>& logits, std::span<const TokenId> target,
                   TokenId blank);

}  // namespace tristream
