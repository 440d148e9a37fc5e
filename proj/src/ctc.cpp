// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0

#include "tristream/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "tristream/error.hpp"
#include "tristream/ops.hpp"

namespace tristream {

namespace {

template <typename T>
constexpr T kNegInf = -std::numeric_limits<T>::infinity();

template <typename T>
T log_add(T a, T b) {
  if (a == kNegInf<T>) return b;
  if (b == kNegInf<T>) return a;
  const T mx = std::max(a, b);
  return mx + std::log1p(std::exp(-std::abs(a - b)));
}

}  // namespace

std::vector<TokenId> collapse(std::span<const TokenId> path, TokenId blank) {
  std::vector<TokenId> out;
  TokenId prev = blank;
  for (TokenId id : path) {
    if (id != blank && id != prev) out.push_back(id);
    prev = id;
  }
  return out;
}

std::size_t ctc_min_frames(std::span<const TokenId> target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++n;
  return n;
}

bool ctc_feasible(std::size_t frames, std::span<const TokenId> target) {
  return frames >= ctc_min_frames(target);
}

bool CtcAlignment::push(TokenId id) {
  const bool emitted = id != blank_ && id != last_emit_;
  path_.push_back(id);
  if (emitted) text_.push_back(id);
  counts_.push_back(static_cast<std::int64_t>(text_.size()));
  last_emit_ = id;
  return emitted;
}

template <typename T>
TokenId ctc_frame_argmax(std::span<const T> frame, std::int64_t num_labels,
                         TokenId blank) {
  if (blank < 0 || static_cast<std::size_t>(blank) >= frame.size() ||
      num_labels < 0 || static_cast<std::size_t>(num_labels) > frame.size()) {
    throw DimensionError("ctc_frame_argmax: frame of width " +
                         std::to_string(frame.size()) +
                         " cannot hold blank " + std::to_string(blank));
  }
  TokenId best = -1;
  T best_v = -std::numeric_limits<T>::infinity();
  auto consider = [&](TokenId id) {
    const T v = frame[static_cast<std::size_t>(id)];
    if (best < 0 || v > best_v || (v == best_v && id < best)) {
      best = id;
      best_v = v;
    }
  };
  for (TokenId id = 0; id < num_labels; ++id) consider(id);
  consider(blank);
  return best;
}

template <typename T>
CtcAlignment ctc_greedy_decode(const Tensor<T>& logits, std::int64_t num_labels,
                               TokenId blank) {
  CtcAlignment align(blank);
  if (logits.rank() != 2) {
    throw DimensionError("ctc_greedy_decode needs [frames, vocab] logits, got " +
                         shape_string(logits.shape()));
  }
  const std::size_t v = logits.dim(1);
  for (std::size_t t = 0; t < logits.dim(0); ++t) {
    align.push(ctc_frame_argmax<T>(logits.data().subspan(t * v, v), num_labels,
                                   blank));
  }
  return align;
}

template <typename T>
TokenId extend_alignment(CtcAlignment& align, std::span<const T> frame_logits,
                         std::int64_t num_labels) {
  const TokenId id = ctc_frame_argmax<T>(frame_logits, num_labels, align.blank());
  align.push(id);
  return id;
}

template <typename T>
Tensor<T> remove_blanks(const Tensor<T>& h, const CtcAlignment& align) {
  if (h.rank() != 2 || h.dim(0) != align.size()) {
    throw DimensionError("remove_blanks: " + std::to_string(align.size()) +
                         "-frame path for representation " +
                         shape_string(h.shape()));
  }
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < align.size(); ++i)
    if (align.path()[i] != align.blank()) keep.push_back(i);
  return gather_rows(h, std::span<const std::size_t>(keep));
}

template <typename T>
Tensor<T> ctc_loss(const Tensor<T>& logits, std::span<const TokenId> target,
                   TokenId blank) {
  if (logits.rank() != 2) {
    throw DimensionError("ctc_loss needs [frames, vocab] logits, got " +
                         shape_string(logits.shape()));
  }
  const std::size_t frames = logits.dim(0), v = logits.dim(1);
  if (blank < 0 || static_cast<std::size_t>(blank) >= v) {
    throw DimensionError("ctc_loss: blank id outside vocab of " +
                         std::to_string(v));
  }
  for (TokenId id : target) {
    if (id < 0 || static_cast<std::size_t>(id) >= v || id == blank) {
      throw DimensionError("ctc_loss: target label " + std::to_string(id) +
                           " invalid for vocab of " + std::to_string(v));
    }
  }
  if (!ctc_feasible(frames, target)) {
    return Tensor<T>::scalar(std::numeric_limits<T>::infinity());
  }
  if (frames == 0) return Tensor<T>::scalar(T(0));

  // Blank-extended label sequence: blank, x1, blank, x2, ..., blank.
  const std::size_t states = 2 * target.size() + 1;
  std::vector<TokenId> ext(states, blank);
  for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];
  auto can_skip = [&](std::size_t s) {
    return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
  };

  std::vector<T> logp(frames * v);
  {
    NoGradGuard guard;
    auto lp = log_softmax_rows(logits.detach());
    std::copy(lp.data().begin(), lp.data().end(), logp.begin());
  }
  auto emit = [&](std::size_t t, std::size_t s) {
    return logp[t * v + static_cast<std::size_t>(ext[s])];
  };

  std::vector<T> alpha(frames * states, kNegInf<T>);
  alpha[0] = emit(0, 0);
  if (states > 1) alpha[1] = emit(0, 1);
  for (std::size_t t = 1; t < frames; ++t) {
    for (std::size_t s = 0; s < states; ++s) {
      T a = alpha[(t - 1) * states + s];
      if (s >= 1) a = log_add(a, alpha[(t - 1) * states + s - 1]);
      if (can_skip(s)) a = log_add(a, alpha[(t - 1) * states + s - 2]);
      alpha[t * states + s] = a == kNegInf<T> ? a : a + emit(t, s);
    }
  }
  const std::size_t last = (frames - 1) * states;
  T log_total = alpha[last + states - 1];
  if (states > 1) log_total = log_add(log_total, alpha[last + states - 2]);
  if (log_total == kNegInf<T>) {
    return Tensor<T>::scalar(std::numeric_limits<T>::infinity());
  }

  // beta excludes the emission at its own frame.
  std::vector<T> beta(frames * states, kNegInf<T>);
  beta[last + states - 1] = T(0);
  if (states > 1) beta[last + states - 2] = T(0);
  for (std::size_t t = frames - 1; t-- > 0;) {
    for (std::size_t s = 0; s < states; ++s) {
      auto from = [&](std::size_t s2) {
        const T b = beta[(t + 1) * states + s2];
        return b == kNegInf<T> ? b : b + emit(t + 1, s2);
      };
      T b = from(s);
      if (s + 1 < states) b = log_add(b, from(s + 1));
      if (s + 2 < states && can_skip(s + 2)) b = log_add(b, from(s + 2));
      beta[t * states + s] = b;
    }
  }

  // d loss / d logits = softmax - posterior state occupancy per label.
  std::vector<T> grad(frames * v);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t k = 0; k < v; ++k) grad[t * v + k] = std::exp(logp[t * v + k]);
    for (std::size_t s = 0; s < states; ++s) {
      const T a = alpha[t * states + s], b = beta[t * states + s];
      if (a == kNegInf<T> || b == kNegInf<T>) continue;
      grad[t * v + static_cast<std::size_t>(ext[s])] -= std::exp(a + b - log_total);
    }
  }

  return Tensor<T>::from_op(
      {}, {-log_total}, "ctc_loss", {logits},
      [grad = std::move(grad)](TensorNode<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * grad[i];
      });
}

#define TRISTREAM_INSTANTIATE_CTC(T)                                           \
  template TokenId ctc_frame_argmax<T>(std::span<const T>, std::int64_t,       \
                                       TokenId);                               \
  template CtcAlignment ctc_greedy_decode(const Tensor<T>&, std::int64_t,      \
                                          TokenId);                            \
  template TokenId extend_alignment<T>(CtcAlignment&, std::span<const T>,      \
                                       std::int64_t);                          \
  template Tensor<T> remove_blanks(const Tensor<T>&, const CtcAlignment&);     \
  template Tensor<T> ctc_loss(const Tensor<T>&, std::span<const TokenId>,      \
                              TokenId);

TRISTREAM_INSTANTIATE_CTC(float)
TRISTREAM_INSTANTIATE_CTC(double)

#undef TRISTREAM_INSTANTIATE_CTC

}  // namespace tristream
