// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0
//
// Scripted and auditing StreamBackends plus the per-session scheduler
// invariants shared by the unit and acceptance tests.

#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "tristream/error.hpp"
#include "tristream/streaming.hpp"

namespace fixtures {

using namespace tristream;

// Text ids [0, 16), unit ids [16, 32), blank 32. Unit 16 + t is recognized
// as text id t by the CTC head; input units >= 28 read as blank.
class MockBackend : public StreamBackend {
 public:
  static constexpr TokenId kUnitBase = 16;

  explicit MockBackend(std::vector<TokenId> response) : response_(std::move(response)) {}

  // When set, a generated unit is recognized only with this probability;
  // otherwise the CTC head sees a blank.
  void set_recognition(double p, std::uint64_t seed) {
    recognize_p_ = p;
    rng_.seed(seed);
  }

  const MultimodalVocab& vocab() const override { return vocab_; }
  void reset() override {
    next_text_ = 0;
    pushed_ = 0;
    vision_pushed_ = false;
  }
  void push_vision(std::span<const float>) override { vision_pushed_ = true; }
  TokenId push_input_unit(TokenId unit) override {
    const TokenId local = unit - kUnitBase;
    return local >= 12 ? vocab_.blank_id() : local;
  }
  void push_prompt_text(std::span<const TokenId>) override {}
  void begin_response() override {}
  TokenId next_text_token() override {
    return next_text_ < response_.size() ? response_[next_text_++] : kEosId;
  }
  void push_response_token(TokenId) override { ++pushed_; }
  std::int64_t response_positions() const override { return pushed_; }
  std::optional<TokenId> next_unit(std::int64_t aligned, bool allow_end) override {
    if (allow_end) return std::nullopt;
    return kUnitBase + response_.at(static_cast<std::size_t>(aligned));
  }
  TokenId push_generated_unit(TokenId unit) override {
    if (recognize_p_ < 1.0 && !std::bernoulli_distribution(recognize_p_)(rng_))
      return vocab_.blank_id();
    return unit - kUnitBase;
  }
  bool vision_pushed() const { return vision_pushed_; }

 private:
  MultimodalVocab vocab_{16, 16};
  std::vector<TokenId> response_;
  std::size_t next_text_ = 0;
  std::int64_t pushed_ = 0;
  bool vision_pushed_ = false;
  double recognize_p_ = 1.0;
  std::mt19937_64 rng_;
};

// Forwards to another backend and records every fusion request that would
// reach past the generated text.
class AuditBackend : public StreamBackend {
 public:
  explicit AuditBackend(StreamBackend& inner) : inner_(inner) {}
  const MultimodalVocab& vocab() const override { return inner_.vocab(); }
  void reset() override {
    inner_.reset();
    generated_ = 0;
    violations_ = 0;
  }
  void push_vision(std::span<const float> f) override { inner_.push_vision(f); }
  TokenId push_input_unit(TokenId u) override { return inner_.push_input_unit(u); }
  void push_prompt_text(std::span<const TokenId> ids) override { inner_.push_prompt_text(ids); }
  void begin_response() override { inner_.begin_response(); }
  TokenId next_text_token() override {
    ++generated_;
    return inner_.next_text_token();
  }
  void push_response_token(TokenId id) override { inner_.push_response_token(id); }
  std::int64_t response_positions() const override { return inner_.response_positions(); }
  std::optional<TokenId> next_unit(std::int64_t aligned, bool allow_end) override {
    if (aligned + 1 > generated_ || aligned + 1 > inner_.response_positions()) ++violations_;
    return inner_.next_unit(aligned, allow_end);
  }
  TokenId push_generated_unit(TokenId u) override { return inner_.push_generated_unit(u); }
  int violations() const { return violations_; }

 private:
  StreamBackend& inner_;
  std::int64_t generated_ = 0;
  int violations_ = 0;
};

inline std::vector<TokenId> text_tokens(const std::vector<StreamEvent>& events) {
  std::vector<TokenId> out;
  for (const auto& e : events)
    if (e.kind == EventKind::TextToken) out.push_back(std::get<TokenId>(e.payload));
  return out;
}

// Empty string when the trace satisfies the scheduler contract, else the
// first violated rule.
inline std::string check_trace(const std::vector<StreamEvent>& events, std::int64_t k,
                               bool speech_output) {
  if (events.empty() || events.back().kind != EventKind::Eos) return "no final Eos";
  std::int64_t text_before = 0, content = 0;
  bool saw_unit = false;
  for (std::size_t i = 0; i < events.size(); ++i) {
    const auto& e = events[i];
    if (i > 0 && e.step <= events[i - 1].step) return "steps not increasing";
    if (e.kind == EventKind::Eos && i + 1 != events.size()) return "Eos not final";
    if (e.kind == EventKind::TextToken) {
      if (std::get<TokenId>(e.payload) != kEosId) ++content;
      if (!saw_unit) ++text_before;
    }
    if (e.kind == EventKind::SpeechUnit && !saw_unit) {
      saw_unit = true;
      if (text_before != k) {
        return "first unit after " + std::to_string(text_before) + " text tokens, K=" +
               std::to_string(k);
      }
    }
  }
  if (!speech_output && saw_unit) return "units without speech output";
  if (speech_output && content >= k && !saw_unit) return "no speech for a long response";
  if (speech_output && content < k && saw_unit) return "speech for a response shorter than K";
  return "";
}

}  // namespace fixtures
