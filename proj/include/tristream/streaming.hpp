// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0
//
// Simultaneous-output inference. A Session interleaves input ASR partials,
// greedy text generation and wait-k lagged speech-unit generation; each
// lagged text token gets units until the CTC view of the generated speech
// recognizes one new label (or the per-token cap fires).

#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "tristream/ctc.hpp"
#include "tristream/model.hpp"
#include "tristream/vocab.hpp"

namespace tristream {

enum class EventKind { AsrPartial, TextToken, SpeechUnit, SpeechChunk, Warning, Eos };

const char* to_string(EventKind kind);

struct EosSummary {
  std::vector<TokenId> text;         // generated response, without eos
  std::vector<TokenId> speech_text;  // collapse of the CTC path over generated units
  bool operator==(const EosSummary&) const = default;
};

using EventPayload =
    std::variant<std::monostate, TokenId, std::vector<TokenId>, std::string, EosSummary>;

struct StreamEvent {
  std::int64_t step = 0;
  EventKind kind = EventKind::Eos;
  EventPayload payload;
  std::int64_t wall_ns = 0;
};

// One JSON object per line with keys in the fixed order
// step, kind, payload, wall_ns.
std::string to_json_line(const StreamEvent& event, bool include_wall_clock = true);
StreamEvent from_json_line(const std::string& line);

struct Modalities {
  bool vision = false;
  bool speech = false;
  bool text = false;
};

struct Route {
  Modalities inputs;
  bool speech_output = false;
  std::string name;  // e.g. "VS2S"
};

// Supported: T->T, S->T, S->S, V+T->T, V+S->T, V+S->S. Anything else throws
// ConfigError.
Route modality_route(const Modalities& inputs, bool speech_output);

struct SessionRequest {
  std::optional<std::vector<float>> vision;  // row-major features
  std::vector<TokenId> input_units;
  std::vector<TokenId> input_text;
};

struct SessionOptions {
  std::int64_t wait_k = 3;
  std::int64_t max_units_per_token = 20;
  std::int64_t max_text_tokens = 32;
  bool speech_output = true;
};

// What a session needs from a model. Implemented by ModelBackend and by test
// doubles.
class StreamBackend {
 public:
  virtual ~StreamBackend() = default;

  virtual const MultimodalVocab& vocab() const = 0;
  virtual void reset() = 0;
  virtual void push_vision(std::span<const float> features) = 0;
  // Encodes one input unit; returns its greedy CTC symbol.
  virtual TokenId push_input_unit(TokenId unit) = 0;
  virtual void push_prompt_text(std::span<const TokenId> ids) = 0;
  // Starts the response (appends the bos marker to the core context).
  virtual void begin_response() = 0;
  virtual TokenId next_text_token() = 0;
  // Appends a generated response token to the core context and keeps its
  // state for fusion.
  virtual void push_response_token(TokenId id) = 0;
  // Number of response positions with fusion states.
  virtual std::int64_t response_positions() const = 0;
  // Next speech unit given the current alignment count. When allow_end is
  // set the backend may return std::nullopt for unit-eos.
  virtual std::optional<TokenId> next_unit(std::int64_t aligned, bool allow_end) = 0;
  // Encodes a generated unit; returns its greedy CTC symbol.
  virtual TokenId push_generated_unit(TokenId unit) = 0;
};

// Lazily produced event stream for one request.
class Session {
 public:
  Session(StreamBackend& backend, SessionRequest request, SessionOptions options);

  // Next event, or nullopt once Eos has been returned.
  std::optional<StreamEvent> next();
  // Drains the session.
  std::vector<StreamEvent> run();

  const std::vector<TokenId>& generated_text() const { return text_; }
  const std::vector<TokenId>& generated_units() const { return units_; }
  // Generation alignment, including its two leading blank sentinels.
  const CtcAlignment& generation_alignment() const { return gen_align_; }
  const CtcAlignment& input_alignment() const { return input_align_; }
  // Largest fusion-window end requested so far, and the number of text
  // positions that existed at that moment.
  std::int64_t max_window_end() const { return max_window_end_; }

 private:
  enum class Phase { Prefill, Text, Speech, Flush, Tail, Finish, Done };

  void advance();
  void emit(EventKind kind, EventPayload payload);
  void start_speech_loop(Phase return_to);
  void speech_step();
  void tail_step();
  std::int64_t content_length() const;
  bool speech_started() const;
  bool check_window(std::int64_t aligned);

  StreamBackend& backend_;
  SessionRequest request_;
  SessionOptions options_;
  Phase phase_ = Phase::Prefill;
  Phase return_phase_ = Phase::Text;
  bool vision_done_ = false;
  std::size_t input_pos_ = 0;
  bool eos_seen_ = false;
  std::vector<TokenId> text_;
  std::vector<TokenId> units_;
  std::vector<TokenId> loop_units_;
  std::int64_t spoken_ = 0;
  std::int64_t tail_units_ = 0;
  std::int64_t max_window_end_ = 0;
  CtcAlignment input_align_;
  CtcAlignment gen_align_;
  std::deque<StreamEvent> pending_;
  std::int64_t step_ = 0;
  std::chrono::steady_clock::time_point start_;
};

struct BackendOptions {
  double temperature = 0.0;  // 0 = greedy
  std::uint64_t seed = 0;
};

// StreamBackend over a real Model with incremental caches for each stack.
template <typename T>
class ModelBackend : public StreamBackend {
 public:
  explicit ModelBackend(const Model<T>& model, BackendOptions options = {});

  const MultimodalVocab& vocab() const override { return model_.vocab(); }
  void reset() override;
  void push_vision(std::span<const float> features) override;
  TokenId push_input_unit(TokenId unit) override;
  void push_prompt_text(std::span<const TokenId> ids) override;
  void begin_response() override;
  TokenId next_text_token() override;
  void push_response_token(TokenId id) override;
  std::int64_t response_positions() const override;
  std::optional<TokenId> next_unit(std::int64_t aligned, bool allow_end) override;
  TokenId push_generated_unit(TokenId unit) override;

 private:
  void feed_core(const Tensor<T>& rows, bool keep_states);

  const Model<T>& model_;
  BackendOptions options_;
  std::mt19937_64 rng_;
  StackCache<T> input_bottom_, core_, gen_bottom_, top_;
  Tensor<T> last_logits_;  // text logits at the newest core position
  std::vector<Tensor<T>> response_states_;
  Tensor<T> response_cache_;  // response_states_ stacked
  Tensor<T> pending_top_input_;
};

// Bounded single-producer/single-consumer hand-off. push() blocks while the
// queue is full.
template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {}

  void push(T value) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return items_.size() < capacity_; });
    items_.push_back(std::move(value));
    not_empty_.notify_one();
  }
  // Blocks until an item or close(); nullopt after close() drains.
  std::optional<T> pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return !items_.empty() || closed_; });
    if (items_.empty()) return std::nullopt;
    T v = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return v;
  }
  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_empty_.notify_all();
  }

 private:
  std::size_t capacity_;
  std::mutex mu_;
  std::condition_variable not_full_, not_empty_;
  std::deque<T> items_;
  bool closed_ = false;
};

// Runs `session` on a worker thread, handing events to `sink` on the calling
// thread through a bounded queue. Exceptions from the session are rethrown
// here.
void run_session_threaded(Session& session, std::size_t queue_capacity,
                          const std::function<void(const StreamEvent&)>& sink);

extern template class ModelBackend<float>;
extern template class ModelBackend<double>;

}  // namespace tristream
