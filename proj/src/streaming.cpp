// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0

#include "tristream/streaming.hpp"

#include <exception>
#include <thread>

#include "json.hpp"

#include "tristream/error.hpp"
#include "tristream/ops.hpp"

namespace tristream {

const char* to_string(EventKind kind) {
  switch (kind) {
    case EventKind::AsrPartial:
      return "AsrPartial";
    case EventKind::TextToken:
      return "TextToken";
    case EventKind::SpeechUnit:
      return "SpeechUnit";
    case EventKind::SpeechChunk:
      return "SpeechChunk";
    case EventKind::Warning:
      return "Warning";
    case EventKind::Eos:
      return "Eos";
  }
  return "?";
}

namespace {

EventKind parse_event_kind(const std::string& s) {
  for (auto k : {EventKind::AsrPartial, EventKind::TextToken, EventKind::SpeechUnit,
                 EventKind::SpeechChunk, EventKind::Warning, EventKind::Eos}) {
    if (s == to_string(k)) return k;
  }
  throw DataError("unknown event kind '" + s + "'");
}

}  // namespace

std::string to_json_line(const StreamEvent& event, bool include_wall_clock) {
  nlohmann::ordered_json j;
  j["step"] = event.step;
  j["kind"] = to_string(event.kind);
  std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, std::monostate>) {
          j["payload"] = nullptr;
        } else if constexpr (std::is_same_v<P, EosSummary>) {
          nlohmann::ordered_json s;
          s["text"] = p.text;
          s["speech_text"] = p.speech_text;
          j["payload"] = s;
        } else {
          j["payload"] = p;
        }
      },
      event.payload);
  j["wall_ns"] = include_wall_clock ? event.wall_ns : 0;
  return j.dump();
}

StreamEvent from_json_line(const std::string& line) {
  StreamEvent e;
  try {
    auto j = nlohmann::json::parse(line);
    e.step = j.at("step").get<std::int64_t>();
    e.kind = parse_event_kind(j.at("kind").get<std::string>());
    e.wall_ns = j.at("wall_ns").get<std::int64_t>();
    const auto& p = j.at("payload");
    switch (e.kind) {
      case EventKind::AsrPartial:
      case EventKind::SpeechChunk:
        e.payload = p.get<std::vector<TokenId>>();
        break;
      case EventKind::TextToken:
      case EventKind::SpeechUnit:
        e.payload = p.get<TokenId>();
        break;
      case EventKind::Warning:
        e.payload = p.get<std::string>();
        break;
      case EventKind::Eos:
        e.payload = EosSummary{p.at("text").get<std::vector<TokenId>>(),
                               p.at("speech_text").get<std::vector<TokenId>>()};
        break;
    }
  } catch (const nlohmann::json::exception& ex) {
    throw DataError(std::string("malformed event record: ") + ex.what());
  }
  return e;
}

Route modality_route(const Modalities& in, bool speech_output) {
  Route r{in, speech_output, ""};
  const bool v = in.vision, s = in.speech, t = in.text;
  if (!v && !s && t && !speech_output) {
    r.name = "T2T";
  } else if (!v && s && !t) {
    r.name = speech_output ? "S2S" : "S2T";
  } else if (v && t && !s && !speech_output) {
    r.name = "VT2T";
  } else if (v && s && !t) {
    r.name = speech_output ? "VS2S" : "VS2T";
  } else {
    std::string desc;
    if (v) desc += "vision+";
    if (s) desc += "speech+";
    if (t) desc += "text+";
    if (desc.empty()) desc = "nothing+";
    desc.pop_back();
    throw ConfigError("unsupported modality combination: " + desc + " -> " +
                      (speech_output ? "text+speech" : "text"));
  }
  return r;
}

Session::Session(StreamBackend& backend, SessionRequest request,
                 SessionOptions options)
    : backend_(backend),
      request_(std::move(request)),
      options_(options),
      input_align_(backend.vocab().blank_id()),
      gen_align_(backend.vocab().blank_id()),
      start_(std::chrono::steady_clock::now()) {
  if (options_.wait_k < 1) throw ConfigError("wait-k lag must be >= 1");
  if (options_.max_units_per_token < 1) {
    throw ConfigError("max_units_per_token must be >= 1");
  }
  if (options_.max_text_tokens < 1) throw ConfigError("max_text_tokens must be >= 1");
  const auto& vocab = backend.vocab();
  for (TokenId u : request_.input_units) {
    if (!vocab.is_unit(u)) {
      throw DataError("input unit id " + std::to_string(u) + " is not a speech unit");
    }
  }
  for (TokenId t : request_.input_text) {
    if (!vocab.is_text(t)) {
      throw DataError("input text id " + std::to_string(t) + " is not a text token");
    }
  }
  // Two blank sentinels make the "last symbol / previous symbol" test well
  // defined before any unit exists.
  gen_align_.push(vocab.blank_id());
  gen_align_.push(vocab.blank_id());
  backend_.reset();
}

std::optional<StreamEvent> Session::next() {
  while (pending_.empty() && phase_ != Phase::Done) advance();
  if (pending_.empty()) return std::nullopt;
  StreamEvent e = std::move(pending_.front());
  pending_.pop_front();
  return e;
}

std::vector<StreamEvent> Session::run() {
  std::vector<StreamEvent> events;
  while (auto e = next()) events.push_back(std::move(*e));
  return events;
}

void Session::emit(EventKind kind, EventPayload payload) {
  StreamEvent e;
  e.step = step_++;
  e.kind = kind;
  e.payload = std::move(payload);
  e.wall_ns = std::chrono::duration_cast<std::chrono::nanoseconds>(
                  std::chrono::steady_clock::now() - start_)
                  .count();
  pending_.push_back(std::move(e));
}

std::int64_t Session::content_length() const {
  return static_cast<std::int64_t>(text_.size()) - (eos_seen_ ? 1 : 0);
}

bool Session::speech_started() const {
  return options_.speech_output && content_length() >= options_.wait_k;
}

bool Session::check_window(std::int64_t aligned) {
  const std::int64_t end = aligned + 1;
  if (end > max_window_end_) max_window_end_ = end;
  return end <= backend_.response_positions();
}

void Session::start_speech_loop(Phase return_to) {
  loop_units_.clear();
  return_phase_ = return_to;
  phase_ = Phase::Speech;
}

void Session::advance() {
  switch (phase_) {
    case Phase::Prefill: {
      if (!vision_done_) {
        vision_done_ = true;
        if (request_.vision) backend_.push_vision(*request_.vision);
        return;
      }
      if (input_pos_ < request_.input_units.size()) {
        const TokenId sym = backend_.push_input_unit(request_.input_units[input_pos_++]);
        if (input_align_.push(sym)) emit(EventKind::AsrPartial, input_align_.text());
        return;
      }
      backend_.push_prompt_text(request_.input_text);
      backend_.begin_response();
      phase_ = Phase::Text;
      return;
    }
    case Phase::Text: {
      if (content_length() >= options_.max_text_tokens) {
        emit(EventKind::Warning, std::string("response length cap reached"));
        phase_ = Phase::Flush;
        return;
      }
      const TokenId y = backend_.next_text_token();
      text_.push_back(y);
      emit(EventKind::TextToken, y);
      if (y == kEosId) {
        eos_seen_ = true;
        // The eos state closes the last fusion window of the speech tail.
        if (speech_started()) backend_.push_response_token(y);
        phase_ = Phase::Flush;
        return;
      }
      backend_.push_response_token(y);
      if (speech_started()) start_speech_loop(Phase::Text);
      return;
    }
    case Phase::Speech:
      speech_step();
      return;
    case Phase::Flush:
      if (speech_started() && spoken_ < content_length()) {
        start_speech_loop(Phase::Flush);
      } else if (speech_started()) {
        loop_units_.clear();
        tail_units_ = 0;
        phase_ = Phase::Tail;
      } else {
        phase_ = Phase::Finish;
      }
      return;
    case Phase::Tail:
      tail_step();
      return;
    case Phase::Finish: {
      std::vector<TokenId> response(text_.begin(), text_.begin() + content_length());
      emit(EventKind::Eos, EosSummary{std::move(response), gen_align_.text()});
      phase_ = Phase::Done;
      return;
    }
    case Phase::Done:
      return;
  }
}

void Session::speech_step() {
  const std::int64_t aligned = gen_align_.count();
  if (!check_window(aligned)) {
    throw SchedulingError("speech for text position " + std::to_string(aligned + 1) +
                          " requested before that token exists");
  }
  const auto unit = backend_.next_unit(aligned, false);
  if (!unit) throw SchedulingError("backend ended speech inside a token");
  units_.push_back(*unit);
  loop_units_.push_back(*unit);
  emit(EventKind::SpeechUnit, *unit);
  const bool recognized = gen_align_.push(backend_.push_generated_unit(*unit));
  const bool capped =
      static_cast<std::int64_t>(loop_units_.size()) >= options_.max_units_per_token;
  if (recognized || capped) {
    if (!recognized) {
      emit(EventKind::Warning, "unit cap reached for text position " +
                                   std::to_string(spoken_ + 1) + "; forcing advance");
    }
    ++spoken_;
    emit(EventKind::SpeechChunk, loop_units_);
    loop_units_.clear();
    phase_ = return_phase_;
  }
}

void Session::tail_step() {
  auto finish = [&] {
    if (!loop_units_.empty()) emit(EventKind::SpeechChunk, loop_units_);
    loop_units_.clear();
    phase_ = Phase::Finish;
  };
  if (tail_units_ >= options_.max_units_per_token) {
    emit(EventKind::Warning, std::string("unit cap reached while closing speech"));
    finish();
    return;
  }
  const std::int64_t aligned = gen_align_.count();
  if (!check_window(aligned)) {
    emit(EventKind::Warning,
         std::string("generated speech recognized past the end of the text"));
    finish();
    return;
  }
  const auto unit = backend_.next_unit(aligned, true);
  if (!unit) {
    finish();
    return;
  }
  units_.push_back(*unit);
  loop_units_.push_back(*unit);
  ++tail_units_;
  emit(EventKind::SpeechUnit, *unit);
  gen_align_.push(backend_.push_generated_unit(*unit));
}

// ModelBackend -------------------------------------------------------------

template <typename T>
ModelBackend<T>::ModelBackend(const Model<T>& model, BackendOptions options)
    : model_(model), options_(options), rng_(options.seed) {}

template <typename T>
void ModelBackend<T>::reset() {
  input_bottom_ = {};
  core_ = {};
  gen_bottom_ = {};
  top_ = {};
  last_logits_ = {};
  response_states_.clear();
  response_cache_ = {};
  pending_top_input_ = {};
  rng_.seed(options_.seed);
}

template <typename T>
void ModelBackend<T>::feed_core(const Tensor<T>& rows, bool keep_states) {
  auto out = model_.core_forward(rows, &core_);
  const std::size_t last = rows.dim(0) - 1;
  last_logits_ = slice_rows(out.logits, last, last + 1);
  if (keep_states) {
    response_states_.push_back(slice_rows(out.hidden, last, last + 1));
    response_cache_ = concat_rows(std::span<const Tensor<T>>(response_states_));
  }
}

template <typename T>
void ModelBackend<T>::push_vision(std::span<const float> features) {
  NoGradGuard guard;
  const auto& c = model_.config();
  std::vector<T> data(features.begin(), features.end());
  const Shape shape{static_cast<std::size_t>(c.vision_tokens_per_image),
                    static_cast<std::size_t>(c.vision_feature_dim)};
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("vision block of " + std::to_string(data.size()) +
                         " values does not match " + shape_string(shape));
  }
  feed_core(model_.vision_encode(Tensor<T>(shape, std::move(data))), false);
}

template <typename T>
TokenId ModelBackend<T>::push_input_unit(TokenId unit) {
  NoGradGuard guard;
  const TokenId ids[1] = {unit};
  auto h = model_.bottom_forward(ids, &input_bottom_);
  auto logits = model_.ctc_logits(h);
  const auto& v = model_.vocab();
  const TokenId sym = ctc_frame_argmax<T>(logits.data(), v.text_size(), v.blank_id());
  if (!(model_.config().remove_input_blanks && sym == v.blank_id())) {
    feed_core(h, false);
  }
  return sym;
}

template <typename T>
void ModelBackend<T>::push_prompt_text(std::span<const TokenId> ids) {
  if (ids.empty()) return;
  NoGradGuard guard;
  feed_core(model_.embed_tokens(ids), false);
}

template <typename T>
void ModelBackend<T>::begin_response() {
  NoGradGuard guard;
  const TokenId bos[1] = {kBosId};
  feed_core(model_.embed_tokens(bos), false);
}

template <typename T>
TokenId ModelBackend<T>::next_text_token() {
  if (!last_logits_.defined()) throw SchedulingError("no core context to decode from");
  auto logits = last_logits_.data();
  if (options_.temperature <= 0.0) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i)
      if (logits[i] > logits[best]) best = i;
    return static_cast<TokenId>(best);
  }
  std::vector<double> w(logits.size());
  const double mx = static_cast<double>(*std::max_element(logits.begin(), logits.end()));
  for (std::size_t i = 0; i < w.size(); ++i)
    w[i] = std::exp((static_cast<double>(logits[i]) - mx) / options_.temperature);
  std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
  return static_cast<TokenId>(pick(rng_));
}

template <typename T>
void ModelBackend<T>::push_response_token(TokenId id) {
  NoGradGuard guard;
  const TokenId ids[1] = {id};
  feed_core(model_.embed_tokens(ids), true);
}

template <typename T>
std::int64_t ModelBackend<T>::response_positions() const {
  return static_cast<std::int64_t>(response_states_.size());
}

template <typename T>
std::optional<TokenId> ModelBackend<T>::next_unit(std::int64_t aligned, bool allow_end) {
  NoGradGuard guard;
  const Tensor<T> input =
      pending_top_input_.defined() ? pending_top_input_ : model_.params().top_start;
  pending_top_input_ = {};
  const std::int64_t counts[1] = {aligned};
  auto logits = model_.top_forward(input, response_cache_, counts, &top_);
  const auto& c = model_.config();
  const auto classes = static_cast<std::size_t>(allow_end ? c.unit_classes() : c.unit_size);
  auto row = logits.data();
  std::size_t best = 0;
  for (std::size_t i = 1; i < classes; ++i)
    if (row[i] > row[best]) best = i;
  if (static_cast<std::int64_t>(best) == c.unit_eos_index()) return std::nullopt;
  return model_.vocab().unit_id(static_cast<std::int64_t>(best));
}

template <typename T>
TokenId ModelBackend<T>::push_generated_unit(TokenId unit) {
  NoGradGuard guard;
  const TokenId ids[1] = {unit};
  auto h = model_.bottom_forward(ids, &gen_bottom_);
  auto logits = model_.ctc_logits(h);
  const auto& v = model_.vocab();
  pending_top_input_ = model_.unit_encodings(ids, h);
  return ctc_frame_argmax<T>(logits.data(), v.text_size(), v.blank_id());
}

template class ModelBackend<float>;
template class ModelBackend<double>;

void run_session_threaded(Session& session, std::size_t queue_capacity,
                          const std::function<void(const StreamEvent&)>& sink) {
  BoundedQueue<StreamEvent> queue(queue_capacity);
  std::exception_ptr producer_error;
  std::thread producer([&] {
    try {
      while (auto e = session.next()) queue.push(std::move(*e));
    } catch (...) {
      producer_error = std::current_exception();
    }
    queue.close();
  });
  std::exception_ptr sink_error;
  while (auto e = queue.pop()) {
    if (sink_error) continue;  // keep draining so the producer can finish
    try {
      sink(*e);
    } catch (...) {
      sink_error = std::current_exception();
    }
  }
  producer.join();
  if (producer_error) std::rethrow_exception(producer_error);
  if (sink_error) std::rethrow_exception(sink_error);
}

}  // namespace tristream
