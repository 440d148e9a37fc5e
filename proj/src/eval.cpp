// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0

#include "tristream/eval.hpp"

#include <algorithm>
#include <sstream>

#include "json.hpp"
#include "tristream/ctc.hpp"
#include "tristream/error.hpp"

namespace tristream {

EditCounts& EditCounts::operator+=(const EditCounts& o) {
  substitutions += o.substitutions;
  deletions += o.deletions;
  insertions += o.insertions;
  reference += o.reference;
  return *this;
}

EditCounts edit_distance(std::span<const TokenId> ref, std::span<const TokenId> hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  // cost[i][j] with operation counts carried along; ties prefer substitution.
  struct Cell {
    std::int64_t cost = 0, s = 0, d = 0, i = 0;
  };
  std::vector<Cell> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = {static_cast<std::int64_t>(j), 0, 0,
                                                  static_cast<std::int64_t>(j)};
  for (std::size_t a = 1; a <= n; ++a) {
    cur[0] = {static_cast<std::int64_t>(a), 0, static_cast<std::int64_t>(a), 0};
    for (std::size_t b = 1; b <= m; ++b) {
      Cell diag = prev[b - 1];
      if (ref[a - 1] != hyp[b - 1]) {
        ++diag.cost;
        ++diag.s;
      }
      Cell del = prev[b];
      ++del.cost;
      ++del.d;
      Cell ins = cur[b - 1];
      ++ins.cost;
      ++ins.i;
      Cell best = diag;
      if (del.cost < best.cost) best = del;
      if (ins.cost < best.cost) best = ins;
      cur[b] = best;
    }
    std::swap(prev, cur);
  }
  const Cell& c = prev[m];
  return {c.s, c.d, c.i, static_cast<std::int64_t>(n)};
}

double word_error_rate(const EditCounts& counts) {
  if (counts.reference <= 0) throw DataError("WER needs a non-empty reference");
  return static_cast<double>(counts.distance()) / static_cast<double>(counts.reference);
}

std::string EvalResult::to_json() const {
  nlohmann::ordered_json j;
  j["task"] = task;
  j["metric"] = metric;
  j["value"] = value;
  j["count"] = count;
  return j.dump();
}

SessionRequest request_from_record(const CorpusRecord& r) {
  SessionRequest req;
  req.vision = r.vision;
  if (r.input_units) req.input_units = *r.input_units;
  if (r.input_text) req.input_text = *r.input_text;
  return req;
}

SessionOptions session_options(const ModelConfig& config, bool speech_output) {
  SessionOptions o;
  o.wait_k = config.wait_k;
  o.max_units_per_token = config.max_units_per_token;
  o.max_text_tokens = 32;
  o.speech_output = speech_output;
  return o;
}

namespace {

void require_records(std::span<const CorpusRecord> records, const std::string& what) {
  if (records.empty()) throw DataError("no records to evaluate for " + what);
}

}  // namespace

template <typename T>
EvalResult eval_asr(const Model<T>& model, std::span<const CorpusRecord> records) {
  require_records(records, "ASR");
  NoGradGuard guard;
  const auto& v = model.vocab();
  EditCounts total;
  for (const auto& r : records) {
    if (!r.input_units) throw DataError("record " + r.id + " has no input units");
    auto h = model.bottom_forward(*r.input_units);
    auto align = ctc_greedy_decode(model.ctc_logits(h), v.text_size(), v.blank_id());
    total += edit_distance(r.target_text, align.text());
  }
  return {"ASR", "WER", word_error_rate(total), static_cast<std::int64_t>(records.size())};
}

template <typename T>
EvalResult eval_exact_match(const Model<T>& model, std::span<const CorpusRecord> records,
                            const std::string& task_name) {
  require_records(records, task_name);
  ModelBackend<T> backend(model);
  std::int64_t hits = 0;
  for (const auto& r : records) {
    Session session(backend, request_from_record(r), session_options(model.config(), false));
    for (const auto& e : session.run()) {
      if (e.kind != EventKind::Eos) continue;
      if (std::get<EosSummary>(e.payload).text == r.target_text) ++hits;
    }
  }
  const auto n = static_cast<std::int64_t>(records.size());
  return {task_name, "exact_match", static_cast<double>(hits) / static_cast<double>(n), n};
}

template <typename T>
EvalResult eval_unit_consistency(const Model<T>& model,
                                 std::span<const CorpusRecord> records,
                                 const std::string& task_name) {
  require_records(records, task_name);
  ModelBackend<T> backend(model);
  std::int64_t hits = 0;
  for (const auto& r : records) {
    Session session(backend, request_from_record(r), session_options(model.config(), true));
    for (const auto& e : session.run()) {
      if (e.kind != EventKind::Eos) continue;
      const auto& s = std::get<EosSummary>(e.payload);
      if (s.speech_text == s.text) ++hits;
    }
  }
  const auto n = static_cast<std::int64_t>(records.size());
  return {task_name, "unit_consistency", static_cast<double>(hits) / static_cast<double>(n),
          n};
}

template <typename T>
std::vector<EvalResult> evaluate(const Model<T>& model, std::span<const CorpusRecord> records,
                                 const std::string& selection) {
  auto pick = [&](auto pred) {
    std::vector<CorpusRecord> out;
    std::copy_if(records.begin(), records.end(), std::back_inserter(out), pred);
    return out;
  };
  std::vector<EvalResult> results;
  auto by_task = [&](Task t) {
    auto subset = pick([&](const CorpusRecord& r) { return r.task == t; });
    if (subset.empty()) return false;
    if (t == Task::ASR) {
      results.push_back(eval_asr(model, std::span<const CorpusRecord>(subset)));
      return true;
    }
    results.push_back(eval_exact_match(model, std::span<const CorpusRecord>(subset),
                                       to_string(t)));
    if (task_has_target_units(t)) {
      results.push_back(eval_unit_consistency(model, std::span<const CorpusRecord>(subset),
                                              to_string(t)));
    }
    return true;
  };
  if (selection == "all") {
    for (Task t : kAllTasks) by_task(t);
  } else if (selection == "recall") {
    auto subset = pick([](const CorpusRecord& r) {
      return r.content == Content::Recall && task_has_input_units(r.task);
    });
    if (!subset.empty())
      results.push_back(eval_exact_match(model, std::span<const CorpusRecord>(subset),
                                         "recall"));
  } else if (selection == "consistency") {
    auto subset = pick([](const CorpusRecord& r) { return task_has_target_units(r.task); });
    if (!subset.empty())
      results.push_back(eval_unit_consistency(model, std::span<const CorpusRecord>(subset),
                                              "consistency"));
  } else {
    Task t;
    try {
      t = parse_task(selection);
    } catch (const ConfigError&) {
      throw ConfigError("unknown evaluation selection '" + selection + "'");
    }
    by_task(t);
  }
  if (results.empty()) throw DataError("no records match evaluation selection '" + selection + "'");
  return results;
}

#define TRISTREAM_EVAL(T)                                                              \
  template EvalResult eval_asr(const Model<T>&, std::span<const CorpusRecord>);        \
  template EvalResult eval_exact_match(const Model<T>&, std::span<const CorpusRecord>, \
                                       const std::string&);                            \
  template EvalResult eval_unit_consistency(const Model<T>&,                           \
                                            std::span<const CorpusRecord>,             \
                                            const std::string&);                       \
  template std::vector<EvalResult> evaluate(const Model<T>&,                           \
                                            std::span<const CorpusRecord>,             \
                                            const std::string&);
TRISTREAM_EVAL(float)
TRISTREAM_EVAL(double)
#undef TRISTREAM_EVAL

}  // namespace tristream
