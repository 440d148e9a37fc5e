// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tristream/corpus.hpp"
#include "tristream/model.hpp"
#include "tristream/streaming.hpp"

namespace tristream {

struct EditCounts {
  std::int64_t substitutions = 0;
  std::int64_t deletions = 0;
  std::int64_t insertions = 0;
  std::int64_t reference = 0;

  std::int64_t distance() const { return substitutions + deletions + insertions; }
  EditCounts& operator+=(const EditCounts& o);
};

// Minimum edit alignment of hyp against ref (unit costs).
EditCounts edit_distance(std::span<const TokenId> ref, std::span<const TokenId> hyp);
// (S + D + I) / N; throws DataError when the reference is empty.
double word_error_rate(const EditCounts& counts);

struct EvalResult {
  std::string task;
  std::string metric;  // WER, exact_match or unit_consistency
  double value = 0;
  std::int64_t count = 0;

  std::string to_json() const;
};

// Session request and options for a corpus record.
SessionRequest request_from_record(const CorpusRecord& record);
SessionOptions session_options(const ModelConfig& config, bool speech_output);

// WER of greedy CTC transcripts of the records' input units.
template <typename T>
EvalResult eval_asr(const Model<T>& model, std::span<const CorpusRecord> records);

// Fraction of records whose generated text equals the target.
template <typename T>
EvalResult eval_exact_match(const Model<T>& model, std::span<const CorpusRecord> records,
                            const std::string& task_name);

// Fraction of speech-output sessions whose recognized speech text (collapse of
// the CTC path over the generated units) equals the generated text.
template <typename T>
EvalResult eval_unit_consistency(const Model<T>& model,
                                 std::span<const CorpusRecord> records,
                                 const std::string& task_name);

// Selection by name: a task name (ASR, T2T, ...), "recall" (speech-input
// key-value recall), "consistency" (every speech-output record) or "all".
// Throws DataError when the selection is empty.
template <typename T>
std::vector<EvalResult> evaluate(const Model<T>& model,
                                 std::span<const CorpusRecord> records,
                                 const std::string& selection);

}  // namespace tristream
