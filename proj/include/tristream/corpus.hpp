// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic tri-modal corpus: a seed fixes a "world" (speech codec,
// key-value table, vision label names) and records are sampled from it per
// split. Files are line-delimited JSON.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tristream/codec.hpp"
#include "tristream/vocab.hpp"

namespace tristream {

enum class Task { ASR, T2T, S2T, S2S, VT2T, VS2T, VS2S };
inline constexpr std::size_t kNumTasks = 7;
inline constexpr std::array<Task, kNumTasks> kAllTasks = {
    Task::ASR, Task::T2T, Task::S2T, Task::S2S, Task::VT2T, Task::VS2T, Task::VS2S};

const char* to_string(Task task);
Task parse_task(const std::string& name);  // throws ConfigError

bool task_has_vision(Task task);
bool task_has_input_text(Task task);
bool task_has_input_units(Task task);
bool task_has_target_units(Task task);

// What the record asks for.
enum class Content { Transcribe, Echo, Recall, Label };
const char* to_string(Content content);
Content parse_content(const std::string& name);

// Prompt markers (text ids right after the reserved ones).
inline constexpr TokenId kEchoMarker = 4;
inline constexpr TokenId kAskMarker = 5;
inline constexpr TokenId kLookMarker = 6;
inline constexpr TokenId kFirstContentId = 8;

struct CorpusRecord {
  std::string id;
  Task task = Task::ASR;
  Content content = Content::Transcribe;
  std::optional<std::vector<float>> vision;  // [tokens_per_image * feature_dim]
  std::optional<std::vector<TokenId>> input_text;
  std::optional<std::vector<TokenId>> input_units;
  std::vector<TokenId> target_text;  // without eos
  std::optional<std::vector<TokenId>> target_units;

  bool operator==(const CorpusRecord&) const = default;
};

// Weights over kAllTasks.
using TaskMix = std::array<double, kNumTasks>;

// Accepts seven comma-separated weights in task order, or "NAME=w" pairs
// (unnamed tasks get 0). Throws ConfigError on a bad count, negative weight
// or zero sum.
TaskMix parse_task_mix(const std::string& text);
std::string task_mix_string(const TaskMix& mix);

struct CorpusSpec {
  std::uint64_t seed = 1;
  std::int64_t n_train = 30000;
  std::int64_t n_dev = 200;
  std::int64_t n_test = 200;
  TaskMix mix = {1, 1, 1, 1, 1, 1, 1};
  std::int64_t text_size = 64;
  std::int64_t unit_size = 96;
  std::int64_t vision_tokens = 16;
  std::int64_t vision_dim = 32;
  std::int64_t n_keys = 16;
  std::int64_t answer_length = 3;
};

enum class Split { Train, Dev, Test };
const char* to_string(Split split);

// Everything fixed by the seed and shared by all splits.
class SyntheticWorld {
 public:
  explicit SyntheticWorld(const CorpusSpec& spec);

  const CorpusSpec& spec() const { return spec_; }
  const MultimodalVocab& vocab() const { return vocab_; }
  const SyntheticSpeechCodec& codec() const { return codec_; }

  const std::vector<TokenId>& keys() const { return keys_; }
  // Answer to a key; empty if `key` is not a key.
  std::vector<TokenId> answer(TokenId key) const;
  // Name of the dominant vision channel.
  const std::vector<TokenId>& label(std::int64_t channel) const;
  std::int64_t num_labels() const { return static_cast<std::int64_t>(labels_.size()); }

  // Channel with the largest summed activation.
  std::int64_t dominant_channel(const std::vector<float>& block) const;

 private:
  CorpusSpec spec_;
  MultimodalVocab vocab_;
  SyntheticSpeechCodec codec_;
  std::vector<TokenId> keys_;
  std::vector<std::vector<TokenId>> answers_;
  std::vector<std::vector<TokenId>> labels_;
};

// Deterministic records of one split.
std::vector<CorpusRecord> generate_split(const SyntheticWorld& world, Split split);

// Throws DataError naming the record and the violated rule.
void validate_record(const CorpusRecord& record, const SyntheticWorld& world);

std::string record_to_json(const CorpusRecord& record);
CorpusRecord record_from_json(const std::string& line);  // throws DataError

void write_records(const std::filesystem::path& path,
                   const std::vector<CorpusRecord>& records);
std::vector<CorpusRecord> read_records(const std::filesystem::path& path);

// Writes corpus.json (spec), train.jsonl, dev.jsonl and test.jsonl.
void write_corpus(const CorpusSpec& spec, const std::filesystem::path& dir);
CorpusSpec read_corpus_spec(const std::filesystem::path& dir);
// Re-checks every record of every split; returns the record count.
std::size_t validate_corpus(const std::filesystem::path& dir);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);  // throws DataError

}  // namespace tristream
