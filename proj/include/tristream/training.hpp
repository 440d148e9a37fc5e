// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0
//
// Three-stage training: stage 1 vision projection + core on text targets,
// stage 2 bottom/top speech stacks on CTC + next-unit losses, stage 3 core
// only on mixed-modality text targets.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tristream/corpus.hpp"
#include "tristream/model.hpp"

namespace tristream {

// Stacks whose computation records a graph. Groups left false run without
// one. Whether a stack's own weights get gradients is decided separately by
// requires_grad, so a recorded stack may be frozen and only pass gradients on.
struct GradGroups {
  bool vision = false;
  bool bottom = false;
  bool core = false;
  bool top = false;
};

struct LossWeights {
  double ctc = 1.0;
  double unit = 1.0;
  double text = 1.0;
};

enum LossTerm : unsigned {
  kCtcInput = 1u << 0,   // bottom CTC on input units vs. their transcript
  kCtcTarget = 1u << 1,  // bottom CTC on target units vs. target text
  kUnitLoss = 1u << 2,   // top-stack next-unit cross-entropy
  kTextLoss = 1u << 3,   // core next-token cross-entropy on the response
};

template <typename T>
struct SampleLoss {
  Tensor<T> total;  // undefined when no term applied
  double ctc = 0, unit = 0, text = 0;
  int terms = 0;
  bool infeasible = false;  // a CTC term was dropped
  bool counts_clamped = false;
};

// Core context rows [H_V : H_U or blank-free H_U : prompt text : bos] for a
// record.
template <typename T>
Tensor<T> record_context(const Model<T>& model, const CorpusRecord& record,
                         const GradGroups& grads);

// Text transcript of a record's input units (ASR target or decoded prompt).
std::optional<std::vector<TokenId>> input_transcript(const CorpusRecord& record,
                                                     const SyntheticSpeechCodec& codec);

template <typename T>
SampleLoss<T> sample_loss(const Model<T>& model, const CorpusRecord& record,
                          const SyntheticSpeechCodec& codec, unsigned terms,
                          const LossWeights& weights, const GradGroups& grads);

struct StageConfig {
  int stage = 1;
  std::int64_t steps = 4000;
  std::int64_t batch_size = 8;
  double lr = 1e-3;
  std::int64_t warmup = 50;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double clip = 1.0;
  LossWeights weights;
  std::optional<TaskMix> mix;  // default: the stage's tasks, uniformly
  std::int64_t log_every = 1;
  // Trainable-set override: "default" or "top" (top stack and its heads).
  std::string trainable = "default";
  // Parameter-name prefixes re-initialized before training (ablations).
  std::vector<std::string> reinit;
  std::int64_t eval_records = 0;  // dev records scored at the end (0 = all)

  void validate() const;  // throws ConfigError

  // Baseline settings of a stage (stage 1 uses a higher learning rate).
  static StageConfig defaults(int stage);
};

// Tasks a stage can learn from, and which loss terms apply to each.
bool stage_uses_task(int stage, Task task);
unsigned stage_terms(int stage, Task task);
GradGroups stage_grads(const StageConfig& config);

// Names of trainable parameters and the embedding rows [begin, end) a stage
// may update.
struct TrainableSet {
  std::vector<std::string> names;
  std::int64_t embed_begin = 0;
  std::int64_t embed_end = 0;
  bool contains(const std::string& name) const;
};
TrainableSet trainable_set(const StageConfig& stage, const ModelConfig& config);

// Parses "key = value" lines; '#' starts a comment. Model keys update
// `model`, stage keys update `stage`. Throws ConfigError naming the line.
void parse_train_config(const std::string& text, StageConfig& stage, ModelConfig& model);
void load_train_config(const std::filesystem::path& path, StageConfig& stage,
                       ModelConfig& model);

template <typename T>
class AdamW {
 public:
  AdamW(ModelParams<T>& params, TrainableSet set, const StageConfig& config);
  // Clips the global gradient norm, then applies one update at `lr`.
  // Returns the pre-clip gradient norm.
  double step(double lr);

 private:
  struct Slot {
    std::string name;
    Tensor<T> param;
    std::size_t begin = 0, end = 0;  // element range updated
    std::vector<double> m, v;
    bool decay = false;
  };
  std::vector<Slot> slots_;
  StageConfig config_;
  std::int64_t t_ = 0;
};

struct StepLog {
  int stage = 0;
  std::int64_t step = 0;
  double loss = 0, ctc = 0, unit = 0, text = 0;
  double lr = 0;
  double grad_norm = 0;
  std::int64_t skipped = 0;
};

struct TrainReport {
  int stage = 0;
  std::vector<StepLog> steps;
  std::map<std::string, double> metrics;
  double wall_seconds = 0;
  std::int64_t skipped_samples = 0;
  std::int64_t clamped_samples = 0;

  // One JSON object per step, then one summary object.
  std::string to_jsonl() const;
};

std::string step_to_json(const StepLog& log);

struct TrainData {
  const SyntheticWorld* world = nullptr;
  std::vector<CorpusRecord> train;
  std::vector<CorpusRecord> dev;
};

// Runs one stage in place on `model`. Throws ConfigError when the corpus
// has no records for the stage, NumericError on a non-finite loss.
template <typename T>
TrainReport train_stage(Model<T>& model, const TrainData& data, const StageConfig& config,
                        std::uint64_t seed,
                        const std::function<void(const StepLog&)>& on_step = {});

// Copies every tensor of `from` whose name exists in `into` unless it
// matches a prefix in `skip`.
template <typename T>
void copy_params_except(const ModelParams<T>& from, ModelParams<T>& into,
                        const std::vector<std::string>& skip);

}  // namespace tristream
