// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0

#include "tristream/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"
#include "tristream/ctc.hpp"
#include "tristream/error.hpp"
#include "tristream/eval.hpp"

namespace tristream {

namespace {

bool starts_with(const std::string& s, const std::string& prefix) {
  return s.compare(0, prefix.size(), prefix) == 0;
}

template <typename T>
Tensor<T> vision_tensor(const ModelConfig& c, const std::vector<float>& block) {
  const Shape shape{static_cast<std::size_t>(c.vision_tokens_per_image),
                    static_cast<std::size_t>(c.vision_feature_dim)};
  if (shape_numel(shape) != block.size()) {
    throw DataError("vision block of " + std::to_string(block.size()) +
                    " values does not match " + shape_string(shape));
  }
  return Tensor<T>(shape, std::vector<T>(block.begin(), block.end()));
}

template <typename T>
Tensor<T> context_rows(const Model<T>& model, const CorpusRecord& r, const Tensor<T>* h_in,
                       const GradGroups& grads) {
  std::vector<Tensor<T>> parts;
  if (r.vision) {
    std::optional<NoGradGuard> off;
    if (!grads.vision) off.emplace();
    parts.push_back(model.vision_encode(vision_tensor<T>(model.config(), *r.vision)));
  }
  if (r.input_units && !r.input_units->empty()) {
    std::optional<NoGradGuard> off;
    if (!grads.bottom) off.emplace();
    Tensor<T> h = h_in ? *h_in : model.bottom_forward(*r.input_units);
    if (model.config().remove_input_blanks) {
      const auto& v = model.vocab();
      CtcAlignment align(v.blank_id());
      {
        NoGradGuard values_only;
        align = ctc_greedy_decode(model.ctc_logits(h), v.text_size(), v.blank_id());
      }
      h = remove_blanks(h, align);
    }
    if (h.dim(0) > 0) parts.push_back(h);
  }
  std::optional<NoGradGuard> off;
  if (!grads.core) off.emplace();
  if (r.input_text && !r.input_text->empty()) parts.push_back(model.embed_tokens(*r.input_text));
  const TokenId bos[1] = {kBosId};
  parts.push_back(model.embed_tokens(bos));
  return concat_rows(std::span<const Tensor<T>>(parts));
}

}  // namespace

template <typename T>
Tensor<T> record_context(const Model<T>& model, const CorpusRecord& record,
                         const GradGroups& grads) {
  return context_rows<T>(model, record, nullptr, grads);
}

std::optional<std::vector<TokenId>> input_transcript(const CorpusRecord& r,
                                                     const SyntheticSpeechCodec& codec) {
  if (!r.input_units) return std::nullopt;
  if (r.task == Task::ASR) return r.target_text;
  return codec.decode(*r.input_units);
}

template <typename T>
SampleLoss<T> sample_loss(const Model<T>& model, const CorpusRecord& r,
                          const SyntheticSpeechCodec& codec, unsigned terms,
                          const LossWeights& weights, const GradGroups& grads) {
  const auto& vocab = model.vocab();
  const TokenId blank = vocab.blank_id();
  SampleLoss<T> out;
  std::vector<Tensor<T>> parts;
  std::vector<T> scales;
  auto add_term = [&](const Tensor<T>& loss, double weight, double& slot) {
    slot += static_cast<double>(loss.item());
    if (weight == 0.0) return;
    parts.push_back(loss);
    scales.push_back(static_cast<T>(weight));
  };

  Tensor<T> h_in;
  if ((terms & kCtcInput) && r.input_units) {
    const auto transcript = input_transcript(r, codec);
    if (!transcript) throw DataError("record " + r.id + ": input units do not decode");
    std::optional<NoGradGuard> off;
    if (!grads.bottom) off.emplace();
    h_in = model.bottom_forward(*r.input_units);
    auto loss = ctc_loss(model.ctc_logits(h_in), *transcript, blank);
    if (std::isfinite(static_cast<double>(loss.item()))) {
      add_term(loss, weights.ctc, out.ctc);
      ++out.terms;
    } else {
      out.infeasible = true;
    }
  }

  const bool want_text = terms & kTextLoss;
  const bool want_units = (terms & kUnitLoss) && r.target_units;
  const bool want_ctc_target = (terms & kCtcTarget) && r.target_units;
  if (want_text || want_units) {
    const auto& y = r.target_text;
    const std::size_t m = y.size();
    std::vector<TokenId> response(y.begin(), y.end());
    response.push_back(kEosId);
    Tensor<T> ctx = context_rows<T>(model, r, h_in.defined() ? &h_in : nullptr, grads);
    CoreOutput<T> core;
    {
      std::optional<NoGradGuard> off;
      if (!grads.core) off.emplace();
      const Tensor<T> rows[2] = {ctx, model.embed_tokens(response)};
      core = model.core_forward(concat_rows(std::span<const Tensor<T>>(rows)));
    }
    const std::size_t L = core.hidden.dim(0);
    if (want_text) {
      auto logits = slice_rows(core.logits, L - m - 2, L - 1);
      add_term(cross_entropy(logits, std::span<const TokenId>(response)), weights.text,
               out.text);
      ++out.terms;
    }
    if (want_units) {
      const auto& units = *r.target_units;
      const std::size_t n = units.size();
      Tensor<T> text_states = slice_rows(core.hidden, L - m - 1, L);
      Tensor<T> h_t, ctc_lg;
      {
        std::optional<NoGradGuard> off;
        if (!grads.bottom) off.emplace();
        h_t = model.bottom_forward(units);
        ctc_lg = model.ctc_logits(h_t);
      }
      const auto align = ctc_greedy_decode(ctc_lg, vocab.text_size(), blank);
      const auto& prefix = align.prefix_counts();
      std::vector<std::int64_t> counts(n + 1, 0);
      for (std::size_t i = 1; i <= n; ++i) {
        counts[i] = prefix[i - 1];
        if (counts[i] > static_cast<std::int64_t>(m)) {
          counts[i] = static_cast<std::int64_t>(m);
          out.counts_clamped = true;
        }
      }
      std::vector<TokenId> targets(n + 1);
      for (std::size_t i = 0; i < n; ++i) targets[i] = vocab.unit_index(units[i]);
      targets[n] = model.config().unit_eos_index();
      if (want_ctc_target) {
        auto loss = ctc_loss(ctc_lg, y, blank);
        if (std::isfinite(static_cast<double>(loss.item()))) {
          add_term(loss, weights.ctc, out.ctc);
          ++out.terms;
        } else {
          out.infeasible = true;
        }
      }
      std::optional<NoGradGuard> off;
      if (!grads.top) off.emplace();
      auto inputs = model.top_inputs(model.unit_encodings(units, h_t));
      auto logits = model.top_forward(inputs, text_states, counts);
      add_term(cross_entropy(logits, std::span<const TokenId>(targets)), weights.unit,
               out.unit);
      ++out.terms;
    }
  } else if (want_ctc_target) {
    std::optional<NoGradGuard> off;
    if (!grads.bottom) off.emplace();
    auto loss = ctc_loss(model.ctc_logits(model.bottom_forward(*r.target_units)),
                         r.target_text, blank);
    if (std::isfinite(static_cast<double>(loss.item()))) {
      add_term(loss, weights.ctc, out.ctc);
      ++out.terms;
    } else {
      out.infeasible = true;
    }
  }
  if (!parts.empty()) {
    out.total = parts.size() == 1 && scales[0] == T(1)
                    ? parts[0]
                    : weighted_sum(std::span<const Tensor<T>>(parts),
                                   std::span<const T>(scales));
  }
  return out;
}

// Stage configuration ------------------------------------------------------

StageConfig StageConfig::defaults(int stage) {
  StageConfig c;
  c.stage = stage;
  if (stage == 1) c.lr = 3e-3;
  return c;
}

void StageConfig::validate() const {
  if (stage < 1 || stage > 3) throw ConfigError("stage must be 1, 2 or 3");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr > 0)) throw ConfigError("lr must be > 0");
  if (warmup < 0) throw ConfigError("warmup must be >= 0");
  if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1))
    throw ConfigError("betas must lie in [0, 1)");
  if (clip < 0) throw ConfigError("clip must be >= 0 (0 disables clipping)");
  if (weights.ctc < 0 || weights.unit < 0 || weights.text < 0)
    throw ConfigError("loss weights must be >= 0");
  if (trainable != "default" && trainable != "top")
    throw ConfigError("trainable must be 'default' or 'top'");
  if (trainable == "top" && stage != 2)
    throw ConfigError("trainable = top only applies to stage 2");
  if (log_every < 1) throw ConfigError("log_every must be >= 1");
  if (eval_records < 0) throw ConfigError("eval_records must be >= 0");
  if (mix) {
    double total = 0;
    for (std::size_t i = 0; i < kNumTasks; ++i)
      if (stage_uses_task(stage, kAllTasks[i])) total += (*mix)[i];
    if (total <= 0) throw ConfigError("task mix has no weight on stage tasks");
  }
}

bool stage_uses_task(int stage, Task task) {
  switch (stage) {
    case 1:
      return task == Task::T2T || task == Task::VT2T;
    case 2:
      return task_has_input_units(task) || task_has_target_units(task);
    case 3:
      return task != Task::ASR;
    default:
      return false;
  }
}

unsigned stage_terms(int stage, Task task) {
  if (!stage_uses_task(stage, task)) return 0;
  switch (stage) {
    case 1:
      return kTextLoss;
    case 3:
      return task_has_target_units(task) ? kTextLoss | kUnitLoss : kTextLoss;
    case 2: {
      unsigned t = kCtcInput;
      if (task_has_target_units(task)) t |= kCtcTarget | kUnitLoss;
      return t;
    }
    default:
      return 0;
  }
}

GradGroups stage_grads(const StageConfig& c) {
  GradGroups g;
  if (c.trainable == "top") {
    g.top = true;
    return g;
  }
  switch (c.stage) {
    case 1:
      g.vision = g.core = true;
      break;
    case 2:
      g.bottom = g.top = true;
      break;
    case 3:
      // The frozen top stack still carries the unit loss back into the core.
      g.core = g.top = true;
      break;
  }
  return g;
}

bool TrainableSet::contains(const std::string& name) const {
  if (name == "embed") return embed_end > embed_begin;
  for (const auto& prefix : names)
    if (starts_with(name, prefix)) return true;
  return false;
}

TrainableSet trainable_set(const StageConfig& stage, const ModelConfig& config) {
  TrainableSet s;
  const std::int64_t text = config.text_size;
  const std::int64_t total = config.text_size + config.unit_size + 1;
  if (stage.trainable == "top") {
    s.names = {"top.", "top_norm", "top_start", "unit_head"};
    return s;
  }
  switch (stage.stage) {
    case 1:
      s.names = {"vision.", "core.", "core_norm", "text_head"};
      s.embed_begin = 0;
      s.embed_end = text;
      break;
    case 2:
      s.names = {"bottom.", "bottom_norm", "ctc_head", "top.", "top_norm", "top_start",
                 "unit_head"};
      s.embed_begin = text;
      s.embed_end = total;
      break;
    case 3:
      s.names = {"core.", "core_norm", "text_head"};
      s.embed_begin = 0;
      s.embed_end = text;
      break;
    default:
      throw ConfigError("stage must be 1, 2 or 3");
  }
  return s;
}

// Config file ------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void parse_train_config(const std::string& text, StageConfig& stage, ModelConfig& model) {
  std::istringstream in(text);
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    auto fail = [&](const std::string& why) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + why);
    };
    if (eq == std::string::npos) fail("expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto as_int = [&]() -> std::int64_t {
      std::size_t used = 0;
      std::int64_t v = 0;
      try {
        v = std::stoll(value, &used);
      } catch (const std::exception&) {
        fail("'" + key + "' needs an integer");
      }
      if (used != value.size()) fail("'" + key + "' needs an integer");
      return v;
    };
    auto as_double = [&]() -> double {
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(value, &used);
      } catch (const std::exception&) {
        fail("'" + key + "' needs a number");
      }
      if (used != value.size()) fail("'" + key + "' needs a number");
      return v;
    };
    auto as_bool = [&]() -> bool {
      if (value == "true" || value == "1") return true;
      if (value == "false" || value == "0") return false;
      fail("'" + key + "' needs true or false");
      return false;
    };
    try {
      if (key == "stage") stage.stage = static_cast<int>(as_int());
      else if (key == "steps") stage.steps = as_int();
      else if (key == "batch_size") stage.batch_size = as_int();
      else if (key == "lr") stage.lr = as_double();
      else if (key == "warmup") stage.warmup = as_int();
      else if (key == "weight_decay") stage.weight_decay = as_double();
      else if (key == "beta1") stage.beta1 = as_double();
      else if (key == "beta2") stage.beta2 = as_double();
      else if (key == "clip") stage.clip = as_double();
      else if (key == "lambda_ctc") stage.weights.ctc = as_double();
      else if (key == "lambda_unit") stage.weights.unit = as_double();
      else if (key == "lambda_text") stage.weights.text = as_double();
      else if (key == "task_mix") stage.mix = parse_task_mix(value);
      else if (key == "log_every") stage.log_every = as_int();
      else if (key == "trainable") stage.trainable = value;
      else if (key == "eval_records") stage.eval_records = as_int();
      else if (key == "reinit") {
        stage.reinit.clear();
        std::stringstream ss(value);
        for (std::string p; std::getline(ss, p, ',');)
          if (!trim(p).empty()) stage.reinit.push_back(trim(p));
      }
      else if (key == "d_model") model.d_model = as_int();
      else if (key == "n_heads") model.n_heads = as_int();
      else if (key == "ffn_mult") model.ffn_mult = as_int();
      else if (key == "n_core_layers") model.n_core_layers = as_int();
      else if (key == "n_bottom_layers") model.n_bottom_layers = as_int();
      else if (key == "n_top_layers") model.n_top_layers = as_int();
      else if (key == "text_size") model.text_size = as_int();
      else if (key == "unit_size") model.unit_size = as_int();
      else if (key == "fusion_type") model.fusion_type = parse_fusion_type(value);
      else if (key == "fusion_window")
        model.fusion_window = (value == "inf" || value == "unbounded") ? kUnboundedWindow
                                                                       : as_int();
      else if (key == "wait_k") model.wait_k = as_int();
      else if (key == "max_units_per_token") model.max_units_per_token = as_int();
      else if (key == "vision_feature_dim") model.vision_feature_dim = as_int();
      else if (key == "vision_tokens_per_image") model.vision_tokens_per_image = as_int();
      else if (key == "top_input") {
        if (value == "bottom_encoding") model.top_input = TopInput::BottomEncoding;
        else if (value == "embedding") model.top_input = TopInput::Embedding;
        else fail("top_input must be bottom_encoding or embedding");
      }
      else if (key == "remove_input_blanks") model.remove_input_blanks = as_bool();
      else if (key == "rope_base") model.rope_base = as_double();
      else if (key == "norm_eps") model.norm_eps = as_double();
      else fail("unknown key '" + key + "'");
    } catch (const ConfigError& e) {
      const std::string what = e.what();
      if (starts_with(what, "config line")) throw;
      fail(what);
    }
  }
}

void load_train_config(const std::filesystem::path& path, StageConfig& stage,
                       ModelConfig& model) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  parse_train_config(ss.str(), stage, model);
}

// Optimizer ----------------------------------------------------------------

template <typename T>
AdamW<T>::AdamW(ModelParams<T>& params, TrainableSet set, const StageConfig& config)
    : config_(config) {
  for (auto& [name, t] : params.named()) {
    if (!set.contains(name)) continue;
    Slot s;
    s.name = name;
    s.param = t;
    if (name == "embed") {
      const std::size_t d = t.dim(1);
      s.begin = static_cast<std::size_t>(set.embed_begin) * d;
      s.end = static_cast<std::size_t>(set.embed_end) * d;
    } else {
      s.begin = 0;
      s.end = t.size();
    }
    s.m.assign(s.end - s.begin, 0.0);
    s.v.assign(s.end - s.begin, 0.0);
    s.decay = t.rank() == 2 && name != "top_start" && name != "embed";
    slots_.push_back(std::move(s));
  }
}

template <typename T>
double AdamW<T>::step(double lr) {
  double sq = 0;
  for (const auto& s : slots_) {
    if (!s.param.has_grad()) continue;
    const auto g = s.param.grad();
    for (std::size_t i = s.begin; i < s.end; ++i) sq += static_cast<double>(g[i]) * g[i];
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  const double scale = (config_.clip > 0 && norm > config_.clip) ? config_.clip / norm : 1.0;
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  constexpr double eps = 1e-8;
  for (auto& s : slots_) {
    auto p = s.param.mutable_data();
    const bool has = s.param.has_grad();
    std::span<const T> g = has ? s.param.grad() : std::span<const T>();
    for (std::size_t i = s.begin; i < s.end; ++i) {
      const double gi = has ? static_cast<double>(g[i]) * scale : 0.0;
      double& m = s.m[i - s.begin];
      double& v = s.v[i - s.begin];
      m = b1 * m + (1 - b1) * gi;
      v = b2 * v + (1 - b2) * gi * gi;
      double update = (m / c1) / (std::sqrt(v / c2) + eps);
      if (s.decay) update += config_.weight_decay * static_cast<double>(p[i]);
      p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * update);
    }
  }
  return norm;
}

// Reports ------------------------------------------------------------------

std::string step_to_json(const StepLog& s) {
  nlohmann::ordered_json j;
  j["stage"] = s.stage;
  j["step"] = s.step;
  j["loss"] = s.loss;
  j["ctc"] = s.ctc;
  j["unit"] = s.unit;
  j["text"] = s.text;
  j["lr"] = s.lr;
  j["grad_norm"] = s.grad_norm;
  j["skipped"] = s.skipped;
  return j.dump();
}

std::string TrainReport::to_jsonl() const {
  std::string out;
  for (const auto& s : steps) out += step_to_json(s) + '\n';
  nlohmann::ordered_json j;
  j["stage"] = stage;
  j["summary"] = true;
  j["metrics"] = metrics;
  j["wall_seconds"] = wall_seconds;
  j["skipped_samples"] = skipped_samples;
  j["clamped_samples"] = clamped_samples;
  out += j.dump() + '\n';
  return out;
}

// Training loop ------------------------------------------------------------

template <typename T>
void copy_params_except(const ModelParams<T>& from, ModelParams<T>& into,
                        const std::vector<std::string>& skip) {
  auto source = from.named();
  for (auto& [name, t] : into.named()) {
    if (std::any_of(skip.begin(), skip.end(),
                    [&](const std::string& p) { return starts_with(name, p); }))
      continue;
    auto it = std::find_if(source.begin(), source.end(),
                           [&](const auto& e) { return e.first == name; });
    if (it == source.end() || it->second.shape() != t.shape()) continue;
    auto dst = t.mutable_data();
    auto src = it->second.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

namespace {

template <typename T>
void stage_metrics(const Model<T>& model, const TrainData& data, const StageConfig& config,
                   TrainReport& report) {
  std::vector<CorpusRecord> dev = data.dev;
  if (config.eval_records > 0 && static_cast<std::int64_t>(dev.size()) > config.eval_records)
    dev.resize(static_cast<std::size_t>(config.eval_records));
  auto subset = [&](auto pred) {
    std::vector<CorpusRecord> out;
    std::copy_if(dev.begin(), dev.end(), std::back_inserter(out), pred);
    return out;
  };
  auto put = [&](const EvalResult& r) {
    report.metrics["dev_" + r.task + "_" + r.metric] = r.value;
  };
  auto text_tasks = [&](std::initializer_list<Task> tasks) {
    for (Task t : tasks) {
      auto s = subset([&](const CorpusRecord& r) { return r.task == t; });
      if (!s.empty()) put(eval_exact_match(model, std::span<const CorpusRecord>(s), to_string(t)));
    }
  };
  if (config.stage == 1) {
    text_tasks({Task::T2T, Task::VT2T});
  } else if (config.stage == 2) {
    auto asr = subset([](const CorpusRecord& r) { return r.task == Task::ASR; });
    if (!asr.empty()) put(eval_asr(model, std::span<const CorpusRecord>(asr)));
    auto speech = subset([](const CorpusRecord& r) { return task_has_target_units(r.task); });
    if (!speech.empty())
      put(eval_unit_consistency(model, std::span<const CorpusRecord>(speech), "speech"));
  } else {
    text_tasks({Task::T2T, Task::S2T, Task::VT2T, Task::VS2T});
    auto recall = subset([](const CorpusRecord& r) {
      return r.content == Content::Recall && task_has_input_units(r.task);
    });
    if (!recall.empty())
      put(eval_exact_match(model, std::span<const CorpusRecord>(recall), "recall"));
    auto speech = subset([](const CorpusRecord& r) { return task_has_target_units(r.task); });
    if (!speech.empty())
      put(eval_unit_consistency(model, std::span<const CorpusRecord>(speech), "speech"));
  }
}

}  // namespace

template <typename T>
TrainReport train_stage(Model<T>& model, const TrainData& data, const StageConfig& config,
                        std::uint64_t seed, const std::function<void(const StepLog&)>& on_step) {
  const auto started = std::chrono::steady_clock::now();
  config.validate();
  if (!data.world) throw ConfigError("training data has no corpus world");
  const auto& codec = data.world->codec();

  auto terms_for = [&](Task task) {
    unsigned terms = stage_terms(config.stage, task);
    if (config.trainable == "top") terms &= kUnitLoss;
    return terms;
  };
  TaskMix mix{};
  for (std::size_t i = 0; i < kNumTasks; ++i) {
    const bool used = terms_for(kAllTasks[i]) != 0;
    mix[i] = used ? (config.mix ? (*config.mix)[i] : 1.0) : 0.0;
  }
  std::array<std::vector<std::size_t>, kNumTasks> by_task;
  for (std::size_t i = 0; i < data.train.size(); ++i)
    by_task[static_cast<std::size_t>(data.train[i].task)].push_back(i);
  for (std::size_t i = 0; i < kNumTasks; ++i)
    if (by_task[i].empty()) mix[i] = 0.0;
  if (std::all_of(mix.begin(), mix.end(), [](double w) { return w <= 0; })) {
    throw ConfigError("corpus has no training records for stage " +
                      std::to_string(config.stage));
  }
  if (config.stage == 1 && mix[static_cast<std::size_t>(Task::VT2T)] <= 0) {
    throw ConfigError("stage 1 needs vision records (VT2T) in the corpus");
  }

  const GradGroups grads = stage_grads(config);
  const TrainableSet set = trainable_set(config, model.config());
  auto& params = model.params();
  if (!config.reinit.empty()) {
    auto fresh = ModelParams<T>::init(model.config(), seed ^ 0x7e1f1a11ULL);
    auto keep = params.clone();
    params = fresh;
    copy_params_except(keep, params, config.reinit);
  }
  for (auto& [name, t] : params.named()) t.set_requires_grad(set.contains(name));
  params.zero_grad();

  AdamW<T> opt(params, set, config);
  std::mt19937_64 rng(seed * 0x2545F4914F6CDD1DULL + static_cast<std::uint64_t>(config.stage));
  std::discrete_distribution<std::size_t> task_pick(mix.begin(), mix.end());

  TrainReport report;
  report.stage = config.stage;
  for (std::int64_t step = 0; step < config.steps; ++step) {
    const double lr =
        config.lr * std::min(1.0, static_cast<double>(step + 1) /
                                      static_cast<double>(std::max<std::int64_t>(1, config.warmup)));
    StepLog log;
    log.stage = config.stage;
    log.step = step;
    log.lr = lr;
    std::vector<Tensor<T>> losses;
    for (std::int64_t b = 0; b < config.batch_size; ++b) {
      const std::size_t task = task_pick(rng);
      const auto& pool = by_task[task];
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      const auto& record = data.train[pool[pick(rng)]];
      auto sl = sample_loss(model, record, codec, terms_for(record.task), config.weights, grads);
      if (sl.infeasible) ++log.skipped;
      if (sl.counts_clamped) ++report.clamped_samples;
      if (!sl.total.defined()) continue;
      log.ctc += sl.ctc;
      log.unit += sl.unit;
      log.text += sl.text;
      losses.push_back(sl.total);
    }
    report.skipped_samples += log.skipped;
    if (losses.empty()) {
      report.steps.push_back(log);
      continue;
    }
    const auto k = static_cast<double>(losses.size());
    std::vector<T> w(losses.size(), static_cast<T>(1.0 / k));
    auto batch = weighted_sum(std::span<const Tensor<T>>(losses), std::span<const T>(w));
    log.loss = static_cast<double>(batch.item());
    log.ctc /= k;
    log.unit /= k;
    log.text /= k;
    if (!std::isfinite(log.loss)) {
      throw NumericError("non-finite loss at stage " + std::to_string(config.stage) +
                         " step " + std::to_string(step));
    }
    if (batch.requires_grad()) {
      batch.backward();
      log.grad_norm = opt.step(lr);
    }
    params.zero_grad();
    if (step % config.log_every == 0 || step + 1 == config.steps) {
      report.steps.push_back(log);
      if (on_step) on_step(log);
    }
  }
  params.set_requires_grad(false);
  stage_metrics(model, data, config, report);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

#define TRISTREAM_TRAINING(T)                                                           \
  template Tensor<T> record_context(const Model<T>&, const CorpusRecord&,                \
                                    const GradGroups&);                                  \
  template SampleLoss<T> sample_loss(const Model<T>&, const CorpusRecord&,               \
                                     const SyntheticSpeechCodec&, unsigned,              \
                                     const LossWeights&, const GradGroups&);             \
  template class AdamW<T>;                                                               \
  template void copy_params_except(const ModelParams<T>&, ModelParams<T>&,               \
                                   const std::vector<std::string>&);                     \
  template TrainReport train_stage(Model<T>&, const TrainData&, const StageConfig&,      \
                                   std::uint64_t,                                        \
                                   const std::function<void(const StepLog&)>&);
TRISTREAM_TRAINING(float)
TRISTREAM_TRAINING(double)
#undef TRISTREAM_TRAINING

}  // namespace tristream
