// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: gen-data, validate, train, infer, eval, gradcheck.

#include <chrono>
#include <cstring>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "tristream/checkpoint.hpp"
#include "tristream/corpus.hpp"
#include "tristream/error.hpp"
#include "tristream/eval.hpp"
#include "tristream/gradcheck.hpp"
#include "tristream/ops.hpp"
#include "tristream/streaming.hpp"
#include "tristream/training.hpp"

namespace fs = std::filesystem;
using namespace tristream;

namespace {

enum class LogLevel { Quiet, Info, Debug };

LogLevel log_level() {
  const char* v = std::getenv("TRISTREAM_LOG");
  if (!v) return LogLevel::Info;
  const std::string s = v;
  if (s == "quiet" || s == "0") return LogLevel::Quiet;
  if (s == "debug" || s == "2") return LogLevel::Debug;
  return LogLevel::Info;
}

void log(LogLevel level, const std::string& msg) {
  if (level <= log_level()) std::cerr << "[tristream] " << msg << '\n';
}

template <typename F>
auto with_precision(const std::string& precision, F&& f) {
  if (precision == "float") return f(float{});
  if (precision == "double") return f(double{});
  throw ConfigError("precision must be float or double, got '" + precision + "'");
}

struct Corpus {
  CorpusSpec spec;
  std::unique_ptr<SyntheticWorld> world;
};

Corpus open_corpus(const fs::path& dir) {
  Corpus c;
  c.spec = read_corpus_spec(dir);
  c.world = std::make_unique<SyntheticWorld>(c.spec);
  return c;
}

void require_matching_vocab(const CorpusSpec& spec, const ModelConfig& config) {
  if (spec.text_size != config.text_size || spec.unit_size != config.unit_size ||
      spec.vision_tokens != config.vision_tokens_per_image ||
      spec.vision_dim != config.vision_feature_dim) {
    throw ConfigError("corpus sizes (text " + std::to_string(spec.text_size) + ", units " +
                      std::to_string(spec.unit_size) + ") do not match the model (text " +
                      std::to_string(config.text_size) + ", units " +
                      std::to_string(config.unit_size) + ")");
  }
}

// gen-data ------------------------------------------------------------------

struct GenArgs {
  std::string out;
  std::uint64_t seed = 1;
  std::int64_t n_train = CorpusSpec{}.n_train;
  std::int64_t n_dev = CorpusSpec{}.n_dev;
  std::int64_t n_test = CorpusSpec{}.n_test;
  std::string mix;
};

int cmd_gen_data(const GenArgs& a) {
  CorpusSpec spec;
  spec.seed = a.seed;
  spec.n_train = a.n_train;
  spec.n_dev = a.n_dev;
  spec.n_test = a.n_test;
  if (!a.mix.empty()) spec.mix = parse_task_mix(a.mix);
  if (spec.n_train < 0 || spec.n_dev < 0 || spec.n_test < 0)
    throw ConfigError("record counts must be non-negative");
  write_corpus(spec, a.out);
  const auto n = validate_corpus(a.out);
  log(LogLevel::Info, "wrote " + std::to_string(n) + " records to " + a.out);
  return 0;
}

int cmd_validate(const std::string& dir) {
  const auto n = validate_corpus(dir);
  nlohmann::ordered_json j;
  j["records"] = n;
  j["valid"] = true;
  std::cout << j.dump() << std::endl;
  return 0;
}

// train ---------------------------------------------------------------------

struct TrainArgs {
  int stage = 1;
  std::string config, data, out, init, report, precision = "double";
  std::uint64_t seed = 1;
};

template <typename T>
int train_with(const TrainArgs& a) {
  StageConfig stage = StageConfig::defaults(a.stage);
  ModelConfig config;
  std::optional<Checkpoint> init;
  if (!a.init.empty()) {
    if (!fs::exists(a.init)) throw ConfigError("no checkpoint at " + a.init);
    init = load_checkpoint(a.init);
    config = init->config;
  }
  if (a.stage > 1) {
    if (!init) {
      throw ConfigError("stage " + std::to_string(a.stage) +
                        " needs --init with a stage " + std::to_string(a.stage - 1) +
                        " checkpoint");
    }
    if (static_cast<int>(init->stage) < a.stage - 1) {
      throw ConfigError("stage " + std::to_string(a.stage) + " needs a stage " +
                        std::to_string(a.stage - 1) + " checkpoint, got stage " +
                        std::to_string(init->stage));
    }
  }
  if (!a.config.empty()) {
    load_train_config(a.config, stage, config);
    if (stage.stage != a.stage) {
      throw ConfigError("config is for stage " + std::to_string(stage.stage) +
                        " but --stage is " + std::to_string(a.stage));
    }
  }
  config.validate();
  stage.validate();

  auto corpus = open_corpus(a.data);
  require_matching_vocab(corpus.spec, config);
  TrainData data{corpus.world.get(), read_records(fs::path(a.data) / "train.jsonl"),
                 read_records(fs::path(a.data) / "dev.jsonl")};

  ModelParams<T> params =
      !init ? ModelParams<T>::init(config, a.seed)
      : same_architecture(init->config, config)
          ? checkpoint_params<T>(*init, config)
          : transplant_params<T>(*init, config, stage.reinit, a.seed);
  Model<T> model(config, std::move(params));

  log(LogLevel::Info, "stage " + std::to_string(a.stage) + ": " +
                          std::to_string(stage.steps) + " steps on " +
                          std::to_string(data.train.size()) + " records");
  const auto level = log_level();
  auto report = train_stage(model, data, stage, a.seed, [&](const StepLog& s) {
    if (level == LogLevel::Debug || (level == LogLevel::Info && s.step % 100 == 0))
      log(LogLevel::Info, step_to_json(s));
  });

  const auto stored = init ? std::max<std::uint32_t>(init->stage, a.stage)
                           : static_cast<std::uint32_t>(a.stage);
  save_checkpoint(a.out, make_checkpoint(config, model.params(), stored));
  const std::string report_path = a.report.empty() ? a.out + ".report.jsonl" : a.report;
  std::ofstream rep(report_path);
  if (!rep) throw DataError("cannot write report " + report_path);
  rep << report.to_jsonl();
  if (!rep) throw DataError("failed writing report " + report_path);
  for (const auto& [k, v] : report.metrics) {
    std::ostringstream line;
    line << k << " = " << v;
    log(LogLevel::Info, line.str());
  }
  log(LogLevel::Info, "wrote " + a.out + " and " + report_path);
  return 0;
}

// infer ---------------------------------------------------------------------

struct InferArgs {
  std::string model, modality_in = "speech", modality_out = "text", input, trace;
  std::string fusion, precision = "double";
  std::int64_t k = 3, w = 5, max_text_tokens = 32;
  double temperature = 0.0;
  std::uint64_t seed = 0;
  bool no_wall_clock = false;
};

Modalities parse_modalities(const std::string& text) {
  Modalities m;
  std::string token;
  std::stringstream ss(text);
  while (std::getline(ss, token, '+')) {
    if (token == "text") m.text = true;
    else if (token == "speech") m.speech = true;
    else if (token == "vision") m.vision = true;
    else throw ConfigError("unknown input modality '" + token + "' in '" + text + "'");
  }
  return m;
}

std::vector<TokenId> id_array(const nlohmann::json& j, const char* key) {
  if (!j[key].is_array()) throw DataError(std::string("'") + key + "' must be an array");
  std::vector<TokenId> out;
  for (const auto& v : j[key]) {
    if (!v.is_number_integer()) throw DataError(std::string("'") + key + "' holds a non-integer");
    out.push_back(v.get<TokenId>());
  }
  return out;
}

SessionRequest parse_request(const std::string& line, const Modalities& want,
                             const ModelConfig& config) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("input is not JSON: ") + e.what());
  }
  if (!j.is_object()) throw DataError("input line must be a JSON object");
  SessionRequest r;
  const bool has_units = j.contains("input_units");
  const bool has_text = j.contains("input_text");
  const bool has_vision = j.contains("vision");
  if (has_units != want.speech || has_text != want.text || has_vision != want.vision) {
    throw DataError("input modalities do not match --modality-in");
  }
  if (has_units) r.input_units = id_array(j, "input_units");
  if (has_text) r.input_text = id_array(j, "input_text");
  if (has_vision) {
    std::vector<float> v;
    if (j["vision"].is_string()) {
      auto bytes = base64_decode(j["vision"].get<std::string>());
      if (bytes.size() % sizeof(float) != 0) throw DataError("vision block is not float32");
      v.resize(bytes.size() / sizeof(float));
      std::memcpy(v.data(), bytes.data(), bytes.size());
    } else if (j["vision"].is_array()) {
      for (const auto& x : j["vision"]) v.push_back(x.get<float>());
    } else {
      throw DataError("'vision' must be an array or base64 string");
    }
    const auto want_size =
        static_cast<std::size_t>(config.vision_tokens_per_image * config.vision_feature_dim);
    if (v.size() != want_size) {
      throw DataError("vision block has " + std::to_string(v.size()) + " values, expected " +
                      std::to_string(want_size));
    }
    r.vision = std::move(v);
  }
  return r;
}

template <typename T>
int infer_with(const InferArgs& a) {
  const auto route = modality_route(parse_modalities(a.modality_in),
                                    [&] {
                                      if (a.modality_out == "speech") return true;
                                      if (a.modality_out == "text") return false;
                                      throw ConfigError("--modality-out must be text or speech");
                                    }());
  auto ckpt = load_checkpoint(a.model);
  ModelConfig config = ckpt.config;
  if (!a.fusion.empty()) {
    const auto f = parse_fusion_type(a.fusion);
    if (f != config.fusion_type) {
      throw ConfigError(std::string("checkpoint was trained with fusion ") +
                        to_string(config.fusion_type) + ", not " + to_string(f));
    }
  }
  config.wait_k = a.k;
  config.fusion_window = a.w;
  config.validate();
  Model<T> model(config, checkpoint_params<T>(ckpt, config));
  BackendOptions bo;
  bo.temperature = a.temperature;
  bo.seed = a.seed;
  ModelBackend<T> backend(model, bo);
  SessionOptions opts = session_options(config, route.speech_output);
  opts.max_text_tokens = a.max_text_tokens;

  std::ofstream file;
  if (!a.trace.empty()) {
    file.open(a.trace);
    if (!file) throw DataError("cannot write trace " + a.trace);
  }
  std::ostream& out = a.trace.empty() ? std::cout : file;
  std::ifstream in_file;
  if (a.input != "-") {
    in_file.open(a.input);
    if (!in_file) throw DataError("cannot read input " + a.input);
  }
  std::istream& in = a.input == "-" ? std::cin : in_file;
  std::string line;
  std::int64_t sessions = 0;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Session session(backend, parse_request(line, route.inputs, config), opts);
    run_session_threaded(session, 64, [&](const StreamEvent& e) {
      out << to_json_line(e, !a.no_wall_clock) << '\n';
      out.flush();
    });
    ++sessions;
  }
  if (sessions == 0) throw DataError("no input requests");
  return 0;
}

// eval ----------------------------------------------------------------------

struct EvalArgs {
  std::string model, data, task = "all", split = "test", precision = "double";
};

template <typename T>
int eval_with(const EvalArgs& a) {
  auto ckpt = load_checkpoint(a.model);
  Model<T> model(ckpt.config, checkpoint_params<T>(ckpt, ckpt.config));
  const auto spec = read_corpus_spec(a.data);
  require_matching_vocab(spec, ckpt.config);
  if (a.split != "dev" && a.split != "test" && a.split != "train")
    throw ConfigError("--split must be train, dev or test");
  const auto records = read_records(fs::path(a.data) / (a.split + ".jsonl"));
  if (records.empty()) throw DataError("the " + a.split + " split is empty");
  for (const auto& r : evaluate(model, std::span<const CorpusRecord>(records), a.task))
    std::cout << r.to_json() << std::endl;
  return 0;
}

// gradcheck -----------------------------------------------------------------

struct GradcheckArgs {
  std::string config;
  std::uint64_t seed = 1;
  int instances = 20;
  bool inject_fault = false;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  ModelConfig config = ModelConfig::tiny();
  if (!a.config.empty()) {
    StageConfig ignored;
    load_train_config(a.config, ignored, config);
  }
  config.validate();
  if (a.instances < 1) throw ConfigError("--instances must be at least 1");
  testing::set_fault_injection(a.inject_fault);
  const auto ctc = gradcheck_ctc(a.seed, a.instances);
  const auto full = gradcheck_model(config, a.seed, a.instances);
  testing::set_fault_injection(false);
  std::cout << ctc.to_jsonl() << full.to_jsonl() << std::flush;
  if (!ctc.passed || !full.passed) throw NumericError("gradient check failed");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Streaming tri-modal (text, speech, vision) toy model"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic corpus");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--seed", gen.seed, "Corpus seed");
  g->add_option("--n-train", gen.n_train, "Training records");
  g->add_option("--n-dev", gen.n_dev, "Dev records");
  g->add_option("--n-test", gen.n_test, "Test records");
  g->add_option("--task-mix", gen.mix,
                "Task weights: 7 comma-separated values or NAME=w pairs");

  std::string validate_dir;
  auto* v = app.add_subcommand("validate", "Check a corpus directory");
  v->add_option("--data", validate_dir, "Corpus directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Run one training stage");
  t->add_option("--stage", tr.stage, "Stage 1, 2 or 3")
      ->required()
      ->check(CLI::Range(1, 3));
  t->add_option("--config", tr.config, "key = value config file");
  t->add_option("--data", tr.data, "Corpus directory")->required();
  t->add_option("--out", tr.out, "Output checkpoint")->required();
  t->add_option("--init", tr.init, "Checkpoint to start from (required for stages 2, 3)");
  t->add_option("--report", tr.report, "Report path (default <out>.report.jsonl)");
  t->add_option("--seed", tr.seed, "Training seed");
  t->add_option("--precision", tr.precision, "float or double");

  InferArgs inf;
  auto* i = app.add_subcommand("infer", "Stream a session trace");
  i->add_option("--model", inf.model, "Checkpoint")->required();
  i->add_option("--modality-in", inf.modality_in, "e.g. speech, text, vision+speech");
  i->add_option("--modality-out", inf.modality_out, "text or speech");
  i->add_option("--input", inf.input, "JSON lines of requests, - for stdin")->required();
  i->add_option("--trace", inf.trace, "Trace file (default stdout)");
  i->add_option("--k", inf.k, "Wait-k lag")->check(CLI::PositiveNumber)->capture_default_str();
  i->add_option("--w", inf.w, "Fusion window, 0 for unbounded")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  i->add_option("--fusion", inf.fusion, "Expected fusion type of the checkpoint");
  i->add_option("--temperature", inf.temperature, "Text sampling temperature, 0 = greedy");
  i->add_option("--seed", inf.seed, "Sampling seed");
  i->add_option("--max-text-tokens", inf.max_text_tokens, "Response length cap");
  i->add_option("--precision", inf.precision, "float or double");
  i->add_flag("--no-wall-clock", inf.no_wall_clock, "Write wall_ns as 0");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score a checkpoint on a corpus split");
  e->add_option("--model", ev.model, "Checkpoint")->required();
  e->add_option("--data", ev.data, "Corpus directory")->required();
  e->add_option("--task", ev.task, "Task name, recall, consistency or all");
  e->add_option("--split", ev.split, "train, dev or test");
  e->add_option("--precision", ev.precision, "float or double");

  GradcheckArgs gc;
  auto* c = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  c->add_option("--config", gc.config, "Model overrides for the tiny config");
  c->add_option("--seed", gc.seed, "Seed");
  c->add_option("--instances", gc.instances, "Random instances per check");
  c->add_flag("--inject-fault", gc.inject_fault, "Break one backward rule (negative control)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*g) return cmd_gen_data(gen);
    if (*v) return cmd_validate(validate_dir);
    if (*t) return with_precision(tr.precision, [&](auto x) { return train_with<decltype(x)>(tr); });
    if (*i) return with_precision(inf.precision, [&](auto x) { return infer_with<decltype(x)>(inf); });
    if (*e) return with_precision(ev.precision, [&](auto x) { return eval_with<decltype(x)>(ev); });
    if (*c) return cmd_gradcheck(gc);
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  } catch (const DataError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 3;
  } catch (const NumericError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 4;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 1;
}
