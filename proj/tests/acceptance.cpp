// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance checks. Each criterion prints one line:
//   criterion <n> PASS|FAIL <name>: <measurements>
// Criterion 5 trains the baseline model into --work; 4, 6 and 7 reuse it.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "oracles.hpp"
#include "stream_fixtures.hpp"
#include "tristream/checkpoint.hpp"
#include "tristream/ctc.hpp"
#include "tristream/eval.hpp"
#include "tristream/gradcheck.hpp"
#include "tristream/training.hpp"

using namespace tristream;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path work;
  std::uint64_t seed = 1;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// The corpus every trained criterion uses.
CorpusSpec baseline_corpus() {
  CorpusSpec s;
  s.n_dev = 800;
  s.n_test = 200;
  return s;
}

fs::path stage_path(const Context& cx, int stage) {
  return cx.work / ("baseline_stage" + std::to_string(stage) + ".ckpt");
}

Model<double> load_model(const fs::path& p) {
  auto ck = load_checkpoint(p);
  return Model<double>(ck.config, checkpoint_params<double>(ck, ck.config));
}

std::vector<CorpusRecord> speech_output(const std::vector<CorpusRecord>& records) {
  std::vector<CorpusRecord> out;
  for (const auto& r : records)
    if (task_has_target_units(r.task)) out.push_back(r);
  return out;
}

// 1 -------------------------------------------------------------------------

Outcome ctc_oracle(const Context& cx) {
  constexpr std::size_t symbols = 3;
  constexpr TokenId blank = 2;
  std::mt19937_64 rng(cx.seed);
  std::vector<std::vector<TokenId>> targets{{}};
  for (std::size_t len = 1; len <= 3; ++len) {
    std::vector<std::vector<TokenId>> next;
    for (const auto& t : targets) {
      if (t.size() != len - 1) continue;
      for (TokenId s : {0, 1}) {
        auto e = t;
        e.push_back(s);
        next.push_back(e);
      }
    }
    targets.insert(targets.end(), next.begin(), next.end());
  }
  double worst = 0;
  int cases = 0, mismatched_inf = 0;
  for (std::size_t frames = 1; frames <= 6; ++frames) {
    for (int draw = 0; draw < 3; ++draw) {
      auto logits = oracle::randn(frames * symbols, rng, 2.0);
      Tensor<double> t({frames, symbols}, logits);
      for (const auto& target : targets) {
        const double got = ctc_loss(t, target, blank).item();
        const double want = oracle::ctc_enumerate(logits, frames, symbols, target, blank);
        ++cases;
        if (std::isinf(want) || std::isinf(got)) {
          mismatched_inf += std::isinf(want) != std::isinf(got);
          continue;
        }
        worst = std::max(worst, std::abs(got - want));
      }
    }
  }
  return {worst <= 1e-6 && mismatched_inf == 0,
          fmt("max_abs_diff=%.3g over %d (length, target, logits) cases, infeasibility "
              "mismatches=%d",
              worst, cases, mismatched_inf)};
}

// 2 -------------------------------------------------------------------------

Outcome gradient_suite(const Context& cx) {
  auto ctc = gradcheck_ctc(cx.seed, 20);
  auto full = gradcheck_model(ModelConfig::tiny(), cx.seed, 20);
  double worst_ctc = 0, worst_full = 0;
  for (const auto& g : ctc.groups) worst_ctc = std::max(worst_ctc, g.max_rel_error);
  for (const auto& g : full.groups) worst_full = std::max(worst_full, g.max_rel_error);
  return {ctc.passed && full.passed,
          fmt("ctc max_rel_error=%.3g, model max_rel_error=%.3g over %zu parameter groups, "
              "20 instances each, tolerance 1e-3",
              worst_ctc, worst_full, full.groups.size())};
}

// 3 -------------------------------------------------------------------------

Outcome alignment_invariants(const Context& cx) {
  constexpr std::size_t symbols = 4;  // three labels and a blank
  constexpr TokenId blank = 3;
  std::mt19937_64 rng(cx.seed);
  int bad_counts = 0, bad_steps = 0, bad_incremental = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t frames = 1 + rng() % 30;
    std::vector<TokenId> path(frames);
    // Sticky paths so repeats and blank-separated repeats are common.
    for (std::size_t t = 0; t < frames; ++t)
      path[t] = (t > 0 && rng() % 2) ? path[t - 1] : static_cast<TokenId>(rng() % symbols);
    std::vector<double> logits(frames * symbols);
    std::normal_distribution<double> noise(0.0, 0.3);
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t s = 0; s < symbols; ++s)
        logits[t * symbols + s] = noise(rng) + (static_cast<TokenId>(s) == path[t] ? 4.0 : 0.0);
    auto batch = ctc_greedy_decode(Tensor<double>({frames, symbols}, logits), 3, blank);
    if (batch.path() != path) ++bad_counts;
    const auto& counts = batch.prefix_counts();
    for (std::size_t i = 0; i < frames; ++i) {
      auto prefix = std::span<const TokenId>(path.data(), i + 1);
      if (counts[i] != static_cast<std::int64_t>(oracle::collapse(prefix, blank).size())) {
        ++bad_counts;
      }
      const std::int64_t step = counts[i] - (i ? counts[i - 1] : 0);
      if (step != 0 && step != 1) ++bad_steps;
    }
    CtcAlignment inc(blank);
    for (std::size_t t = 0; t < frames; ++t) {
      extend_alignment<double>(inc, std::span<const double>(logits.data() + t * symbols, symbols),
                               3);
    }
    if (inc.path() != batch.path() || inc.prefix_counts() != counts ||
        inc.text() != batch.text()) {
      ++bad_incremental;
    }
  }
  return {bad_counts == 0 && bad_steps == 0 && bad_incremental == 0,
          fmt("1000 paths: count mismatches=%d, non-unit steps=%d, incremental mismatches=%d",
              bad_counts, bad_steps, bad_incremental)};
}

// 4 -------------------------------------------------------------------------

Outcome scheduler_invariants(const Context& cx) {
  if (!fs::exists(stage_path(cx, 3))) return {false, "no trained model (criterion 5 has not run)"};
  auto model = load_model(stage_path(cx, 3));
  SyntheticWorld world(baseline_corpus());
  auto dev = generate_split(world, Split::Dev);
  std::mt19937_64 rng(cx.seed);
  std::map<std::int64_t, int> sessions;
  int trace_failures = 0, window_violations = 0, independence_failures = 0;
  std::string first_problem;

  auto check = [&](StreamBackend& backend, StreamBackend& quiet, const SessionRequest& req,
                   SessionOptions opt) {
    fixtures::AuditBackend audit(backend);
    Session s(audit, req, opt);
    auto ev = s.run();
    ++sessions[opt.wait_k];
    const auto problem = fixtures::check_trace(ev, opt.wait_k, true);
    if (!problem.empty()) {
      ++trace_failures;
      if (first_problem.empty()) first_problem = problem;
    }
    window_violations += audit.violations();
    opt.speech_output = false;
    if (fixtures::text_tokens(Session(quiet, req, opt).run()) != fixtures::text_tokens(ev))
      ++independence_failures;
  };

  const std::int64_t ks[3] = {1, 3, 5};
  for (int rep = 0; rep < 100; ++rep) {
    const std::int64_t k = ks[rep % 3];
    // trained model on a random speech-output dev record
    const CorpusRecord* r = nullptr;
    while (!r || !task_has_target_units(r->task)) r = &dev[rng() % dev.size()];
    ModelBackend<double> backend(model), quiet(model);
    auto opt = session_options(model.config(), true);
    opt.wait_k = k;
    check(backend, quiet, request_from_record(*r), opt);

    // scripted mock with random responses and recognition noise
    std::vector<TokenId> response(rng() % 12);
    for (auto& t : response) t = 4 + static_cast<TokenId>(rng() % 12);
    fixtures::MockBackend mock(response), mock_quiet(response);
    mock.set_recognition(0.3 + 0.7 * static_cast<double>(rng() % 100) / 100.0, rng());
    SessionOptions mopt;
    mopt.wait_k = k;
    mopt.max_units_per_token = 6;
    check(mock, mock_quiet, {}, mopt);
  }
  return {trace_failures == 0 && window_violations == 0 && independence_failures == 0,
          fmt("200 sessions (100 trained, 100 mock; K=1:%d K=3:%d K=5:%d): trace "
              "violations=%d%s%s, windows past generated text=%d, text-path mismatches=%d",
              sessions[1], sessions[3], sessions[5], trace_failures,
              first_problem.empty() ? "" : " first: ", first_problem.c_str(), window_violations,
              independence_failures)};
}

// 5 -------------------------------------------------------------------------

constexpr double kMaxWer = 0.05;
constexpr double kMinRecall = 0.90;
constexpr double kMinConsistency = 0.90;
constexpr double kMaxSeconds = 1800;

Outcome toy_end_to_end(const Context& cx) {
  const auto t0 = std::chrono::steady_clock::now();
  SyntheticWorld world(baseline_corpus());
  TrainData data{&world, generate_split(world, Split::Train), generate_split(world, Split::Dev)};
  ModelConfig mc;
  Model<double> model(mc, ModelParams<double>::init(mc, cx.seed));
  for (int stage = 1; stage <= 3; ++stage) {
    auto sc = StageConfig::defaults(stage);
    sc.log_every = 500;
    sc.eval_records = 200;
    auto rep = train_stage(model, data, sc, cx.seed, [&](const StepLog& l) {
      std::fprintf(stderr, "  stage %d step %lld loss %.4f (%.0f s)\n", stage,
                   static_cast<long long>(l.step), l.loss, seconds_since(t0));
    });
    for (const auto& [k, v] : rep.metrics) std::fprintf(stderr, "  %s %.4f\n", k.c_str(), v);
    save_checkpoint(stage_path(cx, stage), make_checkpoint(mc, model.params(), stage));
  }
  const double train_seconds = seconds_since(t0);
  const std::span<const CorpusRecord> dev(data.dev);
  const double wer = evaluate(model, dev, "ASR").at(0).value;
  const double recall = evaluate(model, dev, "recall").at(0).value;
  const double consistency = evaluate(model, dev, "consistency").at(0).value;
  const double total = seconds_since(t0);
  return {wer <= kMaxWer && recall >= kMinRecall && consistency >= kMinConsistency &&
              total <= kMaxSeconds,
          fmt("dev ASR WER=%.4f (<= %.2f), speech recall exact match=%.4f (>= %.2f), "
              "unit_consistency=%.4f (>= %.2f), training %.0f s, total %.0f s (<= %.0f)",
              wer, kMaxWer, recall, kMinRecall, consistency, kMinConsistency, train_seconds,
              total, kMaxSeconds)};
}

// 6 -------------------------------------------------------------------------

Outcome fusion_ablation(const Context& cx) {
  if (!fs::exists(stage_path(cx, 3))) return {false, "no trained model (criterion 5 has not run)"};
  const auto ck = load_checkpoint(stage_path(cx, 3));
  SyntheticWorld world(baseline_corpus());
  TrainData data{&world, generate_split(world, Split::Train), generate_split(world, Split::Dev)};
  const auto dev = speech_output(data.dev);
  struct Variant {
    const char* name;
    FusionType type;
    std::int64_t window;
  };
  const Variant variants[] = {{"attention_w5", FusionType::Attention, 5},
                              {"add_input", FusionType::AddInput, 5},
                              {"attention_w1", FusionType::Attention, 1},
                              {"attention_winf", FusionType::Attention, kUnboundedWindow},
                              {"add_per_layer", FusionType::AddPerLayer, 5}};
  std::map<std::string, double> score;
  std::string detail;
  for (const auto& v : variants) {
    ModelConfig mc = ck.config;
    mc.fusion_type = v.type;
    mc.fusion_window = v.window;
    auto sc = StageConfig::defaults(2);
    sc.trainable = "top";
    sc.reinit = {"top.", "top_norm", "top_start", "unit_head"};
    sc.log_every = sc.steps;
    sc.eval_records = 1;
    Model<double> model(mc, transplant_params<double>(ck, mc, sc.reinit, 7));
    train_stage(model, data, sc, 7);
    score[v.name] =
        eval_unit_consistency(model, std::span<const CorpusRecord>(dev), "speech").value;
    detail += fmt("%s%s=%.4f", detail.empty() ? "" : ", ", v.name, score[v.name]);
    std::fprintf(stderr, "  %s unit_consistency %.4f\n", v.name, score[v.name]);
  }
  const bool over_add = score["attention_w5"] >= score["add_input"];
  const bool over_w1 = score["attention_w5"] >= score["attention_w1"];
  return {over_add && over_w1,
          fmt("unit_consistency on %zu dev sessions: ", dev.size()) + detail +
              fmt("; W=5 >= add_input: %s, W=5 >= W=1: %s", over_add ? "yes" : "no",
                  over_w1 ? "yes" : "no")};
}

// 7 -------------------------------------------------------------------------

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Outcome round_trips(const Context& cx) {
  int failures = 0;
  std::string notes;
  auto fail = [&](const std::string& what) {
    ++failures;
    notes += (notes.empty() ? "" : "; ") + what;
  };

  // checkpoint: trained model if present, otherwise a fresh one
  const fs::path src = fs::exists(stage_path(cx, 3)) ? stage_path(cx, 3) : fs::path();
  Checkpoint ck;
  if (src.empty()) {
    ModelConfig mc;
    ck = make_checkpoint(mc, ModelParams<float>::init(mc, cx.seed), 0);
  } else {
    ck = load_checkpoint(src);
  }
  const auto copy = cx.work / "roundtrip.ckpt";
  save_checkpoint(copy, ck);
  auto back = load_checkpoint(copy);
  save_checkpoint(cx.work / "roundtrip2.ckpt", back);
  if (read_bytes(copy) != read_bytes(cx.work / "roundtrip2.ckpt")) fail("checkpoint bytes differ");
  if (!src.empty() && read_bytes(copy) != read_bytes(src)) fail("checkpoint differs from source");
  for (std::size_t i = 0; i < ck.tensors.size(); ++i)
    if (ck.tensors[i].second.values() != back.tensors[i].second.values())
      fail("tensor " + ck.tensors[i].first + " changed");

  // corpus regeneration
  CorpusSpec spec = baseline_corpus();
  spec.n_train = 2000;
  write_corpus(spec, cx.work / "corpus_a");
  write_corpus(spec, cx.work / "corpus_b");
  for (const char* f : {"corpus.json", "train.jsonl", "dev.jsonl", "test.jsonl"})
    if (read_bytes(cx.work / "corpus_a" / f) != read_bytes(cx.work / "corpus_b" / f))
      fail(std::string("corpus file ") + f + " differs");
  if (read_records(cx.work / "corpus_a" / "dev.jsonl") !=
      generate_split(SyntheticWorld(spec), Split::Dev))
    fail("corpus does not read back to the generated records");

  // trace re-runs, direct and threaded
  Model<double> model(back.config, checkpoint_params<double>(back, back.config));
  SyntheticWorld world(spec);
  auto dev = speech_output(generate_split(world, Split::Dev));
  dev.resize(std::min<std::size_t>(dev.size(), 20));
  int traces = 0;
  for (const auto& r : dev) {
    auto render = [&](bool threaded) {
      ModelBackend<double> backend(model);
      Session s(backend, request_from_record(r), session_options(model.config(), true));
      std::ostringstream out;
      auto sink = [&](const StreamEvent& e) { out << to_json_line(e, false) << '\n'; };
      if (threaded) {
        run_session_threaded(s, 4, sink);
      } else {
        for (const auto& e : s.run()) sink(e);
      }
      return out.str();
    };
    const auto first = render(false);
    if (first != render(false) || first != render(true)) fail("trace of " + r.id + " differs");
    for (std::istringstream in(first); !in.eof();) {
      std::string line;
      if (!std::getline(in, line) || line.empty()) continue;
      if (to_json_line(from_json_line(line), false) != line) fail("event line does not parse back");
    }
    ++traces;
  }
  return {failures == 0,
          fmt("checkpoint %zu tensors bitwise, corpus 4 files byte-identical, %d traces "
              "re-run identical (direct and threaded)",
              ck.tensors.size(), traces) +
              (notes.empty() ? "" : "; failures: " + notes)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  int only = 0;
  Context cx;
  std::string work = "acceptance_work";
  app.add_option("--criterion", only, "Run one criterion (0 = all)")->check(CLI::Range(0, 7));
  app.add_option("--work", work, "Directory for trained checkpoints");
  app.add_option("--seed", cx.seed, "Seed");
  CLI11_PARSE(app, argc, argv);
  cx.work = work;
  fs::create_directories(cx.work);

  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome(const Context&)> run;
  };
  // 5 runs before 4, 6 and 7 because they use its model.
  const Criterion order[] = {{1, "ctc_oracle_equivalence", ctc_oracle},
                             {2, "gradient_suite", gradient_suite},
                             {3, "alignment_invariants", alignment_invariants},
                             {5, "toy_end_to_end", toy_end_to_end},
                             {4, "scheduler_invariants", scheduler_invariants},
                             {6, "fusion_ablation", fusion_ablation},
                             {7, "format_round_trips", round_trips}};
  std::map<int, std::string> lines;
  bool all = true;
  for (const auto& c : order) {
    if (only != 0 && c.id != only) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run(cx);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    all = all && o.pass;
    lines[c.id] = fmt("criterion %d %s %s: ", c.id, o.pass ? "PASS" : "FAIL", c.name) + o.detail +
                  fmt(" [%.1f s]", seconds_since(t0));
    std::fprintf(stderr, "%s\n", lines[c.id].c_str());
  }
  for (const auto& [id, line] : lines) std::printf("%s\n", line.c_str());
  return all ? 0 : 1;
}
