// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0

#include <numeric>

#include "doctest.h"
#include "json.hpp"
#include "tristream/error.hpp"
#include "tristream/training.hpp"

using namespace tristream;

namespace {

ModelConfig small_model() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_core_layers = 1;
  c.n_bottom_layers = 1;
  c.n_top_layers = 1;
  return c;
}

struct Fixture {
  CorpusSpec spec;
  SyntheticWorld world;
  TrainData data;
  Fixture() : spec(make_spec()), world(spec) {
    data = {&world, generate_split(world, Split::Train), generate_split(world, Split::Dev)};
  }
  static CorpusSpec make_spec() {
    CorpusSpec s;
    s.n_train = 700;
    s.n_dev = 14;
    s.n_test = 1;
    return s;
  }
};

const Fixture& fixture() {
  static Fixture f;
  return f;
}

StageConfig quick(int stage, std::int64_t steps) {
  auto s = StageConfig::defaults(stage);
  s.steps = steps;
  s.batch_size = 2;
  s.log_every = 1;
  return s;
}

using Snapshot = std::vector<std::pair<std::string, std::vector<double>>>;

Snapshot snapshot(const ModelParams<double>& p) {
  Snapshot s;
  for (const auto& [name, t] : p.named()) s.emplace_back(name, t.values());
  return s;
}

// Names whose values changed, with embedding rows reported separately.
std::vector<std::string> changed(const Snapshot& before, const ModelParams<double>& after,
                                 const ModelConfig& c) {
  std::vector<std::string> out;
  auto now = snapshot(after);
  const auto d = static_cast<std::size_t>(c.d_model);
  for (std::size_t i = 0; i < now.size(); ++i) {
    if (now[i].first == "embed") {
      bool text = false, speech = false;
      for (std::size_t j = 0; j < now[i].second.size(); ++j) {
        if (now[i].second[j] == before[i].second[j]) continue;
        (static_cast<std::int64_t>(j / d) < c.text_size ? text : speech) = true;
      }
      if (text) out.push_back("embed.text");
      if (speech) out.push_back("embed.speech");
    } else if (now[i].second != before[i].second) {
      out.push_back(now[i].first);
    }
  }
  return out;
}

bool any_prefix(const std::vector<std::string>& names, const std::string& prefix) {
  for (const auto& n : names)
    if (n.compare(0, prefix.size(), prefix) == 0) return true;
  return false;
}

}  // namespace

TEST_CASE("stage task and loss tables") {
  CHECK(stage_uses_task(1, Task::VT2T));
  CHECK_FALSE(stage_uses_task(1, Task::S2T));
  CHECK(stage_uses_task(2, Task::ASR));
  CHECK_FALSE(stage_uses_task(2, Task::T2T));
  CHECK_FALSE(stage_uses_task(3, Task::ASR));
  CHECK(stage_terms(2, Task::ASR) == kCtcInput);
  CHECK(stage_terms(2, Task::S2S) == (kCtcInput | kCtcTarget | kUnitLoss));
  CHECK(stage_terms(3, Task::T2T) == stage_terms(1, Task::T2T));
  CHECK(stage_terms(3, Task::VS2S) == (kTextLoss | kUnitLoss));
  auto g = stage_grads(StageConfig::defaults(2));
  CHECK((g.bottom && g.top && !g.core && !g.vision));
}

TEST_CASE("stage 1 trains vision and core only, and learns") {
  const auto& f = fixture();
  auto c = small_model();
  Model<double> m(c, ModelParams<double>::init(c, 1));
  auto before = snapshot(m.params());
  auto sc = quick(1, 300);
  sc.batch_size = 4;
  auto rep = train_stage(m, f.data, sc, 3);
  auto diff = changed(before, m.params(), c);
  CHECK(any_prefix(diff, "core."));
  CHECK(any_prefix(diff, "vision."));
  CHECK(any_prefix(diff, "embed.text"));
  for (const char* frozen : {"bottom", "top", "ctc_head", "unit_head", "embed.speech"}) {
    CAPTURE(frozen);
    CHECK_FALSE(any_prefix(diff, frozen));
  }
  REQUIRE(rep.steps.size() == 300);
  auto avg = [&](std::size_t from, std::size_t to) {
    double s = 0;
    for (std::size_t i = from; i < to; ++i) s += rep.steps[i].loss;
    return s / static_cast<double>(to - from);
  };
  CHECK(avg(280, 300) <= 0.5 * avg(0, 20));
}

TEST_CASE("stage 2 leaves the core untouched") {
  const auto& f = fixture();
  auto c = small_model();
  Model<double> m(c, ModelParams<double>::init(c, 2));
  auto before = snapshot(m.params());
  train_stage(m, f.data, quick(2, 20), 4);
  auto diff = changed(before, m.params(), c);
  CHECK(any_prefix(diff, "bottom."));
  CHECK(any_prefix(diff, "top."));
  CHECK(any_prefix(diff, "embed.speech"));
  for (const char* frozen : {"core", "vision", "text_head", "embed.text"}) {
    CAPTURE(frozen);
    CHECK_FALSE(any_prefix(diff, frozen));
  }
}

TEST_CASE("stage 2 without the unit loss is pure CTC training") {
  const auto& f = fixture();
  auto c = small_model();
  Model<double> m(c, ModelParams<double>::init(c, 2));
  auto before = snapshot(m.params());
  auto sc = quick(2, 10);
  sc.weights.unit = 0;
  auto rep = train_stage(m, f.data, sc, 4);
  auto diff = changed(before, m.params(), c);
  CHECK(any_prefix(diff, "bottom."));
  for (const char* frozen : {"top.", "top_start", "top_norm", "unit_head"}) {
    CAPTURE(frozen);
    CHECK_FALSE(any_prefix(diff, frozen));
  }
  for (const auto& s : rep.steps) CHECK(s.loss == doctest::Approx(s.ctc).epsilon(1e-12));
}

TEST_CASE("stage 3 leaves the speech stacks untouched") {
  const auto& f = fixture();
  auto c = small_model();
  Model<double> m(c, ModelParams<double>::init(c, 3));
  auto before = snapshot(m.params());
  train_stage(m, f.data, quick(3, 10), 5);
  auto diff = changed(before, m.params(), c);
  CHECK(any_prefix(diff, "core."));
  for (const char* frozen : {"bottom", "top", "ctc_head", "unit_head", "vision", "embed.speech"}) {
    CAPTURE(frozen);
    CHECK_FALSE(any_prefix(diff, frozen));
  }
}

TEST_CASE("single-task stage 3 behaves like text-only training") {
  const auto& f = fixture();
  auto c = small_model();
  Model<double> m(c, ModelParams<double>::init(c, 3));
  auto sc = quick(3, 5);
  sc.mix = parse_task_mix("T2T=1");
  auto rep = train_stage(m, f.data, sc, 5);
  for (const auto& s : rep.steps) {
    CHECK(s.ctc == 0);
    CHECK(s.unit == 0);
    CHECK(s.loss == doctest::Approx(s.text).epsilon(1e-12));
  }
}

TEST_CASE("top-only retraining") {
  const auto& f = fixture();
  auto c = small_model();
  Model<double> m(c, ModelParams<double>::init(c, 6));
  auto before = snapshot(m.params());
  auto sc = quick(2, 5);
  sc.trainable = "top";
  sc.reinit = {"top.", "top_norm", "top_start", "unit_head"};
  auto rep = train_stage(m, f.data, sc, 6);
  auto diff = changed(before, m.params(), c);
  for (const auto& n : diff) {
    CAPTURE(n);
    CHECK((n.rfind("top", 0) == 0 || n == "unit_head"));
  }
  for (const auto& s : rep.steps) CHECK(s.ctc == 0);
}

TEST_CASE("training is reproducible from the seed") {
  const auto& f = fixture();
  auto c = small_model();
  Model<double> a(c, ModelParams<double>::init(c, 7)), b(c, ModelParams<double>::init(c, 7));
  train_stage(a, f.data, quick(2, 4), 8);
  train_stage(b, f.data, quick(2, 4), 8);
  CHECK(snapshot(a.params()) == snapshot(b.params()));
}

TEST_CASE("report lines are json") {
  const auto& f = fixture();
  auto c = small_model();
  Model<double> m(c, ModelParams<double>::init(c, 1));
  auto rep = train_stage(m, f.data, quick(1, 3), 1);
  std::istringstream in(rep.to_jsonl());
  int lines = 0;
  for (std::string line; std::getline(in, line); ++lines) {
    auto j = nlohmann::json::parse(line);
    CHECK(j.is_object());
  }
  CHECK(lines == 4);
}

TEST_CASE("config files") {
  StageConfig s;
  ModelConfig m;
  parse_train_config("# comment\nstage = 2\nlr = 0.01  # trailing\nfusion_window = inf\n"
                     "task_mix = ASR=1\nreinit = top., unit_head\n",
                     s, m);
  CHECK(s.stage == 2);
  CHECK(s.lr == 0.01);
  CHECK(m.fusion_window == kUnboundedWindow);
  CHECK(s.reinit == std::vector<std::string>{"top.", "unit_head"});
  CHECK_THROWS_AS(parse_train_config("steps = many\n", s, m), ConfigError);
  CHECK_THROWS_AS(parse_train_config("colour = blue\n", s, m), ConfigError);
  CHECK_THROWS_AS(parse_train_config("just words\n", s, m), ConfigError);
  StageConfig bad;
  bad.lr = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("stage without records is rejected") {
  const auto& f = fixture();
  TrainData only_asr{f.data.world, {}, {}};
  for (const auto& r : f.data.train)
    if (r.task == Task::ASR) only_asr.train.push_back(r);
  auto c = small_model();
  Model<double> m(c, ModelParams<double>::init(c, 1));
  CHECK_THROWS_AS(train_stage(m, only_asr, quick(1, 1), 1), ConfigError);
}
