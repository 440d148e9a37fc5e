// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0

#include <random>
#include <sstream>

#include "doctest.h"
#include "stream_fixtures.hpp"
#include "tristream/checkpoint.hpp"
#include "tristream/codec.hpp"
#include "tristream/corpus.hpp"
#include "tristream/eval.hpp"
#include "tristream/streaming.hpp"

using namespace tristream;
using fixtures::AuditBackend;
using fixtures::MockBackend;

namespace {

std::string render(const std::vector<StreamEvent>& events) {
  std::ostringstream out;
  for (const auto& e : events) out << to_json_line(e, false) << '\n';
  return out.str();
}

}  // namespace

TEST_CASE("mock session matches the hand-computed trace") {
  MockBackend mock({10, 11, 12, 13, 14});
  SessionRequest req;
  req.input_units = {19, 30, 19, 21};
  SessionOptions opt;
  opt.wait_k = 3;
  Session s(mock, req, opt);
  const std::string expect =
      R"({"step":0,"kind":"AsrPartial","payload":[3],"wall_ns":0}
{"step":1,"kind":"AsrPartial","payload":[3,3],"wall_ns":0}
{"step":2,"kind":"AsrPartial","payload":[3,3,5],"wall_ns":0}
{"step":3,"kind":"TextToken","payload":10,"wall_ns":0}
{"step":4,"kind":"TextToken","payload":11,"wall_ns":0}
{"step":5,"kind":"TextToken","payload":12,"wall_ns":0}
{"step":6,"kind":"SpeechUnit","payload":26,"wall_ns":0}
{"step":7,"kind":"SpeechChunk","payload":[26],"wall_ns":0}
{"step":8,"kind":"TextToken","payload":13,"wall_ns":0}
{"step":9,"kind":"SpeechUnit","payload":27,"wall_ns":0}
{"step":10,"kind":"SpeechChunk","payload":[27],"wall_ns":0}
{"step":11,"kind":"TextToken","payload":14,"wall_ns":0}
{"step":12,"kind":"SpeechUnit","payload":28,"wall_ns":0}
{"step":13,"kind":"SpeechChunk","payload":[28],"wall_ns":0}
{"step":14,"kind":"TextToken","payload":1,"wall_ns":0}
{"step":15,"kind":"SpeechUnit","payload":29,"wall_ns":0}
{"step":16,"kind":"SpeechChunk","payload":[29],"wall_ns":0}
{"step":17,"kind":"SpeechUnit","payload":30,"wall_ns":0}
{"step":18,"kind":"SpeechChunk","payload":[30],"wall_ns":0}
{"step":19,"kind":"Eos","payload":{"text":[10,11,12,13,14],"speech_text":[10,11,12,13,14]},"wall_ns":0}
)";
  CHECK(render(s.run()) == expect);
  CHECK(s.generation_alignment().size() == s.generated_units().size() + 2);
  CHECK(s.input_alignment().text() == std::vector<TokenId>{3, 3, 5});
}

TEST_CASE("short responses get no speech") {
  MockBackend mock({10, 11});
  SessionOptions opt;
  opt.wait_k = 3;
  Session s(mock, {}, opt);
  auto ev = s.run();
  CHECK(fixtures::check_trace(ev, 3, true) == "");
  CHECK(s.generated_units().empty());
}

TEST_CASE("unit cap forces an advance with a warning") {
  MockBackend mock({10, 11, 12});
  mock.set_recognition(0.0, 1);
  SessionOptions opt;
  opt.wait_k = 1;
  opt.max_units_per_token = 4;
  Session s(mock, {}, opt);
  auto ev = s.run();
  int warnings = 0;
  for (const auto& e : ev) warnings += e.kind == EventKind::Warning;
  CHECK(warnings == 3);
  CHECK(s.generated_units().size() == 12);
  CHECK(ev.back().kind == EventKind::Eos);
}

TEST_CASE("response length cap") {
  MockBackend mock(std::vector<TokenId>(40, 9));
  SessionOptions opt;
  opt.max_text_tokens = 6;
  opt.speech_output = false;
  Session s(mock, {}, opt);
  auto ev = s.run();
  CHECK(fixtures::text_tokens(ev).size() == 6);
  CHECK(ev.back().kind == EventKind::Eos);
}

TEST_CASE("randomized mock sessions keep the scheduler contract") {
  std::mt19937_64 rng(17);
  for (int rep = 0; rep < 100; ++rep) {
    const std::int64_t k = std::array<std::int64_t, 3>{1, 3, 5}[rep % 3];
    std::vector<TokenId> response(rng() % 10);
    for (auto& t : response) t = 4 + static_cast<TokenId>(rng() % 12);
    MockBackend mock(response);
    mock.set_recognition(0.3 + 0.7 * (rng() % 100) / 100.0, rng());
    AuditBackend audit(mock);
    SessionOptions opt;
    opt.wait_k = k;
    opt.max_units_per_token = 6;
    Session s(audit, {}, opt);
    auto ev = s.run();
    CAPTURE(rep);
    CHECK(fixtures::check_trace(ev, k, true) == "");
    CHECK(audit.violations() == 0);

    MockBackend quiet(response);
    SessionOptions off = opt;
    off.speech_output = false;
    CHECK(fixtures::text_tokens(Session(quiet, {}, off).run()) == fixtures::text_tokens(ev));
  }
}

TEST_CASE("trained model sessions keep the scheduler contract") {
  auto ck = load_checkpoint(std::string(TRISTREAM_TEST_DATA) + "/golden.ckpt");
  Model<double> model(ck.config, checkpoint_params<double>(ck, ck.config));
  CorpusSpec spec;
  spec.n_train = 0;
  spec.n_dev = 0;
  spec.n_test = 60;
  spec.mix = {0, 0, 0, 1, 0, 0, 1};  // speech-output tasks
  SyntheticWorld world(spec);
  auto records = generate_split(world, Split::Test);
  int i = 0;
  for (const auto& r : records) {
    const std::int64_t k = std::array<std::int64_t, 3>{1, 3, 5}[i++ % 3];
    ModelBackend<double> backend(model);
    AuditBackend audit(backend);
    auto opt = session_options(model.config(), true);
    opt.wait_k = k;
    Session s(audit, request_from_record(r), opt);
    auto ev = s.run();
    CAPTURE(r.id);
    CHECK(fixtures::check_trace(ev, k, true) == "");
    CHECK(audit.violations() == 0);
    CHECK(s.max_window_end() <= static_cast<std::int64_t>(s.generated_text().size()));

    ModelBackend<double> plain(model);
    opt.speech_output = false;
    CHECK(fixtures::text_tokens(Session(plain, request_from_record(r), opt).run()) ==
          fixtures::text_tokens(ev));
  }
}

TEST_CASE("incremental model backend matches batch top logits") {
  auto ck = load_checkpoint(std::string(TRISTREAM_TEST_DATA) + "/golden.ckpt");
  Model<double> model(ck.config, checkpoint_params<double>(ck, ck.config));
  CorpusSpec spec;
  spec.n_train = spec.n_dev = 0;
  spec.n_test = 1;
  spec.mix = {0, 0, 0, 1, 0, 0, 0};
  SyntheticWorld world(spec);
  auto r = generate_split(world, Split::Test).at(0);
  ModelBackend<double> a(model), b(model);
  auto opt = session_options(model.config(), true);
  auto ea = Session(a, request_from_record(r), opt).run();
  auto eb = Session(b, request_from_record(r), opt).run();
  CHECK(render(ea) == render(eb));
}

TEST_CASE("threaded delivery preserves the event order") {
  MockBackend m1({10, 11, 12, 13}), m2({10, 11, 12, 13});
  Session direct(m1, {}, {});
  Session threaded(m2, {}, {});
  std::vector<StreamEvent> got;
  run_session_threaded(threaded, 2, [&](const StreamEvent& e) { got.push_back(e); });
  CHECK(render(got) == render(direct.run()));
}

TEST_CASE("event lines round trip") {
  MockBackend mock({10, 11, 12, 13});
  SessionRequest req;
  req.input_units = {19, 20};
  for (const auto& e : Session(mock, req, {}).run()) {
    const auto line = to_json_line(e);
    CHECK(line.find("{\"step\":") == 0);
    CHECK(line.find("\"kind\"") < line.find("\"payload\""));
    CHECK(line.find("\"payload\"") < line.find("\"wall_ns\""));
    CHECK(to_json_line(from_json_line(line)) == line);
  }
  CHECK_THROWS_AS(from_json_line("{\"step\":0}"), DataError);
}

TEST_CASE("modality routes") {
  CHECK(modality_route({false, false, true}, false).name == "T2T");
  CHECK(modality_route({true, true, false}, true).name == "VS2S");
  CHECK(modality_route({false, true, false}, false).name == "S2T");
  CHECK_THROWS_AS(modality_route({false, false, true}, true), ConfigError);
  CHECK_THROWS_AS(modality_route({false, false, false}, false), ConfigError);
}

TEST_CASE("session input validation") {
  MockBackend mock({10});
  SessionRequest bad;
  bad.input_units = {3};
  CHECK_THROWS_AS(Session(mock, bad, {}), DataError);
  SessionOptions opt;
  opt.wait_k = 0;
  CHECK_THROWS_AS(Session(mock, {}, opt), ConfigError);
}

TEST_CASE("codec") {
  auto vocab = build_vocab(64, 96);
  SyntheticSpeechCodec codec(vocab, 3);
  CHECK(codec.tokenize(std::vector<TokenId>{}).empty());
  for (TokenId t = 0; t < 64; ++t) {
    auto w = codec.expansion(t);
    CHECK(w.size() >= 1);
    CHECK(w.size() <= 4);
    CHECK(codec.is_marker(w[0]));
    for (std::size_t i = 1; i < w.size(); ++i) CHECK_FALSE(codec.is_marker(w[i]));
  }
  std::mt19937_64 rng(1);
  double units = 0, tokens = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    std::vector<TokenId> text(rng() % 12);
    for (auto& t : text) t = static_cast<TokenId>(rng() % 64);
    auto u = codec.tokenize(text);
    units += static_cast<double>(u.size());
    tokens += static_cast<double>(text.size());
    auto back = codec.decode(u);
    REQUIRE(back.has_value());
    CHECK(*back == text);
  }
  CHECK(units / tokens >= 1.0);
  CHECK(units / tokens <= 4.0);
  CHECK_THROWS_AS(codec.tokenize(std::vector<TokenId>{70}), DataError);
  CHECK_THROWS_AS(SyntheticSpeechCodec(build_vocab(64, 32), 1), ConfigError);
  CHECK(SyntheticSpeechCodec(vocab, 3).tokenize(std::vector<TokenId>{5, 9}) ==
        codec.tokenize(std::vector<TokenId>{5, 9}));
}

TEST_CASE("speech chunks") {
  auto vocab = build_vocab(64, 96);
  SyntheticSpeechCodec codec(vocab, 3);
  CHECK(speech_synthesize(std::vector<TokenId>{}, codec).empty());
  auto one = codec.tokenize(std::vector<TokenId>{12});
  CHECK(speech_synthesize(one, codec).size() == 1);
  std::vector<TokenId> text{12, 40, 40, 7};
  auto units = codec.tokenize(text);
  units.push_back(codec.expansion(9)[0]);  // unfinished trailing codeword
  auto chunks = speech_synthesize(units, codec);
  std::vector<TokenId> joined;
  for (const auto& c : chunks) joined.insert(joined.end(), c.begin(), c.end());
  CHECK(joined == units);
  CHECK(chunks.size() == text.size() + 1);
}
