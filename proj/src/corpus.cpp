// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0

#include "tristream/corpus.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"
#include "tristream/error.hpp"

namespace tristream {

using json = nlohmann::ordered_json;

const char* to_string(Task task) {
  switch (task) {
    case Task::ASR: return "ASR";
    case Task::T2T: return "T2T";
    case Task::S2T: return "S2T";
    case Task::S2S: return "S2S";
    case Task::VT2T: return "VT2T";
    case Task::VS2T: return "VS2T";
    case Task::VS2S: return "VS2S";
  }
  return "?";
}

Task parse_task(const std::string& name) {
  for (Task t : kAllTasks)
    if (name == to_string(t)) return t;
  throw ConfigError("unknown task '" + name + "'");
}

bool task_has_vision(Task t) {
  return t == Task::VT2T || t == Task::VS2T || t == Task::VS2S;
}
bool task_has_input_text(Task t) { return t == Task::T2T || t == Task::VT2T; }
bool task_has_input_units(Task t) {
  return t == Task::ASR || t == Task::S2T || t == Task::S2S || t == Task::VS2T ||
         t == Task::VS2S;
}
bool task_has_target_units(Task t) { return t == Task::S2S || t == Task::VS2S; }

const char* to_string(Content c) {
  switch (c) {
    case Content::Transcribe: return "transcribe";
    case Content::Echo: return "echo";
    case Content::Recall: return "recall";
    case Content::Label: return "label";
  }
  return "?";
}

Content parse_content(const std::string& name) {
  for (auto c : {Content::Transcribe, Content::Echo, Content::Recall, Content::Label})
    if (name == to_string(c)) return c;
  throw DataError("unknown content kind '" + name + "'");
}

const char* to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Dev: return "dev";
    case Split::Test: return "test";
  }
  return "?";
}

TaskMix parse_task_mix(const std::string& text) {
  TaskMix mix{};
  std::vector<std::string> parts;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) parts.push_back(item);
  const bool named = !parts.empty() && parts.front().find('=') != std::string::npos;
  auto number = [](const std::string& s) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      throw ConfigError("bad task weight '" + s + "'");
    }
    if (used != s.size() || !(v >= 0) || !std::isfinite(v)) {
      throw ConfigError("bad task weight '" + s + "'");
    }
    return v;
  };
  if (named) {
    for (const auto& p : parts) {
      const auto eq = p.find('=');
      if (eq == std::string::npos) throw ConfigError("expected NAME=weight, got '" + p + "'");
      const Task t = parse_task(p.substr(0, eq));
      mix[static_cast<std::size_t>(t)] = number(p.substr(eq + 1));
    }
  } else {
    if (parts.size() != kNumTasks) {
      throw ConfigError("task mix needs " + std::to_string(kNumTasks) +
                        " weights (ASR,T2T,S2T,S2S,VT2T,VS2T,VS2S), got " +
                        std::to_string(parts.size()));
    }
    for (std::size_t i = 0; i < kNumTasks; ++i) mix[i] = number(parts[i]);
  }
  if (std::accumulate(mix.begin(), mix.end(), 0.0) <= 0.0) {
    throw ConfigError("task mix sums to zero");
  }
  return mix;
}

std::string task_mix_string(const TaskMix& mix) {
  std::string out;
  for (std::size_t i = 0; i < kNumTasks; ++i) {
    if (i) out += ',';
    std::ostringstream os;
    os << to_string(kAllTasks[i]) << '=' << mix[i];
    out += os.str();
  }
  return out;
}

// World ----------------------------------------------------------------

namespace {

constexpr std::uint64_t kCodecSalt = 0x5eed'c0de'0001ULL;
constexpr std::uint64_t kTableSalt = 0x5eed'c0de'0002ULL;

std::uint64_t split_seed(std::uint64_t seed, Split split) {
  return seed * 0x9e3779b97f4a7c15ULL + 1000003ULL * (static_cast<std::uint64_t>(split) + 1);
}

}  // namespace

SyntheticWorld::SyntheticWorld(const CorpusSpec& spec)
    : spec_(spec),
      vocab_(spec.text_size, spec.unit_size),
      codec_(vocab_, spec.seed ^ kCodecSalt) {
  const std::int64_t n_content = spec.text_size - kFirstContentId;
  if (n_content < 2) throw ConfigError("text vocabulary too small for the corpus");
  if (spec.n_keys < 1 || spec.n_keys > n_content) {
    throw ConfigError("n_keys must be in [1, " + std::to_string(n_content) + "]");
  }
  if (spec.answer_length < 1) throw ConfigError("answer_length must be >= 1");
  if (spec.vision_tokens < 1 || spec.vision_dim < 1) {
    throw ConfigError("vision block must be non-empty");
  }
  std::mt19937_64 rng(spec.seed ^ kTableSalt);
  std::vector<TokenId> content(static_cast<std::size_t>(n_content));
  std::iota(content.begin(), content.end(), kFirstContentId);
  std::shuffle(content.begin(), content.end(), rng);
  keys_.assign(content.begin(), content.begin() + spec.n_keys);
  std::uniform_int_distribution<TokenId> pick(kFirstContentId, spec.text_size - 1);
  auto phrase = [&] {
    std::vector<TokenId> p;
    while (static_cast<std::int64_t>(p.size()) < spec.answer_length) {
      const TokenId t = pick(rng);
      if (!p.empty() && p.back() == t) continue;
      p.push_back(t);
    }
    return p;
  };
  for (std::size_t i = 0; i < keys_.size(); ++i) answers_.push_back(phrase());
  for (std::int64_t c = 0; c < spec.vision_dim; ++c) labels_.push_back(phrase());
}

std::vector<TokenId> SyntheticWorld::answer(TokenId key) const {
  auto it = std::find(keys_.begin(), keys_.end(), key);
  if (it == keys_.end()) return {};
  return answers_[static_cast<std::size_t>(it - keys_.begin())];
}

const std::vector<TokenId>& SyntheticWorld::label(std::int64_t channel) const {
  if (channel < 0 || channel >= num_labels()) {
    throw DataError("vision channel " + std::to_string(channel) + " out of range");
  }
  return labels_[static_cast<std::size_t>(channel)];
}

std::int64_t SyntheticWorld::dominant_channel(const std::vector<float>& block) const {
  const auto dim = static_cast<std::size_t>(spec_.vision_dim);
  if (block.size() != dim * static_cast<std::size_t>(spec_.vision_tokens)) {
    throw DataError("vision block has " + std::to_string(block.size()) + " values");
  }
  std::vector<double> totals(dim, 0.0);
  for (std::size_t i = 0; i < block.size(); ++i) totals[i % dim] += block[i];
  return static_cast<std::int64_t>(std::max_element(totals.begin(), totals.end()) -
                                   totals.begin());
}

// Generation -------------------------------------------------------------

std::vector<CorpusRecord> generate_split(const SyntheticWorld& world, Split split) {
  const auto& spec = world.spec();
  const auto& codec = world.codec();
  const std::int64_t count = split == Split::Train ? spec.n_train
                             : split == Split::Dev ? spec.n_dev
                                                   : spec.n_test;
  if (count < 0) throw ConfigError("negative record count");
  std::mt19937_64 rng(split_seed(spec.seed, split));
  std::discrete_distribution<std::size_t> task_pick(spec.mix.begin(), spec.mix.end());
  std::uniform_int_distribution<TokenId> any_text(kReservedTextIds, spec.text_size - 1);
  std::uniform_int_distribution<TokenId> content_id(kFirstContentId, spec.text_size - 1);
  std::uniform_int_distribution<int> asr_len(3, 8), echo_len(3, 6), coin(0, 1);
  std::uniform_int_distribution<std::size_t> key_pick(0, world.keys().size() - 1);
  std::uniform_int_distribution<std::int64_t> channel_pick(0, world.num_labels() - 1);
  std::normal_distribution<float> noise(0.0f, 0.5f);

  std::vector<CorpusRecord> records;
  records.reserve(static_cast<std::size_t>(count));
  for (std::int64_t n = 0; n < count; ++n) {
    CorpusRecord r;
    char id[32];
    std::snprintf(id, sizeof id, "%s-%06lld", to_string(split), static_cast<long long>(n));
    r.id = id;
    r.task = kAllTasks[task_pick(rng)];

    std::vector<TokenId> prompt;
    if (r.task == Task::ASR) {
      r.content = Content::Transcribe;
      const int len = asr_len(rng);
      for (int i = 0; i < len; ++i) r.target_text.push_back(any_text(rng));
      r.input_units = codec.tokenize(r.target_text);
      records.push_back(std::move(r));
      continue;
    }
    if (task_has_vision(r.task)) {
      r.content = Content::Label;
      const std::int64_t channel = channel_pick(rng);
      std::vector<float> block(static_cast<std::size_t>(spec.vision_tokens * spec.vision_dim));
      for (std::size_t i = 0; i < block.size(); ++i) {
        block[i] = noise(rng);
        if (static_cast<std::int64_t>(i % static_cast<std::size_t>(spec.vision_dim)) == channel)
          block[i] += 2.0f;
      }
      r.vision = std::move(block);
      prompt = {kLookMarker};
      r.target_text = world.label(channel);
    } else if (coin(rng) == 0) {
      r.content = Content::Echo;
      const int len = echo_len(rng);
      prompt = {kEchoMarker};
      for (int i = 0; i < len; ++i) r.target_text.push_back(content_id(rng));
      prompt.insert(prompt.end(), r.target_text.begin(), r.target_text.end());
    } else {
      r.content = Content::Recall;
      const TokenId key = world.keys()[key_pick(rng)];
      prompt = {kAskMarker, key};
      r.target_text = world.answer(key);
    }
    if (task_has_input_text(r.task)) r.input_text = prompt;
    if (task_has_input_units(r.task)) r.input_units = codec.tokenize(prompt);
    if (task_has_target_units(r.task)) r.target_units = codec.tokenize(r.target_text);
    records.push_back(std::move(r));
  }
  return records;
}

// Validation -------------------------------------------------------------

void validate_record(const CorpusRecord& r, const SyntheticWorld& world) {
  const auto& vocab = world.vocab();
  const auto& codec = world.codec();
  auto fail = [&](const std::string& why) {
    throw DataError("record " + r.id + " (" + to_string(r.task) + "): " + why);
  };
  auto presence = [&](bool present, bool wanted, const char* field) {
    if (present != wanted) fail(std::string(wanted ? "missing " : "unexpected ") + field);
  };
  presence(r.vision.has_value(), task_has_vision(r.task), "vision");
  presence(r.input_text.has_value(), task_has_input_text(r.task), "input_text");
  presence(r.input_units.has_value(), task_has_input_units(r.task), "input_units");
  presence(r.target_units.has_value(), task_has_target_units(r.task), "target_units");
  if (r.target_text.empty()) fail("empty target_text");
  for (TokenId t : r.target_text)
    if (!vocab.is_text(t) || t < kReservedTextIds) fail("target_text holds a non-content id");
  if (r.input_text) {
    if (r.input_text->empty()) fail("empty input_text");
    for (TokenId t : *r.input_text)
      if (!vocab.is_text(t)) fail("input_text holds a non-text id");
  }
  if (r.input_units) {
    if (r.input_units->empty()) fail("empty input_units");
    for (TokenId u : *r.input_units)
      if (!vocab.is_unit(u)) fail("input_units holds a non-unit id");
  }
  if (r.target_units && *r.target_units != codec.tokenize(r.target_text)) {
    fail("target_units is not the tokenization of target_text");
  }
  if (r.vision) {
    if (static_cast<std::int64_t>(r.vision->size()) !=
        world.spec().vision_tokens * world.spec().vision_dim) {
      fail("vision block has the wrong size");
    }
  }

  std::vector<TokenId> prompt;
  if (r.input_text) {
    prompt = *r.input_text;
  } else if (r.input_units) {
    auto decoded = codec.decode(*r.input_units);
    if (!decoded) fail("input_units do not decode");
    prompt = *decoded;
  }
  switch (r.content) {
    case Content::Transcribe:
      if (r.task != Task::ASR) fail("transcribe content outside ASR");
      if (prompt != r.target_text) fail("input_units are not the tokenization of target_text");
      break;
    case Content::Echo:
      if (prompt.empty() || prompt[0] != kEchoMarker ||
          !std::equal(prompt.begin() + 1, prompt.end(), r.target_text.begin(),
                      r.target_text.end())) {
        fail("echo target does not repeat the prompt");
      }
      break;
    case Content::Recall:
      if (prompt.size() != 2 || prompt[0] != kAskMarker ||
          world.answer(prompt[1]) != r.target_text) {
        fail("recall target does not match the key table");
      }
      break;
    case Content::Label:
      if (!r.vision) fail("label content without vision");
      if (prompt != std::vector<TokenId>{kLookMarker}) fail("label prompt is not LOOK");
      if (world.label(world.dominant_channel(*r.vision)) != r.target_text) {
        fail("label target does not name the dominant channel");
      }
      break;
  }
}

// Serialization ----------------------------------------------------------

namespace {

constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

static_assert(std::endian::native == std::endian::little,
              "corpus and checkpoint formats assume a little-endian host");

std::string floats_to_b64(const std::vector<float>& v) {
  std::vector<std::uint8_t> bytes(v.size() * sizeof(float));
  std::memcpy(bytes.data(), v.data(), bytes.size());
  return base64_encode(bytes);
}

std::vector<float> b64_to_floats(const std::string& s) {
  auto bytes = base64_decode(s);
  if (bytes.size() % sizeof(float) != 0) throw DataError("vision payload is not float32");
  std::vector<float> v(bytes.size() / sizeof(float));
  std::memcpy(v.data(), bytes.data(), bytes.size());
  return v;
}

}  // namespace

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t n = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kB64[(n >> 18) & 63];
    out += kB64[(n >> 12) & 63];
    out += kB64[(n >> 6) & 63];
    out += kB64[n & 63];
  }
  if (i < bytes.size()) {
    std::uint32_t n = bytes[i] << 16;
    if (i + 1 < bytes.size()) n |= bytes[i + 1] << 8;
    out += kB64[(n >> 18) & 63];
    out += kB64[(n >> 12) & 63];
    out += i + 1 < bytes.size() ? kB64[(n >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw DataError("base64 length is not a multiple of 4");
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int j = 0; j < 4; ++j) {
      const char c = text[i + static_cast<std::size_t>(j)];
      if (c == '=' && i + 4 == text.size() && j >= 2) {
        v[j] = 0;
        ++pad;
      } else if ((v[j] = value(c)) < 0 || pad) {
        throw DataError("invalid base64 character");
      }
    }
    const std::uint32_t n = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out.push_back(static_cast<std::uint8_t>(n >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>(n >> 8));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(n));
  }
  return out;
}

std::string record_to_json(const CorpusRecord& r) {
  json j;
  j["id"] = r.id;
  j["task"] = to_string(r.task);
  j["content"] = to_string(r.content);
  if (r.vision) j["vision"] = floats_to_b64(*r.vision);
  if (r.input_text) j["input_text"] = *r.input_text;
  if (r.input_units) j["input_units"] = *r.input_units;
  j["target_text"] = r.target_text;
  if (r.target_units) j["target_units"] = *r.target_units;
  return j.dump();
}

CorpusRecord record_from_json(const std::string& line) {
  CorpusRecord r;
  try {
    const auto j = json::parse(line);
    r.id = j.at("id").get<std::string>();
    r.task = parse_task(j.at("task").get<std::string>());
    r.content = parse_content(j.at("content").get<std::string>());
    if (j.contains("vision")) r.vision = b64_to_floats(j["vision"].get<std::string>());
    if (j.contains("input_text")) r.input_text = j["input_text"].get<std::vector<TokenId>>();
    if (j.contains("input_units")) r.input_units = j["input_units"].get<std::vector<TokenId>>();
    r.target_text = j.at("target_text").get<std::vector<TokenId>>();
    if (j.contains("target_units"))
      r.target_units = j["target_units"].get<std::vector<TokenId>>();
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed corpus record: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("malformed corpus record: ") + e.what());
  }
  return r;
}

void write_records(const std::filesystem::path& path,
                   const std::vector<CorpusRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& r : records) out << record_to_json(r) << '\n';
  if (!out) throw DataError("write failed for " + path.string());
}

std::vector<CorpusRecord> read_records(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::vector<CorpusRecord> records;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.empty()) continue;
    try {
      records.push_back(record_from_json(line));
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return records;
}

void write_corpus(const CorpusSpec& spec, const std::filesystem::path& dir) {
  SyntheticWorld world(spec);
  std::filesystem::create_directories(dir);
  json meta;
  meta["seed"] = spec.seed;
  meta["n_train"] = spec.n_train;
  meta["n_dev"] = spec.n_dev;
  meta["n_test"] = spec.n_test;
  meta["mix"] = spec.mix;
  meta["text_size"] = spec.text_size;
  meta["unit_size"] = spec.unit_size;
  meta["vision_tokens"] = spec.vision_tokens;
  meta["vision_dim"] = spec.vision_dim;
  meta["n_keys"] = spec.n_keys;
  meta["answer_length"] = spec.answer_length;
  {
    std::ofstream out(dir / "corpus.json", std::ios::binary);
    if (!out) throw DataError("cannot write " + (dir / "corpus.json").string());
    out << meta.dump(2) << '\n';
  }
  for (Split s : {Split::Train, Split::Dev, Split::Test}) {
    auto records = generate_split(world, s);
    for (const auto& r : records) validate_record(r, world);
    write_records(dir / (std::string(to_string(s)) + ".jsonl"), records);
  }
}

CorpusSpec read_corpus_spec(const std::filesystem::path& dir) {
  const auto path = dir / "corpus.json";
  std::ifstream in(path);
  if (!in) throw DataError("missing " + path.string());
  CorpusSpec s;
  try {
    const auto j = json::parse(in);
    s.seed = j.at("seed").get<std::uint64_t>();
    s.n_train = j.at("n_train").get<std::int64_t>();
    s.n_dev = j.at("n_dev").get<std::int64_t>();
    s.n_test = j.at("n_test").get<std::int64_t>();
    s.mix = j.at("mix").get<TaskMix>();
    s.text_size = j.at("text_size").get<std::int64_t>();
    s.unit_size = j.at("unit_size").get<std::int64_t>();
    s.vision_tokens = j.at("vision_tokens").get<std::int64_t>();
    s.vision_dim = j.at("vision_dim").get<std::int64_t>();
    s.n_keys = j.at("n_keys").get<std::int64_t>();
    s.answer_length = j.at("answer_length").get<std::int64_t>();
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return s;
}

std::size_t validate_corpus(const std::filesystem::path& dir) {
  SyntheticWorld world(read_corpus_spec(dir));
  std::size_t n = 0;
  for (Split s : {Split::Train, Split::Dev, Split::Test}) {
    const auto path = dir / (std::string(to_string(s)) + ".jsonl");
    for (const auto& r : read_records(path)) {
      validate_record(r, world);
      ++n;
    }
  }
  return n;
}

}  // namespace tristream
