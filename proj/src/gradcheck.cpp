// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0

#include "tristream/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "json.hpp"
#include "tristream/codec.hpp"
#include "tristream/corpus.hpp"
#include "tristream/ctc.hpp"
#include "tristream/training.hpp"

namespace tristream {

template <typename T>
std::vector<T> numeric_gradient(const std::function<T()>& f, Tensor<T>& x, T h,
                                std::span<const std::size_t> indices) {
  std::vector<T> out;
  out.reserve(indices.size());
  auto data = x.mutable_data();
  for (std::size_t i : indices) {
    const T saved = data[i];
    data[i] = saved + h;
    const T up = f();
    data[i] = saved - h;
    const T down = f();
    data[i] = saved;
    out.push_back((up - down) / (T(2) * h));
  }
  return out;
}

template std::vector<float> numeric_gradient(const std::function<float()>&, Tensor<float>&,
                                             float, std::span<const std::size_t>);
template std::vector<double> numeric_gradient(const std::function<double()>&,
                                              Tensor<double>&, double,
                                              std::span<const std::size_t>);

double relative_error(std::span<const double> a, std::span<const double> n, double floor) {
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
}

std::string GradcheckReport::to_jsonl() const {
  std::string out;
  for (const auto& g : groups) {
    nlohmann::ordered_json j;
    j["check"] = name;
    j["group"] = g.group;
    j["max_rel_error"] = g.max_rel_error;
    j["elements"] = g.elements;
    j["passed"] = g.max_rel_error < tolerance;
    out += j.dump() + '\n';
  }
  nlohmann::ordered_json j;
  j["check"] = name;
  j["instances"] = instances;
  j["tolerance"] = tolerance;
  j["passed"] = passed;
  out += j.dump() + '\n';
  return out;
}

std::string param_group(const std::string& name) {
  for (const char* g : {"vision", "bottom", "core", "top"}) {
    const std::string p = g;
    if (name.compare(0, p.size(), p) == 0 &&
        (name.size() == p.size() || name[p.size()] == '.' || name[p.size()] == '_'))
      return p;
  }
  return name;  // embed, ctc_head, text_head, unit_head
}

namespace {

void merge(std::map<std::string, GroupCheck>& groups, const std::string& group, double err,
           std::int64_t n) {
  auto& g = groups[group];
  g.group = group;
  g.max_rel_error = std::max(g.max_rel_error, err);
  g.elements += n;
}

GradcheckReport finish(const std::string& name, std::map<std::string, GroupCheck>& groups,
                       double tol, int instances) {
  GradcheckReport r;
  r.name = name;
  r.tolerance = tol;
  r.instances = instances;
  for (auto& [k, g] : groups) {
    if (!(g.max_rel_error < tol)) r.passed = false;
    r.groups.push_back(g);
  }
  return r;
}

}  // namespace

GradcheckReport gradcheck_ctc(std::uint64_t seed, int instances, double tol) {
  constexpr std::size_t frames = 5, symbols = 4;
  constexpr TokenId blank = 3;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<TokenId> label(0, blank - 1);
  std::uniform_int_distribution<int> length(1, 3);
  std::map<std::string, GroupCheck> groups;
  for (int inst = 0; inst < instances; ++inst) {
    std::vector<TokenId> target;
    do {
      target.clear();
      const int len = length(rng);
      for (int i = 0; i < len; ++i) target.push_back(label(rng));
    } while (!ctc_feasible(frames, target));
    std::vector<double> v(frames * symbols);
    for (auto& x : v) x = normal(rng);
    Tensor<double> logits({frames, symbols}, v, true);
    auto loss = ctc_loss(logits, target, blank);
    loss.backward();
    std::vector<double> analytic(logits.grad().begin(), logits.grad().end());
    std::vector<std::size_t> all(v.size());
    std::iota(all.begin(), all.end(), 0);
    std::function<double()> f = [&] {
      NoGradGuard off;
      return ctc_loss(logits, target, blank).item();
    };
    auto numeric = numeric_gradient<double>(f, logits, 1e-4, all);
    merge(groups, "ctc_logits", relative_error(analytic, numeric),
          static_cast<std::int64_t>(all.size()));
  }
  return finish("ctc", groups, tol, instances);
}

GradcheckReport gradcheck_model(const ModelConfig& config, std::uint64_t seed, int instances,
                                double tol, std::size_t max_elements) {
  config.validate();
  const auto vocab = config.vocab();
  std::map<std::string, GroupCheck> groups;
  for (int inst = 0; inst < instances; ++inst) {
    const std::uint64_t s = seed * 1315423911ULL + static_cast<std::uint64_t>(inst);
    std::mt19937_64 rng(s);
    SyntheticSpeechCodec codec(vocab, s);
    Model<double> model(config, ModelParams<double>::init(config, s));
    model.params().set_requires_grad(true);

    const TokenId lo = std::min<TokenId>(kReservedTextIds, config.text_size - 1);
    std::uniform_int_distribution<TokenId> text_id(lo, config.text_size - 1);
    std::uniform_int_distribution<int> len(2, 3);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    CorpusRecord r;
    r.id = "gradcheck-" + std::to_string(inst);
    r.task = Task::VS2S;
    r.content = Content::Echo;
    std::vector<float> vision(
        static_cast<std::size_t>(config.vision_tokens_per_image * config.vision_feature_dim));
    for (auto& x : vision) x = normal(rng);
    r.vision = vision;
    std::vector<TokenId> prompt(static_cast<std::size_t>(len(rng)));
    for (auto& t : prompt) t = text_id(rng);
    r.input_units = codec.tokenize(prompt);
    r.target_text.resize(static_cast<std::size_t>(len(rng)));
    for (auto& t : r.target_text) t = text_id(rng);
    r.target_units = codec.tokenize(r.target_text);

    const unsigned terms = kCtcInput | kCtcTarget | kUnitLoss | kTextLoss;
    const GradGroups all{true, true, true, true};
    auto loss = sample_loss(model, r, codec, terms, LossWeights{}, all);
    loss.total.backward();

    std::function<double()> f = [&] {
      NoGradGuard off;
      return sample_loss(model, r, codec, terms, LossWeights{}, all).total.item();
    };
    for (auto& [name, t] : model.params().named()) {
      std::vector<std::size_t> idx(t.size());
      std::iota(idx.begin(), idx.end(), 0);
      if (idx.size() > max_elements) {
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(max_elements);
      }
      std::vector<double> analytic;
      for (std::size_t i : idx) analytic.push_back(t.has_grad() ? t.grad()[i] : 0.0);
      auto numeric = numeric_gradient<double>(f, t, 1e-4, idx);
      merge(groups, param_group(name), relative_error(analytic, numeric),
            static_cast<std::int64_t>(idx.size()));
    }
  }
  return finish("model", groups, tol, instances);
}

}  // namespace tristream
