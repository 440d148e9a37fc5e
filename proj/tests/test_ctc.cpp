// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "tristream/ctc.hpp"
#include "tristream/error.hpp"
#include "tristream/ops.hpp"

using namespace tristream;
using T64 = Tensor<double>;

namespace {

constexpr TokenId a = 0, b = 1, blank = 2;

// Logits whose argmax at frame t is path[t].
T64 peaked(const std::vector<TokenId>& path, std::size_t symbols) {
  std::vector<double> v(path.size() * symbols, 0.0);
  for (std::size_t t = 0; t < path.size(); ++t) v[t * symbols + path[t]] = 5.0;
  return T64({path.size(), symbols}, v);
}

}  // namespace

TEST_CASE("collapse") {
  CHECK(collapse(std::vector<TokenId>{blank, blank, blank}, blank).empty());
  CHECK(collapse(std::vector<TokenId>{a, a, blank, b}, blank) == std::vector<TokenId>{a, b});
  CHECK(collapse(std::vector<TokenId>{a, blank, a}, blank) == std::vector<TokenId>{a, a});
}

TEST_CASE("ctc loss closed forms") {
  auto uniform = T64({1, 3}, {0, 0, 0});
  CHECK(ctc_loss(uniform, std::vector<TokenId>{a}, blank).item() ==
        doctest::Approx(std::log(3.0)).epsilon(1e-12));
  auto certain = T64({2, 3}, {-1e3, -1e3, 0, -1e3, -1e3, 0});
  CHECK(ctc_loss(certain, std::vector<TokenId>{}, blank).item() == doctest::Approx(0.0));
  CHECK(std::isinf(ctc_loss(T64({1, 3}), std::vector<TokenId>{a, a}, blank).item()));
  CHECK(ctc_min_frames(std::vector<TokenId>{a, a, b}) == 4);
}

TEST_CASE("ctc loss matches path enumeration") {
  std::mt19937_64 rng(4);
  auto logits = oracle::randn(12, rng);
  const std::vector<TokenId> target{a, b};
  CHECK(std::abs(ctc_loss(T64({4, 3}, logits), target, blank).item() -
                 oracle::ctc_enumerate(logits, 4, 3, target, blank)) < 1e-6);
}

TEST_CASE("greedy decode counts") {
  auto al = ctc_greedy_decode(peaked({blank, a, a, blank, b}, 3), 2, blank);
  CHECK(al.prefix_counts() == std::vector<std::int64_t>{0, 1, 1, 1, 2});
  CHECK(al.text() == std::vector<TokenId>{a, b});

  auto none = ctc_greedy_decode(peaked({blank, blank, blank}, 3), 2, blank);
  CHECK(none.count() == 0);
  CHECK(none.text().empty());

  std::mt19937_64 rng(9);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t frames = 1 + rng() % 12;
    auto al2 = ctc_greedy_decode(T64({frames, 3}, oracle::randn(frames * 3, rng)), 2, blank);
    for (std::size_t i = 0; i < frames; ++i) {
      std::span<const TokenId> prefix(al2.path().data(), i + 1);
      CHECK(al2.prefix_counts()[i] ==
            static_cast<std::int64_t>(oracle::collapse(prefix, blank).size()));
    }
  }
}

TEST_CASE("alignment repeat and blank rules") {
  CtcAlignment al(blank);
  CHECK(al.push(a));
  CHECK_FALSE(al.push(a));
  CHECK(al.count() == 1);
  CHECK_FALSE(al.push(blank));
  CHECK(al.count() == 1);
  CHECK(al.last_emit() == blank);
  CHECK(al.push(a));
  CHECK(al.count() == 2);
}

TEST_CASE("incremental alignment equals batch decode") {
  std::mt19937_64 rng(12);
  const std::size_t frames = 100, symbols = 5;  // two labels, two unit ids, blank 4
  auto v = oracle::randn(frames * symbols, rng);
  T64 logits({frames, symbols}, v);
  auto batch = ctc_greedy_decode(logits, 2, 4);
  CtcAlignment inc(4);
  for (std::size_t t = 0; t < frames; ++t)
    extend_alignment<double>(inc, std::span<const double>(v.data() + t * symbols, symbols), 2);
  CHECK(inc.path() == batch.path());
  CHECK(inc.prefix_counts() == batch.prefix_counts());
  for (TokenId s : batch.path()) CHECK((s == 0 || s == 1 || s == 4));
}

TEST_CASE("remove blanks") {
  T64 h({3, 2}, {1, 2, 3, 4, 5, 6});
  auto al = ctc_greedy_decode(peaked({a, blank, b}, 3), 2, blank);
  CHECK(remove_blanks(h, al).values() == std::vector<double>{1, 2, 5, 6});
  auto all_blank = ctc_greedy_decode(peaked({blank, blank, blank}, 3), 2, blank);
  CHECK(remove_blanks(h, all_blank).dim(0) == 0);

  std::mt19937_64 rng(2);
  for (int rep = 0; rep < 30; ++rep) {
    auto r = ctc_greedy_decode(T64({6, 3}, oracle::randn(18, rng)), 2, blank);
    std::size_t nonblank = 0;
    for (TokenId s : r.path()) nonblank += s != blank;
    CHECK(remove_blanks(T64({6, 2}), r).dim(0) == nonblank);
  }
}

TEST_CASE("ctc gradient matches finite differences") {
  std::mt19937_64 rng(8);
  auto v = oracle::randn(15, rng);
  T64 x({5, 3}, v, true);
  const std::vector<TokenId> target{a, b, a};
  ctc_loss(x, target, blank).backward();
  for (std::size_t i = 0; i < v.size(); ++i) {
    auto up = v, down = v;
    up[i] += 1e-5;
    down[i] -= 1e-5;
    const double fd = (oracle::ctc_enumerate(up, 5, 3, target, blank) -
                       oracle::ctc_enumerate(down, 5, 3, target, blank)) / 2e-5;
    CHECK(x.grad()[i] == doctest::Approx(fd).epsilon(1e-6));
  }
}
