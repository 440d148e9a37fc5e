// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0

#include "tristream/codec.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <string>

#include "tristream/error.hpp"

namespace tristream {

SyntheticSpeechCodec::SyntheticSpeechCodec(const MultimodalVocab& vocab,
                                           std::uint64_t seed)
    : vocab_(vocab), seed_(seed) {
  const std::int64_t units = vocab.unit_size();
  n_markers_ = vocab.text_size();
  const std::int64_t n_content = units - n_markers_;
  if (n_content < 0) {
    throw ConfigError("unit vocabulary of " + std::to_string(units) +
                      " is too small to give each of " +
                      std::to_string(vocab.text_size()) + " text ids a marker unit");
  }

  std::mt19937_64 rng(seed);
  std::vector<std::int64_t> markers(static_cast<std::size_t>(n_markers_));
  std::iota(markers.begin(), markers.end(), std::int64_t{0});
  std::shuffle(markers.begin(), markers.end(), rng);

  std::uniform_int_distribution<int> extra_len(0, n_content > 0 ? 3 : 0);
  std::uniform_int_distribution<std::int64_t> content(0, std::max<std::int64_t>(0, n_content - 1));
  codewords_.resize(markers.size());
  for (std::size_t t = 0; t < markers.size(); ++t) {
    std::vector<TokenId> word{vocab.unit_id(markers[t])};
    const int extra = extra_len(rng);
    for (int e = 0; e < extra; ++e) word.push_back(vocab.unit_id(n_markers_ + content(rng)));
    lookup_.emplace(word, static_cast<TokenId>(t));
    codewords_[t] = std::move(word);
  }
}

std::span<const TokenId> SyntheticSpeechCodec::expansion(TokenId text_id) const {
  if (!vocab_.is_text(text_id)) {
    throw DataError("cannot tokenize non-text id " + std::to_string(text_id));
  }
  return codewords_[static_cast<std::size_t>(text_id)];
}

bool SyntheticSpeechCodec::is_marker(TokenId unit) const {
  return vocab_.is_unit(unit) && vocab_.unit_index(unit) < n_markers_;
}

std::vector<TokenId> SyntheticSpeechCodec::tokenize(
    std::span<const TokenId> text) const {
  std::vector<TokenId> units;
  for (TokenId id : text) {
    auto word = expansion(id);
    units.insert(units.end(), word.begin(), word.end());
  }
  return units;
}

std::optional<std::vector<TokenId>> SyntheticSpeechCodec::decode(
    std::span<const TokenId> units) const {
  std::vector<TokenId> text;
  std::size_t i = 0;
  while (i < units.size()) {
    if (!is_marker(units[i])) return std::nullopt;
    std::size_t j = i + 1;
    while (j < units.size() && !is_marker(units[j])) ++j;
    auto it = lookup_.find(std::vector<TokenId>(units.begin() + i, units.begin() + j));
    if (it == lookup_.end()) return std::nullopt;
    text.push_back(it->second);
    i = j;
  }
  return text;
}

std::vector<std::size_t> SyntheticSpeechCodec::codeword_ends(
    std::span<const TokenId> units) const {
  std::vector<std::size_t> ends;
  std::vector<TokenId> current;
  for (std::size_t i = 0; i < units.size(); ++i) {
    if (is_marker(units[i])) current.clear();
    current.push_back(units[i]);
    if (lookup_.count(current)) {
      ends.push_back(i + 1);
      current.clear();
    }
  }
  return ends;
}

std::vector<std::vector<TokenId>> speech_synthesize(
    std::span<const TokenId> units, const SyntheticSpeechCodec& codec) {
  std::vector<std::vector<TokenId>> chunks;
  std::size_t begin = 0;
  for (std::size_t end : codec.codeword_ends(units)) {
    chunks.emplace_back(units.begin() + begin, units.begin() + end);
    begin = end;
  }
  if (begin < units.size()) chunks.emplace_back(units.begin() + begin, units.end());
  return chunks;
}

}  // namespace tristream
