// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "tristream/vocab.hpp"

namespace tristream {

// Deterministic stand-in for a speech tokenizer/vocoder pair. Every text id
// expands to a fixed codeword of 1-4 speech units: the id's own marker unit,
// then 0-3 content units. The first text_size unit indices are markers; the
// rest are content. Needs unit_size >= text_size (ConfigError otherwise).
class SyntheticSpeechCodec {
 public:
  SyntheticSpeechCodec(const MultimodalVocab& vocab, std::uint64_t seed);

  const MultimodalVocab& vocab() const { return vocab_; }
  std::uint64_t seed() const { return seed_; }

  // Codeword of a text id (global unit ids).
  std::span<const TokenId> expansion(TokenId text_id) const;
  bool is_marker(TokenId unit) const;

  // Concatenated codewords. Throws DataError for non-text ids.
  std::vector<TokenId> tokenize(std::span<const TokenId> text) const;

  // Reference decoder; nullopt when the units are not a sequence of whole
  // codewords.
  std::optional<std::vector<TokenId>> decode(std::span<const TokenId> units) const;

  // End offsets (exclusive) of each codeword completed within `units`.
  std::vector<std::size_t> codeword_ends(std::span<const TokenId> units) const;

 private:
  MultimodalVocab vocab_;
  std::uint64_t seed_;
  std::int64_t n_markers_ = 0;
  std::vector<std::vector<TokenId>> codewords_;  // indexed by text id
  std::map<std::vector<TokenId>, TokenId> lookup_;
};

// Packages units into playable chunks, cutting after each completed
// codeword; trailing units of an unfinished codeword form a last chunk.
// Concatenating the chunks gives back `units`.
std::vector<std::vector<TokenId>> speech_synthesize(
    std::span<const TokenId> units, const SyntheticSpeechCodec& codec);

}  // namespace tristream
