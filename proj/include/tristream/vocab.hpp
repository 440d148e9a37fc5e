// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

namespace tristream {

// Global id over the merged text / speech-unit / blank vocabulary.
using TokenId = std::int64_t;

enum class TokenKind { Text, Unit, Blank };

const char* to_string(TokenKind kind);

// Reserved text ids.
inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kEosId = 1;
inline constexpr TokenId kBosId = 2;
inline constexpr TokenId kImgId = 3;
inline constexpr TokenId kReservedTextIds = 4;

// Unified vocabulary: text ids [0, text_size), unit ids
// [text_size, text_size + unit_size), then a single blank id.
class MultimodalVocab {
 public:
  MultimodalVocab() = default;
  // Throws ConfigError when text_size < 4 or unit_size < 1.
  MultimodalVocab(std::int64_t text_size, std::int64_t unit_size);

  std::int64_t text_size() const { return text_size_; }
  std::int64_t unit_size() const { return unit_size_; }
  std::int64_t total_size() const { return text_size_ + unit_size_ + 1; }
  TokenId blank_id() const { return text_size_ + unit_size_; }

  bool valid(TokenId id) const { return id >= 0 && id < total_size(); }
  bool is_text(TokenId id) const { return id >= 0 && id < text_size_; }
  bool is_unit(TokenId id) const {
    return id >= text_size_ && id < text_size_ + unit_size_;
  }
  bool is_blank(TokenId id) const { return id == blank_id(); }

  // Throws DimensionError for ids outside the vocabulary.
  TokenKind classify(TokenId id) const;

  TokenId unit_id(std::int64_t local) const;
  std::int64_t unit_index(TokenId id) const;

  bool operator==(const MultimodalVocab&) const = default;

 private:
  std::int64_t text_size_ = 0;
  std::int64_t unit_size_ = 0;
};

MultimodalVocab build_vocab(std::int64_t text_size, std::int64_t unit_size);

}  // namespace tristream
