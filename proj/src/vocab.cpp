// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0

#include "tristream/vocab.hpp"

#include <string>

#include "tristream/error.hpp"

namespace tristream {

const char* to_string(TokenKind kind) {
  switch (kind) {
    case TokenKind::Text:
      return "text";
    case TokenKind::Unit:
      return "unit";
    case TokenKind::Blank:
      return "blank";
  }
  return "?";
}

MultimodalVocab::MultimodalVocab(std::int64_t text_size, std::int64_t unit_size)
    : text_size_(text_size), unit_size_(unit_size) {
  if (text_size < kReservedTextIds) {
    throw ConfigError("text vocabulary needs at least " +
                      std::to_string(kReservedTextIds) +
                      " ids for reserved tokens, got " +
                      std::to_string(text_size));
  }
  if (unit_size < 1) {
    throw ConfigError("unit vocabulary must be non-empty, got " +
                      std::to_string(unit_size));
  }
}

TokenKind MultimodalVocab::classify(TokenId id) const {
  if (is_text(id)) return TokenKind::Text;
  if (is_unit(id)) return TokenKind::Unit;
  if (is_blank(id)) return TokenKind::Blank;
  throw DimensionError("token id " + std::to_string(id) +
                       " outside vocabulary of size " +
                       std::to_string(total_size()));
}

TokenId MultimodalVocab::unit_id(std::int64_t local) const {
  if (local < 0 || local >= unit_size_) {
    throw DimensionError("unit index " + std::to_string(local) +
                         " outside [0, " + std::to_string(unit_size_) + ")");
  }
  return text_size_ + local;
}

std::int64_t MultimodalVocab::unit_index(TokenId id) const {
  if (!is_unit(id)) {
    throw DimensionError("token id " + std::to_string(id) + " is not a unit");
  }
  return id - text_size_;
}

MultimodalVocab build_vocab(std::int64_t text_size, std::int64_t unit_size) {
  return MultimodalVocab(text_size, unit_size);
}

}  // namespace tristream
