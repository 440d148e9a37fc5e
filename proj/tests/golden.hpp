// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0
//
// Fixed probe inputs for the golden-logits fixture. make_golden writes the
// fixture from a briefly trained checkpoint; test_model replays it.

#pragma once

#include <vector>

#include "json.hpp"
#include "tristream/model.hpp"

namespace golden {

inline std::vector<tristream::TokenId> probe_units() { return {70, 64, 159, 100, 101, 77}; }
inline std::vector<tristream::TokenId> probe_text() { return {2, 9, 17, 33, 40}; }

inline std::vector<float> probe_vision(const tristream::ModelConfig& c) {
  std::vector<float> v(static_cast<std::size_t>(c.vision_tokens_per_image * c.vision_feature_dim));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>((i % 7) * 0.25 - 0.75);
  return v;
}

// CTC logits of the probe units, core logits of [vision : speech : text] and
// top logits for the units fused against the core's text states.
inline nlohmann::json probe(const tristream::Model<double>& m) {
  using namespace tristream;
  const auto& c = m.config();
  auto units = probe_units();
  auto text = probe_text();
  auto vis = probe_vision(c);
  auto hu = m.bottom_forward(units);
  auto ctc = m.ctc_logits(hu);
  Tensor<double> feats({static_cast<std::size_t>(c.vision_tokens_per_image),
                        static_cast<std::size_t>(c.vision_feature_dim)},
                       std::vector<double>(vis.begin(), vis.end()));
  const Tensor<double> parts[3] = {m.vision_encode(feats), hu, m.embed_tokens(text)};
  auto core = m.core_forward(concat_rows(std::span<const Tensor<double>>(parts)));
  const std::size_t n_text = text.size();
  auto text_states = slice_rows(core.hidden, core.hidden.dim(0) - n_text, core.hidden.dim(0));
  std::vector<std::int64_t> counts{0, 0, 1, 1, 2, 3, 4};
  auto top = m.top_forward(m.top_inputs(hu), text_states, counts);
  nlohmann::json j;
  j["ctc"] = ctc.values();
  j["core"] = core.logits.values();
  j["top"] = top.values();
  return j;
}

}  // namespace golden
