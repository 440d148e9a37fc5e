// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference checks of analytic gradients.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tristream/model.hpp"

namespace tristream {

// d f / d x[i] for the listed flat indices, by (f(x+h) - f(x-h)) / 2h.
// x is restored afterwards.
template <typename T>
std::vector<T> numeric_gradient(const std::function<T()>& f, Tensor<T>& x, T h,
                                std::span<const std::size_t> indices);

// ||a - n|| / max(||a||, ||n||, floor).
double relative_error(std::span<const double> analytic, std::span<const double> numeric,
                      double floor = 1e-8);

struct GroupCheck {
  std::string group;
  double max_rel_error = 0;
  std::int64_t elements = 0;
};

struct GradcheckReport {
  std::string name;
  std::vector<GroupCheck> groups;
  double tolerance = 1e-3;
  std::int64_t instances = 0;
  bool passed = true;

  std::string to_jsonl() const;
};

// Parameter group of a parameter name ("core", "top", "ctc_head", ...).
std::string param_group(const std::string& name);

// CTC loss gradient w.r.t. logits on random |U| = 5, 4-symbol instances.
GradcheckReport gradcheck_ctc(std::uint64_t seed, int instances, double tolerance = 1e-3);

// Combined text + CTC + unit loss of a random tri-modal record on a freshly
// initialized model; every parameter tensor is a slice.
GradcheckReport gradcheck_model(const ModelConfig& config, std::uint64_t seed,
                                int instances, double tolerance = 1e-3,
                                std::size_t max_elements_per_slice = 48);

}  // namespace tristream
