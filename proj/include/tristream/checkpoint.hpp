// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint container, all integers little-endian:
//
//   "SOMNI"            5 bytes magic
//   u32 version        currently 1
//   u32 stage          last completed training stage (0 = initialized)
//   u32 n, n bytes     model config as JSON
//   u32 count          tensor directory entries, each:
//                        u32 n, n bytes name; u32 rank; u64 dims[rank]
//   float32 payload    tensors in directory order, row-major
//   u64 checksum       FNV-1a over every preceding byte

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tristream/model.hpp"

namespace tristream {

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const std::string& text);  // throws DataError

// True when parameters of `a` can be loaded into a model built from `b`
// (inference-only knobs such as window and wait-k may differ).
bool same_architecture(const ModelConfig& a, const ModelConfig& b);

struct Checkpoint {
  ModelConfig config;
  std::uint32_t stage = 0;
  NamedTensors<float> tensors;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
// Throws DataError on bad magic, version, checksum or layout.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <typename T>
Checkpoint make_checkpoint(const ModelConfig& config, const ModelParams<T>& params,
                           std::uint32_t stage);

// Parameters for `config` from a checkpoint; throws DataError when the
// stored architecture differs or a tensor is missing or misshapen.
template <typename T>
ModelParams<T> checkpoint_params(const Checkpoint& ckpt, const ModelConfig& config);

// Parameters for `config` copied by name from `ckpt`, except tensors whose
// name starts with a prefix in `fresh`, which keep an initialization from
// `seed`. Lets a stack be rebuilt with a different shape (e.g. another fusion
// type) on top of trained weights. DataError when any other tensor is missing
// or differs in shape.
template <typename T>
ModelParams<T> transplant_params(const Checkpoint& ckpt, const ModelConfig& config,
                                 const std::vector<std::string>& fresh, std::uint64_t seed);

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t size);

}  // namespace tristream
