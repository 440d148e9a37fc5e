// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0
//
// Regenerates tests/data/golden.ckpt and tests/data/golden_logits.json.

#include <cstdio>
#include <fstream>

#include "golden.hpp"
#include "tristream/checkpoint.hpp"
#include "tristream/training.hpp"

using namespace tristream;

int main(int argc, char** argv) {
  if (argc != 2) {
    std::fprintf(stderr, "usage: make_golden <data dir>\n");
    return 2;
  }
  const std::string dir = argv[1];
  ModelConfig mc;
  mc.d_model = 32;
  mc.n_bottom_layers = 1;
  mc.n_core_layers = 2;
  mc.n_top_layers = 1;
  CorpusSpec spec;
  spec.n_train = 2000;
  spec.n_dev = 20;
  spec.n_test = 1;
  SyntheticWorld world(spec);
  TrainData data{&world, generate_split(world, Split::Train), generate_split(world, Split::Dev)};
  Model<double> model(mc, ModelParams<double>::init(mc, 5));
  for (int stage = 1; stage <= 3; ++stage) {
    auto sc = StageConfig::defaults(stage);
    sc.steps = 200;
    sc.log_every = 1000;
    train_stage(model, data, sc, 5);
  }
  auto ck = make_checkpoint(mc, model.params(), 3);
  save_checkpoint(dir + "/golden.ckpt", ck);
  // Probe the float32 weights as stored, so replay sees identical inputs.
  Model<double> reloaded(mc, checkpoint_params<double>(load_checkpoint(dir + "/golden.ckpt"), mc));
  std::ofstream(dir + "/golden_logits.json") << golden::probe(reloaded).dump() << '\n';
  return 0;
}
