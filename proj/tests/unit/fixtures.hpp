#pragma once

#include <cstring>

#include "trainer.hpp"

namespace memvit::testing {

// 16x16 images in 4x4 patches, depth 2, width 32: small enough to train in a
// few hundred milliseconds.
inline ModelConfig small_model() {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.depth = 2;
  c.width = 32;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.num_classes = 4;
  return c;
}

inline SyntheticTaskSpec small_task(std::uint64_t seed = 1) {
  SyntheticTaskSpec s;
  s.seed = seed;
  s.image_size = 16;
  s.freq_max = 4;
  s.num_classes = 4;
  s.samples_per_class = 60;
  s.noise_std = 0.05;
  return s;
}

inline TrainConfig quick(Regime r, std::size_t steps = 40) {
  TrainConfig t;
  t.regime = r;
  t.total_steps = steps;
  t.eval_interval = 20;
  t.batch_size = 8;
  t.mem_count = 2;
  t.base_lr = 0.05;
  t.train_eval_samples = 32;
  return t;
}

inline bool same_bytes(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

}  // namespace memvit::testing
