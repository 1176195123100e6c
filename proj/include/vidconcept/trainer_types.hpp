#pragma once

#include <cstdint>

namespace vidconcept {

/// Weights of the overall objective; the local term is switched off for
/// epochs before `warmup_epochs`.
struct LossWeights {
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 0.01;
  int64_t warmup_epochs = 5;

  void validate() const;
};

struct OptimConfig {
  double lr = 1e-2;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  int64_t epochs = 50;
  int64_t batch_size = 32;
  uint64_t seed = 0;
  double grad_clip = 10.0;  // global L2 norm; <= 0 disables

  void validate() const;
};

struct LossBundle {
  double l_aln = 0.0;
  double l_loc = 0.0;
  double l_fid = 0.0;
  double l_div = 0.0;
  double total = 0.0;
  int64_t epoch = 0;
};

}  // namespace vidconcept
