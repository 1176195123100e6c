#pragma once

#include <torch/nn/module.h>
#include <torch/nn/modules/linear.h>
#include <torch/nn/pimpl.h>

#include "vidconcept/conceptspace.hpp"

namespace vidconcept {

/// g: Linear(K, H) -> ReLU -> Linear(H, C). Requires K < C.
class ReconstructionHeadImpl : public torch::nn::Module {
 public:
  ReconstructionHeadImpl(int64_t code_size, int64_t hidden, int64_t channels);
  torch::Tensor forward(const torch::Tensor& codes);

  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(ReconstructionHead);

struct ReconstructionHeads {
  ReconstructionHead s{nullptr}, d{nullptr}, v{nullptr};
};

struct PooledFeatures {
  torch::Tensor s, d, v;  // [B, C] each
};

/// Batch mean of |q_s|_1 + |q_d|_1 + |q_v|_1.
torch::Tensor diversity_loss(const ConceptCodes& codes);

/// Batch mean of the summed squared reconstruction errors. Targets are
/// detached here, so gradient reaches the codes and heads only.
torch::Tensor fidelity_loss(const ConceptCodes& codes,
                            const PooledFeatures& targets,
                            const ReconstructionHeads& heads);

}  // namespace vidconcept
