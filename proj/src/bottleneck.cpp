#include "vidconcept/bottleneck.hpp"

#include <torch/torch.h>

#include "vidconcept/error.hpp"

namespace vidconcept {
namespace {
constexpr const char* kModule = "bottleneck";
}

ReconstructionHeadImpl::ReconstructionHeadImpl(int64_t code_size, int64_t hidden,
                                               int64_t channels) {
  if (code_size < 1 || hidden < 1 || channels < 1)
    throw InvalidInput(kModule, "head sizes must be positive");
  if (code_size >= channels)
    throw InvalidInput(kModule, "bottleneck requires code size " + std::to_string(code_size) +
                                    " < feature channels " + std::to_string(channels));
  fc1 = register_module("fc1", torch::nn::Linear(code_size, hidden));
  fc2 = register_module("fc2", torch::nn::Linear(hidden, channels));
}

torch::Tensor ReconstructionHeadImpl::forward(const torch::Tensor& codes) {
  if (codes.size(-1) != fc1->options.in_features())
    throw InvalidInput(kModule, "code length " + std::to_string(codes.size(-1)) +
                                    " does not match head input " +
                                    std::to_string(fc1->options.in_features()));
  return fc2->forward(torch::relu(fc1->forward(codes)));
}

torch::Tensor diversity_loss(const ConceptCodes& codes) {
  if (codes.q_s.size(0) == 0) return torch::zeros({}, codes.q_s.options());
  return (codes.q_s.abs().sum(-1) + codes.q_d.abs().sum(-1) + codes.q_v.abs().sum(-1))
      .mean();
}

torch::Tensor fidelity_loss(const ConceptCodes& codes, const PooledFeatures& targets,
                            const ReconstructionHeads& heads) {
  auto term = [](ReconstructionHead head, const torch::Tensor& q, const torch::Tensor& target) {
    auto recon = head->forward(q);
    if (recon.sizes() != target.sizes())
      throw InvalidInput(kModule, "reconstruction and target shapes differ");
    return (recon - target.detach()).pow(2).sum(-1);
  };
  if (codes.q_s.size(0) == 0) return torch::zeros({}, codes.q_s.options());
  return (term(heads.s, codes.q_s, targets.s) + term(heads.d, codes.q_d, targets.d) +
          term(heads.v, codes.q_v, targets.v))
      .mean();
}

}  // namespace vidconcept
