#pragma once

// Concept prototypes, cosine concept codes, Sinkhorn-balanced soft codes and
// the swapped static/dynamic alignment loss.

#include <torch/nn/module.h>
#include <torch/nn/pimpl.h>
#include <torch/types.h>

namespace vidconcept {

struct AlignmentConfig {
  double tau = 0.1;
  int64_t sinkhorn_iters = 3;
  double sinkhorn_eps = 0.05;

  void validate() const;
};

/// P_s [K_s, C], P_d [K_d, C], P_v [K_s + K_d, C]. Rows of P_v are ordered
/// static concepts first.
class PrototypeBankImpl : public torch::nn::Module {
 public:
  PrototypeBankImpl(int64_t k_static, int64_t k_dynamic, int64_t channels);

  /// Gaussian rows with std 1/sqrt(C), then unit L2 norm.
  void reset_parameters();

  torch::Tensor P_s, P_d, P_v;
  int64_t k_static() const { return k_static_; }
  int64_t k_dynamic() const { return k_dynamic_; }
  int64_t channels() const { return channels_; }

 private:
  int64_t k_static_, k_dynamic_, channels_;
};
TORCH_MODULE(PrototypeBank);

/// Cosine similarity of each feature row against each prototype row.
/// features [B, C] (or [C]), prototypes [K, C] -> [B, K] (or [K]).
/// Throws DegenerateInput on a zero-norm feature or prototype.
torch::Tensor compute_codes(const torch::Tensor& features,
                            const torch::Tensor& prototypes);

/// q_s [B, K_s], q_d [B, K_d], q_v [B, K_s + K_d].
struct ConceptCodes {
  torch::Tensor q_s, q_d, q_v;
  int64_t k_static() const { return q_s.size(-1); }
  torch::Tensor q_v_static() const;   // first K_s columns of q_v
  torch::Tensor q_v_dynamic() const;  // last K_d columns of q_v
};

/// Balanced assignment of exp(codes/eps): sample rows sum to 1/B and concept
/// columns to 1/K (approximately, after the configured iterations). This is
/// the matrix before the final rescaling by B.
/// When `column_sums` is given it receives the concept-column sums taken
/// right before the final row normalization.
torch::Tensor sinkhorn_transport(const torch::Tensor& codes,
                                 const AlignmentConfig& cfg,
                                 torch::Tensor* column_sums = nullptr);

/// `sinkhorn_transport` rescaled so each row sums to 1. No gradient.
torch::Tensor sinkhorn_soft_codes(const torch::Tensor& codes,
                                  const AlignmentConfig& cfg);

/// Targets for the swapped prediction; all detached.
struct SoftCodes {
  torch::Tensor s, d, v_static, v_dynamic;
};

SoftCodes make_soft_codes(const ConceptCodes& codes, const AlignmentConfig& cfg);

/// -sum_k target_k * log softmax(logits / tau)_k, averaged over rows.
torch::Tensor soft_cross_entropy(const torch::Tensor& target,
                                 const torch::Tensor& codes, double tau);

/// Batch mean of the four swapped terms: (q̄_s, q_v^s), (q̄_v^s, q_s),
/// (q̄_d, q_v^d), (q̄_v^d, q_d). Soft codes are treated as constants.
torch::Tensor alignment_loss(const ConceptCodes& codes, const SoftCodes& soft,
                             double tau);

}  // namespace vidconcept
