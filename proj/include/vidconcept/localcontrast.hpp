#pragma once

// Cross-attention from concept prototypes onto feature-map tokens, valid
// concept selection by top-k intersection, and the margin-based local
// contrast between per-concept features.

#include <array>
#include <vector>

#include <torch/nn/module.h>
#include <torch/nn/modules/linear.h>
#include <torch/nn/pimpl.h>

#include "vidconcept/conceptspace.hpp"

namespace vidconcept {

struct LocalContrastConfig {
  int64_t k_top = 5;
  double lambda = 1.0;

  void validate(int64_t k_static, int64_t k_dynamic) const;
};

struct AttentionOutput {
  torch::Tensor features;  // [B, K, C]
  torch::Tensor logits;    // [B, K, N] scaled scores before softmax
  torch::Tensor weights;   // [B, K, N], rows sum to 1
  std::array<int64_t, 3> map_extent{};  // T', H', W' with N = T'H'W'

  /// weights reshaped to [B, K, T', H', W'].
  torch::Tensor weight_maps() const;
  torch::Tensor logit_maps() const;
};

/// Single-head attention with query W_q, key W_k, value W_v (all C -> C).
/// Output row k = softmax_n(<W_q p_k, W_k x_n> / sqrt(C)) · W_v x + W_q p_k.
class CrossAttentionImpl : public torch::nn::Module {
 public:
  explicit CrossAttentionImpl(int64_t channels);

  /// prototypes [K, C], feature_map [B, C, T', H', W'].
  AttentionOutput forward(const torch::Tensor& prototypes,
                          const torch::Tensor& feature_map);

  int64_t attention_dim() const { return channels_; }

  torch::nn::Linear W_q{nullptr}, W_k{nullptr}, W_v{nullptr};

 private:
  int64_t channels_;
};
TORCH_MODULE(CrossAttention);

/// Indices of the k largest entries; ties go to the lower index. Returned in
/// ascending index order.
std::vector<int64_t> top_k_indices(const torch::Tensor& code, int64_t k);

/// top_k(q_a) ∩ top_k(q_b), ascending. May be empty.
std::vector<int64_t> select_valid(const torch::Tensor& q_a,
                                  const torch::Tensor& q_b, int64_t k_top);

/// [B, K] mask (dtype of the codes) of selected concepts per sample.
torch::Tensor valid_mask(const torch::Tensor& q_a, const torch::Tensor& q_b,
                         int64_t k_top);

/// Single-sample directed margin loss. F_a, F_b and every negative are
/// [K, C]; negative n contributes at the same concept index.
torch::Tensor local_margin_loss(const torch::Tensor& F_a,
                                const torch::Tensor& F_b,
                                const std::vector<int64_t>& idx,
                                const std::vector<torch::Tensor>& negatives,
                                double lambda);

/// Batched directed loss summed over samples. anchor/positive [B, K, C],
/// mask [B, K]; the negatives of sample i are positive[j] for all j != i.
torch::Tensor directed_margin_loss(const torch::Tensor& anchor,
                                   const torch::Tensor& positive,
                                   const torch::Tensor& mask, double lambda);

struct LocalFeatures {
  torch::Tensor F_s, F_d, F_v;  // [B, K_s, C], [B, K_d, C], [B, K_s+K_d, C]
};

struct ValidMasks {
  torch::Tensor static_mask;   // [B, K_s] from q_s and q_v^s
  torch::Tensor dynamic_mask;  // [B, K_d] from q_d and q_v^d
};

ValidMasks make_valid_masks(const ConceptCodes& codes, int64_t k_top);

/// Four directed terms (F_s, F_v^s), (F_v^s, F_s), (F_d, F_v^d), (F_v^d, F_d),
/// averaged over the batch.
torch::Tensor local_loss_total(const LocalFeatures& local,
                               const ValidMasks& masks, double lambda);

}  // namespace vidconcept
