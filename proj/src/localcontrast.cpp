#include "vidconcept/localcontrast.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <torch/torch.h>

#include "vidconcept/error.hpp"

namespace vidconcept {
namespace {

constexpr const char* kModule = "localcontrast";

torch::Tensor pair_distance(const torch::Tensor& a, const torch::Tensor& b) {
  // linalg_vector_norm has a zero subgradient at the origin.
  return torch::linalg_vector_norm(a - b, 2, {-1}, false, std::nullopt);
}

}  // namespace

void LocalContrastConfig::validate(int64_t k_static, int64_t k_dynamic) const {
  if (k_top < 1 || k_top > std::min(k_static, k_dynamic))
    throw InvalidInput(kModule, "K_top must lie in [1, min(K_s, K_d)]");
  if (!(lambda > 0.0)) throw InvalidInput(kModule, "margin lambda must be > 0");
}

torch::Tensor AttentionOutput::weight_maps() const {
  return weights.reshape(
      {weights.size(0), weights.size(1), map_extent[0], map_extent[1], map_extent[2]});
}

torch::Tensor AttentionOutput::logit_maps() const {
  return logits.reshape(
      {logits.size(0), logits.size(1), map_extent[0], map_extent[1], map_extent[2]});
}

CrossAttentionImpl::CrossAttentionImpl(int64_t channels) : channels_(channels) {
  if (channels < 1) throw InvalidInput(kModule, "attention channels must be positive");
  W_q = register_module("W_q", torch::nn::Linear(channels, channels));
  W_k = register_module("W_k", torch::nn::Linear(channels, channels));
  W_v = register_module("W_v", torch::nn::Linear(channels, channels));
}

AttentionOutput CrossAttentionImpl::forward(const torch::Tensor& prototypes,
                                            const torch::Tensor& feature_map) {
  if (feature_map.dim() != 5 || feature_map.size(1) != channels_)
    throw InvalidInput(kModule, "feature map must be [B, " + std::to_string(channels_) +
                                    ", T', H', W']");
  if (prototypes.dim() != 2 || prototypes.size(1) != channels_)
    throw InvalidInput(kModule, "prototypes must be [K, " + std::to_string(channels_) + "]");
  const int64_t n = feature_map.size(2) * feature_map.size(3) * feature_map.size(4);
  if (n == 0) throw InvalidInput(kModule, "feature map has no positions");

  auto tokens = feature_map.flatten(2).transpose(1, 2);  // [B, N, C]
  auto query = W_q->forward(prototypes);                 // [K, C]
  auto key = W_k->forward(tokens);                       // [B, N, C]
  auto value = W_v->forward(tokens);                     // [B, N, C]

  AttentionOutput out;
  out.logits = torch::matmul(query, key.transpose(1, 2)) /
               std::sqrt(static_cast<double>(channels_));  // [B, K, N]
  out.weights = torch::softmax(out.logits, -1);
  out.features = torch::matmul(out.weights, value) + query.unsqueeze(0);
  out.map_extent = {feature_map.size(2), feature_map.size(3), feature_map.size(4)};
  return out;
}

std::vector<int64_t> top_k_indices(const torch::Tensor& code, int64_t k) {
  if (code.dim() != 1) throw InvalidInput(kModule, "top-k expects a code vector");
  const int64_t n = code.size(0);
  if (k < 1 || k > n)
    throw InvalidInput(kModule, "K_top " + std::to_string(k) + " outside [1, " +
                                    std::to_string(n) + "]");
  auto values = code.detach().to(torch::kCPU, torch::kFloat64).contiguous();
  const double* v = values.data_ptr<double>();
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [v](int64_t a, int64_t b) { return v[a] > v[b]; });
  order.resize(static_cast<size_t>(k));
  std::sort(order.begin(), order.end());
  return order;
}

std::vector<int64_t> select_valid(const torch::Tensor& q_a, const torch::Tensor& q_b,
                                  int64_t k_top) {
  if (q_a.sizes() != q_b.sizes())
    throw InvalidInput(kModule, "codes for selection must have the same length");
  const auto a = top_k_indices(q_a, k_top);
  const auto b = top_k_indices(q_b, k_top);
  std::vector<int64_t> out;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

torch::Tensor valid_mask(const torch::Tensor& q_a, const torch::Tensor& q_b, int64_t k_top) {
  if (q_a.dim() != 2 || q_a.sizes() != q_b.sizes())
    throw InvalidInput(kModule, "batched codes must both be [B, K]");
  auto mask = torch::zeros(q_a.sizes(), q_a.options().requires_grad(false));
  for (int64_t i = 0; i < q_a.size(0); ++i)
    for (auto k : select_valid(q_a[i], q_b[i], k_top)) mask[i][k] = 1.0;
  return mask;
}

torch::Tensor local_margin_loss(const torch::Tensor& F_a, const torch::Tensor& F_b,
                                const std::vector<int64_t>& idx,
                                const std::vector<torch::Tensor>& negatives,
                                double lambda) {
  if (F_a.sizes() != F_b.sizes() || F_a.dim() != 2)
    throw InvalidInput(kModule, "local feature sets must share [K, C]");
  auto loss = torch::zeros({}, F_a.options());
  for (auto k : idx) {
    if (k < 0 || k >= F_a.size(0)) throw InvalidInput(kModule, "concept index out of range");
    loss = loss + (F_a[k] - F_b[k]).pow(2).sum();
    for (const auto& neg : negatives) {
      if (neg.sizes() != F_a.sizes())
        throw InvalidInput(kModule, "negative set must share [K, C]");
      loss = loss + torch::relu(lambda - pair_distance(F_a[k], neg[k])).pow(2);
    }
  }
  return loss;
}

torch::Tensor directed_margin_loss(const torch::Tensor& anchor, const torch::Tensor& positive,
                                   const torch::Tensor& mask, double lambda) {
  if (anchor.dim() != 3 || anchor.sizes() != positive.sizes())
    throw InvalidInput(kModule, "anchor and positive sets must share [B, K, C]");
  const int64_t b = anchor.size(0);
  auto m = mask.to(anchor.scalar_type()).detach();
  auto pos = ((anchor - positive).pow(2).sum(-1) * m).sum();
  if (b < 2) return pos;
  auto dist = pair_distance(anchor.unsqueeze(1), positive.unsqueeze(0));  // [B, B, K]
  auto hinge = torch::relu(lambda - dist).pow(2);
  auto self = torch::eye(b, torch::TensorOptions().dtype(torch::kBool)).unsqueeze(-1);
  hinge = hinge.masked_fill(self, 0.0);
  return pos + (hinge * m.unsqueeze(1)).sum();
}

ValidMasks make_valid_masks(const ConceptCodes& codes, int64_t k_top) {
  torch::NoGradGuard no_grad;
  return {valid_mask(codes.q_s, codes.q_v_static(), k_top),
          valid_mask(codes.q_d, codes.q_v_dynamic(), k_top)};
}

torch::Tensor local_loss_total(const LocalFeatures& local, const ValidMasks& masks,
                               double lambda) {
  const int64_t b = local.F_s.size(0);
  if (b == 0) return torch::zeros({}, local.F_s.options());
  const int64_t ks = local.F_s.size(1);
  auto fv_s = local.F_v.narrow(1, 0, ks);
  auto fv_d = local.F_v.narrow(1, ks, local.F_v.size(1) - ks);
  auto total = directed_margin_loss(local.F_s, fv_s, masks.static_mask, lambda) +
               directed_margin_loss(fv_s, local.F_s, masks.static_mask, lambda) +
               directed_margin_loss(local.F_d, fv_d, masks.dynamic_mask, lambda) +
               directed_margin_loss(fv_d, local.F_d, masks.dynamic_mask, lambda);
  return total / static_cast<double>(b);
}

}  // namespace vidconcept
