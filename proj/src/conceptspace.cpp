#include "vidconcept/conceptspace.hpp"

#include <cmath>

#include <torch/torch.h>

#include "vidconcept/error.hpp"

namespace vidconcept {
namespace {

constexpr const char* kModule = "conceptspace";

torch::Tensor random_unit_rows(int64_t rows, int64_t cols) {
  auto p = torch::randn({rows, cols}) / std::sqrt(static_cast<double>(cols));
  return p / p.norm(2, 1, true);
}

}  // namespace

void AlignmentConfig::validate() const {
  if (!(tau > 0.0)) throw InvalidInput(kModule, "tau must be > 0");
  if (sinkhorn_iters < 1) throw InvalidInput(kModule, "sinkhorn_iters must be >= 1");
  if (!(sinkhorn_eps > 0.0)) throw InvalidInput(kModule, "sinkhorn_eps must be > 0");
}

PrototypeBankImpl::PrototypeBankImpl(int64_t k_static, int64_t k_dynamic, int64_t channels)
    : k_static_(k_static), k_dynamic_(k_dynamic), channels_(channels) {
  if (k_static < 2 || k_dynamic < 2)
    throw InvalidInput(kModule, "K_s and K_d must be >= 2");
  if (channels < 1) throw InvalidInput(kModule, "channel count must be positive");
  P_s = register_parameter("P_s", torch::empty({k_static, channels}));
  P_d = register_parameter("P_d", torch::empty({k_dynamic, channels}));
  P_v = register_parameter("P_v", torch::empty({k_static + k_dynamic, channels}));
  reset_parameters();
}

void PrototypeBankImpl::reset_parameters() {
  torch::NoGradGuard no_grad;
  P_s.copy_(random_unit_rows(k_static_, channels_));
  P_d.copy_(random_unit_rows(k_dynamic_, channels_));
  P_v.copy_(random_unit_rows(k_static_ + k_dynamic_, channels_));
}

torch::Tensor compute_codes(const torch::Tensor& features, const torch::Tensor& prototypes) {
  if (prototypes.dim() != 2 || features.dim() < 1 || features.dim() > 2 ||
      features.size(-1) != prototypes.size(1))
    throw InvalidInput(kModule, "features [B, C] and prototypes [K, C] must share C");
  const auto f_norm = features.norm(2, -1, true);
  const auto p_norm = prototypes.norm(2, 1, true);
  if (features.numel() > 0 && f_norm.min().item<double>() == 0.0)
    throw DegenerateInput(kModule, "zero-norm feature vector");
  if (p_norm.min().item<double>() == 0.0)
    throw DegenerateInput(kModule, "zero-norm prototype");
  auto codes = torch::matmul(features / f_norm, (prototypes / p_norm).t());
  return codes.clamp(-1.0, 1.0);
}

torch::Tensor ConceptCodes::q_v_static() const { return q_v.narrow(-1, 0, k_static()); }

torch::Tensor ConceptCodes::q_v_dynamic() const {
  return q_v.narrow(-1, k_static(), q_v.size(-1) - k_static());
}

torch::Tensor sinkhorn_transport(const torch::Tensor& codes, const AlignmentConfig& cfg,
                                 torch::Tensor* column_sums) {
  cfg.validate();
  if (codes.dim() != 2) throw InvalidInput(kModule, "codes must be [B, K]");
  const int64_t b = codes.size(0), k = codes.size(1);
  if (k < 2) throw InvalidInput(kModule, "sinkhorn needs K >= 2");
  if (b == 0) return torch::empty({0, k}, codes.options());
  torch::NoGradGuard no_grad;
  auto c = codes.detach().to(torch::kFloat64);
  if (!torch::isfinite(c).all().item<bool>())
    throw InvalidInput(kModule, "non-finite concept codes");

  // Per-row shifts are absorbed by the leading row normalization, so
  // subtracting the row maximum only guards against overflow.
  auto q = torch::exp((c - std::get<0>(c.max(1, true))) / cfg.sinkhorn_eps);
  const double tiny = std::numeric_limits<double>::min();
  q = q / (q.sum(1, true) * static_cast<double>(b));
  for (int64_t it = 0; it < cfg.sinkhorn_iters; ++it) {
    q = q / (q.sum(0, true).clamp_min(tiny) * static_cast<double>(k));
    if (column_sums && it + 1 == cfg.sinkhorn_iters) *column_sums = q.sum(0);
    q = q / (q.sum(1, true).clamp_min(tiny) * static_cast<double>(b));
  }
  return q.to(codes.scalar_type());
}

torch::Tensor sinkhorn_soft_codes(const torch::Tensor& codes, const AlignmentConfig& cfg) {
  return sinkhorn_transport(codes, cfg) * static_cast<double>(codes.size(0));
}

SoftCodes make_soft_codes(const ConceptCodes& codes, const AlignmentConfig& cfg) {
  torch::NoGradGuard no_grad;
  return {sinkhorn_soft_codes(codes.q_s.detach(), cfg),
          sinkhorn_soft_codes(codes.q_d.detach(), cfg),
          sinkhorn_soft_codes(codes.q_v_static().detach(), cfg),
          sinkhorn_soft_codes(codes.q_v_dynamic().detach(), cfg)};
}

torch::Tensor soft_cross_entropy(const torch::Tensor& target, const torch::Tensor& codes,
                                 double tau) {
  if (target.sizes() != codes.sizes())
    throw InvalidInput(kModule, "soft code shape does not match concept code shape");
  if (!(tau > 0.0)) throw InvalidInput(kModule, "tau must be > 0");
  if (codes.size(0) == 0) return torch::zeros({}, codes.options());
  return -(target.detach() * torch::log_softmax(codes / tau, -1)).sum(-1).mean();
}

torch::Tensor alignment_loss(const ConceptCodes& codes, const SoftCodes& soft, double tau) {
  return soft_cross_entropy(soft.s, codes.q_v_static(), tau) +
         soft_cross_entropy(soft.v_static, codes.q_s, tau) +
         soft_cross_entropy(soft.d, codes.q_v_dynamic(), tau) +
         soft_cross_entropy(soft.v_dynamic, codes.q_d, tau);
}

}  // namespace vidconcept
