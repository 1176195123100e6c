#include <gtest/gtest.h>
#include <torch/torch.h>

#include "oracles.hpp"
#include "test_util.hpp"
#include "vidconcept/conceptspace.hpp"
#include "vidconcept/error.hpp"
#include "vidconcept/model.hpp"

using namespace vidconcept;

namespace {

double max_abs_diff(const oracle::Mat& a, const torch::Tensor& b) {
  const auto m = oracle::to_mat(b);
  double worst = 0;
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = 0; j < a[i].size(); ++j) worst = std::max(worst, std::fabs(a[i][j] - m[i][j]));
  return worst;
}

ConceptCodes random_codes(int64_t b, int64_t ks, int64_t kd, torch::Generator& gen) {
  auto u = [&](int64_t k) { return torch::rand({b, k}, gen, torch::kFloat64) * 2 - 1; };
  return {u(ks), u(kd), u(ks + kd)};
}

}  // namespace

TEST(Codes, OrthonormalBasis) {
  auto protos = torch::eye(2, 4, torch::kFloat64);
  auto vec = torch::tensor({1.0, 0.0, 0.0, 0.0}, torch::kFloat64);
  auto q = compute_codes(vec, protos);
  EXPECT_DOUBLE_EQ(q[0].item<double>(), 1.0);
  EXPECT_DOUBLE_EQ(q[1].item<double>(), 0.0);
}

TEST(Codes, ScaleInvariantAndBounded) {
  auto gen = testutil::generator(1);
  auto f = testutil::randn64({6, 8}, gen), p = testutil::randn64({4, 8}, gen);
  auto q = compute_codes(f, p);
  EXPECT_TRUE(torch::allclose(q, compute_codes(f * 5.0, p), 0, 1e-12));
  EXPECT_LE(q.abs().max().item<double>(), 1.0);
}

TEST(Codes, MatchesScalarOracleOnRandomInstances) {
  auto gen = testutil::generator(2);
  for (int i = 0; i < 100; ++i) {
    auto f = testutil::randn64({3, 8}, gen), p = testutil::randn64({4, 8}, gen);
    const auto expect = oracle::cosine_codes(oracle::to_mat(f), oracle::to_mat(p));
    EXPECT_LT(max_abs_diff(expect, compute_codes(f, p)), 1e-6);
  }
}

TEST(Codes, ZeroNormThrows) {
  auto p = torch::eye(2, 4, torch::kFloat64);
  EXPECT_THROW(compute_codes(torch::zeros({4}, torch::kFloat64), p), DegenerateInput);
  EXPECT_THROW(compute_codes(torch::ones({4}, torch::kFloat64), torch::zeros({2, 4})),
               DegenerateInput);
}

TEST(Prototypes, ShapesAndUnitRowsAtInit) {
  torch::manual_seed(0);
  PrototypeBank bank(5, 3, 16);
  EXPECT_EQ(bank->P_s.sizes(), torch::IntArrayRef({5, 16}));
  EXPECT_EQ(bank->P_d.sizes(), torch::IntArrayRef({3, 16}));
  EXPECT_EQ(bank->P_v.sizes(), torch::IntArrayRef({8, 16}));
  for (const auto& p : {bank->P_s, bank->P_d, bank->P_v})
    EXPECT_TRUE(torch::allclose(p.norm(2, 1), torch::ones({p.size(0)}), 0, 1e-5));
  EXPECT_THROW(PrototypeBank(1, 3, 16), InvalidInput);
}

TEST(Sinkhorn, EqualCodesGiveUniform) {
  AlignmentConfig cfg;
  auto q = sinkhorn_soft_codes(torch::full({5, 7}, 0.3, torch::kFloat64), cfg);
  EXPECT_TRUE(torch::allclose(q, torch::full_like(q, 1.0 / 7), 0, 1e-12));
}

TEST(Sinkhorn, TwoByTwoNearPermutation) {
  AlignmentConfig cfg;
  cfg.sinkhorn_iters = 50;
  auto codes = torch::tensor({{10.0, 0.0}, {0.0, 10.0}}, torch::kFloat64);
  auto q = sinkhorn_soft_codes(codes, cfg);
  const auto expect = oracle::sinkhorn(oracle::to_mat(codes), 0.05, 50);
  EXPECT_GE(q[0][0].item<double>(), 0.99);
  EXPECT_GE(q[1][1].item<double>(), 0.99);
  EXPECT_GE(expect[0][0], 0.99);
  EXPECT_LT(max_abs_diff(expect, q), 1e-12);
}

TEST(Sinkhorn, MatchesOracleAndBalances) {
  auto gen = testutil::generator(3);
  AlignmentConfig cfg;
  for (int i = 0; i < 100; ++i) {
    auto codes = compute_codes(testutil::randn64({32, 128}, gen), testutil::randn64({50, 128}, gen));
    torch::Tensor cols;
    auto t = sinkhorn_transport(codes, cfg, &cols);
    auto soft = sinkhorn_soft_codes(codes, cfg);
    EXPECT_LT(max_abs_diff(oracle::sinkhorn(oracle::to_mat(codes), 0.05, 3), soft), 1e-6);
    EXPECT_LT((cols - 1.0 / 50).abs().max().item<double>(), 1e-3);
    EXPECT_LT((t.sum(1) - 1.0 / 32).abs().max().item<double>(), 1e-5);
    EXPECT_LT((soft.sum(1) - 1.0).abs().max().item<double>(), 1e-5);
    EXPECT_GE(soft.min().item<double>(), 0.0);
  }
}

// Three iterations only approximately balance the concepts after the final
// row step; more iterations converge.
TEST(Sinkhorn, ColumnBalanceConvergesWithIterations) {
  auto gen = testutil::generator(13);
  auto codes = compute_codes(testutil::randn64({32, 128}, gen), testutil::randn64({50, 128}, gen));
  double prev = 1.0;
  for (int64_t iters : {1, 3, 10, 50}) {
    AlignmentConfig cfg;
    cfg.sinkhorn_iters = iters;
    const double dev =
        (sinkhorn_transport(codes, cfg).sum(0) - 1.0 / 50).abs().max().item<double>();
    EXPECT_LT(dev, prev);
    prev = dev;
  }
  EXPECT_LT(prev, 1e-9);
}

TEST(Sinkhorn, RowShiftInvariance) {
  auto gen = testutil::generator(4);
  AlignmentConfig cfg;
  auto codes = torch::rand({8, 6}, gen, torch::kFloat64) * 2 - 1;
  auto shift = torch::rand({8, 1}, gen, torch::kFloat64) * 3;
  auto a = sinkhorn_soft_codes(codes, cfg), b = sinkhorn_soft_codes(codes + shift, cfg);
  EXPECT_LT((a - b).abs().max().item<double>(), 1e-6);
}

TEST(Sinkhorn, EdgeCases) {
  AlignmentConfig cfg;
  EXPECT_EQ(sinkhorn_soft_codes(torch::zeros({0, 4}, torch::kFloat64), cfg).size(0), 0);
  auto bad = torch::zeros({2, 3}, torch::kFloat64);
  bad[0][1] = std::nan("");
  EXPECT_THROW(sinkhorn_soft_codes(bad, cfg), InvalidInput);
  AlignmentConfig zero_iters;
  zero_iters.sinkhorn_iters = 0;
  EXPECT_THROW(zero_iters.validate(), InvalidInput);
}

TEST(Alignment, UniformTermEqualsLogK) {
  auto target = torch::full({3, 2}, 0.5, torch::kFloat64);
  auto codes = torch::zeros({3, 2}, torch::kFloat64);
  EXPECT_NEAR(soft_cross_entropy(target, codes, 0.1).item<double>(), std::log(2.0), 1e-12);
}

TEST(Alignment, OneHotLimitContributesZero) {
  auto target = torch::tensor({{0.0, 1.0, 0.0}}, torch::kFloat64);
  auto codes = torch::tensor({{0.0, 1.0, 0.0}}, torch::kFloat64);
  EXPECT_LT(soft_cross_entropy(target, codes, 1e-3).item<double>(), 1e-12);
}

TEST(Alignment, MatchesEquationOracle) {
  auto gen = testutil::generator(5);
  AlignmentConfig cfg;
  for (int i = 0; i < 100; ++i) {
    const auto c = random_codes(4, 5, 5, gen);
    const auto soft = make_soft_codes(c, cfg);
    const double got = alignment_loss(c, soft, 0.1).item<double>();
    const double expect = oracle::alignment(
        {oracle::to_mat(c.q_s), oracle::to_mat(c.q_d), oracle::to_mat(c.q_v)}, 0.1, 0.05, 3);
    EXPECT_NEAR(got, expect, 1e-6);
    EXPECT_GE(got, 0.0);
  }
}

TEST(Alignment, EqualsEntropyWhenPredictionMatchesTarget) {
  // softmax(q/tau) == target exactly when q = tau * log(target).
  auto gen = testutil::generator(6);
  auto target = torch::softmax(torch::randn({4, 6}, gen, torch::kFloat64), 1);
  const double tau = 0.5;
  auto q = tau * target.log();
  const double entropy = -(target * target.log()).sum(1).mean().item<double>();
  EXPECT_NEAR(soft_cross_entropy(target, q, tau).item<double>(), entropy, 1e-12);
}

TEST(Alignment, MismatchedShapesThrow) {
  EXPECT_THROW(soft_cross_entropy(torch::zeros({2, 3}), torch::zeros({2, 4}), 0.1), InvalidInput);
}

TEST(Alignment, SoftCodesCarryNoGradient) {
  auto gen = testutil::generator(7);
  auto c = random_codes(4, 3, 3, gen);
  for (auto* t : {&c.q_s, &c.q_d, &c.q_v}) t->requires_grad_(true);
  const auto soft = make_soft_codes(c, {});
  EXPECT_FALSE(soft.s.requires_grad());
  EXPECT_FALSE(soft.v_dynamic.requires_grad());
  // Gradient w.r.t. q_s comes only from softmax(q_s/tau) in the term paired
  // with the q_v^s soft code: (softmax - target)/tau / B.
  alignment_loss(c, soft, 0.1).backward();
  auto expect = (torch::softmax(c.q_s.detach() / 0.1, 1) - soft.v_static) / 0.1 / 4.0;
  EXPECT_TRUE(torch::allclose(c.q_s.grad(), expect, 0, 1e-10));
}

// Static terms leave P_d, the dynamic rows of P_v and the frame-difference
// branch untouched; dynamic terms symmetrically.
TEST(Alignment, StaticAndDynamicTermsDecouple) {
  torch::manual_seed(3);
  EncoderConfig enc;
  enc.widths = {8, 16};
  enc.temporal_strides = {1, 2};
  enc.spatial_strides = {4, 2};
  enc.shared_backbone = false;
  ConceptSpaceConfig cs;
  cs.k_static = 3;
  cs.k_dynamic = 3;
  ConceptModel model(enc, cs, BottleneckConfig{});
  model->to(torch::kFloat64);
  auto gen = testutil::generator(8);
  TripletBatch batch{torch::rand({4, 4, 16, 16, 3}, gen, torch::kFloat64),
                     torch::rand({4, 4, 16, 16, 3}, gen, torch::kFloat64),
                     torch::rand({4, 4, 16, 16, 3}, gen, torch::kFloat64) - 0.5};
  for (bool static_part : {true, false}) {
    model->zero_grad();
    auto out = model->forward(batch, false);
    const auto soft = make_soft_codes(out.codes, cs.align);
    auto loss = static_part
                    ? soft_cross_entropy(soft.s, out.codes.q_v_static(), 0.1) +
                          soft_cross_entropy(soft.v_static, out.codes.q_s, 0.1)
                    : soft_cross_entropy(soft.d, out.codes.q_v_dynamic(), 0.1) +
                          soft_cross_entropy(soft.v_dynamic, out.codes.q_d, 0.1);
    loss.backward();
    auto zero_or_undefined = [](const torch::Tensor& g) {
      return !g.defined() || g.abs().max().item<double>() == 0.0;
    };
    const auto& pb = model->prototype_bank;
    auto gv = pb->P_v.grad();
    if (static_part) {
      EXPECT_TRUE(zero_or_undefined(pb->P_d.grad()));
      EXPECT_TRUE(zero_or_undefined(gv.narrow(0, 3, 3)));
      for (auto& p : model->backbone(Source::d).parameters())
        EXPECT_TRUE(zero_or_undefined(p.grad()));
      EXPECT_GT(pb->P_s.grad().abs().max().item<double>(), 0.0);
    } else {
      EXPECT_TRUE(zero_or_undefined(pb->P_s.grad()));
      EXPECT_TRUE(zero_or_undefined(gv.narrow(0, 0, 3)));
      for (auto& p : model->backbone(Source::s).parameters())
        EXPECT_TRUE(zero_or_undefined(p.grad()));
      EXPECT_GT(pb->P_d.grad().abs().max().item<double>(), 0.0);
    }
  }
}

TEST(Alignment, GradientMatchesFiniteDifferences) {
  auto gen = testutil::generator(9);
  auto feats = testutil::randn64({4, 8}, gen).requires_grad_(true);
  auto protos = testutil::randn64({6, 8}, gen).requires_grad_(true);
  auto q_other = torch::rand({4, 6}, gen, torch::kFloat64);
  const auto target = sinkhorn_soft_codes(q_other, {});
  auto loss_of = [&](const torch::Tensor& f, const torch::Tensor& p) {
    return soft_cross_entropy(target, compute_codes(f, p), 0.1);
  };
  loss_of(feats, protos).backward();
  torch::NoGradGuard no_grad;
  for (auto* t : {&feats, &protos}) {
    auto flat = t->view(-1);
    auto grad = t->grad().view(-1);
    for (int64_t i = 0; i < flat.numel(); ++i) {
      const double h = 1e-6, orig = flat[i].item<double>();
      flat[i] = orig + h;
      const double up = loss_of(feats, protos).item<double>();
      flat[i] = orig - h;
      const double down = loss_of(feats, protos).item<double>();
      flat[i] = orig;
      const double fd = (up - down) / (2 * h), g = grad[i].item<double>();
      EXPECT_LE(std::fabs(fd - g), 1e-3 * std::max(std::fabs(fd), std::fabs(g)) + 1e-8);
    }
  }
}
