#include <gtest/gtest.h>
#include <torch/torch.h>

#include <random>

#include "oracles.hpp"
#include "test_util.hpp"
#include "vidconcept/error.hpp"
#include "vidconcept/evalkit.hpp"
#include "vidconcept/trainer.hpp"

using namespace vidconcept;

namespace {

std::vector<int64_t> cyclic_labels(int64_t n, int64_t classes) {
  std::vector<int64_t> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = i % classes;
  return out;
}

Split all_split(double fraction, const std::vector<int64_t>& labels) {
  return stratified_split(labels, fraction, 11);
}

// Brute-force recall: position of the first same-label gallery item when
// sorting by cosine similarity, ties to the lower index.
std::map<int64_t, double> recall_oracle(const oracle::Mat& q, const oracle::Mat& g,
                                        const std::vector<int64_t>& lq,
                                        const std::vector<int64_t>& lg, bool exclude_self) {
  std::map<int64_t, double> out;
  for (int64_t k : {1, 5, 10, 20}) {
    int hits = 0;
    for (size_t i = 0; i < q.size(); ++i) {
      int64_t first = -1;
      for (size_t j = 0; j < g.size(); ++j) {
        if (exclude_self && j == i) continue;
        if (lg[j] != lq[i]) continue;
        const double sj = oracle::dot(q[i], g[j]) / (oracle::norm(q[i]) * oracle::norm(g[j]));
        int64_t rank = 0;
        for (size_t m = 0; m < g.size(); ++m) {
          if (m == j || (exclude_self && m == i)) continue;
          const double sm = oracle::dot(q[i], g[m]) / (oracle::norm(q[i]) * oracle::norm(g[m]));
          if (sm > sj || (sm == sj && m < j)) ++rank;
        }
        if (first < 0 || rank < first) first = rank;
      }
      hits += first >= 0 && first < k;
    }
    out[k] = static_cast<double>(hits) / static_cast<double>(q.size());
  }
  return out;
}

}  // namespace

TEST(Tags, RoundTripAndUnknown) {
  for (auto s : {FeatureSource::v, FeatureSource::q_v, FeatureSource::q_v_s, FeatureSource::q_v_d,
                 FeatureSource::F_v, FeatureSource::F_v_s, FeatureSource::F_v_d})
    EXPECT_EQ(parse_feature_source(to_string(s)), s);
  EXPECT_EQ(to_string(FeatureSource::q_v_d), "q_v^d");
  EXPECT_EQ(parse_feature_source("q_v_s"), FeatureSource::q_v_s);
  EXPECT_THROW(parse_feature_source("q_x"), InvalidInput);
  EXPECT_EQ(parse_label_kind("action"), LabelKind::action);
  EXPECT_THROW(parse_label_kind("scene"), InvalidInput);
  EXPECT_EQ(top_count(8, 0.1), 1);
  EXPECT_EQ(top_count(50, 0.1), 5);
  EXPECT_EQ(top_count(100, 0.1), 10);
}

TEST(Split, StratifiedCountsAndDisjoint) {
  const auto labels = cyclic_labels(103, 4);
  const auto s = stratified_split(labels, 0.7, 3);
  EXPECT_EQ(s.train.size() + s.test.size(), labels.size());
  std::vector<int> seen(labels.size(), 0);
  for (auto i : s.train) ++seen[static_cast<size_t>(i)];
  for (auto i : s.test) ++seen[static_cast<size_t>(i)];
  for (int c : seen) EXPECT_EQ(c, 1);
  std::map<int64_t, int64_t> total, train;
  for (auto l : labels) ++total[l];
  for (auto i : s.train) ++train[labels[static_cast<size_t>(i)]];
  for (auto [l, n] : total) EXPECT_EQ(train[l], std::llround(0.7 * static_cast<double>(n)));
  EXPECT_EQ(stratified_split(labels, 0.7, 3).train, s.train);
}

TEST(Probe, SeparableClustersAreClassifiedPerfectly) {
  auto gen = testutil::generator(1);
  const auto labels = cyclic_labels(200, 4);
  auto centers = testutil::randn64({4, 6}, gen) * 10;
  auto x = testutil::randn64({200, 6}, gen) * 0.3 +
           centers.index_select(0, torch::tensor(labels, torch::kInt64));
  const auto r = linear_probe(x, labels, all_split(0.7, labels));
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.n_train + r.n_test, 200);
}

TEST(Probe, RandomLabelsStayNearChance) {
  auto gen = testutil::generator(2);
  std::mt19937_64 rng(2);
  std::vector<int64_t> labels(600);
  for (auto& l : labels) l = static_cast<int64_t>(rng() % 4);
  auto x = testutil::randn64({600, 8}, gen);
  const auto r = linear_probe(x, labels, all_split(0.7, labels));
  EXPECT_NEAR(r.accuracy, 0.25, 0.1);
}

TEST(Probe, OneDimensionalBoundaryNearZero) {
  std::vector<int64_t> labels;
  std::vector<double> xs;
  for (int i = 0; i < 200; ++i) {
    const double x = -1.0 + 2.0 * (i + 0.5) / 200.0;
    xs.push_back(x);
    labels.push_back(x > 0 ? 1 : 0);
  }
  auto x = torch::tensor(xs, torch::kFloat64).unsqueeze(1);
  const auto clf = fit_linear_classifier(x, labels);
  // Locate the sign change of the decision margin on a fine grid.
  auto grid = torch::linspace(-1, 1, 2001, torch::kFloat64).unsqueeze(1);
  auto d = clf.decision(grid);
  auto margin = (d.select(1, 1) - d.select(1, 0)).contiguous();
  double boundary = 0;
  for (int64_t i = 1; i < 2001; ++i)
    if (margin[i - 1].item<double>() <= 0 && margin[i].item<double>() > 0)
      boundary = grid[i][0].item<double>();
  EXPECT_NEAR(boundary, 0.0, 0.05);
  EXPECT_EQ(clf.predict(torch::tensor({{-0.5}, {0.5}}, torch::kFloat64)),
            (std::vector<int64_t>{0, 1}));
}

// Two symmetric point masses: the regularized logistic fit is odd in x, so
// the margin vanishes exactly at 0.
TEST(Probe, TwoPointMassesSplitAtZero) {
  std::vector<int64_t> labels;
  std::vector<double> xs;
  for (int i = 0; i < 40; ++i) {
    xs.push_back(i % 2 ? 1.0 : -1.0);
    labels.push_back(i % 2);
  }
  auto x = torch::tensor(xs, torch::kFloat64).unsqueeze(1);
  const auto result = linear_probe(x, labels, all_split(0.5, labels));
  EXPECT_EQ(result.accuracy, 1.0);
  const auto clf = fit_linear_classifier(x, labels);
  auto d = clf.decision(torch::tensor({{0.0}, {-1e-3}, {1e-3}}, torch::kFloat64));
  auto margin = d.select(1, 1) - d.select(1, 0);
  EXPECT_NEAR(margin[0].item<double>(), 0.0, 1e-6);
  EXPECT_LT(margin[1].item<double>(), 0.0);
  EXPECT_GT(margin[2].item<double>(), 0.0);
}

TEST(Probe, FeatureScaleDoesNotChangePredictions) {
  auto gen = testutil::generator(3);
  const auto labels = cyclic_labels(120, 3);
  auto x = testutil::randn64({120, 5}, gen) +
           torch::tensor(labels, torch::kFloat64).unsqueeze(1) * 0.8;
  const auto split = all_split(0.7, labels);
  const auto a = linear_probe(x, labels, split);
  const auto b = linear_probe(x * 1000.0, labels, split);
  EXPECT_NEAR(a.accuracy, b.accuracy, 1e-12);
}

TEST(Probe, InvalidSplitsThrow) {
  auto x = torch::zeros({6, 2}, torch::kFloat64);
  const std::vector<int64_t> labels{0, 0, 1, 1, 2, 2};
  EXPECT_THROW(linear_probe(x, labels, {{0, 1, 2, 3}, {4, 5}}), InvalidSplit);
  EXPECT_THROW(linear_probe(x, labels, {{0, 1}, {2}}), InvalidSplit);
}

TEST(Retrieval, IdenticalFeaturesPerLabelGiveFullRecall) {
  auto gen = testutil::generator(4);
  const auto labels = cyclic_labels(40, 4);
  auto protos = testutil::randn64({4, 6}, gen);
  auto x = protos.index_select(0, torch::tensor(labels, torch::kInt64));
  const auto r = retrieve(x, x, labels, labels, true);
  for (auto [k, v] : r.recall_at) EXPECT_EQ(v, 1.0) << k;
}

TEST(Retrieval, RandomFeaturesNearChanceAndMonotone) {
  auto gen = testutil::generator(5);
  const auto labels = cyclic_labels(400, 4);
  auto x = testutil::randn64({400, 16}, gen);
  const auto r = retrieve(x, x, labels, labels, true);
  EXPECT_NEAR(r.recall_at.at(1), 0.25, 0.08);
  EXPECT_LE(r.recall_at.at(1), r.recall_at.at(5));
  EXPECT_LE(r.recall_at.at(5), r.recall_at.at(10));
  EXPECT_LE(r.recall_at.at(10), r.recall_at.at(20));
}

TEST(Retrieval, MatchesBruteForceOracle) {
  auto gen = testutil::generator(6);
  for (int i = 0; i < 20; ++i) {
    const auto labels = cyclic_labels(30, 5);
    // Repeated rows produce exact ties.
    auto pool = testutil::randn64({8, 3}, gen);
    auto q = pool.index_select(0, torch::randint(0, 8, {30}, gen, torch::kInt64));
    for (bool self : {false, true}) {
      const auto r = retrieve(q, q, labels, labels, self);
      const auto expect =
          recall_oracle(oracle::to_mat(q), oracle::to_mat(q), labels, labels, self);
      for (auto [k, v] : expect) EXPECT_DOUBLE_EQ(r.recall_at.at(k), v) << k;
    }
  }
}

TEST(Retrieval, RotationInvariant) {
  auto gen = testutil::generator(7);
  const auto labels = cyclic_labels(60, 3);
  auto x = testutil::randn64({60, 8}, gen);
  auto rot = std::get<0>(torch::linalg_qr(testutil::randn64({8, 8}, gen)));
  const auto a = retrieve(x, x, labels, labels, true);
  const auto b = retrieve(x.mm(rot), x.mm(rot), labels, labels, true);
  for (auto [k, v] : a.recall_at) EXPECT_NEAR(b.recall_at.at(k), v, 1e-12);
}

TEST(Heatmap, ConstantAndOrthogonalCodes) {
  const std::vector<int64_t> labels{0, 1, 2, 0, 1, 2};
  auto ones = torch::ones({6, 4}, torch::kFloat64);
  auto h = code_similarity_heatmap(ones, labels, 3);
  EXPECT_TRUE(torch::allclose(h, torch::ones({3, 3}, torch::kFloat64), 0, 1e-12));

  auto eye = torch::eye(3, torch::kFloat64).repeat({2, 1});
  h = code_similarity_heatmap(eye, labels, 3);
  EXPECT_TRUE(torch::allclose(h, torch::eye(3, torch::kFloat64), 0, 1e-12));

  EXPECT_THROW(code_similarity_heatmap(ones, labels, 4), InvalidInput);  // empty class
  auto zero = ones.clone();
  zero[0].zero_();
  zero[3].zero_();
  EXPECT_THROW(code_similarity_heatmap(zero, labels, 3), DegenerateInput);
}

TEST(Heatmap, SymmetricUnitDiagonalMatchesOracle) {
  auto gen = testutil::generator(8);
  const auto labels = cyclic_labels(50, 5);
  auto codes = torch::rand({50, 7}, gen, torch::kFloat64);
  auto h = code_similarity_heatmap(codes, labels, 5);
  EXPECT_TRUE(torch::equal(h, h.t()));
  for (int64_t i = 0; i < 5; ++i) EXPECT_EQ(h[i][i].item<double>(), 1.0);
  oracle::Mat means(5, oracle::Vec(7, 0.0));
  const auto c = oracle::to_mat(codes);
  for (size_t i = 0; i < 50; ++i)
    for (size_t k = 0; k < 7; ++k) means[static_cast<size_t>(labels[i])][k] += c[i][k] / 10.0;
  for (size_t a = 0; a < 5; ++a)
    for (size_t b = 0; b < 5; ++b)
      EXPECT_NEAR(h[static_cast<int64_t>(a)][static_cast<int64_t>(b)].item<double>(),
                  oracle::dot(means[a], means[b]) /
                      (oracle::norm(means[a]) * oracle::norm(means[b])),
                  1e-12);
}

TEST(Overlay, ShapeRangeAndArgmax) {
  auto gen = testutil::generator(9);
  auto w = torch::rand({4, 7, 7}, gen, torch::kFloat64);
  auto o = attention_overlay(w, {16, 112, 112, 3});
  EXPECT_EQ(o.sizes(), torch::IntArrayRef({16, 112, 112}));
  EXPECT_GE(o.min().item<double>(), 0.0);
  EXPECT_LE(o.max().item<double>(), 1.0);
  for (int64_t t = 0; t < 4; ++t) {
    const auto src = w[t].flatten().argmax().item<int64_t>();
    const int64_t y = src / 7, x = src % 7;
    // Nearest upsampling: output (ty, yy, xx) reads input (ty*4/16, yy*7/112, xx*7/112).
    EXPECT_EQ(o[t * 4][y * 16][x * 16].item<double>(), 1.0);
    const auto dst = o[t * 4].flatten().argmax().item<int64_t>();
    EXPECT_EQ(dst / 112 / 16, y);
    EXPECT_EQ(dst % 112 / 16, x);
  }
  auto flat = attention_overlay(torch::full({2, 3, 3}, 0.3, torch::kFloat64), {4, 6, 6, 3});
  EXPECT_TRUE(torch::equal(flat, torch::ones_like(flat)));
}

TEST(Features, DimensionsAndTopConceptMean) {
  auto cfg = testutil::micro_config();
  const auto data = make_synth_dataset(cfg.videokit.synth);
  Trainer trainer(cfg, true);
  auto model = trainer.model();
  const double fraction = 0.25;
  const auto all = extract_all_features(model, data, cfg.videokit.augment, fraction, 5);
  const int64_t n = data.size(), c = model->channels(), ks = 4, kd = 4;
  EXPECT_EQ(all.at(FeatureSource::v).sizes(), torch::IntArrayRef({n, c}));
  EXPECT_EQ(all.at(FeatureSource::q_v).sizes(), torch::IntArrayRef({n, ks + kd}));
  EXPECT_EQ(all.at(FeatureSource::q_v_s).sizes(), torch::IntArrayRef({n, ks}));
  EXPECT_EQ(all.at(FeatureSource::q_v_d).sizes(), torch::IntArrayRef({n, kd}));
  for (auto s : {FeatureSource::F_v, FeatureSource::F_v_s, FeatureSource::F_v_d})
    EXPECT_EQ(all.at(s).sizes(), torch::IntArrayRef({n, c}));

  // Manual reference on the full (uncropped) clips in eval mode.
  model->eval();
  torch::NoGradGuard no_grad;
  std::vector<int64_t> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  const auto out = model->forward_stream(Source::v, data.batch(idx));
  const auto q = oracle::to_mat(out.codes);
  const auto local = out.attention.features;
  for (int64_t i = 0; i < n; ++i) {
    const auto top = oracle::top_k(q[static_cast<size_t>(i)], 2);  // round(0.25 * 8)
    auto ref = (local[i][top[0]] + local[i][top[1]]) / 2;
    EXPECT_TRUE(torch::allclose(all.at(FeatureSource::F_v)[i], ref, 1e-5, 1e-6)) << i;
  }
  EXPECT_TRUE(torch::allclose(all.at(FeatureSource::q_v), out.codes, 1e-5, 1e-6));
  EXPECT_TRUE(torch::equal(extract_features(model, data, FeatureSource::q_v_d,
                                            cfg.videokit.augment, fraction, 5),
                           all.at(FeatureSource::q_v_d)));
}

TEST(Overlays, ExportWritesFilesPerClip) {
  testutil::TempDir dir("overlay");
  auto cfg = testutil::micro_config();
  cfg.videokit.synth.n_samples = 2;
  const auto data = make_synth_dataset(cfg.videokit.synth);
  Trainer trainer(cfg, true);
  auto model = trainer.model();
  const auto recs = export_attention_overlays(model, data, cfg.videokit.augment, dir.path());
  ASSERT_EQ(recs.size(), 2u);
  for (const auto& r : recs) {
    EXPECT_LT(r.static_concept, 4);
    EXPECT_GE(r.dynamic_concept, 4);
    for (const char* f : {"static_weights.npy", "static_overlay.npy", "dynamic_overlay.npy",
                          "static_frame_000.png", "dynamic_frame_007.png"})
      EXPECT_TRUE(std::filesystem::exists(dir / r.id / f)) << r.id << "/" << f;
  }
}
