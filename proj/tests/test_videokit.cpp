#include <map>
#include <random>

#include <gtest/gtest.h>
#include <torch/torch.h>

#include "test_util.hpp"
#include "vidconcept/error.hpp"
#include "vidconcept/evalkit.hpp"
#include "vidconcept/image_io.hpp"
#include "vidconcept/npy.hpp"
#include "vidconcept/videokit.hpp"

using namespace vidconcept;
using testutil::TempDir;

namespace {

VideoClip random_clip(ClipShape s, uint64_t seed) {
  auto gen = testutil::generator(seed);
  return VideoClip::from_tensor(torch::rand({s[0], s[1], s[2], s[3]}, gen, torch::kFloat32));
}

VideoClip constant_clip(ClipShape s, float value) {
  return VideoClip::from_tensor(torch::full({s[0], s[1], s[2], s[3]}, value));
}

}  // namespace

TEST(VideoClip, RejectsOutOfRangeAndBadRank) {
  EXPECT_THROW(VideoClip::from_tensor(torch::full({2, 4, 4, 3}, 1.5f)), InvalidInput);
  EXPECT_THROW(VideoClip::from_tensor(torch::zeros({4, 4, 3})), InvalidInput);
  EXPECT_NO_THROW(VideoClip::from_tensor(torch::zeros({2, 4, 4, 3})));
}

TEST(StaticFrame, ConstantClipIsUnchanged) {
  auto c = constant_clip({6, 8, 8, 3}, 0.3f);
  EXPECT_TRUE(torch::equal(make_static_frame(c, 11).pixels, c.pixels));
}

TEST(StaticFrame, ShapeKeptAndSlicesEqual) {
  auto c = random_clip({16, 112, 112, 3}, 1);
  auto s = make_static_frame(c, 5);
  EXPECT_EQ(s.pixels.sizes(), c.pixels.sizes());
  for (int64_t t = 1; t < 16; ++t) EXPECT_TRUE(torch::equal(s.pixels[t], s.pixels[0]));
  EXPECT_EQ(s.pixels.var(0, false).abs().max().item<float>(), 0.0f);
}

TEST(StaticFrame, SeededIndexMatchesIndependentDraw) {
  auto c = random_clip({9, 6, 6, 3}, 2);
  for (uint64_t seed : {0ULL, 1ULL, 42ULL, 123456789ULL}) {
    std::mt19937_64 gen(seed);
    const auto expected = std::uniform_int_distribution<int64_t>(0, 8)(gen);
    auto a = make_static_frame(c, seed), b = make_static_frame(c, seed);
    EXPECT_TRUE(torch::equal(a.pixels, b.pixels));
    EXPECT_TRUE(torch::equal(a.pixels[0], c.pixels[expected])) << "seed " << seed;
  }
}

TEST(StaticFrame, EmptyClipThrows) {
  EXPECT_THROW(make_static_frame(VideoClip{torch::zeros({0, 4, 4, 3})}, 0), InvalidInput);
}

TEST(FrameDifference, ConstantClipGivesZero) {
  auto d = make_frame_difference(constant_clip({5, 4, 4, 3}, 0.7f));
  EXPECT_EQ(d.pixels.abs().max().item<float>(), 0.0f);
}

TEST(FrameDifference, LinearRampGivesConstant) {
  const int64_t T = 8;
  auto ramp = torch::arange(T, torch::kFloat64).div(T).view({T, 1, 1, 1}).expand({T, 3, 3, 2});
  auto d = make_frame_difference(VideoClip::from_tensor(ramp.contiguous()));
  EXPECT_TRUE(torch::allclose(d.pixels, torch::full_like(d.pixels, 1.0 / T), 0, 1e-12));
}

TEST(FrameDifference, MatchesScalarLoopAndDuplicatesLast) {
  auto c = random_clip({5, 3, 4, 2}, 3);
  auto d = make_frame_difference(c);
  ASSERT_EQ(d.pixels.sizes(), c.pixels.sizes());
  auto p = c.pixels.accessor<float, 4>();
  auto q = d.pixels.accessor<float, 4>();
  for (int64_t t = 0; t < 5; ++t)
    for (int64_t y = 0; y < 3; ++y)
      for (int64_t x = 0; x < 4; ++x)
        for (int64_t ch = 0; ch < 2; ++ch) {
          const int64_t tt = std::min<int64_t>(t, 3);
          EXPECT_FLOAT_EQ(q[t][y][x][ch], p[tt + 1][y][x][ch] - p[tt][y][x][ch]);
        }
  EXPECT_LE(d.pixels.abs().max().item<float>(), 1.0f);
}

TEST(FrameDifference, CumulativeSumReconstructsClip) {
  auto c = random_clip({7, 5, 5, 3}, 4);
  auto d = make_frame_difference(c);
  auto cum = d.pixels.narrow(0, 0, 6).to(torch::kFloat64).cumsum(0);
  auto expect = (c.pixels.narrow(0, 1, 6) - c.pixels[0]).to(torch::kFloat64);
  EXPECT_LT((cum - expect).abs().max().item<double>(), 1e-6);
}

TEST(FrameDifference, SingleFrameThrows) {
  EXPECT_THROW(make_frame_difference(constant_clip({1, 4, 4, 3}, 0.1f)), InvalidInput);
}

TEST(Triplet, ConstantClip) {
  auto c = constant_clip({4, 8, 8, 3}, 0.25f);
  auto tr = make_triplet(c, 9);
  EXPECT_TRUE(torch::equal(tr.s.pixels, tr.v.pixels));
  EXPECT_EQ(tr.d.pixels.abs().max().item<float>(), 0.0f);
}

TEST(Triplet, SharedShapeAndCropConsistency) {
  AugmentConfig aug;
  aug.crop_frames = 6;
  aug.crop_height = 10;
  aug.crop_width = 12;
  auto c = random_clip({9, 16, 16, 3}, 5);
  for (uint64_t seed = 0; seed < 20; ++seed) {
    auto tr = make_triplet(c, seed, aug);
    EXPECT_EQ(tr.v.pixels.sizes(), torch::IntArrayRef({6, 10, 12, 3}));
    EXPECT_EQ(tr.s.pixels.sizes(), tr.v.pixels.sizes());
    EXPECT_EQ(tr.d.pixels.sizes(), tr.v.pixels.sizes());
    // s repeats a frame of the augmented v; d is the difference of v.
    bool found = false;
    for (int64_t t = 0; t < 6; ++t) found |= torch::equal(tr.s.pixels[0], tr.v.pixels[t]);
    EXPECT_TRUE(found);
    EXPECT_TRUE(torch::equal(tr.d.pixels, make_frame_difference(tr.v).pixels));
  }
}

TEST(Triplet, FixedSeedIsBitIdentical) {
  AugmentConfig aug;
  aug.crop_height = 12;
  aug.crop_width = 12;
  auto c = random_clip({6, 16, 16, 3}, 6);
  auto a = make_triplet(c, 77, aug), b = make_triplet(c, 77, aug);
  EXPECT_TRUE(torch::equal(a.v.pixels, b.v.pixels));
  EXPECT_TRUE(torch::equal(a.s.pixels, b.s.pixels));
  EXPECT_TRUE(torch::equal(a.d.pixels, b.d.pixels));
}

TEST(Augment, FlipIsHorizontalMirror) {
  AugmentConfig aug;
  auto c = random_clip({3, 4, 5, 3}, 8);
  AugmentDraw d;
  d.flip = true;
  auto out = apply_augmentation(c.pixels, d, aug);
  EXPECT_TRUE(torch::equal(out, c.pixels.flip({2})));
  AugmentConfig too_big;
  too_big.crop_width = 99;
  EXPECT_THROW(too_big.output_shape({3, 4, 5, 3}), InvalidInput);
}

TEST(Synth, JointLabelsNearUniform) {
  auto samples = generate_synth_dataset(400, 2, 2, {4, 32, 32, 3}, 17);
  std::map<std::pair<int64_t, int64_t>, int> cells;
  for (const auto& s : samples) {
    ASSERT_GE(s.static_label, 0);
    ASSERT_LT(s.static_label, 2);
    ASSERT_GE(s.dynamic_label, 0);
    ASSERT_LT(s.dynamic_label, 2);
    cells[{s.static_label, s.dynamic_label}]++;
  }
  ASSERT_EQ(cells.size(), 4u);
  for (const auto& [cell, n] : cells) {
    EXPECT_GE(n, 70);
    EXPECT_LE(n, 130);
  }
}

TEST(Synth, DifferenceVanishesOutsideSpriteRegion) {
  SynthConfig cfg;
  cfg.n_samples = 12;
  cfg.shape = {8, 32, 32, 3};
  for (const auto& p : draw_synth_params(cfg)) {
    auto clip = render_synth_clip(p, cfg);
    auto bare = p;
    bare.sprite_delta = 0.0;
    auto background = render_synth_clip(bare, cfg).pixels;
    auto touched = (clip.pixels != background).any(-1).any(0);  // [H, W]
    auto d = make_frame_difference(clip).pixels.abs().amax({0, 3});
    EXPECT_EQ(d.masked_select(touched.logical_not()).abs().sum().item<float>(), 0.0f);
    EXPECT_GT(d.masked_select(touched).sum().item<float>(), 0.0f);
  }
}

// The background must leave no trace in the difference stream, even after
// 8-bit storage: same sprite, any static class and texture, same d.
TEST(Synth, StoredDifferenceIgnoresBackground) {
  for (double contrast : {0.15, 0.4}) {
    SynthConfig cfg;
    cfg.n_samples = 6;
    cfg.shape = {6, 32, 32, 3};
    cfg.sprite_contrast = contrast;
    cfg.seed = 11;
    for (auto p : draw_synth_params(cfg)) {
      std::vector<SynthSample> variants;
      for (int64_t s = 0; s < cfg.n_static_classes; ++s)
        for (double gain : {0.9, 1.1}) {
          p.static_label = s;
          p.background_gain = gain;
          p.texture_phase = 0.7 * static_cast<double>(s) + gain;
          variants.push_back({render_synth_clip(p, cfg), s, p.dynamic_label});
        }
      const auto data = to_dataset(variants);
      // Byte-level differences are identical; the float stream differs only by
      // the rounding of a/255 - b/255.
      const auto bytes = data.frames.to(torch::kInt32);
      const auto steps = bytes.narrow(1, 1, cfg.shape[0] - 1) - bytes.narrow(1, 0, cfg.shape[0] - 1);
      const auto ref = make_frame_difference(data.clip(0)).pixels;
      EXPECT_GT(ref.abs().max().item<float>(), 0.0f);
      for (int64_t i = 1; i < data.size(); ++i) {
        EXPECT_TRUE(torch::equal(steps[i], steps[0])) << "contrast " << contrast << " variant " << i;
        EXPECT_LT((make_frame_difference(data.clip(i)).pixels - ref).abs().max().item<float>(), 1e-6f);
      }
    }
  }
}

TEST(Synth, FixedStartFirstFramesIgnoreDynamicLabel) {
  SynthConfig cfg;
  cfg.n_samples = 4;
  cfg.shape = {8, 32, 32, 3};
  cfg.fixed_start = true;
  auto p = draw_synth_params(cfg).front();
  std::vector<torch::Tensor> first;
  for (int64_t d = 0; d < cfg.n_dynamic_classes; ++d) {
    p.dynamic_label = d;
    first.push_back(render_synth_clip(p, cfg).pixels[0]);
  }
  for (size_t i = 1; i < first.size(); ++i) EXPECT_TRUE(torch::equal(first[0], first[i]));
}

TEST(Synth, DegenerateShapesThrow) {
  EXPECT_THROW(generate_synth_dataset(4, 2, 2, {1, 32, 32, 3}, 0), InvalidInput);
  EXPECT_THROW(generate_synth_dataset(4, 2, 2, {8, 2, 2, 3}, 0), InvalidInput);
  EXPECT_THROW(generate_synth_dataset(4, 1, 2, {8, 32, 32, 3}, 0), InvalidInput);
  EXPECT_THROW(generate_synth_dataset(4, 2, 5, {8, 32, 32, 3}, 0), InvalidInput);
}

TEST(Synth, DeterministicGivenSeed) {
  SynthConfig cfg;
  cfg.n_samples = 6;
  cfg.shape = {4, 32, 32, 3};
  cfg.seed = 99;
  auto a = make_synth_dataset(cfg), b = make_synth_dataset(cfg);
  EXPECT_TRUE(torch::equal(a.frames, b.frames));
  EXPECT_EQ(a.static_labels, b.static_labels);
}

// Mean-frame pixel classifier: the background gives away the static label,
// the averaged-out sprite says little about the motion class.
TEST(Synth, MeanFrameSeparatesStaticNotDynamic) {
  SynthConfig cfg;
  cfg.n_samples = 600;
  cfg.shape = {16, 64, 64, 3};
  cfg.seed = 3;
  auto data = make_synth_dataset(cfg);
  auto mean = data.frames.to(torch::kFloat64).div(255.0).mean(1).permute({0, 3, 1, 2});
  auto pooled = torch::avg_pool2d(mean, 4).flatten(1);  // [N, 3*16*16]
  const auto split_s = stratified_split(data.static_labels, 0.7, 1);
  const auto split_d = stratified_split(data.dynamic_labels, 0.7, 1);
  const auto s = linear_probe(pooled, data.static_labels, split_s);
  const auto d = linear_probe(pooled, data.dynamic_labels, split_d);
  EXPECT_GT(s.accuracy, 0.9);
  EXPECT_LT(d.accuracy, 0.25 + 0.15);
}

TEST(Dataset, SaveLoadRoundTrip) {
  TempDir dir("ds");
  SynthConfig cfg;
  cfg.n_samples = 5;
  cfg.shape = {4, 32, 32, 3};
  auto data = make_synth_dataset(cfg);
  save_dataset(data, dir.path());
  EXPECT_TRUE(std::filesystem::exists(dir / "manifest.tsv"));
  auto back = load_dataset(dir.path());
  EXPECT_TRUE(torch::equal(back.frames, data.frames));
  EXPECT_EQ(back.ids, data.ids);
  EXPECT_EQ(back.static_labels, data.static_labels);
  EXPECT_EQ(back.dynamic_labels, data.dynamic_labels);
  EXPECT_EQ(back.n_static_classes, data.n_static_classes);
  auto one = npy::load(dir / ("clips/" + data.ids[2] + ".npy"));
  EXPECT_TRUE(torch::equal(one, data.frames[2]));
}

TEST(Dataset, FrameFolderIngestion) {
  TempDir dir("frames");
  auto gen = testutil::generator(12);
  for (const std::string clip : {"a", "b"}) {
    std::filesystem::create_directories(dir / clip);
    for (int t = 0; t < 3; ++t) {
      auto img = torch::randint(0, 256, {6, 8, 3}, gen, torch::kUInt8);
      image::write_png(dir / (clip + "/f" + std::to_string(t) + ".png"), img);
    }
  }
  std::ofstream(dir / "labels.tsv") << "a 1 0\nb 0 1\n";
  auto data = ingest_frame_folders(dir.path());
  ASSERT_EQ(data.size(), 2);
  EXPECT_EQ(data.clip_shape(), (ClipShape{3, 6, 8, 3}));
  EXPECT_EQ(data.static_labels, (std::vector<int64_t>{1, 0}));
  auto first = image::read_image(dir / "a/f0.png");
  EXPECT_TRUE(torch::equal(data.frames[0][0], first));
}
