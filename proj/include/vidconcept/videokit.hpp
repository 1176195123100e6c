#pragma once

// Clip containers, triplet construction (clip / static frame / frame
// difference), augmentation, the synthetic two-factor video corpus, and its
// on-disk layout.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/types.h>

namespace vidconcept {

/// Shape of a clip in [T, H, W, Ch] order.
using ClipShape = std::array<int64_t, 4>;

/// Dense clip, pixels [T, H, W, Ch] in [0, 1].
struct VideoClip {
  torch::Tensor pixels;
  double fps = 25.0;

  /// Validates rank, non-empty extents and the [0,1] value range.
  static VideoClip from_tensor(torch::Tensor pixels, double fps = 25.0);

  int64_t frames() const { return pixels.size(0); }
  ClipShape shape() const;
};

/// Signed temporal difference of a clip, values in [-1, 1].
struct DiffClip {
  torch::Tensor pixels;

  int64_t frames() const { return pixels.size(0); }
  ClipShape shape() const;
};

struct TripletInput {
  VideoClip v;
  VideoClip s;
  DiffClip d;
};

// Crop extents of 0 keep the full extent of that axis.
struct AugmentConfig {
  int64_t crop_frames = 0;
  int64_t crop_height = 0;
  int64_t crop_width = 0;
  bool random_flip = true;

  void validate() const;
  ClipShape output_shape(const ClipShape& in) const;
};

/// Frame index chosen by make_static_frame: uniform over [0, T) from a
/// std::mt19937_64 seeded with `rng_seed`.
int64_t static_frame_index(int64_t frames, uint64_t rng_seed);

/// Random choices behind one triplet: crop offsets, flip, and the static
/// frame index within the cropped window.
struct AugmentDraw {
  int64_t t0 = 0, y0 = 0, x0 = 0;
  bool flip = false;
  int64_t static_index = 0;
};

AugmentDraw draw_augmentation(const ClipShape& shape, uint64_t rng_seed,
                              const AugmentConfig& aug);

/// Crops and optionally flips pixels [T, H, W, Ch] (or batched [..., T, H, W, Ch]).
torch::Tensor apply_augmentation(const torch::Tensor& pixels, const AugmentDraw& draw,
                                 const AugmentConfig& aug);

VideoClip make_static_frame(const VideoClip& clip, uint64_t rng_seed);
DiffClip make_frame_difference(const VideoClip& clip);

/// Applies one crop window and flip decision to the clip, then derives the
/// static frame and the frame difference from the augmented clip.
TripletInput make_triplet(const VideoClip& clip, uint64_t rng_seed,
                          const AugmentConfig& aug = {});

/// Deterministic evaluation view: centered crop, no flip.
VideoClip center_crop(const VideoClip& clip, const AugmentConfig& aug);

// Batched variants over [B, T, H, W, Ch]; used by the trainer.
torch::Tensor static_frames_batch(const torch::Tensor& clips,
                                  const std::vector<int64_t>& frame_index);
torch::Tensor frame_difference_batch(const torch::Tensor& clips);

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SynthSample {
  VideoClip clip;
  int64_t static_label = 0;
  int64_t dynamic_label = 0;
};

/// Per-sample rendering parameters. Everything except the two labels is a
/// nuisance variable drawn independently of them.
struct SynthParams {
  int64_t static_label = 0;
  int64_t dynamic_label = 0;
  double background_gain = 1.0;   // brightness jitter
  double texture_phase = 0.0;     // stripe phase in radians
  double sprite_delta = 0.2;      // additive gray offset of the sprite
  double start_x = 0.5;           // sprite start, fraction of width
  double start_y = 0.5;           // sprite start, fraction of height
  int direction = 1;              // +1 / -1 along the trajectory
};

struct SynthConfig {
  int64_t n_samples = 2000;
  int64_t n_static_classes = 4;
  int64_t n_dynamic_classes = 4;
  ClipShape shape{16, 64, 64, 3};
  double sprite_fraction = 0.15;
  double sprite_contrast = 0.25;  // minimum |delta|; drawn from [c, c + 0.05]
  bool fixed_start = false;  // sprite always starts at the frame center
  uint64_t seed = 0;

  void validate() const;
  int64_t sprite_size() const;
};

/// Number of distinct sprite trajectories available.
inline constexpr int64_t kMaxDynamicClasses = 4;

std::vector<SynthParams> draw_synth_params(const SynthConfig& cfg);
/// Largest |sprite_delta| the config can draw, rounded up to the 8-bit grid.
/// Backgrounds keep this margin from 0 and 1.
double max_sprite_offset(const SynthConfig& cfg);
VideoClip render_synth_clip(const SynthParams& params, const SynthConfig& cfg);

std::vector<SynthSample> generate_synth_dataset(int64_t n_samples,
                                                int64_t n_static_classes,
                                                int64_t n_dynamic_classes,
                                                const ClipShape& shape,
                                                uint64_t rng_seed);

// ---------------------------------------------------------------------------
// Labeled clip collections

/// Clips stored as uint8 [N, T, H, W, Ch]. Missing labels are -1.
struct ClipDataset {
  torch::Tensor frames;
  std::vector<std::string> ids;
  std::vector<int64_t> static_labels;
  std::vector<int64_t> dynamic_labels;
  int64_t n_static_classes = 0;
  int64_t n_dynamic_classes = 0;

  int64_t size() const { return static_cast<int64_t>(ids.size()); }
  ClipShape clip_shape() const;
  VideoClip clip(int64_t i) const;
  /// Float batch [B, T, H, W, Ch] for the given sample indices.
  torch::Tensor batch(const std::vector<int64_t>& indices) const;
  /// static_label * n_dynamic_classes + dynamic_label.
  std::vector<int64_t> joint_labels() const;

  ClipDataset subset(const std::vector<int64_t>& indices) const;
};

ClipDataset make_synth_dataset(const SynthConfig& cfg);
ClipDataset to_dataset(const std::vector<SynthSample>& samples);

/// Writes `manifest.tsv` and one `clips/<id>.npy` (uint8) per sample.
void save_dataset(const ClipDataset& data, const std::filesystem::path& dir);
ClipDataset load_dataset(const std::filesystem::path& dir);

/// Reads a folder of frame images (PNG or binary PPM) sorted by file name.
VideoClip load_frame_folder(const std::filesystem::path& dir);

/// Each subdirectory of `root` is one clip. Labels come from an optional
/// `root/labels.tsv` with lines `<clip dir> <static> <dynamic>`.
ClipDataset ingest_frame_folders(const std::filesystem::path& root);

}  // namespace vidconcept
