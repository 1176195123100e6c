#pragma once

// Shared spatio-temporal backbone, global average pooling, and the
// per-source projection transforms applied before concept coding.

#include <array>
#include <functional>
#include <string>
#include <vector>

#include <torch/nn/module.h>
#include <torch/nn/modules/container/sequential.h>
#include <torch/nn/modules/conv.h>
#include <torch/nn/modules/linear.h>
#include <torch/nn/pimpl.h>

#include "vidconcept/videokit.hpp"

namespace vidconcept {

/// Triplet member: static frame, frame difference, raw clip.
enum class Source { s, d, v };

struct EncoderConfig {
  std::vector<int64_t> widths{16, 32, 64, 128};
  std::vector<int64_t> temporal_strides{1, 1, 2, 2};
  std::vector<int64_t> spatial_strides{4, 2, 2, 1};
  int64_t in_channels = 3;
  std::string variant = "tiny3dconv";
  bool shared_backbone = true;
  std::string projection = "identity";  // identity | mlp
  std::string norm = "batch";           // none | batch (per-source statistics), after every conv
  bool final_relu = true;               // rectify the last stage as well

  void validate() const;
  int64_t out_channels() const { return widths.back(); }
  int64_t total_temporal_stride() const;
  int64_t total_spatial_stride() const;
  /// [T', H', W'] produced for an input of [T, H, W, Ch]; throws when the
  /// strides do not divide the input extents.
  std::array<int64_t, 3> feature_extent(const ClipShape& input) const;
};

/// Backbone contract: [B, Ch, T, H, W] -> [B, C, T', H', W'].
/// Inputs must satisfy `config().feature_extent`.
class BackboneImpl : public torch::nn::Module {
 public:
  explicit BackboneImpl(EncoderConfig cfg) : cfg_(std::move(cfg)) {}
  /// `source` selects which normalization statistics are used and updated.
  virtual torch::Tensor forward(const torch::Tensor& x, Source source = Source::v) = 0;
  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
};

/// Batch norm with one affine pair and separate running statistics per
/// source. Inputs of different sources never share moments, in training or
/// in eval mode.
class SourceBatchNorm3dImpl : public torch::nn::Module {
 public:
  explicit SourceBatchNorm3dImpl(int64_t channels, double momentum = 0.1, double eps = 1e-5);
  torch::Tensor forward(const torch::Tensor& x, Source source);

  torch::Tensor weight, bias;

 private:
  std::array<torch::Tensor, 3> mean_, var_;
  double momentum_, eps_;
};
TORCH_MODULE(SourceBatchNorm3d);

/// Small 3D-conv stack. A stage with stride >= 3 along an axis uses a
/// non-overlapping kernel equal to the stride (patchify); other stages use
/// kernel 3 with padding 1. Each conv is followed by optional batch norm and
/// a ReLU (the last ReLU is optional).
class Tiny3dConvImpl : public BackboneImpl {
 public:
  explicit Tiny3dConvImpl(const EncoderConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x, Source source = Source::v) override;

 private:
  std::vector<torch::nn::Conv3d> stages_;
  std::vector<SourceBatchNorm3d> norms_;
};

using BackboneFactory =
    std::function<std::shared_ptr<BackboneImpl>(const EncoderConfig&)>;

/// Registers a backbone constructor under `variant`. "tiny3dconv" is built in.
void register_backbone(const std::string& variant, BackboneFactory factory);
std::shared_ptr<BackboneImpl> make_backbone(const EncoderConfig& cfg);

struct Encoding {
  torch::Tensor feature_map;  // [B, C, T', H', W']
  torch::Tensor vector;       // [B, C]
};

torch::Tensor global_average_pool(const torch::Tensor& feature_map);

/// Encodes a batch of clips or difference clips laid out [B, T, H, W, Ch].
/// The vector is the per-channel mean of the map over all positions.
Encoding encode(BackboneImpl& backbone, const torch::Tensor& clips, Source source = Source::v);
Encoding encode(BackboneImpl& backbone, const VideoClip& clip);
Encoding encode(BackboneImpl& backbone, const DiffClip& clip);

/// The transform applied to a pooled vector before cosine coding. Identity
/// by default; "mlp" is Linear(C,C) -> ReLU -> Linear(C,C).
class ProjectionImpl : public torch::nn::Module {
 public:
  ProjectionImpl(int64_t channels, const std::string& kind);
  torch::Tensor forward(const torch::Tensor& x);
  bool is_identity() const { return !fc1_; }

 private:
  torch::nn::Linear fc1_{nullptr};
  torch::nn::Linear fc2_{nullptr};
};
TORCH_MODULE(Projection);

}  // namespace vidconcept
