#include "vidconcept/encoder.hpp"

#include <map>
#include <mutex>

#include <torch/torch.h>

#include "vidconcept/error.hpp"

namespace vidconcept {
namespace {

constexpr const char* kModule = "encoder";

struct AxisConv {
  int64_t kernel, padding;
};

AxisConv axis_conv(int64_t stride) {
  return stride >= 3 ? AxisConv{stride, 0} : AxisConv{3, 1};
}

std::map<std::string, BackboneFactory>& registry() {
  static std::map<std::string, BackboneFactory> r{
      {"tiny3dconv", [](const EncoderConfig& cfg) -> std::shared_ptr<BackboneImpl> {
         return std::make_shared<Tiny3dConvImpl>(cfg);
       }}};
  return r;
}

std::mutex& registry_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace

void EncoderConfig::validate() const {
  if (widths.empty()) throw InvalidInput(kModule, "at least one stage required");
  if (temporal_strides.size() != widths.size() || spatial_strides.size() != widths.size())
    throw InvalidInput(kModule, "one temporal and spatial stride per stage required");
  for (auto w : widths)
    if (w < 1) throw InvalidInput(kModule, "stage widths must be positive");
  for (size_t i = 0; i < widths.size(); ++i)
    if (temporal_strides[i] < 1 || spatial_strides[i] < 1)
      throw InvalidInput(kModule, "strides must be positive");
  if (out_channels() < 8) throw InvalidInput(kModule, "output channels C must be >= 8");
  if (in_channels < 1) throw InvalidInput(kModule, "in_channels must be positive");
  if (projection != "identity" && projection != "mlp")
    throw InvalidInput(kModule, "projection must be identity or mlp");
  if (norm != "none" && norm != "batch") throw InvalidInput(kModule, "norm must be none or batch");
}

int64_t EncoderConfig::total_temporal_stride() const {
  int64_t s = 1;
  for (auto t : temporal_strides) s *= t;
  return s;
}

int64_t EncoderConfig::total_spatial_stride() const {
  int64_t s = 1;
  for (auto t : spatial_strides) s *= t;
  return s;
}

std::array<int64_t, 3> EncoderConfig::feature_extent(const ClipShape& input) const {
  const int64_t ts = total_temporal_stride(), ss = total_spatial_stride();
  if (input[0] % ts != 0 || input[1] % ss != 0 || input[2] % ss != 0)
    throw InvalidInput(kModule, "input extents [" + std::to_string(input[0]) + "," +
                                    std::to_string(input[1]) + "," +
                                    std::to_string(input[2]) +
                                    "] not divisible by the configured strides");
  if (input[3] != in_channels)
    throw InvalidInput(kModule, "input has " + std::to_string(input[3]) +
                                    " channels, encoder expects " +
                                    std::to_string(in_channels));
  return {input[0] / ts, input[1] / ss, input[2] / ss};
}

SourceBatchNorm3dImpl::SourceBatchNorm3dImpl(int64_t channels, double momentum, double eps)
    : momentum_(momentum), eps_(eps) {
  weight = register_parameter("weight", torch::ones({channels}));
  bias = register_parameter("bias", torch::zeros({channels}));
  const char* tags[] = {"s", "d", "v"};
  for (int i = 0; i < 3; ++i) {
    mean_[i] = register_buffer(std::string("running_mean_") + tags[i], torch::zeros({channels}));
    var_[i] = register_buffer(std::string("running_var_") + tags[i], torch::ones({channels}));
  }
}

torch::Tensor SourceBatchNorm3dImpl::forward(const torch::Tensor& x, Source source) {
  const auto i = static_cast<size_t>(source);
  return torch::batch_norm(x, weight, bias, mean_[i], var_[i], is_training(), momentum_, eps_,
                           /*cudnn_enabled=*/false);
}

Tiny3dConvImpl::Tiny3dConvImpl(const EncoderConfig& cfg) : BackboneImpl(cfg) {
  cfg.validate();
  int64_t in = cfg.in_channels;
  for (size_t i = 0; i < cfg.widths.size(); ++i) {
    const auto t = axis_conv(cfg.temporal_strides[i]);
    const auto s = axis_conv(cfg.spatial_strides[i]);
    auto opts = torch::nn::Conv3dOptions(in, cfg.widths[i], {t.kernel, s.kernel, s.kernel})
                    .stride({cfg.temporal_strides[i], cfg.spatial_strides[i],
                             cfg.spatial_strides[i]})
                    .padding({t.padding, s.padding, s.padding});
    stages_.push_back(register_module("stage" + std::to_string(i), torch::nn::Conv3d(opts)));
    if (cfg.norm == "batch")
      norms_.push_back(
          register_module("norm" + std::to_string(i), SourceBatchNorm3d(cfg.widths[i])));
    in = cfg.widths[i];
  }
}

torch::Tensor Tiny3dConvImpl::forward(const torch::Tensor& x, Source source) {
  auto h = x;
  for (size_t i = 0; i < stages_.size(); ++i) {
    h = stages_[i]->forward(h);
    if (!norms_.empty()) h = norms_[i]->forward(h, source);
    if (i + 1 < stages_.size() || config().final_relu) h = torch::relu(h);
  }
  return h;
}

void register_backbone(const std::string& variant, BackboneFactory factory) {
  std::lock_guard lock(registry_mutex());
  registry()[variant] = std::move(factory);
}

std::shared_ptr<BackboneImpl> make_backbone(const EncoderConfig& cfg) {
  cfg.validate();
  std::lock_guard lock(registry_mutex());
  const auto it = registry().find(cfg.variant);
  if (it == registry().end())
    throw InvalidInput(kModule, "unknown backbone variant '" + cfg.variant + "'");
  return it->second(cfg);
}

torch::Tensor global_average_pool(const torch::Tensor& feature_map) {
  if (feature_map.dim() != 5)
    throw InvalidInput(kModule, "feature map must be [B, C, T', H', W']");
  return feature_map.mean({2, 3, 4});
}

Encoding encode(BackboneImpl& backbone, const torch::Tensor& clips, Source source) {
  if (clips.dim() != 5) throw InvalidInput(kModule, "clips must be [B, T, H, W, Ch]");
  backbone.config().feature_extent({clips.size(1), clips.size(2), clips.size(3), clips.size(4)});
  auto x = clips.permute({0, 4, 1, 2, 3});
  auto fmap = backbone.forward(x, source);
  return {fmap, global_average_pool(fmap)};
}

Encoding encode(BackboneImpl& backbone, const VideoClip& clip) {
  return encode(backbone, clip.pixels.unsqueeze(0));
}

Encoding encode(BackboneImpl& backbone, const DiffClip& clip) {
  return encode(backbone, clip.pixels.unsqueeze(0), Source::d);
}

ProjectionImpl::ProjectionImpl(int64_t channels, const std::string& kind) {
  if (kind == "mlp") {
    fc1_ = register_module("fc1", torch::nn::Linear(channels, channels));
    fc2_ = register_module("fc2", torch::nn::Linear(channels, channels));
  } else if (kind != "identity") {
    throw InvalidInput(kModule, "unknown projection '" + kind + "'");
  }
}

torch::Tensor ProjectionImpl::forward(const torch::Tensor& x) {
  if (!fc1_) return x;
  return fc2_->forward(torch::relu(fc1_->forward(x)));
}

}  // namespace vidconcept
