#pragma once

// The full concept model: shared backbone, projections, prototypes,
// reconstruction heads and cross-attention, plus the per-batch loss terms.

#include <string>

#include <torch/nn/module.h>
#include <torch/nn/pimpl.h>

#include "vidconcept/bottleneck.hpp"
#include "vidconcept/conceptspace.hpp"
#include "vidconcept/encoder.hpp"
#include "vidconcept/localcontrast.hpp"

namespace vidconcept {

struct ConceptSpaceConfig {
  int64_t k_static = 50;
  int64_t k_dynamic = 50;
  AlignmentConfig align;

  void validate() const;
};

struct BottleneckConfig {
  int64_t hidden = 0;  // 0 selects the encoder channel count

  void validate() const;
};

/// Float clips laid out [B, T, H, W, Ch]; d is signed.
struct TripletBatch {
  torch::Tensor v, s, d;
};

struct ModelOutputs {
  Encoding enc_s, enc_d, enc_v;
  PooledFeatures pooled;  // GAP vectors before projection
  ConceptCodes codes;
  AttentionOutput attn_s, attn_d, attn_v;
  LocalFeatures local;
  bool has_local = false;
};

/// Gradient-free quantities the losses are measured against.
struct LossTargets {
  SoftCodes soft;
  ValidMasks masks;
};

struct LossTerms {
  torch::Tensor aln, loc, fid, div;
};

/// One source stream in isolation (evaluation and export).
struct StreamOutput {
  Encoding encoding;
  torch::Tensor codes;  // [B, K] for the source's prototype bank
  AttentionOutput attention;
};

class ConceptModelImpl : public torch::nn::Module {
 public:
  ConceptModelImpl(const EncoderConfig& encoder, const ConceptSpaceConfig& concepts,
                   const BottleneckConfig& bottleneck);

  ModelOutputs forward(const TripletBatch& batch, bool with_local = true);
  StreamOutput forward_stream(Source source, const torch::Tensor& clips);

  LossTargets make_targets(const ModelOutputs& out, int64_t k_top) const;
  LossTerms loss_terms(const ModelOutputs& out, const LossTargets& targets,
                       double lambda) const;

  /// The backbone used for a source; the same object for all three when the
  /// backbone is shared.
  BackboneImpl& backbone(Source source);
  Projection& sigma(Source source);
  torch::Tensor prototypes(Source source) const;
  ReconstructionHeads heads() const { return {g_s, g_d, g_v}; }

  const EncoderConfig& encoder_config() const { return encoder_cfg_; }
  const ConceptSpaceConfig& concept_config() const { return concept_cfg_; }
  int64_t channels() const { return encoder_cfg_.out_channels(); }

  PrototypeBank prototype_bank{nullptr};
  Projection sigma_s{nullptr}, sigma_d{nullptr}, sigma_v{nullptr};
  ReconstructionHead g_s{nullptr}, g_d{nullptr}, g_v{nullptr};
  CrossAttention attention{nullptr};

 private:
  EncoderConfig encoder_cfg_;
  ConceptSpaceConfig concept_cfg_;
  std::shared_ptr<BackboneImpl> backbone_v_, backbone_s_, backbone_d_;
};
TORCH_MODULE(ConceptModel);

}  // namespace vidconcept
