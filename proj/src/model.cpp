#include "vidconcept/model.hpp"

#include <torch/torch.h>

#include "vidconcept/error.hpp"

namespace vidconcept {

void ConceptSpaceConfig::validate() const {
  if (k_static < 2 || k_dynamic < 2)
    throw InvalidInput("conceptspace", "K_s and K_d must be >= 2");
  align.validate();
}

void BottleneckConfig::validate() const {
  if (hidden < 0) throw InvalidInput("bottleneck", "hidden size must be >= 0");
}

ConceptModelImpl::ConceptModelImpl(const EncoderConfig& encoder,
                                   const ConceptSpaceConfig& concepts,
                                   const BottleneckConfig& bottleneck)
    : encoder_cfg_(encoder), concept_cfg_(concepts) {
  encoder.validate();
  concepts.validate();
  bottleneck.validate();
  const int64_t c = encoder.out_channels();
  const int64_t ks = concepts.k_static, kd = concepts.k_dynamic;

  if (encoder.shared_backbone) {
    backbone_v_ = register_module("backbone", make_backbone(encoder));
    backbone_s_ = backbone_d_ = backbone_v_;
  } else {
    backbone_v_ = register_module("backbone_v", make_backbone(encoder));
    backbone_s_ = register_module("backbone_s", make_backbone(encoder));
    backbone_d_ = register_module("backbone_d", make_backbone(encoder));
  }
  sigma_s = register_module("sigma_s", Projection(c, encoder.projection));
  sigma_d = register_module("sigma_d", Projection(c, encoder.projection));
  sigma_v = register_module("sigma_v", Projection(c, encoder.projection));
  prototype_bank = register_module("prototypes", PrototypeBank(ks, kd, c));
  const int64_t hidden = bottleneck.hidden > 0 ? bottleneck.hidden : c;
  g_s = register_module("g_s", ReconstructionHead(ks, hidden, c));
  g_d = register_module("g_d", ReconstructionHead(kd, hidden, c));
  g_v = register_module("g_v", ReconstructionHead(ks + kd, hidden, c));
  attention = register_module("attention", CrossAttention(c));
}

BackboneImpl& ConceptModelImpl::backbone(Source source) {
  switch (source) {
    case Source::s: return *backbone_s_;
    case Source::d: return *backbone_d_;
    default: return *backbone_v_;
  }
}

Projection& ConceptModelImpl::sigma(Source source) {
  switch (source) {
    case Source::s: return sigma_s;
    case Source::d: return sigma_d;
    default: return sigma_v;
  }
}

torch::Tensor ConceptModelImpl::prototypes(Source source) const {
  switch (source) {
    case Source::s: return prototype_bank->P_s;
    case Source::d: return prototype_bank->P_d;
    default: return prototype_bank->P_v;
  }
}

ModelOutputs ConceptModelImpl::forward(const TripletBatch& batch, bool with_local) {
  if (batch.v.sizes() != batch.s.sizes() || batch.v.sizes() != batch.d.sizes())
    throw InvalidInput("encoder", "triplet members must share one shape");
  ModelOutputs out;
  // Separate calls even with one shared backbone, so normalization statistics
  // are never pooled across sources.
  out.enc_v = encode(*backbone_v_, batch.v, Source::v);
  out.enc_s = encode(*backbone_s_, batch.s, Source::s);
  out.enc_d = encode(*backbone_d_, batch.d, Source::d);
  out.pooled = {out.enc_s.vector, out.enc_d.vector, out.enc_v.vector};
  out.codes.q_s = compute_codes(sigma_s->forward(out.enc_s.vector), prototype_bank->P_s);
  out.codes.q_d = compute_codes(sigma_d->forward(out.enc_d.vector), prototype_bank->P_d);
  out.codes.q_v = compute_codes(sigma_v->forward(out.enc_v.vector), prototype_bank->P_v);
  if (with_local) {
    out.attn_s = attention->forward(prototype_bank->P_s, out.enc_s.feature_map);
    out.attn_d = attention->forward(prototype_bank->P_d, out.enc_d.feature_map);
    out.attn_v = attention->forward(prototype_bank->P_v, out.enc_v.feature_map);
    out.local = {out.attn_s.features, out.attn_d.features, out.attn_v.features};
    out.has_local = true;
  }
  return out;
}

StreamOutput ConceptModelImpl::forward_stream(Source source, const torch::Tensor& clips) {
  StreamOutput out;
  out.encoding = encode(backbone(source), clips, source);
  out.codes = compute_codes(sigma(source)->forward(out.encoding.vector), prototypes(source));
  out.attention = attention->forward(prototypes(source), out.encoding.feature_map);
  return out;
}

LossTargets ConceptModelImpl::make_targets(const ModelOutputs& out, int64_t k_top) const {
  return {make_soft_codes(out.codes, concept_cfg_.align), make_valid_masks(out.codes, k_top)};
}

LossTerms ConceptModelImpl::loss_terms(const ModelOutputs& out, const LossTargets& targets,
                                       double lambda) const {
  LossTerms t;
  t.aln = alignment_loss(out.codes, targets.soft, concept_cfg_.align.tau);
  t.fid = fidelity_loss(out.codes, out.pooled, heads());
  t.div = diversity_loss(out.codes);
  t.loc = out.has_local ? local_loss_total(out.local, targets.masks, lambda)
                        : torch::zeros({}, t.aln.options());
  return t;
}

}  // namespace vidconcept
