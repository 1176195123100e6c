#pragma once

// Downstream evaluation: feature extraction by source, linear probe,
// retrieval recall, class-averaged code similarity and attention overlays.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "vidconcept/config.hpp"
#include "vidconcept/model.hpp"
#include "vidconcept/videokit.hpp"

namespace vidconcept {

enum class FeatureSource { v, q_v, q_v_s, q_v_d, F_v, F_v_s, F_v_d };
enum class LabelKind { static_label, dynamic_label, action };

/// Tags as written in reports: v, q_v, q_v^s, q_v^d, F_v, F_v^s, F_v^d.
/// Parsing also accepts q_v_s / F_v_s style spellings.
std::string to_string(FeatureSource source);
FeatureSource parse_feature_source(const std::string& tag);
std::string to_string(LabelKind kind);
LabelKind parse_label_kind(const std::string& tag);

std::vector<int64_t> labels_for(const ClipDataset& data, LabelKind kind);

/// Number of concepts kept for F-sources: max(1, round(fraction * K)).
int64_t top_count(int64_t k, double fraction);

/// Per-sample features [N, dim] from centered, unflipped clips. F-sources
/// average the local features of the top concepts ranked by the matching
/// code (q_v for F_v, q_v^s for F_v^s, q_v^d for F_v^d).
torch::Tensor extract_features(ConceptModel& model, const ClipDataset& data,
                               FeatureSource source, const AugmentConfig& aug,
                               double top_fraction = 0.1, int64_t batch_size = 64);

/// All seven sources from a single pass over the data.
std::map<FeatureSource, torch::Tensor> extract_all_features(
    ConceptModel& model, const ClipDataset& data, const AugmentConfig& aug,
    double top_fraction = 0.1, int64_t batch_size = 64);

struct Split {
  std::vector<int64_t> train, test;
};

/// Stratified split: each class contributes round(fraction * count) samples
/// (at least one) to train.
Split stratified_split(const std::vector<int64_t>& labels, double train_fraction,
                       uint64_t seed);

struct ProbeConfig {
  double l2 = 1e-3;
  double tolerance = 1e-6;
  int64_t max_iter = 1000;
};

/// Multinomial logistic regression on standardized features.
struct LinearClassifier {
  torch::Tensor mean, scale;    // standardization [D]
  torch::Tensor weight, bias;   // [L, D], [L]
  std::vector<int64_t> classes;  // column -> label

  torch::Tensor decision(const torch::Tensor& features) const;
  std::vector<int64_t> predict(const torch::Tensor& features) const;
};

LinearClassifier fit_linear_classifier(const torch::Tensor& features,
                                       const std::vector<int64_t>& labels,
                                       const ProbeConfig& cfg = {});

struct ProbeResult {
  std::string feature_source;
  std::string label_kind;
  double accuracy = 0.0;
  int64_t n_train = 0;
  int64_t n_test = 0;
};

/// Fits on split.train and reports top-1 on split.test. Throws InvalidSplit
/// if a test label is absent from the train side or fewer than two classes
/// are present there.
ProbeResult linear_probe(const torch::Tensor& features,
                         const std::vector<int64_t>& labels, const Split& split,
                         const ProbeConfig& cfg = {});

struct RetrievalResult {
  std::map<int64_t, double> recall_at;  // k in {1, 5, 10, 20}
};

/// Ranks the gallery by cosine similarity per query (ties by lower index).
/// With `exclude_self`, gallery item i is skipped for query i.
RetrievalResult retrieve(const torch::Tensor& query, const torch::Tensor& gallery,
                         const std::vector<int64_t>& query_labels,
                         const std::vector<int64_t>& gallery_labels,
                         bool exclude_self = false);

/// Class-mean codes, then pairwise cosine similarity [L, L]. `codes` is
/// already the desired slice.
torch::Tensor code_similarity_heatmap(const torch::Tensor& codes,
                                      const std::vector<int64_t>& labels,
                                      int64_t n_classes);

/// Attention weights [T', H', W'] of one concept rescaled to [0, 1] per
/// temporal slice, then nearest-upsampled to [T, H, W]. Constant slices map
/// to 1.
torch::Tensor attention_overlay(const torch::Tensor& weight_map,
                                const ClipShape& frame_shape);

struct OverlayRecord {
  std::string id;
  int64_t static_concept = 0;
  int64_t dynamic_concept = 0;
};

/// For each clip picks the most activated static and dynamic concept of q_v,
/// writes raw weights and overlays as .npy and per-frame PNG heat overlays
/// under `out_dir/<id>/`.
std::vector<OverlayRecord> export_attention_overlays(
    ConceptModel& model, const ClipDataset& clips, const AugmentConfig& aug,
    const std::filesystem::path& out_dir);

}  // namespace vidconcept
