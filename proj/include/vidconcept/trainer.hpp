#pragma once

// Overall objective with warmup, momentum SGD, the training loop, metrics
// log and checkpoints.

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vidconcept/archive.hpp"
#include "vidconcept/config.hpp"
#include "vidconcept/model.hpp"
#include "vidconcept/trainer_types.hpp"
#include "vidconcept/videokit.hpp"

namespace vidconcept {

/// Effective weight of the local term at `epoch` (alpha or 0 during warmup).
double local_weight(const LossWeights& weights, int64_t epoch);

/// l_aln + alpha*l_loc*[epoch >= warmup] + beta*l_fid + gamma*l_div.
/// Throws TrainingDivergence on a non-finite component.
double total_loss(const LossBundle& components, const LossWeights& weights,
                  int64_t epoch);

/// Tensor form used for backpropagation. When the local weight is zero the
/// local term is left out of the graph entirely.
torch::Tensor total_loss(const LossTerms& terms, const LossWeights& weights,
                         int64_t epoch);

/// SGD with heavy-ball momentum and decoupled-from-prototypes weight decay:
///   buf = momentum * buf + (grad + wd * p);  p -= lr * buf
class MomentumSgd {
 public:
  MomentumSgd(std::vector<std::pair<std::string, torch::Tensor>> params,
              const OptimConfig& cfg, std::vector<std::string> no_decay_prefixes);

  /// Clips gradients to the configured global norm and applies one update.
  /// Returns the global gradient norm before clipping.
  double step();
  void zero_grad();

  const std::map<std::string, torch::Tensor>& momentum_buffers() const {
    return buffers_;
  }
  void load_momentum_buffers(const std::map<std::string, torch::Tensor>& bufs);

 private:
  std::vector<std::pair<std::string, torch::Tensor>> params_;
  std::map<std::string, torch::Tensor> buffers_;
  std::vector<bool> decay_;
  OptimConfig cfg_;
};

/// Model, optimizer and bookkeeping for one experiment.
class Trainer {
 public:
  Trainer(const ExperimentConfig& cfg, bool deterministic);

  /// Forward, backward and update on one triplet batch.
  LossBundle step(const TripletBatch& batch, int64_t epoch);

  /// Loss terms without an update (no gradient).
  LossBundle evaluate(const TripletBatch& batch, int64_t epoch);

  ConceptModel& model() { return model_; }
  MomentumSgd& optimizer() { return optimizer_; }
  const ExperimentConfig& config() const { return cfg_; }
  /// Global gradient norm of the last step, before clipping.
  double last_grad_norm() const { return last_grad_norm_; }

  void save_checkpoint(const std::filesystem::path& path, int64_t epoch,
                       int64_t step) const;

 private:
  ExperimentConfig cfg_;
  ConceptModel model_;
  MomentumSgd optimizer_;
  double last_grad_norm_ = 0.0;
};

/// Builds the augmented triplet batch for the given samples; augmentation
/// seeds derive from (seed, epoch, sample index).
TripletBatch make_triplet_batch(const ClipDataset& data,
                                const std::vector<int64_t>& indices,
                                const AugmentConfig& aug, uint64_t seed,
                                int64_t epoch);

struct TrainOptions {
  std::filesystem::path out_dir;
  bool deterministic = false;
  bool verbose = false;
  std::function<void(const LossBundle&)> on_epoch;
};

struct TrainResult {
  ConceptModel model{nullptr};
  std::vector<LossBundle> epochs;
  std::filesystem::path final_checkpoint;
  std::filesystem::path metrics_log;
};

/// Runs the configured number of epochs. Writes `metrics.jsonl`,
/// `checkpoint_last.vck` after every epoch, `checkpoint_epoch_<n>.vck` every
/// `checkpoint_every` epochs and `checkpoint_final.vck`. On a non-finite loss
/// writes `divergence.json`, keeps the last good checkpoint and throws.
TrainResult train(const ExperimentConfig& cfg, const ClipDataset& data,
                  const TrainOptions& opts);

struct Checkpoint {
  ExperimentConfig config;
  ConceptModel model{nullptr};
  std::map<std::string, torch::Tensor> momentum;
  int64_t epoch = 0;
  int64_t step = 0;
};

Archive checkpoint_archive(const ExperimentConfig& cfg, ConceptModel& model,
                           const std::map<std::string, torch::Tensor>& momentum,
                           int64_t epoch, int64_t step);

/// Name-based restore: archive entries without a matching parameter are
/// ignored; parameters missing from the archive raise IoError.
void load_parameters(ConceptModel& model, const Archive& archive);

Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Sets the global torch seed and, when requested, single-threaded
/// deterministic kernels.
void configure_determinism(uint64_t seed, bool deterministic);

}  // namespace vidconcept
