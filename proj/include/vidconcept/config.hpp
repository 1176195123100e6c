#pragma once

// Experiment configuration: one nested record per module, strict loading
// (unknown keys rejected, invariants re-validated) and a resolved echo that
// marks which defaults were chosen here rather than taken from the method.

#include <filesystem>
#include <string>

#include <json.hpp>

#include "vidconcept/localcontrast.hpp"
#include "vidconcept/model.hpp"
#include "vidconcept/trainer_types.hpp"
#include "vidconcept/videokit.hpp"

namespace vidconcept {

struct VideokitConfig {
  std::string data_dir;  // empty: synthesize from `synth`
  AugmentConfig augment;
  SynthConfig synth;
};

struct EvalConfig {
  double train_fraction = 0.7;
  uint64_t split_seed = 0;
  double top_fraction = 0.1;
  double probe_l2 = 1e-3;
  double probe_tolerance = 1e-6;
  int64_t probe_max_iter = 1000;
  int64_t batch_size = 64;
  std::string label = "action";  // static | dynamic | action

  void validate() const;
};

struct TrainerConfig {
  LossWeights weights;
  OptimConfig optim;
  int64_t checkpoint_every = 10;
};

struct ExperimentConfig {
  std::string name = "default";
  uint64_t seed = 0;
  VideokitConfig videokit;
  EncoderConfig encoder;
  ConceptSpaceConfig conceptspace;
  BottleneckConfig bottleneck;
  LocalContrastConfig localcontrast;
  TrainerConfig trainer;
  EvalConfig evalkit;

  /// Re-checks every module invariant; throws ConfigError naming the key.
  void validate() const;
};

/// Resolved configuration as plain JSON (every key present).
nlohmann::json to_json(const ExperimentConfig& cfg);

/// Strict parse: absent keys take defaults, unknown keys throw. Accepts the
/// echo document as well (its `provenance` member is ignored).
ExperimentConfig config_from_json(const nlohmann::json& doc);

ExperimentConfig load_config(const std::filesystem::path& path);

/// Resolved config plus a `provenance` map from dotted key to "method" or
/// "plumbing". Stable byte output for identical configs.
std::string echo_config(const ExperimentConfig& cfg);

/// Writes `config.resolved.json` into `dir` and returns its path.
std::filesystem::path write_config_echo(const ExperimentConfig& cfg,
                                        const std::filesystem::path& dir);

}  // namespace vidconcept
