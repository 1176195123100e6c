#include "vidconcept/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include <torch/torch.h>

#include "rng.hpp"
#include "vidconcept/error.hpp"

namespace vidconcept {
namespace fs = std::filesystem;
using nlohmann::json;

void LossWeights::validate() const {
  if (alpha < 0 || beta < 0 || gamma < 0)
    throw InvalidInput("trainer", "loss weights must be >= 0");
  if (warmup_epochs < 0) throw InvalidInput("trainer", "warmup_epochs must be >= 0");
}

void OptimConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw InvalidInput("trainer", "lr must be >= 0");
  if (epochs < 1) throw InvalidInput("trainer", "epochs must be >= 1");
  if (batch_size < 1) throw InvalidInput("trainer", "batch_size must be >= 1");
  if (weight_decay < 0.0) throw InvalidInput("trainer", "weight_decay must be >= 0");
  if (momentum < 0.0 || momentum >= 1.0)
    throw InvalidInput("trainer", "momentum must lie in [0, 1)");
}

double local_weight(const LossWeights& weights, int64_t epoch) {
  return epoch < weights.warmup_epochs ? 0.0 : weights.alpha;
}

double total_loss(const LossBundle& c, const LossWeights& weights, int64_t epoch) {
  for (double v : {c.l_aln, c.l_loc, c.l_fid, c.l_div})
    if (!std::isfinite(v)) {
      std::ostringstream os;
      os << "non-finite loss component (aln=" << c.l_aln << ", loc=" << c.l_loc
         << ", fid=" << c.l_fid << ", div=" << c.l_div << ") at epoch " << epoch;
      throw TrainingDivergence(os.str(), "");
    }
  return c.l_aln + local_weight(weights, epoch) * c.l_loc + weights.beta * c.l_fid +
         weights.gamma * c.l_div;
}

torch::Tensor total_loss(const LossTerms& terms, const LossWeights& weights, int64_t epoch) {
  auto total = terms.aln + weights.beta * terms.fid + weights.gamma * terms.div;
  const double a = local_weight(weights, epoch);
  if (a != 0.0) total = total + a * terms.loc;
  return total;
}

// ---------------------------------------------------------------------------

MomentumSgd::MomentumSgd(std::vector<std::pair<std::string, torch::Tensor>> params,
                         const OptimConfig& cfg, std::vector<std::string> no_decay_prefixes)
    : params_(std::move(params)), cfg_(cfg) {
  for (const auto& [name, _] : params_) {
    const bool excluded = std::any_of(
        no_decay_prefixes.begin(), no_decay_prefixes.end(),
        [&](const std::string& prefix) { return name.rfind(prefix, 0) == 0; });
    decay_.push_back(!excluded);
  }
}

void MomentumSgd::zero_grad() {
  for (auto& [_, p] : params_)
    if (p.grad().defined()) p.mutable_grad() = torch::Tensor();
}

double MomentumSgd::step() {
  torch::NoGradGuard no_grad;
  double sq = 0.0;
  for (const auto& [_, p] : params_)
    if (p.grad().defined()) sq += p.grad().to(torch::kFloat64).pow(2).sum().item<double>();
  const double norm = std::sqrt(sq);
  double scale = 1.0;
  if (cfg_.grad_clip > 0.0) {
    const double coef = cfg_.grad_clip / (norm + 1e-6);
    if (coef < 1.0) scale = coef;
  }
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& [name, p] = params_[i];
    if (!p.grad().defined()) continue;
    auto d = scale == 1.0 ? p.grad().clone() : p.grad() * scale;
    if (decay_[i] && cfg_.weight_decay != 0.0) d.add_(p, cfg_.weight_decay);
    auto it = buffers_.find(name);
    if (it == buffers_.end() || cfg_.momentum == 0.0) {
      it = buffers_.insert_or_assign(name, d).first;
    } else {
      it->second.mul_(cfg_.momentum).add_(d);
    }
    p.sub_(it->second, cfg_.lr);
  }
  return norm;
}

void MomentumSgd::load_momentum_buffers(const std::map<std::string, torch::Tensor>& bufs) {
  buffers_.clear();
  for (const auto& [name, p] : params_) {
    const auto it = bufs.find(name);
    if (it != bufs.end()) buffers_[name] = it->second.to(p.options()).clone();
  }
}

// ---------------------------------------------------------------------------

void configure_determinism(uint64_t seed, bool deterministic) {
  torch::manual_seed(seed);
  if (deterministic) {
    torch::set_num_threads(1);
    at::globalContext().setDeterministicAlgorithms(true, false);
  }
}

namespace {

ConceptModel build_model(const ExperimentConfig& cfg) {
  return ConceptModel(cfg.encoder, cfg.conceptspace, cfg.bottleneck);
}

LossBundle to_bundle(const LossTerms& t, const LossWeights& w, int64_t epoch) {
  LossBundle b;
  b.l_aln = t.aln.item<double>();
  b.l_loc = t.loc.item<double>();
  b.l_fid = t.fid.item<double>();
  b.l_div = t.div.item<double>();
  b.epoch = epoch;
  b.total = total_loss(b, w, epoch);
  return b;
}

json bundle_json(const LossBundle& b) {
  return json{{"epoch", b.epoch}, {"l_aln", b.l_aln}, {"l_loc", b.l_loc},
              {"l_fid", b.l_fid}, {"l_div", b.l_div}, {"total", b.total}};
}

}  // namespace

Trainer::Trainer(const ExperimentConfig& cfg, bool deterministic)
    : cfg_(cfg),
      model_((configure_determinism(cfg.seed, deterministic), build_model(cfg))),
      optimizer_(model_->named_parameters().pairs(), cfg.trainer.optim, {"prototypes."}) {
  cfg_.validate();
}

LossBundle Trainer::step(const TripletBatch& batch, int64_t epoch) {
  model_->train();
  optimizer_.zero_grad();
  auto out = model_->forward(batch, true);
  const auto targets = model_->make_targets(out, cfg_.localcontrast.k_top);
  const auto terms = model_->loss_terms(out, targets, cfg_.localcontrast.lambda);
  const auto bundle = to_bundle(terms, cfg_.trainer.weights, epoch);
  total_loss(terms, cfg_.trainer.weights, epoch).backward();
  last_grad_norm_ = optimizer_.step();
  return bundle;
}

LossBundle Trainer::evaluate(const TripletBatch& batch, int64_t epoch) {
  torch::NoGradGuard no_grad;
  model_->eval();
  auto out = model_->forward(batch, true);
  const auto targets = model_->make_targets(out, cfg_.localcontrast.k_top);
  return to_bundle(model_->loss_terms(out, targets, cfg_.localcontrast.lambda),
                   cfg_.trainer.weights, epoch);
}

void Trainer::save_checkpoint(const fs::path& path, int64_t epoch, int64_t step) const {
  auto model = model_;
  write_archive(path, checkpoint_archive(cfg_, model, optimizer_.momentum_buffers(), epoch, step));
}

TripletBatch make_triplet_batch(const ClipDataset& data, const std::vector<int64_t>& indices,
                                const AugmentConfig& aug, uint64_t seed, int64_t epoch) {
  const auto shape = data.clip_shape();
  std::vector<torch::Tensor> clips;
  std::vector<int64_t> static_index;
  clips.reserve(indices.size());
  for (auto i : indices) {
    const auto draw = draw_augmentation(
        shape, detail::mix_seed(seed, static_cast<uint64_t>(epoch), static_cast<uint64_t>(i)),
        aug);
    auto clip = data.frames[i].to(torch::kFloat32).div_(255.0);
    clips.push_back(apply_augmentation(clip, draw, aug));
    static_index.push_back(draw.static_index);
  }
  TripletBatch batch;
  batch.v = torch::stack(clips);
  batch.s = static_frames_batch(batch.v, static_index);
  batch.d = frame_difference_batch(batch.v);
  return batch;
}

// ---------------------------------------------------------------------------

Archive checkpoint_archive(const ExperimentConfig& cfg, ConceptModel& model,
                           const std::map<std::string, torch::Tensor>& momentum,
                           int64_t epoch, int64_t step) {
  Archive a;
  a.meta = json{{"format", "vidconcept-checkpoint"},
                {"version", 1},
                {"config", to_json(cfg)},
                {"epoch", epoch},
                {"step", step}};
  for (const auto& item : model->named_parameters())
    a.tensors.emplace("model/" + item.key(), item.value().detach().clone());
  for (const auto& item : model->named_buffers())
    a.tensors.emplace("model/" + item.key(), item.value().detach().clone());
  for (const auto& [name, buf] : momentum) a.tensors.emplace("optim/momentum/" + name, buf.clone());
  return a;
}

void load_parameters(ConceptModel& model, const Archive& archive) {
  torch::NoGradGuard no_grad;
  std::vector<std::string> missing;
  auto entries = model->named_parameters();
  for (auto& item : model->named_buffers()) entries.insert(item.key(), item.value());
  for (auto& item : entries) {
    const auto it = archive.tensors.find("model/" + item.key());
    if (it == archive.tensors.end()) {
      missing.push_back(item.key());
      continue;
    }
    if (it->second.sizes() != item.value().sizes())
      throw IoError("trainer", "shape mismatch for parameter " + item.key());
    item.value().copy_(it->second);
  }
  if (!missing.empty()) {
    std::string names;
    for (const auto& m : missing) names += (names.empty() ? "" : ", ") + m;
    throw IoError("trainer", "checkpoint lacks parameters: " + names);
  }
}

Checkpoint load_checkpoint(const fs::path& path) {
  const auto archive = read_archive(path);
  if (archive.meta.value("format", "") != "vidconcept-checkpoint")
    throw IoError("trainer", path.string() + " is not a vidconcept checkpoint");
  Checkpoint ck;
  ck.config = config_from_json(archive.meta.at("config"));
  ck.model = build_model(ck.config);
  load_parameters(ck.model, archive);
  const std::string prefix = "optim/momentum/";
  for (const auto& [name, t] : archive.tensors)
    if (name.rfind(prefix, 0) == 0) ck.momentum.emplace(name.substr(prefix.size()), t);
  ck.epoch = archive.meta.at("epoch").get<int64_t>();
  ck.step = archive.meta.at("step").get<int64_t>();
  return ck;
}

// ---------------------------------------------------------------------------

TrainResult train(const ExperimentConfig& cfg, const ClipDataset& data,
                  const TrainOptions& opts) {
  cfg.validate();
  if (data.size() == 0) throw InvalidInput("trainer", "empty dataset");
  cfg.encoder.feature_extent(cfg.videokit.augment.output_shape(data.clip_shape()));
  fs::create_directories(opts.out_dir);
  write_config_echo(cfg, opts.out_dir);

  TrainResult result;
  result.metrics_log = opts.out_dir / "metrics.jsonl";
  std::ofstream log(result.metrics_log, std::ios::trunc);
  if (!log) throw IoError("trainer", "cannot write " + result.metrics_log.string());

  Trainer trainer(cfg, opts.deterministic);
  const auto& optim = cfg.trainer.optim;
  const auto last = opts.out_dir / "checkpoint_last.vck";
  trainer.save_checkpoint(last, 0, 0);

  std::vector<int64_t> order(static_cast<size_t>(data.size()));
  int64_t step = 0;
  for (int64_t epoch = 0; epoch < optim.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 gen(detail::mix_seed(cfg.seed, static_cast<uint64_t>(epoch), 0x5u));
    std::shuffle(order.begin(), order.end(), gen);

    LossBundle sum;
    int64_t batches = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(optim.batch_size)) {
      const auto end = std::min(order.size(), start + static_cast<size_t>(optim.batch_size));
      const std::vector<int64_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                     order.begin() + static_cast<std::ptrdiff_t>(end));
      const auto batch = make_triplet_batch(data, idx, cfg.videokit.augment, cfg.seed, epoch);
      LossBundle b;
      try {
        b = trainer.step(batch, epoch);
      } catch (const TrainingDivergence& e) {
        const auto dump = opts.out_dir / "divergence.json";
        std::ofstream(dump) << json{{"epoch", epoch}, {"step", step}, {"error", e.what()},
                                    {"last_good_checkpoint", last.string()}}
                                   .dump(2)
                            << "\n";
        throw TrainingDivergence(e.what(), dump.string());
      }
      ++step;
      ++batches;
      auto rec = bundle_json(b);
      rec["kind"] = "step";
      rec["step"] = step;
      rec["lr"] = optim.lr;
      rec["grad_norm"] = trainer.last_grad_norm();
      log << rec.dump() << "\n";
      sum.l_aln += b.l_aln;
      sum.l_loc += b.l_loc;
      sum.l_fid += b.l_fid;
      sum.l_div += b.l_div;
      sum.total += b.total;
    }
    const double n = static_cast<double>(batches);
    LossBundle mean{sum.l_aln / n, sum.l_loc / n, sum.l_fid / n, sum.l_div / n, sum.total / n,
                    epoch};
    auto rec = bundle_json(mean);
    rec["kind"] = "epoch";
    rec["step"] = step;
    rec["lr"] = optim.lr;
    log << rec.dump() << "\n";
    log.flush();
    result.epochs.push_back(mean);

    trainer.save_checkpoint(last, epoch + 1, step);
    if (cfg.trainer.checkpoint_every > 0 && (epoch + 1) % cfg.trainer.checkpoint_every == 0) {
      std::ostringstream name;
      name << "checkpoint_epoch_" << std::setw(4) << std::setfill('0') << epoch + 1 << ".vck";
      trainer.save_checkpoint(opts.out_dir / name.str(), epoch + 1, step);
    }
    if (opts.verbose)
      std::cerr << "[train] epoch " << epoch << " total=" << mean.total << " aln=" << mean.l_aln
                << " loc=" << mean.l_loc << " fid=" << mean.l_fid << " div=" << mean.l_div
                << "\n";
    if (opts.on_epoch) opts.on_epoch(mean);
  }
  result.final_checkpoint = opts.out_dir / "checkpoint_final.vck";
  trainer.save_checkpoint(result.final_checkpoint, optim.epochs, step);
  result.model = trainer.model();
  return result;
}

}  // namespace vidconcept
