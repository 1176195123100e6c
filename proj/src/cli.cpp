#include "vidconcept/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>
#include <torch/torch.h>

#include "vidconcept/config.hpp"
#include "vidconcept/error.hpp"
#include "vidconcept/evalkit.hpp"
#include "vidconcept/npy.hpp"
#include "vidconcept/trainer.hpp"

namespace vidconcept::cli {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Relative paths live under $VIDCONCEPT_ROOT when it is set.
fs::path resolve(const std::string& p) {
  fs::path path(p);
  if (path.is_absolute()) return path;
  if (const char* root = std::getenv(kRootEnv); root && *root) return fs::path(root) / path;
  return path;
}

ExperimentConfig config_or_default(const std::string& path) {
  return path.empty() ? ExperimentConfig{} : load_config(resolve(path));
}

// Dataset priority: explicit flag, the config's data_dir, then the synthetic
// corpus regenerated from the config.
ClipDataset dataset_for(const ExperimentConfig& cfg, const std::string& data_flag) {
  if (!data_flag.empty()) return load_dataset(resolve(data_flag));
  if (!cfg.videokit.data_dir.empty()) return load_dataset(resolve(cfg.videokit.data_dir));
  return make_synth_dataset(cfg.videokit.synth);
}

void write_json(const fs::path& path, const json& doc) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cli", "cannot write " + path.string());
  out << doc.dump(2) << "\n";
}

struct SynthArgs {
  std::string config, out;
  std::optional<uint64_t> seed;
};

struct TrainArgs {
  std::string config, out, data;
  std::optional<uint64_t> seed;
  bool deterministic = false;
  bool quiet = false;
};

struct EvalArgs {
  std::string checkpoint, task, source = "q_v", out, data, label;
  int64_t limit = 8;
};

struct ExportArgs {
  std::string checkpoint, out, data;
};

int do_synth(const SynthArgs& a) {
  auto cfg = config_or_default(a.config);
  if (a.seed) cfg.videokit.synth.seed = *a.seed;
  const auto out = resolve(a.out);
  const auto data = make_synth_dataset(cfg.videokit.synth);
  save_dataset(data, out);
  write_config_echo(cfg, out);
  std::cout << json{{"samples", data.size()}, {"out", out.string()}}.dump() << "\n";
  return kExitOk;
}

int do_train(const TrainArgs& a) {
  auto cfg = config_or_default(a.config);
  if (a.seed) {
    cfg.seed = *a.seed;
    cfg.trainer.optim.seed = *a.seed;
  }
  const auto data = dataset_for(cfg, a.data);
  TrainOptions opts;
  opts.out_dir = resolve(a.out);
  opts.deterministic = a.deterministic;
  opts.verbose = !a.quiet;
  const auto result = train(cfg, data, opts);
  const auto& last = result.epochs.back();
  std::cout << json{{"epochs", result.epochs.size()},
                    {"final_total", last.total},
                    {"checkpoint", result.final_checkpoint.string()}}
                   .dump()
            << "\n";
  return kExitOk;
}

int do_eval(const EvalArgs& a) {
  auto ck = load_checkpoint(resolve(a.checkpoint));
  const auto& cfg = ck.config;
  const auto data = dataset_for(cfg, a.data);
  const auto out = resolve(a.out);
  fs::create_directories(out);
  const auto label_kind = parse_label_kind(a.label.empty() ? cfg.evalkit.label : a.label);
  const auto& ev = cfg.evalkit;
  const auto aug = cfg.videokit.augment;

  json rec{{"task", a.task}};
  if (a.task == "probe" || a.task == "retrieval") {
    const auto source = parse_feature_source(a.source);
    const auto labels = labels_for(data, label_kind);
    const auto features =
        extract_features(ck.model, data, source, aug, ev.top_fraction, ev.batch_size);
    const auto split = stratified_split(labels, ev.train_fraction, ev.split_seed);
    rec["source"] = to_string(source);
    rec["label"] = to_string(label_kind);
    if (a.task == "probe") {
      const auto r = linear_probe(features, labels, split,
                                  {ev.probe_l2, ev.probe_tolerance, ev.probe_max_iter});
      rec["accuracy"] = r.accuracy;
      rec["n_train"] = r.n_train;
      rec["n_test"] = r.n_test;
    } else {
      auto pick = [](const std::vector<int64_t>& v, const std::vector<int64_t>& idx) {
        std::vector<int64_t> o;
        for (auto i : idx) o.push_back(v[static_cast<size_t>(i)]);
        return o;
      };
      const auto q = features.index_select(0, torch::tensor(split.test, torch::kInt64));
      const auto g = features.index_select(0, torch::tensor(split.train, torch::kInt64));
      const auto r = retrieve(q, g, pick(labels, split.test), pick(labels, split.train));
      json recall;
      for (const auto& [k, v] : r.recall_at) recall["R@" + std::to_string(k)] = v;
      rec["recall"] = recall;
    }
  } else if (a.task == "heatmap") {
    const auto source = parse_feature_source(a.source);
    if (source != FeatureSource::q_v && source != FeatureSource::q_v_s &&
        source != FeatureSource::q_v_d)
      throw InvalidInput("evalkit", "heatmap needs a code source (q_v, q_v^s, q_v^d)");
    const auto codes = extract_features(ck.model, data, source, aug, ev.top_fraction,
                                        ev.batch_size);
    const auto labels = labels_for(data, label_kind);
    const int64_t n_classes = *std::max_element(labels.begin(), labels.end()) + 1;
    const auto heat = code_similarity_heatmap(codes, labels, n_classes);
    npy::save(out / "heatmap.npy", heat);
    rec["source"] = to_string(source);
    rec["label"] = to_string(label_kind);
    rec["matrix"] = "heatmap.npy";
  } else if (a.task == "attention") {
    std::vector<int64_t> idx;
    for (int64_t i = 0; i < std::min<int64_t>(a.limit, data.size()); ++i) idx.push_back(i);
    const auto records = export_attention_overlays(ck.model, data.subset(idx), aug,
                                                   out / "attention");
    json list = json::array();
    for (const auto& r : records)
      list.push_back({{"id", r.id},
                      {"static_concept", r.static_concept},
                      {"dynamic_concept", r.dynamic_concept}});
    rec["clips"] = list;
  } else {
    throw InvalidInput("cli", "unknown task '" + a.task + "'");
  }
  write_json(out / (a.task + ".json"), rec);
  std::cout << rec.dump() << "\n";
  return kExitOk;
}

// Codes and attention weights for every clip, rows in dataset order.
int do_export(const ExportArgs& a) {
  auto ck = load_checkpoint(resolve(a.checkpoint));
  const auto data = dataset_for(ck.config, a.data);
  const auto out = resolve(a.out);
  fs::create_directories(out);
  torch::NoGradGuard no_grad;
  ck.model->eval();
  std::vector<torch::Tensor> codes, weights;
  const int64_t bs = ck.config.evalkit.batch_size;
  for (int64_t start = 0; start < data.size(); start += bs) {
    std::vector<int64_t> idx;
    for (int64_t i = start; i < std::min(data.size(), start + bs); ++i) idx.push_back(i);
    auto clips = data.batch(idx);
    std::vector<torch::Tensor> centered;
    for (int64_t b = 0; b < clips.size(0); ++b)
      centered.push_back(center_crop(VideoClip{clips[b]}, ck.config.videokit.augment).pixels);
    const auto s = ck.model->forward_stream(Source::v, torch::stack(centered));
    codes.push_back(s.codes);
    weights.push_back(s.attention.weight_maps());
  }
  npy::save(out / "codes.npy", torch::cat(codes).to(torch::kFloat32).contiguous());
  npy::save(out / "attention.npy", torch::cat(weights).to(torch::kFloat32).contiguous());
  std::ofstream ids(out / "ids.txt", std::ios::trunc);
  for (const auto& id : data.ids) ids << id << "\n";
  write_json(out / "export.json", json{{"samples", data.size()},
                                       {"k_static", ck.config.conceptspace.k_static},
                                       {"k_dynamic", ck.config.conceptspace.k_dynamic},
                                       {"codes", "codes.npy"},
                                       {"attention", "attention.npy"},
                                       {"ids", "ids.txt"}});
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Static/dynamic concept learning for video"};
  app.name(args.empty() ? "vidconcept" : args.front());
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth-data", "Render the synthetic corpus");
  synth->add_option("--config", sa.config, "Experiment config (JSON)");
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--seed", sa.seed, "Override the corpus seed");

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Pretrain a model");
  trn->add_option("--config", ta.config, "Experiment config (JSON)");
  trn->add_option("--out", ta.out, "Experiment directory")->required();
  trn->add_option("--data", ta.data, "Dataset directory (overrides the config)");
  trn->add_option("--seed", ta.seed, "Override the experiment seed");
  trn->add_flag("--deterministic", ta.deterministic, "Single-threaded deterministic kernels");
  trn->add_flag("--quiet", ta.quiet, "No per-epoch progress on stderr");

  EvalArgs ea;
  auto* evl = app.add_subcommand("eval", "Evaluate a checkpoint");
  evl->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required();
  evl->add_option("--task", ea.task, "Evaluation task")
      ->required()
      ->check(CLI::IsMember({"probe", "retrieval", "heatmap", "attention"}));
  evl->add_option("--source", ea.source, "Feature source: v q_v q_v^s q_v^d F_v F_v^s F_v^d");
  evl->add_option("--out", ea.out, "Output directory")->required();
  evl->add_option("--data", ea.data, "Dataset directory (overrides the config)");
  evl->add_option("--label", ea.label, "static | dynamic | action");
  evl->add_option("--limit", ea.limit, "Clips to visualize for --task attention");

  ExportArgs xa;
  auto* exp = app.add_subcommand("export", "Dump codes and attention weights");
  exp->add_option("--checkpoint", xa.checkpoint, "Checkpoint file")->required();
  exp->add_option("--out", xa.out, "Output directory")->required();
  exp->add_option("--data", xa.data, "Dataset directory (overrides the config)");

  std::vector<std::string> rest(args.size() > 1 ? args.begin() + 1 : args.end(), args.end());
  std::reverse(rest.begin(), rest.end());
  try {
    app.parse(rest);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e);
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (synth->parsed()) return do_synth(sa);
    if (trn->parsed()) return do_train(ta);
    if (evl->parsed()) return do_eval(ea);
    if (exp->parsed()) return do_export(xa);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitModuleError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitModuleError;
  }
  std::cerr << app.help();
  return kExitUsage;
}

}  // namespace vidconcept::cli
