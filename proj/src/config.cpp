#include "vidconcept/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "vidconcept/error.hpp"

namespace vidconcept {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Keys whose defaults come from the method description; all others are
// choices made for this implementation.
const std::set<std::string>& method_keys() {
  static const std::set<std::string> keys{
      "conceptspace.K_s",      "conceptspace.K_d",   "localcontrast.K_top",
      "trainer.alpha",         "trainer.beta",       "trainer.gamma",
      "trainer.warmup_epochs", "trainer.lr",         "trainer.weight_decay",
      "evalkit.top_fraction",  "encoder.projection", "encoder.shared_backbone"};
  return keys;
}

// Reads members of one JSON object, remembering which keys were consumed so
// leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& doc, std::string prefix) : prefix_(std::move(prefix)) {
    if (doc.is_null()) return;
    if (!doc.is_object()) throw ConfigError(prefix_, "expected an object");
    doc_ = &doc;
  }

  template <typename T>
  void read(const std::string& key, T& dst) {
    seen_.insert(key);
    if (!doc_ || !doc_->contains(key)) return;
    try {
      dst = doc_->at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(path(key), std::string("wrong type (") + e.what() + ")");
    }
  }

  json child(const std::string& key) {
    seen_.insert(key);
    if (!doc_ || !doc_->contains(key)) return json();
    return doc_->at(key);
  }

  void ignore(const std::string& key) { seen_.insert(key); }

  void finish() const {
    if (!doc_) return;
    for (const auto& [key, _] : doc_->items())
      if (!seen_.count(key)) throw ConfigError(path(key), "unknown key");
  }

  std::string path(const std::string& key) const {
    return prefix_.empty() ? key : prefix_ + "." + key;
  }

 private:
  const json* doc_ = nullptr;
  std::string prefix_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError(key, what);
}

void collect_keys(const json& node, const std::string& prefix, std::vector<std::string>& out) {
  for (const auto& [key, value] : node.items()) {
    const auto path = prefix.empty() ? key : prefix + "." + key;
    if (value.is_object()) collect_keys(value, path, out);
    else out.push_back(path);
  }
}

}  // namespace

void EvalConfig::validate() const {
  require(train_fraction > 0.0 && train_fraction < 1.0, "evalkit.train_fraction",
          "must lie in (0, 1)");
  require(top_fraction > 0.0 && top_fraction <= 1.0, "evalkit.top_fraction",
          "must lie in (0, 1]");
  require(probe_l2 >= 0.0, "evalkit.probe_l2", "must be >= 0");
  require(probe_tolerance > 0.0, "evalkit.probe_tolerance", "must be > 0");
  require(probe_max_iter >= 1, "evalkit.probe_max_iter", "must be >= 1");
  require(batch_size >= 1, "evalkit.batch_size", "must be >= 1");
  require(label == "static" || label == "dynamic" || label == "action", "evalkit.label",
          "must be static, dynamic or action");
}

void ExperimentConfig::validate() const {
  require(!name.empty(), "name", "must not be empty");

  const auto& e = encoder;
  require(!e.widths.empty(), "encoder.widths", "at least one stage required");
  for (auto w : e.widths) require(w >= 1, "encoder.widths", "widths must be positive");
  require(e.temporal_strides.size() == e.widths.size(), "encoder.temporal_strides",
          "one stride per stage required");
  require(e.spatial_strides.size() == e.widths.size(), "encoder.spatial_strides",
          "one stride per stage required");
  for (auto s : e.temporal_strides)
    require(s >= 1, "encoder.temporal_strides", "strides must be positive");
  for (auto s : e.spatial_strides)
    require(s >= 1, "encoder.spatial_strides", "strides must be positive");
  require(e.out_channels() >= 8, "encoder.widths", "output channels C must be >= 8");
  require(e.in_channels >= 1, "encoder.in_channels", "must be positive");
  require(!e.variant.empty(), "encoder.variant", "must not be empty");
  require(e.norm == "none" || e.norm == "batch", "encoder.norm", "must be none or batch");
  require(e.projection == "identity" || e.projection == "mlp", "encoder.projection",
          "must be identity or mlp");

  const auto& c = conceptspace;
  require(c.k_static >= 2, "conceptspace.K_s", "must be >= 2");
  require(c.k_dynamic >= 2, "conceptspace.K_d", "must be >= 2");
  require(c.align.tau > 0.0, "conceptspace.tau", "must be > 0");
  require(c.align.sinkhorn_iters >= 1, "conceptspace.sinkhorn_iters", "must be >= 1");
  require(c.align.sinkhorn_eps > 0.0, "conceptspace.sinkhorn_eps", "must be > 0");
  require(c.k_static + c.k_dynamic < e.out_channels(), "conceptspace.K_s",
          "K_s + K_d must be below the encoder channel count (code bottleneck)");

  require(bottleneck.hidden >= 0, "bottleneck.hidden", "must be >= 0");

  require(localcontrast.k_top >= 1 &&
              localcontrast.k_top <= std::min(c.k_static, c.k_dynamic),
          "localcontrast.K_top", "must lie in [1, min(K_s, K_d)]");
  require(localcontrast.lambda > 0.0, "localcontrast.lambda", "must be > 0");

  const auto& w = trainer.weights;
  require(w.alpha >= 0.0, "trainer.alpha", "must be >= 0");
  require(w.beta >= 0.0, "trainer.beta", "must be >= 0");
  require(w.gamma >= 0.0, "trainer.gamma", "must be >= 0");
  require(w.warmup_epochs >= 0, "trainer.warmup_epochs", "must be >= 0");
  const auto& o = trainer.optim;
  require(o.lr >= 0.0 && std::isfinite(o.lr), "trainer.lr", "must be finite and >= 0");
  require(o.weight_decay >= 0.0, "trainer.weight_decay", "must be >= 0");
  require(o.momentum >= 0.0 && o.momentum < 1.0, "trainer.momentum", "must lie in [0, 1)");
  require(o.epochs >= 1, "trainer.epochs", "must be >= 1");
  require(o.batch_size >= 1, "trainer.batch_size", "must be >= 1");
  require(trainer.checkpoint_every >= 0, "trainer.checkpoint_every", "must be >= 0");

  try {
    videokit.augment.validate();
  } catch (const Error& err) {
    throw ConfigError("videokit.augment", err.what());
  }
  if (videokit.data_dir.empty()) {
    try {
      videokit.synth.validate();
    } catch (const Error& err) {
      throw ConfigError("videokit.synth", err.what());
    }
    ClipShape input;
    try {
      input = videokit.augment.output_shape(videokit.synth.shape);
    } catch (const Error& err) {
      throw ConfigError("videokit.augment", err.what());
    }
    try {
      e.feature_extent(input);
    } catch (const Error& err) {
      throw ConfigError("encoder.spatial_strides", err.what());
    }
  }
  evalkit.validate();
}

json to_json(const ExperimentConfig& cfg) {
  const auto& v = cfg.videokit;
  const auto& e = cfg.encoder;
  const auto& c = cfg.conceptspace;
  const auto& t = cfg.trainer;
  const auto& ev = cfg.evalkit;
  return json{
      {"name", cfg.name},
      {"seed", cfg.seed},
      {"videokit",
       {{"data_dir", v.data_dir},
        {"augment",
         {{"crop_frames", v.augment.crop_frames},
          {"crop_height", v.augment.crop_height},
          {"crop_width", v.augment.crop_width},
          {"random_flip", v.augment.random_flip}}},
        {"synth",
         {{"n_samples", v.synth.n_samples},
          {"n_static_classes", v.synth.n_static_classes},
          {"n_dynamic_classes", v.synth.n_dynamic_classes},
          {"shape", v.synth.shape},
          {"sprite_fraction", v.synth.sprite_fraction},
          {"sprite_contrast", v.synth.sprite_contrast},
          {"fixed_start", v.synth.fixed_start},
          {"seed", v.synth.seed}}}}},
      {"encoder",
       {{"widths", e.widths},
        {"temporal_strides", e.temporal_strides},
        {"spatial_strides", e.spatial_strides},
        {"in_channels", e.in_channels},
        {"variant", e.variant},
        {"shared_backbone", e.shared_backbone},
        {"projection", e.projection},
        {"norm", e.norm},
        {"final_relu", e.final_relu}}},
      {"conceptspace",
       {{"K_s", c.k_static},
        {"K_d", c.k_dynamic},
        {"tau", c.align.tau},
        {"sinkhorn_iters", c.align.sinkhorn_iters},
        {"sinkhorn_eps", c.align.sinkhorn_eps}}},
      {"bottleneck", {{"hidden", cfg.bottleneck.hidden}}},
      {"localcontrast", {{"K_top", cfg.localcontrast.k_top}, {"lambda", cfg.localcontrast.lambda}}},
      {"trainer",
       {{"alpha", t.weights.alpha},
        {"beta", t.weights.beta},
        {"gamma", t.weights.gamma},
        {"warmup_epochs", t.weights.warmup_epochs},
        {"lr", t.optim.lr},
        {"weight_decay", t.optim.weight_decay},
        {"momentum", t.optim.momentum},
        {"epochs", t.optim.epochs},
        {"batch_size", t.optim.batch_size},
        {"grad_clip", t.optim.grad_clip},
        {"checkpoint_every", t.checkpoint_every}}},
      {"evalkit",
       {{"train_fraction", ev.train_fraction},
        {"split_seed", ev.split_seed},
        {"top_fraction", ev.top_fraction},
        {"probe_l2", ev.probe_l2},
        {"probe_tolerance", ev.probe_tolerance},
        {"probe_max_iter", ev.probe_max_iter},
        {"batch_size", ev.batch_size},
        {"label", ev.label}}}};
}

ExperimentConfig config_from_json(const json& doc) {
  ExperimentConfig cfg;
  Section top(doc, "");
  top.read("name", cfg.name);
  top.read("seed", cfg.seed);
  top.ignore("provenance");

  {
    auto& v = cfg.videokit;
    const auto node = top.child("videokit");
    Section s(node, "videokit");
    s.read("data_dir", v.data_dir);
    const auto aug_node = s.child("augment");
    Section a(aug_node, "videokit.augment");
    a.read("crop_frames", v.augment.crop_frames);
    a.read("crop_height", v.augment.crop_height);
    a.read("crop_width", v.augment.crop_width);
    a.read("random_flip", v.augment.random_flip);
    a.finish();
    const auto synth_node = s.child("synth");
    Section y(synth_node, "videokit.synth");
    y.read("n_samples", v.synth.n_samples);
    y.read("n_static_classes", v.synth.n_static_classes);
    y.read("n_dynamic_classes", v.synth.n_dynamic_classes);
    y.read("shape", v.synth.shape);
    y.read("sprite_fraction", v.synth.sprite_fraction);
    y.read("sprite_contrast", v.synth.sprite_contrast);
    y.read("fixed_start", v.synth.fixed_start);
    y.read("seed", v.synth.seed);
    y.finish();
    s.finish();
  }
  {
    auto& e = cfg.encoder;
    const auto node = top.child("encoder");
    Section s(node, "encoder");
    s.read("widths", e.widths);
    s.read("temporal_strides", e.temporal_strides);
    s.read("spatial_strides", e.spatial_strides);
    s.read("in_channels", e.in_channels);
    s.read("variant", e.variant);
    s.read("shared_backbone", e.shared_backbone);
    s.read("projection", e.projection);
    s.read("norm", e.norm);
    s.read("final_relu", e.final_relu);
    s.finish();
  }
  {
    auto& c = cfg.conceptspace;
    const auto node = top.child("conceptspace");
    Section s(node, "conceptspace");
    s.read("K_s", c.k_static);
    s.read("K_d", c.k_dynamic);
    s.read("tau", c.align.tau);
    s.read("sinkhorn_iters", c.align.sinkhorn_iters);
    s.read("sinkhorn_eps", c.align.sinkhorn_eps);
    s.finish();
  }
  {
    const auto node = top.child("bottleneck");
    Section s(node, "bottleneck");
    s.read("hidden", cfg.bottleneck.hidden);
    s.finish();
  }
  {
    const auto node = top.child("localcontrast");
    Section s(node, "localcontrast");
    s.read("K_top", cfg.localcontrast.k_top);
    s.read("lambda", cfg.localcontrast.lambda);
    s.finish();
  }
  {
    auto& t = cfg.trainer;
    const auto node = top.child("trainer");
    Section s(node, "trainer");
    s.read("alpha", t.weights.alpha);
    s.read("beta", t.weights.beta);
    s.read("gamma", t.weights.gamma);
    s.read("warmup_epochs", t.weights.warmup_epochs);
    s.read("lr", t.optim.lr);
    s.read("weight_decay", t.optim.weight_decay);
    s.read("momentum", t.optim.momentum);
    s.read("epochs", t.optim.epochs);
    s.read("batch_size", t.optim.batch_size);
    s.read("grad_clip", t.optim.grad_clip);
    s.read("checkpoint_every", t.checkpoint_every);
    s.finish();
  }
  {
    auto& ev = cfg.evalkit;
    const auto node = top.child("evalkit");
    Section s(node, "evalkit");
    s.read("train_fraction", ev.train_fraction);
    s.read("split_seed", ev.split_seed);
    s.read("top_fraction", ev.top_fraction);
    s.read("probe_l2", ev.probe_l2);
    s.read("probe_tolerance", ev.probe_tolerance);
    s.read("probe_max_iter", ev.probe_max_iter);
    s.read("batch_size", ev.batch_size);
    s.read("label", ev.label);
    s.finish();
  }
  top.finish();
  cfg.trainer.optim.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const auto text = buf.str();
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return config_from_json(json::object());
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("", "cannot parse " + path.string() + ": " + e.what());
  }
  return config_from_json(doc);
}

std::string echo_config(const ExperimentConfig& cfg) {
  auto doc = to_json(cfg);
  std::vector<std::string> keys;
  collect_keys(doc, "", keys);
  json provenance = json::object();
  for (const auto& k : keys)
    if (k != "name" && k != "seed")
      provenance[k] = method_keys().count(k) ? "method" : "plumbing";
  doc["provenance"] = provenance;
  return doc.dump(2) + "\n";
}

fs::path write_config_echo(const ExperimentConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  const auto path = dir / "config.resolved.json";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("config", "cannot write " + path.string());
  out << echo_config(cfg);
  return path;
}

}  // namespace vidconcept
