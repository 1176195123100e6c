#include "vidconcept/evalkit.hpp"

#include <algorithm>
#include <iomanip>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <torch/torch.h>

#include "rng.hpp"
#include "vidconcept/error.hpp"
#include "vidconcept/image_io.hpp"
#include "vidconcept/npy.hpp"

namespace vidconcept {
namespace fs = std::filesystem;

namespace {
constexpr const char* kModule = "evalkit";

std::string canonical_tag(std::string tag) {
  std::replace(tag.begin(), tag.end(), '^', '_');
  return tag;
}

// Center crop of a float batch [B, T, H, W, Ch].
torch::Tensor center_batch(const torch::Tensor& clips, const AugmentConfig& aug) {
  const ClipShape in{clips.size(1), clips.size(2), clips.size(3), clips.size(4)};
  const auto out = aug.output_shape(in);
  AugmentDraw d;
  d.t0 = (in[0] - out[0]) / 2;
  d.y0 = (in[1] - out[1]) / 2;
  d.x0 = (in[2] - out[2]) / 2;
  return apply_augmentation(clips, d, aug).contiguous();
}

// Mean of the local features of the top concepts ranked by `codes`.
torch::Tensor top_local_mean(const torch::Tensor& local, const torch::Tensor& codes,
                             int64_t n) {
  std::vector<torch::Tensor> rows;
  rows.reserve(static_cast<size_t>(local.size(0)));
  for (int64_t b = 0; b < local.size(0); ++b) {
    const auto idx = top_k_indices(codes[b], n);
    const auto sel = torch::tensor(idx, torch::kInt64);
    rows.push_back(local[b].index_select(0, sel).mean(0));
  }
  return torch::stack(rows);
}

}  // namespace

std::string to_string(FeatureSource source) {
  switch (source) {
    case FeatureSource::v: return "v";
    case FeatureSource::q_v: return "q_v";
    case FeatureSource::q_v_s: return "q_v^s";
    case FeatureSource::q_v_d: return "q_v^d";
    case FeatureSource::F_v: return "F_v";
    case FeatureSource::F_v_s: return "F_v^s";
    case FeatureSource::F_v_d: return "F_v^d";
  }
  return "?";
}

FeatureSource parse_feature_source(const std::string& tag) {
  const auto t = canonical_tag(tag);
  if (t == "v") return FeatureSource::v;
  if (t == "q_v") return FeatureSource::q_v;
  if (t == "q_v_s") return FeatureSource::q_v_s;
  if (t == "q_v_d") return FeatureSource::q_v_d;
  if (t == "F_v") return FeatureSource::F_v;
  if (t == "F_v_s") return FeatureSource::F_v_s;
  if (t == "F_v_d") return FeatureSource::F_v_d;
  throw InvalidInput(kModule, "unknown feature source '" + tag + "'");
}

std::string to_string(LabelKind kind) {
  switch (kind) {
    case LabelKind::static_label: return "static";
    case LabelKind::dynamic_label: return "dynamic";
    case LabelKind::action: return "action";
  }
  return "?";
}

LabelKind parse_label_kind(const std::string& tag) {
  if (tag == "static") return LabelKind::static_label;
  if (tag == "dynamic") return LabelKind::dynamic_label;
  if (tag == "action" || tag == "joint") return LabelKind::action;
  throw InvalidInput(kModule, "unknown label kind '" + tag + "'");
}

std::vector<int64_t> labels_for(const ClipDataset& data, LabelKind kind) {
  std::vector<int64_t> out;
  switch (kind) {
    case LabelKind::static_label: out = data.static_labels; break;
    case LabelKind::dynamic_label: out = data.dynamic_labels; break;
    case LabelKind::action: out = data.joint_labels(); break;
  }
  for (auto l : out)
    if (l < 0) throw InvalidInput(kModule, "dataset lacks " + to_string(kind) + " labels");
  return out;
}

int64_t top_count(int64_t k, double fraction) {
  if (k < 1) throw InvalidInput(kModule, "top_count needs k >= 1");
  const auto n = static_cast<int64_t>(std::llround(fraction * static_cast<double>(k)));
  return std::clamp<int64_t>(n, 1, k);
}

std::map<FeatureSource, torch::Tensor> extract_all_features(ConceptModel& model,
                                                            const ClipDataset& data,
                                                            const AugmentConfig& aug,
                                                            double top_fraction,
                                                            int64_t batch_size) {
  if (data.size() == 0) throw InvalidInput(kModule, "empty dataset");
  if (batch_size < 1) throw InvalidInput(kModule, "batch_size must be >= 1");
  torch::NoGradGuard no_grad;
  model->eval();
  const int64_t ks = model->concept_config().k_static;
  const int64_t kd = model->concept_config().k_dynamic;
  const int64_t n_all = top_count(ks + kd, top_fraction);
  const int64_t n_s = top_count(ks, top_fraction);
  const int64_t n_d = top_count(kd, top_fraction);

  std::map<FeatureSource, std::vector<torch::Tensor>> parts;
  for (int64_t start = 0; start < data.size(); start += batch_size) {
    const int64_t end = std::min(data.size(), start + batch_size);
    std::vector<int64_t> idx(static_cast<size_t>(end - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto clips = center_batch(data.batch(idx), aug);
    const auto out = model->forward_stream(Source::v, clips);
    const auto q = out.codes;
    const auto local = out.attention.features;
    const auto q_s = q.narrow(1, 0, ks), q_d = q.narrow(1, ks, kd);
    parts[FeatureSource::v].push_back(out.encoding.vector);
    parts[FeatureSource::q_v].push_back(q);
    parts[FeatureSource::q_v_s].push_back(q_s);
    parts[FeatureSource::q_v_d].push_back(q_d);
    parts[FeatureSource::F_v].push_back(top_local_mean(local, q, n_all));
    parts[FeatureSource::F_v_s].push_back(top_local_mean(local.narrow(1, 0, ks), q_s, n_s));
    parts[FeatureSource::F_v_d].push_back(top_local_mean(local.narrow(1, ks, kd), q_d, n_d));
  }
  std::map<FeatureSource, torch::Tensor> out;
  for (auto& [src, list] : parts) out[src] = torch::cat(list).contiguous();
  return out;
}

torch::Tensor extract_features(ConceptModel& model, const ClipDataset& data,
                               FeatureSource source, const AugmentConfig& aug,
                               double top_fraction, int64_t batch_size) {
  return extract_all_features(model, data, aug, top_fraction, batch_size).at(source);
}

// ---------------------------------------------------------------------------

Split stratified_split(const std::vector<int64_t>& labels, double train_fraction,
                       uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw InvalidInput(kModule, "train_fraction must lie in (0, 1)");
  std::map<int64_t, std::vector<int64_t>> by_class;
  for (size_t i = 0; i < labels.size(); ++i)
    by_class[labels[i]].push_back(static_cast<int64_t>(i));
  Split split;
  for (auto& [label, members] : by_class) {
    std::mt19937_64 gen(detail::mix_seed(seed, static_cast<uint64_t>(label)));
    std::shuffle(members.begin(), members.end(), gen);
    auto n_train = static_cast<size_t>(
        std::llround(train_fraction * static_cast<double>(members.size())));
    n_train = std::clamp<size_t>(n_train, 1, members.size());
    split.train.insert(split.train.end(), members.begin(),
                       members.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.test.insert(split.test.end(),
                      members.begin() + static_cast<std::ptrdiff_t>(n_train), members.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

torch::Tensor LinearClassifier::decision(const torch::Tensor& features) const {
  const auto x = (features.to(torch::kFloat64) - mean) / scale;
  return torch::addmm(bias, x, weight.t());
}

std::vector<int64_t> LinearClassifier::predict(const torch::Tensor& features) const {
  const auto cols = decision(features).argmax(1);
  std::vector<int64_t> out(static_cast<size_t>(cols.size(0)));
  const auto acc = cols.accessor<int64_t, 1>();
  for (int64_t i = 0; i < cols.size(0); ++i) out[i] = classes[acc[i]];
  return out;
}

// Mean cross-entropy plus 0.5 * l2 * ||W||^2, minimized with L-BFGS in
// double precision until the gradient max-norm drops below the tolerance.
LinearClassifier fit_linear_classifier(const torch::Tensor& features,
                                       const std::vector<int64_t>& labels,
                                       const ProbeConfig& cfg) {
  if (features.dim() != 2 || features.size(0) != static_cast<int64_t>(labels.size()))
    throw InvalidInput(kModule, "features must be [N, D] with one label per row");
  const std::set<int64_t> distinct(labels.begin(), labels.end());
  if (distinct.size() < 2) throw InvalidSplit(kModule, "need at least two classes to fit");

  LinearClassifier clf;
  clf.classes.assign(distinct.begin(), distinct.end());
  std::map<int64_t, int64_t> column;
  for (size_t c = 0; c < clf.classes.size(); ++c) column[clf.classes[c]] = static_cast<int64_t>(c);
  std::vector<int64_t> target(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) target[i] = column[labels[i]];
  const auto y = torch::tensor(target, torch::kInt64);

  torch::NoGradGuard outer;
  const auto x64 = features.to(torch::kFloat64);
  clf.mean = x64.mean(0);
  clf.scale = x64.std(0, /*unbiased=*/false);
  clf.scale = torch::where(clf.scale > 1e-12, clf.scale, torch::ones_like(clf.scale));
  const auto x = (x64 - clf.mean) / clf.scale;

  const int64_t n_cls = static_cast<int64_t>(clf.classes.size());
  auto w = torch::zeros({n_cls, x.size(1)}, torch::kFloat64).requires_grad_(true);
  auto b = torch::zeros({n_cls}, torch::kFloat64).requires_grad_(true);
  torch::optim::LBFGS opt({w, b}, torch::optim::LBFGSOptions(1.0)
                                      .max_iter(cfg.max_iter)
                                      .tolerance_grad(cfg.tolerance)
                                      .tolerance_change(1e-12)
                                      .history_size(20)
                                      .line_search_fn("strong_wolfe"));
  auto closure = [&] {
    torch::AutoGradMode grad(true);
    opt.zero_grad();
    auto loss = torch::nn::functional::cross_entropy(torch::addmm(b, x, w.t()), y) +
                0.5 * cfg.l2 * w.pow(2).sum();
    loss.backward();
    return loss;
  };
  {
    torch::AutoGradMode grad(true);
    opt.step(closure);
  }
  clf.weight = w.detach().clone();
  clf.bias = b.detach().clone();
  return clf;
}

ProbeResult linear_probe(const torch::Tensor& features, const std::vector<int64_t>& labels,
                         const Split& split, const ProbeConfig& cfg) {
  if (split.train.empty() || split.test.empty())
    throw InvalidSplit(kModule, "train and test sides must be non-empty");
  std::vector<int64_t> train_labels, test_labels;
  for (auto i : split.train) train_labels.push_back(labels.at(static_cast<size_t>(i)));
  for (auto i : split.test) test_labels.push_back(labels.at(static_cast<size_t>(i)));
  const std::set<int64_t> seen(train_labels.begin(), train_labels.end());
  if (seen.size() < 2) throw InvalidSplit(kModule, "fewer than two classes in the train split");
  for (auto l : test_labels)
    if (!seen.count(l))
      throw InvalidSplit(kModule, "class " + std::to_string(l) + " absent from the train split");

  const auto train_x = features.index_select(0, torch::tensor(split.train, torch::kInt64));
  const auto test_x = features.index_select(0, torch::tensor(split.test, torch::kInt64));
  const auto clf = fit_linear_classifier(train_x, train_labels, cfg);
  const auto pred = clf.predict(test_x);
  int64_t hits = 0;
  for (size_t i = 0; i < pred.size(); ++i) hits += pred[i] == test_labels[i];

  ProbeResult r;
  r.accuracy = static_cast<double>(hits) / static_cast<double>(pred.size());
  r.n_train = static_cast<int64_t>(split.train.size());
  r.n_test = static_cast<int64_t>(split.test.size());
  return r;
}

// ---------------------------------------------------------------------------

RetrievalResult retrieve(const torch::Tensor& query, const torch::Tensor& gallery,
                         const std::vector<int64_t>& query_labels,
                         const std::vector<int64_t>& gallery_labels, bool exclude_self) {
  if (query.dim() != 2 || gallery.dim() != 2 || query.size(1) != gallery.size(1))
    throw InvalidInput(kModule, "query and gallery must be [N, D] with equal D");
  if (query.size(0) == 0 || gallery.size(0) == 0)
    throw InvalidInput(kModule, "query and gallery must be non-empty");
  if (query.size(0) != static_cast<int64_t>(query_labels.size()) ||
      gallery.size(0) != static_cast<int64_t>(gallery_labels.size()))
    throw InvalidInput(kModule, "one label per feature row required");

  auto unit = [](const torch::Tensor& t) {
    const auto x = t.to(torch::kFloat64);
    return x / x.norm(2, 1, true).clamp_min(1e-300);
  };
  const auto sim = torch::mm(unit(query), unit(gallery).t()).contiguous();
  const auto acc = sim.accessor<double, 2>();
  const std::vector<int64_t> ks{1, 5, 10, 20};
  std::map<int64_t, int64_t> hits;
  const int64_t ng = gallery.size(0);
  std::vector<int64_t> order(static_cast<size_t>(ng));
  for (int64_t q = 0; q < query.size(0); ++q) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int64_t a, int64_t b) { return acc[q][a] > acc[q][b]; });
    int64_t rank = 0, first = -1;
    for (auto g : order) {
      if (exclude_self && g == q) continue;
      if (gallery_labels[g] == query_labels[q]) {
        first = rank;
        break;
      }
      ++rank;
    }
    for (auto k : ks) hits[k] += (first >= 0 && first < k);
  }
  RetrievalResult r;
  for (auto k : ks)
    r.recall_at[k] = static_cast<double>(hits[k]) / static_cast<double>(query.size(0));
  return r;
}

torch::Tensor code_similarity_heatmap(const torch::Tensor& codes,
                                      const std::vector<int64_t>& labels, int64_t n_classes) {
  if (codes.dim() != 2 || codes.size(0) != static_cast<int64_t>(labels.size()))
    throw InvalidInput(kModule, "codes must be [N, K] with one label per row");
  if (n_classes < 1) throw InvalidInput(kModule, "n_classes must be >= 1");
  const auto x = codes.to(torch::kFloat64);
  std::vector<torch::Tensor> means;
  for (int64_t c = 0; c < n_classes; ++c) {
    std::vector<int64_t> rows;
    for (size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) rows.push_back(static_cast<int64_t>(i));
    if (rows.empty()) throw InvalidInput(kModule, "class " + std::to_string(c) + " is empty");
    const auto m = x.index_select(0, torch::tensor(rows, torch::kInt64)).mean(0);
    const double norm = m.norm().item<double>();
    if (norm <= 0.0)
      throw DegenerateInput(kModule, "class " + std::to_string(c) + " has a zero mean code");
    means.push_back(m / norm);
  }
  auto out = torch::eye(n_classes, torch::kFloat64);
  auto acc = out.accessor<double, 2>();
  for (int64_t i = 0; i < n_classes; ++i)
    for (int64_t j = i + 1; j < n_classes; ++j) {
      const double v = std::clamp(means[i].dot(means[j]).item<double>(), -1.0, 1.0);
      acc[i][j] = acc[j][i] = v;
    }
  return out;
}

// ---------------------------------------------------------------------------

torch::Tensor attention_overlay(const torch::Tensor& weight_map, const ClipShape& frame_shape) {
  if (weight_map.dim() != 3) throw InvalidInput(kModule, "weight map must be [T', H', W']");
  const auto w = weight_map.to(torch::kFloat64);
  const auto flat = w.reshape({w.size(0), -1});
  const auto lo = std::get<0>(flat.min(1)).view({-1, 1, 1});
  const auto hi = std::get<0>(flat.max(1)).view({-1, 1, 1});
  const auto range = hi - lo;
  const auto scaled =
      torch::where(range > 0, (w - lo) / torch::where(range > 0, range, torch::ones_like(range)),
                   torch::ones_like(w));
  const int64_t T = frame_shape[0], H = frame_shape[1], W = frame_shape[2];
  auto nearest = [](int64_t out, int64_t in) {
    std::vector<int64_t> idx(static_cast<size_t>(out));
    for (int64_t i = 0; i < out; ++i) idx[i] = i * in / out;
    return torch::tensor(idx, torch::kInt64);
  };
  return scaled.index_select(0, nearest(T, w.size(0)))
      .index_select(1, nearest(H, w.size(1)))
      .index_select(2, nearest(W, w.size(2)))
      .contiguous();
}

namespace {

// Blends a heat ramp (blue -> red) over the frame, weight 0.5.
torch::Tensor heat_frame(const torch::Tensor& frame, const torch::Tensor& heat) {
  auto rgb = frame.to(torch::kFloat64);
  if (rgb.size(2) == 1) rgb = rgb.expand({-1, -1, 3});
  const auto h = heat.unsqueeze(2);
  const auto color = torch::cat({h, 0.2 * torch::ones_like(h), 1.0 - h}, 2);
  const auto mix = (0.5 * rgb + 0.5 * color).clamp(0.0, 1.0);
  return mix.mul(255.0).round().to(torch::kUInt8).contiguous();
}

void write_overlays(const fs::path& dir, const std::string& prefix, const torch::Tensor& clip,
                    const torch::Tensor& weights) {
  const auto overlay = attention_overlay(
      weights, {clip.size(0), clip.size(1), clip.size(2), clip.size(3)});
  npy::save(dir / (prefix + "_weights.npy"), weights.to(torch::kFloat64).contiguous());
  npy::save(dir / (prefix + "_overlay.npy"), overlay);
  for (int64_t t = 0; t < clip.size(0); ++t) {
    std::ostringstream name;
    name << prefix << "_frame_" << std::setw(3) << std::setfill('0') << t << ".png";
    image::write_png(dir / name.str(), heat_frame(clip[t], overlay[t]));
  }
}

}  // namespace

std::vector<OverlayRecord> export_attention_overlays(ConceptModel& model,
                                                     const ClipDataset& clips,
                                                     const AugmentConfig& aug,
                                                     const fs::path& out_dir) {
  torch::NoGradGuard no_grad;
  model->eval();
  const int64_t ks = model->concept_config().k_static;
  const int64_t kd = model->concept_config().k_dynamic;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError(kModule, "cannot create " + out_dir.string() + ": " + ec.message());

  std::vector<OverlayRecord> records;
  for (int64_t i = 0; i < clips.size(); ++i) {
    const auto clip = center_batch(clips.batch({i}), aug);
    const auto out = model->forward_stream(Source::v, clip);
    const auto q = out.codes[0];
    OverlayRecord rec;
    rec.id = clips.ids[static_cast<size_t>(i)];
    rec.static_concept = top_k_indices(q.narrow(0, 0, ks), 1).front();
    rec.dynamic_concept = ks + top_k_indices(q.narrow(0, ks, kd), 1).front();
    const auto maps = out.attention.weight_maps()[0];
    const auto dir = out_dir / rec.id;
    fs::create_directories(dir, ec);
    if (ec) throw IoError(kModule, "cannot create " + dir.string() + ": " + ec.message());
    write_overlays(dir, "static", clip[0], maps[rec.static_concept]);
    write_overlays(dir, "dynamic", clip[0], maps[rec.dynamic_concept]);
    records.push_back(rec);
  }
  return records;
}

}  // namespace vidconcept
