#include "vidconcept/videokit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include <torch/torch.h>

#include "rng.hpp"
#include "vidconcept/error.hpp"
#include "vidconcept/image_io.hpp"
#include "vidconcept/npy.hpp"

namespace vidconcept {
namespace fs = std::filesystem;

namespace {

constexpr const char* kModule = "videokit";
// Seed salt separating the static-frame draw from the crop/flip draws.
constexpr uint64_t kStaticSalt = 0x57a71cULL;

ClipShape shape_of(const torch::Tensor& t) {
  return {t.size(0), t.size(1), t.size(2), t.size(3)};
}

void check_rank4(const torch::Tensor& t, const char* what) {
  if (!t.defined() || t.dim() != 4)
    throw InvalidInput(kModule, std::string(what) + " must be a [T,H,W,Ch] array");
  if (t.numel() == 0) throw InvalidInput(kModule, std::string(what) + " is empty");
}

torch::Tensor on_byte_grid(const torch::Tensor& x) { return x.mul(255.0).round().div(255.0); }

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  const double i = std::floor(h * 6.0);
  const double f = h * 6.0 - i;
  const double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  switch (static_cast<int>(i) % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

// Sprite displacement (dx, dy) in pixels at normalized time u in [0, 1].
// Every trajectory starts at zero displacement.
std::pair<double, double> trajectory(int64_t dynamic_label, int direction, double u,
                                     double travel) {
  const double two_pi = 2.0 * std::numbers::pi;
  switch (dynamic_label) {
    case 0:  // horizontal drift
      return {direction * travel * u, 0.0};
    case 1:  // vertical drift
      return {0.0, direction * travel * u};
    case 2: {  // circular orbit
      const double r = travel / 2.0, a = direction * two_pi * u;
      return {r * std::sin(a), r * (1.0 - std::cos(a))};
    }
    default: {  // diagonal oscillation, two periods
      const double a = direction * (travel / 2.0) * std::sin(2.0 * two_pi * u);
      return {a, a};
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------

VideoClip VideoClip::from_tensor(torch::Tensor pixels, double fps) {
  check_rank4(pixels, "clip");
  if (!pixels.is_floating_point()) pixels = pixels.to(torch::kFloat32);
  if (pixels.min().item<double>() < 0.0 || pixels.max().item<double>() > 1.0)
    throw InvalidInput(kModule, "clip values must lie in [0, 1]");
  return VideoClip{std::move(pixels), fps};
}

ClipShape VideoClip::shape() const { return shape_of(pixels); }
ClipShape DiffClip::shape() const { return shape_of(pixels); }

void AugmentConfig::validate() const {
  if (crop_frames < 0 || crop_height < 0 || crop_width < 0)
    throw InvalidInput(kModule, "crop extents must be >= 0");
  if (crop_frames == 1) throw InvalidInput(kModule, "crop_frames must be >= 2");
}

ClipShape AugmentConfig::output_shape(const ClipShape& in) const {
  validate();
  const ClipShape out{crop_frames ? crop_frames : in[0], crop_height ? crop_height : in[1],
                      crop_width ? crop_width : in[2], in[3]};
  for (int i = 0; i < 3; ++i)
    if (out[i] > in[i])
      throw InvalidInput(kModule, "crop extent exceeds clip extent");
  return out;
}

int64_t static_frame_index(int64_t frames, uint64_t rng_seed) {
  if (frames < 1) throw InvalidInput(kModule, "empty clip");
  std::mt19937_64 gen(rng_seed);
  return std::uniform_int_distribution<int64_t>(0, frames - 1)(gen);
}

AugmentDraw draw_augmentation(const ClipShape& shape, uint64_t rng_seed,
                              const AugmentConfig& aug) {
  const auto out = aug.output_shape(shape);
  std::mt19937_64 gen(rng_seed);
  auto offset = [&](int64_t full, int64_t crop) {
    return std::uniform_int_distribution<int64_t>(0, full - crop)(gen);
  };
  AugmentDraw d;
  d.t0 = offset(shape[0], out[0]);
  d.y0 = offset(shape[1], out[1]);
  d.x0 = offset(shape[2], out[2]);
  d.flip = aug.random_flip && std::bernoulli_distribution(0.5)(gen);
  d.static_index = static_frame_index(out[0], detail::mix_seed(rng_seed, kStaticSalt));
  return d;
}

torch::Tensor apply_augmentation(const torch::Tensor& pixels, const AugmentDraw& draw,
                                 const AugmentConfig& aug) {
  const int64_t n = pixels.dim();
  const ClipShape in{pixels.size(n - 4), pixels.size(n - 3), pixels.size(n - 2),
                     pixels.size(n - 1)};
  const auto out = aug.output_shape(in);
  auto x = pixels.narrow(n - 4, draw.t0, out[0])
               .narrow(n - 3, draw.y0, out[1])
               .narrow(n - 2, draw.x0, out[2]);
  if (draw.flip) x = x.flip({n - 2});
  return x;
}

VideoClip make_static_frame(const VideoClip& clip, uint64_t rng_seed) {
  check_rank4(clip.pixels, "clip");
  const int64_t t = clip.frames();
  const int64_t idx = static_frame_index(t, rng_seed);
  auto frame = clip.pixels.select(0, idx).unsqueeze(0);
  return VideoClip{frame.expand_as(clip.pixels).contiguous(), clip.fps};
}

DiffClip make_frame_difference(const VideoClip& clip) {
  check_rank4(clip.pixels, "clip");
  if (clip.frames() < 2) throw InvalidInput(kModule, "frame difference needs T >= 2");
  return DiffClip{frame_difference_batch(clip.pixels.unsqueeze(0)).squeeze(0)};
}

TripletInput make_triplet(const VideoClip& clip, uint64_t rng_seed,
                          const AugmentConfig& aug) {
  check_rank4(clip.pixels, "clip");
  if (clip.frames() < 2) throw InvalidInput(kModule, "triplet needs T >= 2");
  const auto draw = draw_augmentation(clip.shape(), rng_seed, aug);
  VideoClip v{apply_augmentation(clip.pixels, draw, aug).contiguous(), clip.fps};
  VideoClip s = make_static_frame(v, detail::mix_seed(rng_seed, kStaticSalt));
  DiffClip d = make_frame_difference(v);
  return {std::move(v), std::move(s), std::move(d)};
}

VideoClip center_crop(const VideoClip& clip, const AugmentConfig& aug) {
  check_rank4(clip.pixels, "clip");
  const auto in = clip.shape();
  const auto out = aug.output_shape(in);
  AugmentDraw d;
  d.t0 = (in[0] - out[0]) / 2;
  d.y0 = (in[1] - out[1]) / 2;
  d.x0 = (in[2] - out[2]) / 2;
  return VideoClip{apply_augmentation(clip.pixels, d, aug).contiguous(), clip.fps};
}

torch::Tensor static_frames_batch(const torch::Tensor& clips,
                                  const std::vector<int64_t>& frame_index) {
  const int64_t b = clips.size(0), t = clips.size(1);
  if (static_cast<int64_t>(frame_index.size()) != b)
    throw InvalidInput(kModule, "one static frame index per clip required");
  auto idx = torch::tensor(frame_index, torch::kInt64);
  auto rows = torch::arange(b, torch::kInt64);
  auto picked = clips.index({rows, idx});  // [B, H, W, C]
  return picked.unsqueeze(1).expand({b, t, clips.size(2), clips.size(3), clips.size(4)})
      .contiguous();
}

torch::Tensor frame_difference_batch(const torch::Tensor& clips) {
  const int64_t t = clips.size(1);
  if (t < 2) throw InvalidInput(kModule, "frame difference needs T >= 2");
  auto diff = clips.narrow(1, 1, t - 1) - clips.narrow(1, 0, t - 1);
  return torch::cat({diff, diff.narrow(1, t - 2, 1)}, 1);
}

// ---------------------------------------------------------------------------
// Synthetic corpus

void SynthConfig::validate() const {
  if (n_static_classes < 2 || n_dynamic_classes < 2)
    throw InvalidInput(kModule, "class counts must be >= 2");
  if (n_dynamic_classes > kMaxDynamicClasses)
    throw InvalidInput(kModule, "at most " + std::to_string(kMaxDynamicClasses) +
                                    " dynamic classes are available");
  if (n_samples < 1) throw InvalidInput(kModule, "n_samples must be >= 1");
  if (shape[0] < 2) throw InvalidInput(kModule, "synthetic clips need T >= 2");
  if (shape[3] != 1 && shape[3] != 3)
    throw InvalidInput(kModule, "synthetic clips have 1 or 3 channels");
  if (sprite_fraction <= 0.0 || sprite_fraction >= 0.5)
    throw InvalidInput(kModule, "sprite_fraction must lie in (0, 0.5)");
  if (!(sprite_contrast > 0.0) || sprite_contrast > 0.4)
    throw InvalidInput(kModule, "sprite_contrast must lie in (0, 0.4]");
  const int64_t s = sprite_size();
  const double travel = 0.35 * static_cast<double>(std::min(shape[1], shape[2]));
  if (shape[1] < s || shape[2] < s || shape[1] - s < travel || shape[2] - s < travel)
    throw InvalidInput(kModule, "frame too small for the sprite and its trajectory");
}

int64_t SynthConfig::sprite_size() const {
  const double extent = static_cast<double>(std::min(shape[1], shape[2]));
  return std::max<int64_t>(2, std::llround(sprite_fraction * extent));
}

double max_sprite_offset(const SynthConfig& cfg) {
  return std::ceil(255.0 * (cfg.sprite_contrast + 0.05)) / 255.0;
}

std::vector<SynthParams> draw_synth_params(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 gen(cfg.seed);
  std::uniform_int_distribution<int64_t> static_dist(0, cfg.n_static_classes - 1);
  std::uniform_int_distribution<int64_t> dynamic_dist(0, cfg.n_dynamic_classes - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<SynthParams> out(static_cast<size_t>(cfg.n_samples));
  for (auto& p : out) {
    p.static_label = static_dist(gen);
    p.dynamic_label = dynamic_dist(gen);
    p.background_gain = 0.9 + 0.2 * unit(gen);
    p.texture_phase = 2.0 * std::numbers::pi * unit(gen);
    const double sign = unit(gen) < 0.5 ? -1.0 : 1.0;
    p.sprite_delta = sign * std::round(255.0 * (cfg.sprite_contrast + 0.05 * unit(gen))) / 255.0;
    p.start_x = unit(gen);
    p.start_y = unit(gen);
    p.direction = unit(gen) < 0.5 ? -1 : 1;
  }
  return out;
}

VideoClip render_synth_clip(const SynthParams& p, const SynthConfig& cfg) {
  cfg.validate();
  const auto [T, H, W, C] = cfg.shape;
  if (p.static_label < 0 || p.static_label >= cfg.n_static_classes ||
      p.dynamic_label < 0 || p.dynamic_label >= cfg.n_dynamic_classes)
    throw InvalidInput(kModule, "label outside its class range");

  // Background: class color plus oriented stripes, constant over time. It is
  // squeezed into [m, 1 - m] with m the largest sprite offset, and everything
  // sits on the 8-bit grid, so the additive sprite never clips, storage
  // rounding is exact, and the frame difference carries no trace of the
  // background.
  const double margin = max_sprite_offset(cfg);
  const double hue = static_cast<double>(p.static_label) / cfg.n_static_classes;
  const auto rgb = hsv_to_rgb(hue, 0.5, 0.6);
  const double angle = std::numbers::pi * p.static_label / cfg.n_static_classes;
  const double freq = 2.0 * std::numbers::pi * 3.0 / static_cast<double>(std::min(H, W));
  auto ys = torch::arange(H, torch::kFloat64).unsqueeze(1);
  auto xs = torch::arange(W, torch::kFloat64).unsqueeze(0);
  auto stripes = torch::sin(freq * (xs * std::cos(angle) + ys * std::sin(angle)) +
                            p.texture_phase) * 0.08;
  std::vector<torch::Tensor> planes;
  for (int64_t c = 0; c < C; ++c) {
    const double base = C == 3 ? rgb[static_cast<size_t>(c)]
                               : (rgb[0] + rgb[1] + rgb[2]) / 3.0;
    auto raw = ((base + stripes) * p.background_gain).clamp(0.0, 1.0);
    planes.push_back(on_byte_grid(margin + (1.0 - 2.0 * margin) * raw));
  }
  auto background = torch::stack(planes, -1);  // [H, W, C]
  auto pixels = background.unsqueeze(0).repeat({T, 1, 1, 1});

  // Sprite: a gray square added on top of the background, following the
  // class trajectory.
  const int64_t s = cfg.sprite_size();
  const double travel = 0.35 * static_cast<double>(std::min(H, W));
  double min_dx = 0, max_dx = 0, min_dy = 0, max_dy = 0;
  std::vector<std::pair<double, double>> offsets;
  for (int64_t t = 0; t < T; ++t) {
    const double u = static_cast<double>(t) / static_cast<double>(T - 1);
    offsets.push_back(trajectory(p.dynamic_label, p.direction, u, travel));
    min_dx = std::min(min_dx, offsets.back().first);
    max_dx = std::max(max_dx, offsets.back().first);
    min_dy = std::min(min_dy, offsets.back().second);
    max_dy = std::max(max_dy, offsets.back().second);
  }
  double sx, sy;
  if (cfg.fixed_start) {
    sx = (W - s) / 2.0;
    sy = (H - s) / 2.0;
  } else {
    const double lo_x = -min_dx, hi_x = static_cast<double>(W - s) - max_dx;
    const double lo_y = -min_dy, hi_y = static_cast<double>(H - s) - max_dy;
    sx = lo_x + p.start_x * (hi_x - lo_x);
    sy = lo_y + p.start_y * (hi_y - lo_y);
  }
  for (int64_t t = 0; t < T; ++t) {
    const int64_t x = std::clamp<int64_t>(std::llround(sx + offsets[t].first), 0, W - s);
    const int64_t y = std::clamp<int64_t>(std::llround(sy + offsets[t].second), 0, H - s);
    pixels[t].narrow(0, y, s).narrow(1, x, s).add_(std::round(255.0 * p.sprite_delta) / 255.0);
  }
  return VideoClip{pixels.clamp(0.0, 1.0).to(torch::kFloat32), 25.0};
}

std::vector<SynthSample> generate_synth_dataset(int64_t n_samples,
                                                int64_t n_static_classes,
                                                int64_t n_dynamic_classes,
                                                const ClipShape& shape,
                                                uint64_t rng_seed) {
  SynthConfig cfg;
  cfg.n_samples = n_samples;
  cfg.n_static_classes = n_static_classes;
  cfg.n_dynamic_classes = n_dynamic_classes;
  cfg.shape = shape;
  cfg.seed = rng_seed;
  std::vector<SynthSample> out;
  for (const auto& p : draw_synth_params(cfg))
    out.push_back({render_synth_clip(p, cfg), p.static_label, p.dynamic_label});
  return out;
}

// ---------------------------------------------------------------------------
// ClipDataset

ClipShape ClipDataset::clip_shape() const {
  return {frames.size(1), frames.size(2), frames.size(3), frames.size(4)};
}

VideoClip ClipDataset::clip(int64_t i) const {
  if (i < 0 || i >= size()) throw InvalidInput(kModule, "sample index out of range");
  return VideoClip{frames[i].to(torch::kFloat32).div_(255.0), 25.0};
}

torch::Tensor ClipDataset::batch(const std::vector<int64_t>& indices) const {
  auto idx = torch::tensor(indices, torch::kInt64);
  return frames.index_select(0, idx).to(torch::kFloat32).div_(255.0);
}

std::vector<int64_t> ClipDataset::joint_labels() const {
  std::vector<int64_t> out(static_labels.size());
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = static_labels[i] < 0 || dynamic_labels[i] < 0
                 ? -1
                 : static_labels[i] * n_dynamic_classes + dynamic_labels[i];
  return out;
}

ClipDataset ClipDataset::subset(const std::vector<int64_t>& indices) const {
  ClipDataset out;
  out.frames = frames.index_select(0, torch::tensor(indices, torch::kInt64));
  out.n_static_classes = n_static_classes;
  out.n_dynamic_classes = n_dynamic_classes;
  for (auto i : indices) {
    out.ids.push_back(ids.at(static_cast<size_t>(i)));
    out.static_labels.push_back(static_labels.at(static_cast<size_t>(i)));
    out.dynamic_labels.push_back(dynamic_labels.at(static_cast<size_t>(i)));
  }
  return out;
}

namespace {

torch::Tensor quantize(const torch::Tensor& pixels) {
  return pixels.mul(255.0).round_().clamp_(0, 255).to(torch::kUInt8);
}

std::string sample_id(int64_t i) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << i;
  return os.str();
}

}  // namespace

ClipDataset make_synth_dataset(const SynthConfig& cfg) {
  const auto params = draw_synth_params(cfg);
  const auto [T, H, W, C] = cfg.shape;
  ClipDataset data;
  data.frames = torch::empty({cfg.n_samples, T, H, W, C}, torch::kUInt8);
  data.n_static_classes = cfg.n_static_classes;
  data.n_dynamic_classes = cfg.n_dynamic_classes;
  for (int64_t i = 0; i < cfg.n_samples; ++i) {
    const auto& p = params[static_cast<size_t>(i)];
    data.frames[i].copy_(quantize(render_synth_clip(p, cfg).pixels));
    data.ids.push_back(sample_id(i));
    data.static_labels.push_back(p.static_label);
    data.dynamic_labels.push_back(p.dynamic_label);
  }
  return data;
}

ClipDataset to_dataset(const std::vector<SynthSample>& samples) {
  if (samples.empty()) throw InvalidInput(kModule, "no samples");
  ClipDataset data;
  std::vector<torch::Tensor> frames;
  for (size_t i = 0; i < samples.size(); ++i) {
    frames.push_back(quantize(samples[i].clip.pixels));
    data.ids.push_back(sample_id(static_cast<int64_t>(i)));
    data.static_labels.push_back(samples[i].static_label);
    data.dynamic_labels.push_back(samples[i].dynamic_label);
    data.n_static_classes = std::max(data.n_static_classes, samples[i].static_label + 1);
    data.n_dynamic_classes = std::max(data.n_dynamic_classes, samples[i].dynamic_label + 1);
  }
  data.frames = torch::stack(frames);
  return data;
}

void save_dataset(const ClipDataset& data, const fs::path& dir) {
  fs::create_directories(dir / "clips");
  std::ofstream manifest(dir / "manifest.tsv");
  if (!manifest) throw IoError(kModule, "cannot write manifest in " + dir.string());
  manifest << "#classes\t" << data.n_static_classes << "\t" << data.n_dynamic_classes
           << "\n#sample_id\tstatic_label\tdynamic_label\tpath\n";
  for (int64_t i = 0; i < data.size(); ++i) {
    const auto& id = data.ids[static_cast<size_t>(i)];
    const auto rel = fs::path("clips") / (id + ".npy");
    npy::save(dir / rel, data.frames[i]);
    manifest << id << "\t" << data.static_labels[static_cast<size_t>(i)] << "\t"
             << data.dynamic_labels[static_cast<size_t>(i)] << "\t" << rel.string()
             << "\n";
  }
}

ClipDataset load_dataset(const fs::path& dir) {
  std::ifstream manifest(dir / "manifest.tsv");
  if (!manifest) throw IoError(kModule, "no manifest.tsv in " + dir.string());
  ClipDataset data;
  std::vector<torch::Tensor> frames;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    if (line.rfind("#classes", 0) == 0) {
      std::string tag;
      row >> tag >> data.n_static_classes >> data.n_dynamic_classes;
      continue;
    }
    if (line[0] == '#') continue;
    std::string id, rel;
    int64_t s = -1, d = -1;
    if (!(row >> id >> s >> d >> rel))
      throw IoError(kModule, "malformed manifest line: " + line);
    auto clip = npy::load(dir / rel);
    if (clip.dim() != 4) throw IoError(kModule, rel + " is not a [T,H,W,Ch] array");
    if (clip.scalar_type() != torch::kUInt8)
      clip = quantize(clip.to(torch::kFloat32));
    if (!frames.empty() && clip.sizes() != frames.front().sizes())
      throw InvalidInput(kModule, "clip " + id + " has a different shape");
    frames.push_back(clip);
    data.ids.push_back(id);
    data.static_labels.push_back(s);
    data.dynamic_labels.push_back(d);
    data.n_static_classes = std::max(data.n_static_classes, s + 1);
    data.n_dynamic_classes = std::max(data.n_dynamic_classes, d + 1);
  }
  if (frames.empty()) throw IoError(kModule, "empty manifest in " + dir.string());
  data.frames = torch::stack(frames);
  return data;
}

VideoClip load_frame_folder(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".png" || ext == ".ppm" || ext == ".pgm"))
      files.push_back(e.path());
  }
  if (files.empty()) throw InvalidInput(kModule, "no frames in " + dir.string());
  std::sort(files.begin(), files.end());
  std::vector<torch::Tensor> frames;
  for (const auto& f : files) {
    frames.push_back(image::read_image(f));
    if (frames.back().sizes() != frames.front().sizes())
      throw InvalidInput(kModule, "frame size changes within " + dir.string());
  }
  return VideoClip{torch::stack(frames).to(torch::kFloat32).div_(255.0), 25.0};
}

ClipDataset ingest_frame_folders(const fs::path& root) {
  std::map<std::string, std::pair<int64_t, int64_t>> labels;
  if (std::ifstream lf(root / "labels.tsv"); lf) {
    std::string name;
    int64_t s, d;
    while (lf >> name >> s >> d) labels[name] = {s, d};
  }
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw InvalidInput(kModule, "no clip folders in " + root.string());

  ClipDataset data;
  std::vector<torch::Tensor> frames;
  for (const auto& d : dirs) {
    frames.push_back(quantize(load_frame_folder(d).pixels));
    if (frames.back().sizes() != frames.front().sizes())
      throw InvalidInput(kModule, "clip " + d.filename().string() + " has a different shape");
    const auto name = d.filename().string();
    const auto it = labels.find(name);
    const auto [s, dl] = it == labels.end() ? std::pair<int64_t, int64_t>{-1, -1} : it->second;
    data.ids.push_back(name);
    data.static_labels.push_back(s);
    data.dynamic_labels.push_back(dl);
    data.n_static_classes = std::max(data.n_static_classes, s + 1);
    data.n_dynamic_classes = std::max(data.n_dynamic_classes, dl + 1);
  }
  data.frames = torch::stack(frames);
  return data;
}

}  // namespace vidconcept
