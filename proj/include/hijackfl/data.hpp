#pragma once

// Desk-scale image tasks.
//
// Two pattern families stand in for natural-image and handwritten-digit
// datasets: "blobs" draws each class as a coloured mixture of Gaussian blobs,
// "strokes" draws each class as a few bright line segments on a dark
// background. Every sample re-renders its class template with jittered
// geometry and amplitude, then adds pixel noise and rounds to integers in
// [0, 255].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hijackfl/binary_io.hpp"
#include "hijackfl/errors.hpp"
#include "hijackfl/rng.hpp"
#include "hijackfl/tensor.hpp"

namespace hijackfl::data {

struct ImageShape {
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;

  std::size_t size() const { return channels * height * width; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

struct LabeledDataset {
  std::string name;
  std::size_t num_classes = 0;
  ImageShape shape;
  std::vector<double> pixels;  // [count x shape.size()], row-major
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return shape.size(); }
  std::span<const double> sample(std::size_t i) const {
    return {pixels.data() + i * dim(), dim()};
  }

  void validate() const {
    if (pixels.size() != labels.size() * dim())
      throw DimensionError("dataset '" + name + "': pixel buffer does not match count x shape");
    for (auto l : labels)
      if (l >= num_classes)
        throw InvalidArgument("dataset '" + name + "': label " + std::to_string(l) +
                              " >= num_classes " + std::to_string(num_classes));
    for (double v : pixels)
      if (!(v >= 0.0 && v <= 255.0))
        throw InvalidArgument("dataset '" + name + "': pixel outside [0,255]");
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> c(num_classes, 0);
    for (auto l : labels) ++c[l];
    return c;
  }

  std::vector<std::size_t> indices_of_class(std::size_t cls) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == cls) out.push_back(i);
    return out;
  }

  /// Stack the given samples into a [k x dim] tensor.
  Tensor batch(std::span<const std::size_t> idx) const {
    Tensor t = Tensor::zeros({idx.size(), dim()});
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto s = sample(idx[r]);
      std::copy(s.begin(), s.end(), t.values.begin() + static_cast<std::ptrdiff_t>(r * dim()));
    }
    return t;
  }

  Tensor all_samples() const { return Tensor({size(), dim()}, pixels); }

  LabeledDataset subset(std::span<const std::size_t> idx) const {
    LabeledDataset out{name, num_classes, shape, {}, {}};
    out.pixels.reserve(idx.size() * dim());
    for (auto i : idx) {
      auto s = sample(i);
      out.pixels.insert(out.pixels.end(), s.begin(), s.end());
      out.labels.push_back(labels[i]);
    }
    return out;
  }
};

enum class PatternStyle { blobs, strokes };

struct TaskSpec {
  std::string name = "task";
  std::size_t num_classes = 10;
  std::size_t samples_per_class = 300;
  ImageShape shape{3, 16, 16};
  /// 0 makes every class template identical; 1 gives fully distinct classes.
  double separation = 1.0;
  PatternStyle style = PatternStyle::blobs;
  double noise_std = 20.0;
  /// Std-dev, in pixels, of the per-sample displacement of template geometry.
  double position_jitter = 0.6;
  /// Gaussian half-width, in pixels, of stroke-style line segments.
  double stroke_width = 0.8;
  std::uint64_t seed = 1;
};

namespace detail {

struct Blob {
  double cy, cx, radius;
  std::vector<double> amplitude;  // per channel
};

struct Stroke {
  double y0, x0, y1, x1, intensity;
};

struct Template {
  std::vector<double> background;  // per channel
  std::vector<Blob> blobs;
  std::vector<Stroke> strokes;
};

inline Template random_template(const TaskSpec& spec, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto H = static_cast<double>(spec.shape.height);
  const auto W = static_cast<double>(spec.shape.width);
  Template t;
  if (spec.style == PatternStyle::blobs) {
    for (std::size_t c = 0; c < spec.shape.channels; ++c) t.background.push_back(90.0 + 60.0 * u(rng));
    for (int k = 0; k < 4; ++k) {
      Blob b{u(rng) * (H - 1), u(rng) * (W - 1), 1.5 + 2.5 * u(rng), {}};
      for (std::size_t c = 0; c < spec.shape.channels; ++c)
        b.amplitude.push_back((u(rng) < 0.5 ? -1.0 : 1.0) * (50.0 + 80.0 * u(rng)));
      t.blobs.push_back(std::move(b));
    }
  } else {
    t.background.assign(spec.shape.channels, 10.0);
    for (int k = 0; k < 3; ++k) {
      t.strokes.push_back(Stroke{1 + u(rng) * (H - 3), 1 + u(rng) * (W - 3), 1 + u(rng) * (H - 3),
                                 1 + u(rng) * (W - 3), 190.0 + 60.0 * u(rng)});
    }
  }
  return t;
}

inline double segment_distance(double py, double px, const Stroke& s) {
  const double dy = s.y1 - s.y0, dx = s.x1 - s.x0;
  const double len2 = dy * dy + dx * dx;
  double t = len2 > 0 ? ((py - s.y0) * dy + (px - s.x0) * dx) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ey = s.y0 + t * dy - py, ex = s.x0 + t * dx - px;
  return std::sqrt(ey * ey + ex * ex);
}

/// Render a template with per-sample jitter into `out` (channel-major).
inline void render(const TaskSpec& spec, const Template& t, Rng& rng, std::span<double> out) {
  std::normal_distribution<double> jitter(0.0, spec.position_jitter);
  std::uniform_real_distribution<double> gain(0.8, 1.2);
  const auto C = spec.shape.channels, H = spec.shape.height, W = spec.shape.width;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H * W; ++i) out[c * H * W + i] = t.background[c];
  for (const auto& b : t.blobs) {
    const double cy = b.cy + jitter(rng), cx = b.cx + jitter(rng), g = gain(rng);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
        const double w = std::exp(-d2 / (2.0 * b.radius * b.radius));
        for (std::size_t c = 0; c < C; ++c) out[c * H * W + y * W + x] += g * b.amplitude[c] * w;
      }
  }
  for (const auto& s0 : t.strokes) {
    Stroke s = s0;
    s.y0 += jitter(rng);
    s.x0 += jitter(rng);
    s.y1 += jitter(rng);
    s.x1 += jitter(rng);
    const double g = gain(rng);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double d = segment_distance(static_cast<double>(y), static_cast<double>(x), s);
        const double w = std::exp(-d * d / (2.0 * spec.stroke_width * spec.stroke_width));
        for (std::size_t c = 0; c < C; ++c)
          out[c * H * W + y * W + x] = std::max(out[c * H * W + y * W + x], t.background[c] + g * s.intensity * w);
      }
  }
}

/// Blend two templates: geometry/amplitude move from `shared` to `own` as s goes 0 -> 1.
inline Template mix(const Template& shared, const Template& own, double s) {
  Template t = own;
  for (std::size_t c = 0; c < t.background.size(); ++c)
    t.background[c] = (1 - s) * shared.background[c] + s * own.background[c];
  auto lerp = [s](double a, double b) { return (1 - s) * a + s * b; };
  for (std::size_t k = 0; k < t.blobs.size(); ++k) {
    auto& b = t.blobs[k];
    const auto& a = shared.blobs[k];
    b.cy = lerp(a.cy, b.cy);
    b.cx = lerp(a.cx, b.cx);
    b.radius = lerp(a.radius, b.radius);
    for (std::size_t c = 0; c < b.amplitude.size(); ++c) b.amplitude[c] = lerp(a.amplitude[c], b.amplitude[c]);
  }
  for (std::size_t k = 0; k < t.strokes.size(); ++k) {
    auto& b = t.strokes[k];
    const auto& a = shared.strokes[k];
    b = Stroke{lerp(a.y0, b.y0), lerp(a.x0, b.x0), lerp(a.y1, b.y1), lerp(a.x1, b.x1),
               lerp(a.intensity, b.intensity)};
  }
  return t;
}

}  // namespace detail

/// Deterministic synthetic classification task; samples are grouped by class.
inline LabeledDataset synthesize_task(const TaskSpec& spec) {
  if (spec.num_classes < 2) throw InvalidArgument("synthesize_task: num_classes must be >= 2");
  if (spec.shape.size() == 0) throw InvalidArgument("synthesize_task: empty image shape");
  if (spec.separation < 0.0 || spec.separation > 1.0)
    throw InvalidArgument("synthesize_task: separation must lie in [0,1]");
  if (!(spec.stroke_width > 0.0)) throw InvalidArgument("synthesize_task: stroke_width must be positive");
  Rng tmpl_rng = make_stream(spec.seed, "task_templates");
  const detail::Template shared = detail::random_template(spec, tmpl_rng);
  std::vector<detail::Template> templates;
  for (std::size_t c = 0; c < spec.num_classes; ++c)
    templates.push_back(detail::mix(shared, detail::random_template(spec, tmpl_rng), spec.separation));

  LabeledDataset ds{spec.name, spec.num_classes, spec.shape, {}, {}};
  const std::size_t D = spec.shape.size();
  ds.pixels.resize(spec.num_classes * spec.samples_per_class * D);
  std::normal_distribution<double> noise(0.0, spec.noise_std);
  std::size_t row = 0;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    Rng rng = make_stream(spec.seed, "task_samples", {c});
    for (std::size_t k = 0; k < spec.samples_per_class; ++k, ++row) {
      std::span<double> out(ds.pixels.data() + row * D, D);
      detail::render(spec, templates[c], rng, out);
      for (auto& v : out) v = std::round(std::clamp(v + noise(rng), 0.0, 255.0));
      ds.labels.push_back(c);
    }
  }
  return ds;
}

/// Single channel -> three identical channels.
inline LabeledDataset replicate_channels(const LabeledDataset& gray) {
  if (gray.shape.channels != 1)
    throw InvalidArgument("replicate_channels: expected 1 channel, got " +
                          std::to_string(gray.shape.channels));
  LabeledDataset out{gray.name, gray.num_classes, {3, gray.shape.height, gray.shape.width}, {}, gray.labels};
  const std::size_t plane = gray.dim();
  out.pixels.resize(gray.size() * plane * 3);
  for (std::size_t i = 0; i < gray.size(); ++i) {
    auto s = gray.sample(i);
    for (std::size_t c = 0; c < 3; ++c)
      std::copy(s.begin(), s.end(), out.pixels.begin() + static_cast<std::ptrdiff_t>((i * 3 + c) * plane));
  }
  return out;
}

/// Keep `k` of the dataset's classes, chosen by `seed`, relabelled 0..k-1
/// in ascending order of their original index.
inline LabeledDataset select_classes(const LabeledDataset& ds, std::size_t k, std::uint64_t seed) {
  if (k < 2 || k > ds.num_classes)
    throw InvalidArgument("select_classes: k=" + std::to_string(k) + " outside [2, " +
                          std::to_string(ds.num_classes) + "]");
  std::vector<std::size_t> classes(ds.num_classes);
  std::iota(classes.begin(), classes.end(), 0);
  Rng rng = make_stream(seed, "select_classes");
  std::shuffle(classes.begin(), classes.end(), rng);
  classes.resize(k);
  std::sort(classes.begin(), classes.end());
  std::vector<std::size_t> relabel(ds.num_classes, k);
  for (std::size_t i = 0; i < k; ++i) relabel[classes[i]] = i;
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (relabel[ds.labels[i]] < k) keep.push_back(i);
  LabeledDataset out = ds.subset(keep);
  for (auto& l : out.labels) l = relabel[l];
  out.num_classes = k;
  return out;
}

/// Keep the first `per_class` samples of every class (for complexity sweeps).
inline LabeledDataset take_per_class(const LabeledDataset& ds, std::size_t per_class) {
  std::vector<std::size_t> keep;
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    auto idx = ds.indices_of_class(c);
    if (idx.size() < per_class)
      throw InvalidArgument("take_per_class: class " + std::to_string(c) + " has only " +
                            std::to_string(idx.size()) + " samples");
    keep.insert(keep.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(per_class));
  }
  std::sort(keep.begin(), keep.end());
  return ds.subset(keep);
}

struct ClientPartition {
  std::vector<std::vector<std::size_t>> assignment;
  std::size_t dropped = 0;

  std::size_t clients() const { return assignment.size(); }
};

/// Shuffle by seed and split into n equal lists; the remainder is dropped.
inline ClientPartition partition_iid(std::size_t dataset_size, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw InvalidArgument("partition_iid: client count must be positive");
  if (dataset_size < n)
    throw InvalidArgument("partition_iid: " + std::to_string(dataset_size) +
                          " samples cannot feed " + std::to_string(n) + " clients");
  std::vector<std::size_t> idx(dataset_size);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_stream(seed, "partition_iid");
  std::shuffle(idx.begin(), idx.end(), rng);
  const std::size_t per = dataset_size / n;
  ClientPartition p;
  p.dropped = dataset_size - per * n;
  for (std::size_t c = 0; c < n; ++c)
    p.assignment.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(c * per),
                              idx.begin() + static_cast<std::ptrdiff_t>((c + 1) * per));
  return p;
}

inline ClientPartition partition_iid(const LabeledDataset& ds, std::size_t n, std::uint64_t seed) {
  return partition_iid(ds.size(), n, seed);
}

struct Split {
  LabeledDataset train;
  LabeledDataset test;
};

/// Label-stratified split: each class sends round(fraction * count) samples
/// (at least one, at most count-1) to the test side.
inline Split train_test_split(const LabeledDataset& ds, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw InvalidArgument("train_test_split: fraction must lie in (0,1)");
  Rng rng = make_stream(seed, "train_test_split");
  std::vector<std::size_t> train_idx, test_idx;
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    auto idx = ds.indices_of_class(c);
    if (idx.empty()) continue;
    if (idx.size() < 2)
      throw InvalidArgument("train_test_split: class " + std::to_string(c) + " has fewer than 2 samples");
    std::shuffle(idx.begin(), idx.end(), rng);
    auto k = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(idx.size())));
    k = std::clamp<std::size_t>(k, 1, idx.size() - 1);
    test_idx.insert(test_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    train_idx.insert(train_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  return {ds.subset(train_idx), ds.subset(test_idx)};
}

// ---------------------------------------------------------------------------
// Dataset file
//
//   "HJDS" u32 version=1
//   string name (u32 length + bytes)
//   u32 num_classes, u32 channels, u32 height, u32 width, u64 count
//   u32 labels[count]
//   u8 pixels[count * channels * height * width]  (sample-major, then
//      channel, row, column)
//
// Integers are little-endian. Pixels must be integers in [0,255].

inline constexpr std::uint32_t kDatasetVersion = 1;

inline void write_dataset(std::ostream& os, const LabeledDataset& ds) {
  using namespace binary;
  ds.validate();
  os.write("HJDS", 4);
  write_u32(os, kDatasetVersion);
  write_string(os, ds.name);
  write_u32(os, static_cast<std::uint32_t>(ds.num_classes));
  write_u32(os, static_cast<std::uint32_t>(ds.shape.channels));
  write_u32(os, static_cast<std::uint32_t>(ds.shape.height));
  write_u32(os, static_cast<std::uint32_t>(ds.shape.width));
  write_u64(os, ds.size());
  for (auto l : ds.labels) write_u32(os, static_cast<std::uint32_t>(l));
  std::vector<unsigned char> bytes(ds.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const double v = ds.pixels[i];
    if (v != std::round(v)) throw FormatError("write_dataset: pixel values must be integers");
    bytes[i] = static_cast<unsigned char>(v);
  }
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline LabeledDataset read_dataset(std::istream& is) {
  using namespace binary;
  expect_magic(is, "HJDS");
  const auto version = read_u32(is, "dataset version");
  if (version != kDatasetVersion) throw FormatError("unsupported dataset version " + std::to_string(version));
  LabeledDataset ds;
  ds.name = read_string(is, "dataset name");
  ds.num_classes = read_u32(is, "num_classes");
  ds.shape.channels = read_u32(is, "channels");
  ds.shape.height = read_u32(is, "height");
  ds.shape.width = read_u32(is, "width");
  const auto count = read_u64(is, "count");
  if (count > (1ull << 28) || ds.shape.size() > (1u << 24)) throw FormatError("implausible dataset size");
  ds.labels.resize(count);
  for (auto& l : ds.labels) l = read_u32(is, "label");
  std::vector<unsigned char> bytes(count * ds.shape.size());
  if (!bytes.empty() && !is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size())))
    throw FormatError("truncated dataset pixels");
  ds.pixels.assign(bytes.begin(), bytes.end());
  try {
    ds.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("dataset file invalid: ") + e.what());
  }
  return ds;
}

inline void save_dataset(const std::string& path, const LabeledDataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  write_dataset(os, ds);
}

inline LabeledDataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read_dataset(is);
}

}  // namespace hijackfl::data
