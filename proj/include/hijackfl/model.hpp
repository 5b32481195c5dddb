#pragma once

// Multi-layer perceptron classifier shared by clients and server.
//
// Layers 0..L-2 are affine+ReLU and together form the feature extractor;
// layer L-1 is the affine classification head. Inputs arrive in pixel space
// [0, 255] and are divided by 255 at the model boundary.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hijackfl/autodiff.hpp"
#include "hijackfl/binary_io.hpp"
#include "hijackfl/errors.hpp"
#include "hijackfl/rng.hpp"
#include "hijackfl/tensor.hpp"

namespace hijackfl::nn {

inline constexpr double kPixelMax = 255.0;

struct ModelSpec {
  std::size_t input_dim = 768;
  std::vector<std::size_t> hidden_widths{256, 128};
  std::size_t num_classes = 10;

  void validate() const {
    if (input_dim == 0) throw InvalidArgument("ModelSpec: input_dim must be positive");
    if (hidden_widths.empty())
      throw InvalidArgument("ModelSpec: at least one hidden layer is required");
    for (auto w : hidden_widths)
      if (w == 0) throw InvalidArgument("ModelSpec: hidden widths must be positive");
    if (num_classes < 2) throw InvalidArgument("ModelSpec: num_classes must be >= 2");
  }
  std::size_t feature_dim() const { return hidden_widths.back(); }
  std::size_t num_layers() const { return hidden_widths.size() + 1; }
  std::size_t layer_in(std::size_t l) const { return l == 0 ? input_dim : hidden_widths[l - 1]; }
  std::size_t layer_out(std::size_t l) const {
    return l < hidden_widths.size() ? hidden_widths[l] : num_classes;
  }
  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct Layer {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]
};

struct Parameters {
  ModelSpec spec;
  std::vector<Layer> layers;
  std::uint64_t version = 0;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  /// Apply `f(double& a, double b)` over every scalar of *this and `other`.
  template <class F>
  void zip(const Parameters& other, F&& f) {
    require_same_spec(other);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& w = layers[l].weight.values;
      auto& b = layers[l].bias.values;
      const auto& ow = other.layers[l].weight.values;
      const auto& ob = other.layers[l].bias.values;
      for (std::size_t i = 0; i < w.size(); ++i) f(w[i], ow[i]);
      for (std::size_t i = 0; i < b.size(); ++i) f(b[i], ob[i]);
    }
  }

  void require_same_spec(const Parameters& other) const {
    if (!(spec == other.spec) || layers.size() != other.layers.size())
      throw DimensionError("parameter sets have different model specs");
  }

  /// Values-only comparison; version tags are ignored.
  bool same_values(const Parameters& other) const {
    if (!(spec == other.spec) || layers.size() != other.layers.size()) return false;
    for (std::size_t l = 0; l < layers.size(); ++l)
      if (layers[l].weight.values != other.layers[l].weight.values ||
          layers[l].bias.values != other.layers[l].bias.values)
        return false;
    return true;
  }

  /// FNV-1a over the raw bytes of every value, layer by layer.
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const std::vector<double>& v) {
      const auto* p = reinterpret_cast<const unsigned char*>(v.data());
      for (std::size_t i = 0; i < v.size() * sizeof(double); ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
      }
    };
    for (const auto& l : layers) {
      mix(l.weight.values);
      mix(l.bias.values);
    }
    return h;
  }
};

inline Parameters zeros_like(const Parameters& p) {
  Parameters z = p;
  for (auto& l : z.layers) {
    std::fill(l.weight.values.begin(), l.weight.values.end(), 0.0);
    std::fill(l.bias.values.begin(), l.bias.values.end(), 0.0);
  }
  return z;
}

/// Weights ~ N(0, 2 / fan_in) (He initialisation), biases zero.
inline Parameters init_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng = make_stream(seed, "init_model");
  Parameters p;
  p.spec = spec;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const auto in = spec.layer_in(l), out = spec.layer_out(l);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(in)));
    Tensor w = Tensor::zeros({in, out});
    for (auto& v : w.values) v = dist(rng);
    p.layers.push_back(Layer{std::move(w), Tensor::zeros({out})});
  }
  return p;
}

/// a - b
inline Parameters delta(const Parameters& a, const Parameters& b) {
  Parameters out = a;
  out.zip(b, [](double& x, double y) { x -= y; });
  return out;
}

/// a + c * d
inline Parameters add_scaled(const Parameters& a, const Parameters& d, double c) {
  Parameters out = a;
  out.zip(d, [c](double& x, double y) { x += c * y; });
  return out;
}

// ---------------------------------------------------------------------------
// Graph-level forward pass

struct BoundLayer {
  autodiff::Var weight;
  autodiff::Var bias;
};

/// Parameters recorded on a graph; `trainable` controls gradient tracking.
inline std::vector<BoundLayer> bind(autodiff::Graph& g, const Parameters& p, bool trainable) {
  std::vector<BoundLayer> out;
  out.reserve(p.layers.size());
  for (const auto& l : p.layers) {
    if (trainable)
      out.push_back({g.parameter(l.weight), g.parameter(l.bias)});
    else
      out.push_back({g.constant(l.weight), g.constant(l.bias)});
  }
  return out;
}

struct ForwardVars {
  autodiff::Var features;
  autodiff::Var logits;
};

/// Forward from already-normalised inputs ([0,1] for real pixels).
inline ForwardVars forward_normalized(const std::vector<BoundLayer>& layers, autodiff::Var input) {
  autodiff::Var h = input;
  for (std::size_t l = 0; l + 1 < layers.size(); ++l)
    h = autodiff::relu(autodiff::affine(h, layers[l].weight, layers[l].bias));
  const auto& head = layers.back();
  return {h, autodiff::affine(h, head.weight, head.bias)};
}

inline autodiff::Var normalize_pixels(autodiff::Var pixels) {
  return autodiff::scale(pixels, 1.0 / kPixelMax);
}

inline ForwardVars forward_pixels(const std::vector<BoundLayer>& layers, autodiff::Var pixels) {
  return forward_normalized(layers, normalize_pixels(pixels));
}

// ---------------------------------------------------------------------------
// Value-level helpers

inline void require_input(const Parameters& p, const Tensor& batch) {
  if (batch.rank() != 2 || batch.shape[1] != p.spec.input_dim) {
    throw DimensionError("model expects [batch x " + std::to_string(p.spec.input_dim) +
                         "] input, got " + shape_string(batch.shape));
  }
}

/// Activations after the last hidden layer (post-ReLU), from pixel inputs.
inline Tensor forward_features(const Parameters& p, const Tensor& batch) {
  require_input(p, batch);
  autodiff::Graph g;
  auto layers = bind(g, p, false);
  return g.value(forward_pixels(layers, g.constant(batch)).features);
}

/// Classification head applied to a feature batch.
inline Tensor apply_head(const Parameters& p, const Tensor& features) {
  autodiff::Graph g;
  const auto& head = p.layers.back();
  return g.value(autodiff::affine(g.constant(features), g.constant(head.weight),
                                  g.constant(head.bias)));
}

inline Tensor forward_logits(const Parameters& p, const Tensor& batch) {
  require_input(p, batch);
  autodiff::Graph g;
  auto layers = bind(g, p, false);
  return g.value(forward_pixels(layers, g.constant(batch)).logits);
}

inline Tensor softmax_rows(const Tensor& logits) {
  Tensor out = logits;
  const std::size_t rows = logits.rows(), cols = logits.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.values.data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double denom = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      denom += row[c];
    }
    for (std::size_t c = 0; c < cols; ++c) row[c] /= denom;
  }
  return out;
}

inline Tensor predict_proba(const Parameters& p, const Tensor& batch) {
  return softmax_rows(forward_logits(p, batch));
}

/// Index of the largest entry in each row; ties go to the lowest index.
inline std::vector<std::size_t> argmax_rows(const Tensor& m) {
  std::vector<std::size_t> out(m.rows());
  const std::size_t cols = m.cols();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double* row = m.values.data() + r * cols;
    out[r] = static_cast<std::size_t>(std::max_element(row, row + cols) - row);
  }
  return out;
}

inline std::vector<std::size_t> predict(const Parameters& p, const Tensor& batch) {
  return argmax_rows(forward_logits(p, batch));
}

// ---------------------------------------------------------------------------
// Checkpoint file
//
//   "HJCK" u32 version=1
//   u64 input_dim, u32 hidden count, u64 widths..., u64 num_classes
//   u64 version tag
//   per layer: u64 rows, u64 cols, f64 weight[rows*cols], u64 n, f64 bias[n]
//
// All integers and doubles little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_checkpoint(std::ostream& os, const Parameters& p) {
  using namespace binary;
  os.write("HJCK", 4);
  write_u32(os, kCheckpointVersion);
  write_u64(os, p.spec.input_dim);
  write_u32(os, static_cast<std::uint32_t>(p.spec.hidden_widths.size()));
  for (auto w : p.spec.hidden_widths) write_u64(os, w);
  write_u64(os, p.spec.num_classes);
  write_u64(os, p.version);
  for (const auto& l : p.layers) {
    write_u64(os, l.weight.shape[0]);
    write_u64(os, l.weight.shape[1]);
    write_f64_array(os, l.weight.values);
    write_u64(os, l.bias.size());
    write_f64_array(os, l.bias.values);
  }
}

inline Parameters read_checkpoint(std::istream& is) {
  using namespace binary;
  expect_magic(is, "HJCK");
  const auto version = read_u32(is, "checkpoint version");
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  Parameters p;
  p.spec.input_dim = read_u64(is, "input_dim");
  const auto hidden = read_u32(is, "hidden count");
  if (hidden > 64) throw FormatError("implausible hidden layer count");
  p.spec.hidden_widths.clear();
  for (std::uint32_t i = 0; i < hidden; ++i) p.spec.hidden_widths.push_back(read_u64(is, "width"));
  p.spec.num_classes = read_u64(is, "num_classes");
  p.version = read_u64(is, "version tag");
  try {
    p.spec.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint spec invalid: ") + e.what());
  }
  for (std::size_t l = 0; l < p.spec.num_layers(); ++l) {
    const auto rows = read_u64(is, "weight rows");
    const auto cols = read_u64(is, "weight cols");
    if (rows != p.spec.layer_in(l) || cols != p.spec.layer_out(l))
      throw FormatError("checkpoint layer " + std::to_string(l) + " shape mismatch");
    auto w = read_f64_array(is, rows * cols, "weights");
    const auto n = read_u64(is, "bias size");
    if (n != cols) throw FormatError("checkpoint bias size mismatch");
    auto b = read_f64_array(is, n, "bias");
    p.layers.push_back(Layer{Tensor({rows, cols}, std::move(w)), Tensor({n}, std::move(b))});
  }
  return p;
}

inline void save_checkpoint(const std::string& path, const Parameters& p) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  write_checkpoint(os, p);
}

inline Parameters load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read_checkpoint(is);
}

}  // namespace hijackfl::nn
