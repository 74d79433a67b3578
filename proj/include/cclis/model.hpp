#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "cclis/tensor.hpp"

namespace cclis {

struct LayerParams {
  Tensor weight;  // (out x in)
  Tensor bias;    // (out)
};

/// Encoder MLP -> two-layer projection head -> unit-normalized embedding,
/// plus one trainable prototype row per seen class. Scores are
/// normalize(c_i) . z_j / temperature.
struct ModelState {
  std::vector<LayerParams> encoder_layers;     // relu after each
  std::vector<LayerParams> projection_layers;  // linear, relu, linear
  Tensor prototypes;                           // (num_seen_classes x embed_dim)
  double tau = 0.5;

  std::size_t input_dim() const { return encoder_layers.front().weight.cols(); }
  std::size_t embed_dim() const { return projection_layers.back().weight.rows(); }
  std::size_t backbone_dim() const { return encoder_layers.back().weight.rows(); }
  std::size_t num_prototypes() const {
    return prototypes.numel() == 0 ? 0 : prototypes.rows();
  }

  bool all_finite() const {
    for (const auto& l : encoder_layers)
      if (!l.weight.all_finite() || !l.bias.all_finite()) return false;
    for (const auto& l : projection_layers)
      if (!l.weight.all_finite() || !l.bias.all_finite()) return false;
    return prototypes.all_finite();
  }
};

/// Immutable deep copy of a ModelState, excluded from gradient tracking.
class FrozenModel {
 public:
  explicit FrozenModel(ModelState s) : state_(std::move(s)) {}
  const ModelState& state() const { return state_; }

 private:
  ModelState state_;
};

inline FrozenModel snapshot(const ModelState& state) { return FrozenModel(state); }

inline Tensor glorot_uniform(std::size_t out, std::size_t in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor w = Tensor::zeros({out, in});
  for (auto& v : w.values) v = u(rng);
  return w;
}

/// Fresh model with zero prototypes. hidden_dims are the encoder widths;
/// the projection head is hidden -> hidden -> embed_dim.
inline ModelState init_model(std::size_t input_dim, const std::vector<std::size_t>& hidden_dims,
                             std::size_t embed_dim, double tau, std::mt19937_64& rng) {
  if (hidden_dims.empty()) throw std::invalid_argument("init_model: need >= 1 hidden layer");
  if (tau <= 0.0) throw std::invalid_argument("init_model: tau must be positive");
  ModelState m;
  m.tau = tau;
  std::size_t prev = input_dim;
  for (auto h : hidden_dims) {
    m.encoder_layers.push_back({glorot_uniform(h, prev, rng), Tensor::zeros({h})});
    prev = h;
  }
  m.projection_layers.push_back({glorot_uniform(prev, prev, rng), Tensor::zeros({prev})});
  m.projection_layers.push_back({glorot_uniform(embed_dim, prev, rng), Tensor::zeros({embed_dim})});
  m.prototypes = Tensor::zeros({0, embed_dim});
  return m;
}

/// Appends new prototype rows drawn from N(0, scale); existing rows are
/// untouched bitwise.
inline void grow_prototypes(ModelState& state, std::size_t new_classes, std::mt19937_64& rng,
                            double scale = 0.1) {
  if (new_classes < 1) throw std::invalid_argument("grow_prototypes: new_classes must be >= 1");
  std::normal_distribution<double> n(0.0, 1.0);
  const std::size_t d = state.prototypes.cols() ? state.prototypes.cols() : state.embed_dim();
  Tensor grown = Tensor::zeros({state.num_prototypes() + new_classes, d});
  std::copy(state.prototypes.values.begin(), state.prototypes.values.end(),
            grown.values.begin());
  for (std::size_t i = state.num_prototypes() * d; i < grown.numel(); ++i)
    grown[i] = scale * n(rng);
  state.prototypes = std::move(grown);
}

/// Tape handles for all trainable tensors, in parameter_list() order.
struct ModelVars {
  std::vector<Tape::NodeId> ids;           // one per parameter tensor
  std::optional<Tape::NodeId> prototypes;  // alias of the last id when K > 0
  std::vector<std::pair<Tape::NodeId, Tape::NodeId>> encoder;     // (W, b)
  std::vector<std::pair<Tape::NodeId, Tape::NodeId>> projection;  // (W, b)
};

/// Stable parameter order: encoder (W, b)..., projection (W, b)..., prototypes.
inline std::vector<Tensor*> parameter_list(ModelState& state) {
  std::vector<Tensor*> out;
  for (auto& l : state.encoder_layers) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  for (auto& l : state.projection_layers) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  if (state.num_prototypes() > 0) out.push_back(&state.prototypes);
  return out;
}

inline ModelVars register_params(Tape& tape, const ModelState& state) {
  ModelVars vars;
  for (const auto& l : state.encoder_layers) {
    auto w = tape.leaf(l.weight);
    auto b = tape.leaf(l.bias);
    vars.encoder.emplace_back(w, b);
    vars.ids.push_back(w);
    vars.ids.push_back(b);
  }
  for (const auto& l : state.projection_layers) {
    auto w = tape.leaf(l.weight);
    auto b = tape.leaf(l.bias);
    vars.projection.emplace_back(w, b);
    vars.ids.push_back(w);
    vars.ids.push_back(b);
  }
  if (state.num_prototypes() > 0) {
    vars.prototypes = tape.leaf(state.prototypes);
    vars.ids.push_back(*vars.prototypes);
  }
  return vars;
}

/// Backbone features: encoder stack output (post-relu), before projection.
inline Tape::NodeId backbone_graph(Tape& tape, const ModelVars& vars, Tape::NodeId input) {
  Tape::NodeId x = input;
  for (const auto& [w, b] : vars.encoder)
    x = tape.relu(tape.add_rowvec(tape.matmul(x, tape.transpose(w)), b));
  return x;
}

/// Full embedding: backbone -> projection head -> row-normalized output.
/// Rows come out with L2 norm 1 (eps-guarded at 1e-12 for degenerate rows).
inline Tape::NodeId encode_graph(Tape& tape, const ModelVars& vars, Tape::NodeId input) {
  Tape::NodeId x = backbone_graph(tape, vars, input);
  const auto& [w0, b0] = vars.projection[0];
  x = tape.relu(tape.add_rowvec(tape.matmul(x, tape.transpose(w0)), b0));
  const auto& [w1, b1] = vars.projection[1];
  x = tape.add_rowvec(tape.matmul(x, tape.transpose(w1)), b1);
  return tape.l2_normalize_rows(x, 1e-12);
}

/// Scores s[i][j] = normalize(c_i) . z_j / temperature, shape (K x n).
/// A zero prototype row is an error.
inline Tape::NodeId prototype_scores_graph(Tape& tape, const ModelVars& vars,
                                           double tau, Tape::NodeId z,
                                           std::optional<double> kappa = std::nullopt) {
  if (!vars.prototypes) throw std::invalid_argument("prototype_scores: no prototypes");
  const double temperature = kappa.value_or(tau);
  if (temperature <= 0.0)
    throw std::invalid_argument("prototype_scores: temperature must be positive");
  auto cn = tape.l2_normalize_rows(*vars.prototypes, 0.0);
  return tape.scalar_mul(1.0 / temperature, tape.matmul(cn, tape.transpose(z)));
}

/// Value-only forward passes (no gradients kept).
inline Tensor encode(const ModelState& state, const Tensor& batch) {
  if (batch.rank() != 2 || batch.cols() != state.input_dim())
    throw std::invalid_argument("encode: input dim mismatch, batch " + batch.shape_str());
  Tape tape;
  auto vars = register_params(tape, state);
  return tape.value(encode_graph(tape, vars, tape.leaf(batch)));
}

inline Tensor backbone_features(const ModelState& state, const Tensor& batch) {
  if (batch.rank() != 2 || batch.cols() != state.input_dim())
    throw std::invalid_argument("backbone_features: input dim mismatch");
  Tape tape;
  auto vars = register_params(tape, state);
  return tape.value(backbone_graph(tape, vars, tape.leaf(batch)));
}

inline Tensor prototype_scores(const ModelState& state, const Tensor& z,
                               std::optional<double> kappa = std::nullopt) {
  Tape tape;
  auto vars = register_params(tape, state);
  return tape.value(prototype_scores_graph(tape, vars, state.tau, z, kappa));
}

/// FNV-1a over all parameter bytes; used to assert a model was left untouched.
inline std::uint64_t model_checksum(const ModelState& state) {
  std::uint64_t h = 1469598103934665603ull;
  auto feed = [&h](const Tensor& t) {
    for (double v : t.values) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xffu;
        h *= 1099511628211ull;
      }
    }
  };
  for (const auto& l : state.encoder_layers) {
    feed(l.weight);
    feed(l.bias);
  }
  for (const auto& l : state.projection_layers) {
    feed(l.weight);
    feed(l.bias);
  }
  feed(state.prototypes);
  return h;
}

// --- checkpoint file: magic "CCKP", u32 schema version, then raw
// little-endian doubles per tensor with u32 rank + u64 dims ---

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void write_tensor(std::ostream& os, const Tensor& t) {
  write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape) write_u64(os, d);
  os.write(reinterpret_cast<const char*>(t.values.data()),
           static_cast<std::streamsize>(t.values.size() * sizeof(double)));
}
inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
inline Tensor read_tensor(std::istream& is) {
  const auto rank = read_u32(is);
  std::vector<std::size_t> shape(rank);
  for (auto& d : shape) d = static_cast<std::size_t>(read_u64(is));
  Tensor t = Tensor::zeros(shape);
  is.read(reinterpret_cast<char*>(t.values.data()),
          static_cast<std::streamsize>(t.values.size() * sizeof(double)));
  if (!is) throw std::runtime_error("checkpoint: truncated tensor payload");
  return t;
}

}  // namespace detail

inline constexpr std::uint32_t kCheckpointSchemaVersion = 1;

inline void save_checkpoint(const ModelState& state, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  os.write("CCKP", 4);
  detail::write_u32(os, kCheckpointSchemaVersion);
  os.write(reinterpret_cast<const char*>(&state.tau), sizeof(double));
  detail::write_u32(os, static_cast<std::uint32_t>(state.encoder_layers.size()));
  for (const auto& l : state.encoder_layers) {
    detail::write_tensor(os, l.weight);
    detail::write_tensor(os, l.bias);
  }
  detail::write_u32(os, static_cast<std::uint32_t>(state.projection_layers.size()));
  for (const auto& l : state.projection_layers) {
    detail::write_tensor(os, l.weight);
    detail::write_tensor(os, l.bias);
  }
  detail::write_tensor(os, state.prototypes);
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline ModelState load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4] = {};
  is.read(magic, 4);
  if (std::string(magic, 4) != "CCKP")
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  const auto version = detail::read_u32(is);
  if (version != kCheckpointSchemaVersion)
    throw std::runtime_error("load_checkpoint: unsupported schema version " +
                             std::to_string(version));
  ModelState m;
  is.read(reinterpret_cast<char*>(&m.tau), sizeof(double));
  const auto n_enc = detail::read_u32(is);
  for (std::uint32_t i = 0; i < n_enc; ++i) {
    LayerParams l;
    l.weight = detail::read_tensor(is);
    l.bias = detail::read_tensor(is);
    m.encoder_layers.push_back(std::move(l));
  }
  const auto n_proj = detail::read_u32(is);
  for (std::uint32_t i = 0; i < n_proj; ++i) {
    LayerParams l;
    l.weight = detail::read_tensor(is);
    l.bias = detail::read_tensor(is);
    m.projection_layers.push_back(std::move(l));
  }
  m.prototypes = detail::read_tensor(is);
  return m;
}

}  // namespace cclis
