#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dtaf/config.hpp"
#include "dtaf/errors.hpp"
#include "dtaf/random.hpp"
#include "dtaf/tensor.hpp"

namespace dtaf {

struct AffineParams {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]
};

struct AttentionParams {
  Tensor query, key, value;  // [d, d] each, no bias
};

// Every learnable array of a DTAF model. Affine weights are stored [out, in].
struct DtafParams {
  AffineParams embed;                             // L -> d
  std::vector<std::vector<AffineParams>> experts;  // m stacks of expert_depth d -> d layers
  AffineParams router;                            // d -> m
  Tensor trend_weight;                            // W_t [d, d]
  Tensor seasonal_weight;                         // W_s [d, d]
  AffineParams history;                           // d -> N (W_history [N, d], b_history [N])
  AffineParams history_mlp;                       // d -> d
  AffineParams gate;                              // d -> 1
  AttentionParams attn_temporal;
  AttentionParams attn_frequency;
  AffineParams predictor;  // 2N*d -> F

  // Stable, ordered (name, tensor) view used by the optimizer and checkpoints.
  std::vector<std::pair<std::string, Tensor*>> named() {
    std::vector<std::pair<std::string, Tensor*>> out;
    auto affine = [&](const std::string& n, AffineParams& a) {
      out.emplace_back(n + ".weight", &a.weight);
      out.emplace_back(n + ".bias", &a.bias);
    };
    affine("embed", embed);
    for (std::size_t j = 0; j < experts.size(); ++j)
      for (std::size_t l = 0; l < experts[j].size(); ++l)
        affine("experts." + std::to_string(j) + "." + std::to_string(l), experts[j][l]);
    affine("router", router);
    out.emplace_back("decomp.trend_weight", &trend_weight);
    out.emplace_back("decomp.seasonal_weight", &seasonal_weight);
    affine("history", history);
    affine("history_mlp", history_mlp);
    affine("gate", gate);
    auto attn = [&](const std::string& n, AttentionParams& a) {
      out.emplace_back(n + ".query", &a.query);
      out.emplace_back(n + ".key", &a.key);
      out.emplace_back(n + ".value", &a.value);
    };
    attn("attn_temporal", attn_temporal);
    attn("attn_frequency", attn_frequency);
    affine("predictor", predictor);
    return out;
  }

  std::vector<Tensor> tensors() {
    std::vector<Tensor> out;
    for (auto& [n, t] : named()) out.push_back(*t);
    return out;
  }

  void zero_grad() {
    for (auto& [n, t] : named()) t->zero_grad();
  }

  // Independent copy of every value (no shared storage, no grads).
  DtafParams clone() const {
    DtafParams copy = *this;
    for (auto& [n, t] : copy.named()) *t = t->clone();
    return copy;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto& [name, t] : named()) n += t->size();
    return n;
  }
};

// Shapes every parameter must have under `cfg`, in named() order.
inline std::vector<std::pair<std::string, Shape>> expected_shapes(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model, n = cfg.num_patches();
  std::vector<std::pair<std::string, Shape>> out;
  auto affine = [&](const std::string& name, std::size_t o, std::size_t i) {
    out.emplace_back(name + ".weight", Shape{o, i});
    out.emplace_back(name + ".bias", Shape{o});
  };
  affine("embed", d, cfg.patch_len);
  for (std::size_t j = 0; j < cfg.n_experts; ++j)
    for (std::size_t l = 0; l < cfg.expert_depth; ++l) affine("experts." + std::to_string(j) + "." + std::to_string(l), d, d);
  affine("router", cfg.n_experts, d);
  out.emplace_back("decomp.trend_weight", Shape{d, d});
  out.emplace_back("decomp.seasonal_weight", Shape{d, d});
  affine("history", n, d);
  affine("history_mlp", d, d);
  affine("gate", 1, d);
  for (const char* branch : {"attn_temporal", "attn_frequency"})
    for (const char* p : {".query", ".key", ".value"}) out.emplace_back(std::string(branch) + p, Shape{d, d});
  affine("predictor", cfg.horizon, 2 * n * d);
  return out;
}

namespace detail {

inline AffineParams affine_init(std::size_t out, std::size_t in, Engine& eng, bool zero = false) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::vector<double> w(out * in, 0.0);
  if (!zero) {
    for (auto& v : w) v = uniform(eng, -bound, bound);
  }
  return {Tensor({out, in}, std::move(w), true), Tensor::zeros({out}, true)};
}

inline Tensor matrix_init(std::size_t out, std::size_t in, Engine& eng) {
  return affine_init(out, in, eng).weight;
}

}  // namespace detail

// Weights uniform in +-1/sqrt(fan_in), biases zero. The last layer of every
// expert starts at zero so the filter is initially the identity.
inline DtafParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Engine eng(derive_seed(seed, 0x1417));
  const std::size_t d = cfg.d_model, n = cfg.num_patches();
  DtafParams p;
  p.embed = detail::affine_init(d, cfg.patch_len, eng);
  p.experts.resize(cfg.n_experts);
  for (auto& e : p.experts) {
    for (std::size_t l = 0; l < cfg.expert_depth; ++l) {
      e.push_back(detail::affine_init(d, d, eng, l + 1 == cfg.expert_depth));
    }
  }
  p.router = detail::affine_init(cfg.n_experts, d, eng);
  p.trend_weight = detail::matrix_init(d, d, eng);
  p.seasonal_weight = detail::matrix_init(d, d, eng);
  p.history = detail::affine_init(n, d, eng);
  p.history_mlp = detail::affine_init(d, d, eng);
  p.gate = detail::affine_init(1, d, eng);
  for (auto* a : {&p.attn_temporal, &p.attn_frequency}) {
    a->query = detail::matrix_init(d, d, eng);
    a->key = detail::matrix_init(d, d, eng);
    a->value = detail::matrix_init(d, d, eng);
  }
  p.predictor = detail::affine_init(cfg.horizon, 2 * n * d, eng);
  return p;
}

// Throws ShapeError naming the first parameter whose shape disagrees with cfg.
inline void check_shapes(DtafParams& p, const ModelConfig& cfg) {
  auto expect = expected_shapes(cfg);
  auto have = p.named();
  if (have.size() != expect.size()) {
    throw ShapeError("parameter set has " + std::to_string(have.size()) + " arrays, config expects " +
                     std::to_string(expect.size()));
  }
  for (std::size_t i = 0; i < expect.size(); ++i) {
    if (have[i].first != expect[i].first || have[i].second->shape() != expect[i].second) {
      throw ShapeError("parameter '" + have[i].first + "' has shape " + shape_str(have[i].second->shape()) +
                       ", config expects '" + expect[i].first + "' " + shape_str(expect[i].second));
    }
  }
}

// ------------------------------------------------------------- checkpoints
//
// `path` holds a text manifest, `path + ".bin"` the little-endian float64
// payload. Manifest lines:
//   # <comment>
//   meta <key> <value>
//   param <name> <d0,d1,...> <offset> <count>

inline void save_checkpoint(const std::string& path, DtafParams& params,
                            const std::vector<std::pair<std::string, std::string>>& meta = {},
                            const std::string& header_comment = "") {
  std::ofstream manifest(path);
  std::ofstream blob(path + ".bin", std::ios::binary);
  if (!manifest || !blob) throw Error("cannot write checkpoint '" + path + "'");
  manifest << "# dtaf checkpoint v1\n";
  if (!header_comment.empty()) manifest << "# " << header_comment << '\n';
  for (const auto& [k, v] : meta) manifest << "meta " << k << ' ' << v << '\n';
  std::size_t offset = 0;
  for (auto& [name, t] : params.named()) {
    manifest << "param " << name << ' ';
    for (std::size_t i = 0; i < t->rank(); ++i) manifest << (i ? "," : "") << t->shape()[i];
    manifest << ' ' << offset << ' ' << t->size() << '\n';
    for (double v : t->values()) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      char bytes[8];
      for (int b = 0; b < 8; ++b) bytes[b] = static_cast<char>((bits >> (8 * b)) & 0xff);
      blob.write(bytes, 8);
    }
    offset += t->size();
  }
  if (!manifest || !blob) throw Error("failed writing checkpoint '" + path + "'");
}

struct CheckpointEntry {
  Shape shape;
  std::size_t offset = 0;
  std::size_t count = 0;
};

struct CheckpointManifest {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, CheckpointEntry>> params;
};

inline CheckpointManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UserError("cannot open checkpoint '" + path + "'");
  CheckpointManifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "meta") {
      std::string k, v;
      ls >> k;
      std::getline(ls >> std::ws, v);
      m.meta[k] = v;
    } else if (kind == "param") {
      std::string name, dims;
      CheckpointEntry e;
      ls >> name >> dims >> e.offset >> e.count;
      if (!ls) throw UserError(path + ":" + std::to_string(lineno) + ": malformed param line");
      std::istringstream ds(dims);
      std::string tok;
      while (std::getline(ds, tok, ',')) e.shape.push_back(std::stoul(tok));
      m.params.emplace_back(name, std::move(e));
    } else {
      throw UserError(path + ":" + std::to_string(lineno) + ": unknown manifest entry '" + kind + "'");
    }
  }
  return m;
}

// Loads a checkpoint, validating every parameter name and shape against cfg.
inline DtafParams load_checkpoint(const std::string& path, const ModelConfig& cfg) {
  cfg.validate();
  auto manifest = read_manifest(path);
  auto expect = expected_shapes(cfg);
  std::map<std::string, CheckpointEntry> have(manifest.params.begin(), manifest.params.end());
  for (const auto& [name, shape] : expect) {
    auto it = have.find(name);
    if (it == have.end()) throw ShapeError("checkpoint '" + path + "' lacks parameter '" + name + "'");
    if (it->second.shape != shape) {
      throw ShapeError("checkpoint parameter '" + name + "' has shape " + shape_str(it->second.shape) +
                       ", config expects " + shape_str(shape));
    }
  }
  if (have.size() != expect.size()) {
    throw ShapeError("checkpoint '" + path + "' has " + std::to_string(have.size()) + " parameters, config expects " +
                     std::to_string(expect.size()));
  }
  std::ifstream blob(path + ".bin", std::ios::binary);
  if (!blob) throw UserError("cannot open checkpoint payload '" + path + ".bin'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());
  auto params = init_params(cfg, 0);
  for (auto& [name, t] : params.named()) {
    const auto& e = have.at(name);
    if ((e.offset + e.count) * 8 > bytes.size() || e.count != t->size()) {
      throw UserError("checkpoint payload for '" + name + "' is truncated");
    }
    auto dst = t->mutable_data();
    for (std::size_t i = 0; i < e.count; ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b)
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[(e.offset + i) * 8 + b])) << (8 * b);
      dst[i] = std::bit_cast<double>(bits);
    }
  }
  return params;
}

}  // namespace dtaf
