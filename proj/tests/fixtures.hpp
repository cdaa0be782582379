#pragma once

// Helpers shared by the unit suites and the acceptance runner.

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "dtaf/model.hpp"
#include "dtaf/params.hpp"
#include "oracles.hpp"

namespace fixture {

using namespace dtaf;

inline std::vector<double> random_values(std::size_t n, Engine& eng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = uniform(eng, lo, hi);
  return v;
}

inline Tensor random_leaf(const Shape& s, Engine& eng, double scale = 1.0) {
  return Tensor(s, random_values(shape_size(s), eng, -scale, scale), true);
}

// Overwrites every parameter (including zero-initialized ones) with U(-s, s).
inline void randomize(DtafParams& p, Engine& eng, double s = 0.5) {
  for (auto& [name, t] : p.named())
    for (auto& v : t->mutable_data()) v = uniform(eng, -s, s);
}

// The small configuration used for gradient checks.
inline ModelConfig grad_config() {
  ModelConfig c;
  c.input_len = 16;
  c.patch_len = 8;
  c.stride = 4;
  c.d_model = 8;
  c.n_experts = 2;
  c.top_k = 3;
  c.horizon = 4;
  return c;
}

// Random linear functional of `t`: a scalar whose gradient touches every entry.
class Probe {
 public:
  explicit Probe(std::uint64_t seed) : eng_(seed) {}
  Tensor operator()(const Tensor& t) {
    auto& w = weights_[slot_++];
    if (w.size() != t.size()) w = random_values(t.size(), eng_);
    return sum(mul_const(t, w));
  }
  void reset() { slot_ = 0; }

 private:
  Engine eng_;
  std::size_t slot_ = 0;
  std::vector<double> weights_[16];
};

inline std::vector<Tensor> pick(DtafParams& p, const std::vector<std::string>& prefixes) {
  std::vector<Tensor> out;
  for (auto& [name, t] : p.named())
    for (const auto& pre : prefixes)
      if (name.rfind(pre, 0) == 0) {
        out.push_back(*t);
        break;
      }
  return out;
}

struct BlockCheck {
  std::string block;
  oracle::GradCheck result;
};

// Finite-difference checks of every block and the full forward for one seed.
inline std::vector<BlockCheck> gradient_checks(std::uint64_t seed, const ModelConfig& cfg = grad_config()) {
  Engine eng(derive_seed(seed, 0x9c));
  auto params = init_params(cfg, seed);
  randomize(params, eng);
  const std::size_t b = 2, n = cfg.num_patches(), d = cfg.d_model;
  std::vector<BlockCheck> out;
  auto run = [&](const std::string& name, std::vector<Tensor> leaves, const std::function<Tensor(Probe&)>& f) {
    Probe probe(derive_seed(seed, name.size()));
    out.push_back({name, oracle::finite_difference(leaves, [&] {
                     probe.reset();
                     return f(probe);
                   })});
  };

  Tensor patches = random_leaf({b, n, d}, eng);
  auto moe_leaves = pick(params, {"experts.", "router."});
  moe_leaves.push_back(patches);
  run("moe_filter", moe_leaves, [&](Probe& p) {
    auto m = moe_filter(patches, params, cfg);
    return add(add(p(m.stable), p(m.router)), stable_loss(m.stable, 0.7));
  });

  Tensor stable = random_leaf({b, n, d}, eng);
  auto tf_leaves = pick(params, {"decomp.", "history.", "history_mlp.", "gate."});
  tf_leaves.push_back(patches);
  tf_leaves.push_back(stable);
  run("temporal_fusion", tf_leaves, [&](Probe& p) { return p(temporal_fusion(patches, stable, params, cfg).h_t); });

  Tensor h_t = random_leaf({b, n, d}, eng);
  run("frequency_wave", {h_t}, [&](Probe& p) { return p(frequency_wave(h_t, cfg).h_f); });

  Tensor h_f = random_leaf({b, n, d}, eng);
  auto att_leaves = pick(params, {"attn_"});
  att_leaves.push_back(h_t);
  att_leaves.push_back(h_f);
  run("dual_branch_attention", att_leaves,
      [&](Probe& p) { return p(dual_branch_attention(h_t, h_f, params, cfg)); });

  Tensor fusion = random_leaf({b, 2 * n, d}, eng);
  std::vector<NormStats> stats{{0.3, 1.7}, {-2.0, 0.4}};
  auto pr_leaves = pick(params, {"predictor."});
  pr_leaves.push_back(fusion);
  run("predict", pr_leaves, [&](Probe& p) { return p(predict(fusion, params, stats)); });

  // Input statistics are graph constants, so the full check covers parameters.
  Tensor x({b, cfg.input_len}, random_values(b * cfg.input_len, eng, -3.0, 3.0));
  run("forward", params.tensors(), [&](Probe& p) { return p(forward(x, params, cfg).forecast); });
  return out;
}

}  // namespace fixture
