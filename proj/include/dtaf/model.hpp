#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "dtaf/config.hpp"
#include "dtaf/ops.hpp"
#include "dtaf/params.hpp"
#include "dtaf/random.hpp"
#include "dtaf/tensor.hpp"

namespace dtaf {

inline constexpr double kNormEps = 1e-5;

// ------------------------------------------------------ instance normalization

struct NormStats {
  double mean = 0.0;
  double std = 0.0;  // population std, without the epsilon
};

inline NormStats norm_stats(std::span<const double> x) {
  NormStats s;
  for (double v : x) s.mean += v;
  s.mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(var / static_cast<double>(x.size()));
  return s;
}

// (x - mean) / (std + 1e-5) with the statistics kept for denorm().
inline std::pair<std::vector<double>, NormStats> instance_norm(std::span<const double> x) {
  if (x.size() < 2) throw ConfigError("instance_norm needs at least 2 samples");
  NormStats s = norm_stats(x);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - s.mean) / (s.std + kNormEps);
  return {std::move(out), s};
}

inline std::vector<double> denorm(std::span<const double> y, const NormStats& s) {
  std::vector<double> out(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = y[i] * (s.std + kNormEps) + s.mean;
  return out;
}

// ------------------------------------------------------------------ blocks

// Per-call switches. Dropout masks depend on (rng.seed, site, step), so two
// calls differing only in `step` draw independent masks.
struct ForwardOptions {
  bool training = false;
  CounterRng rng{};
  std::uint64_t step = 0;
};

namespace stream {
inline constexpr std::uint64_t expert_base = 1000;
inline constexpr std::uint64_t attention_temporal = 2000;
inline constexpr std::uint64_t attention_frequency = 2001;
}  // namespace stream

// Patches of length L at stride S, each mapped by the shared L -> d embedding.
// x: [B, T_in] -> [B, N, d].
inline Tensor patchify_embed(const Tensor& x, DtafParams& params, const ModelConfig& cfg) {
  if (cfg.num_patches() < 2) {
    throw ConfigError("patch_len/stride give " + std::to_string(cfg.num_patches()) + " patch(es); at least 2 are required");
  }
  if (x.dim(-1) != cfg.input_len) {
    throw ShapeError("patchify_embed: input length " + std::to_string(x.dim(-1)) + ", config expects " +
                     std::to_string(cfg.input_len));
  }
  return linear(unfold(x, cfg.patch_len, cfg.stride), params.embed.weight, params.embed.bias);
}

struct MoeOutput {
  Tensor stable;    // X_patch - X_patterns, [B, N, d]
  Tensor patterns;  // router-weighted expert outputs, [B, N, d]
  Tensor router;    // softmax weights, [B, N, m]
};

// Non-stationary mixture-of-experts filter. Experts act on the embedded patch.
inline MoeOutput moe_filter(const Tensor& patches, DtafParams& params, const ModelConfig& cfg,
                            const ForwardOptions& opts = {}) {
  MoeOutput out;
  out.router = softmax(linear(patches, params.router.weight, params.router.bias), -1);
  for (std::size_t j = 0; j < params.experts.size(); ++j) {
    Tensor h = patches;
    const auto& layers = params.experts[j];
    for (std::size_t l = 0; l < layers.size(); ++l) {
      h = linear(h, layers[l].weight, layers[l].bias);
      if (l + 1 < layers.size()) {
        h = gelu(h);
        DropoutKey key{opts.rng, stream::expert_base + 16 * j + l, opts.step};
        h = dropout(h, cfg.dropout, key, opts.training);
      }
    }
    Tensor weighted = scale_rows(h, select_last(out.router, j));
    out.patterns = out.patterns.defined() ? add(out.patterns, weighted) : weighted;
  }
  out.stable = sub(patches, out.patterns);
  return out;
}

// Pairwise KL matrix between the softmax-normalized rows of x[..., N, d].
inline Tensor patch_kl_matrix(const Tensor& x) { return pairwise_kl(softmax(x, -1)); }

// alpha * (1/N^2) * sum_{i,j} KL(p_i || p_j), averaged over the batch.
inline Tensor stable_loss(const Tensor& stable, double alpha) {
  return scale(mean(patch_kl_matrix(stable)), alpha);
}

// Trend/seasonal split by moving average, then W_t * trend + W_s * seasonal.
inline Tensor linear_extra(const Tensor& x, DtafParams& params, const ModelConfig& cfg) {
  Tensor trend = avg_pool_1d_replicate(x, cfg.pool_kernel);
  Tensor seasonal = sub(x, trend);
  return add(linear(trend, params.trend_weight), linear(seasonal, params.seasonal_weight));
}

// 1 where history index n < patch index i, else 0: [N, N] row-major.
inline std::vector<double> causal_mask(std::size_t n) {
  std::vector<double> m(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < i; ++k) m[i * n + k] = 1.0;
  return m;
}

struct FusionOutput {
  Tensor h_t;              // [B, N, d]
  Tensor history_weights;  // [B, N, N], strictly lower triangular
  Tensor gate;             // [B, N, 1]
};

inline FusionOutput temporal_fusion(const Tensor& patches, const Tensor& stable, DtafParams& params,
                                    const ModelConfig& cfg) {
  const std::size_t n = stable.dim(-2);
  if (params.history.weight.dim(0) != n) {
    throw ShapeError("temporal_fusion: history weight has " + std::to_string(params.history.weight.dim(0)) +
                     " rows for " + std::to_string(n) + " patches");
  }
  FusionOutput out;
  Tensor weights = softmax(linear(linear_extra(stable, params, cfg), params.history.weight, params.history.bias), -1);
  // Zeroed after the softmax, not renormalized.
  auto tri = causal_mask(n);
  std::vector<double> mask(weights.size());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = tri[i % (n * n)];
  out.history_weights = mul_const(weights, std::move(mask));
  Tensor history = linear(matmul(out.history_weights, stable), params.history_mlp.weight, params.history_mlp.bias);
  out.gate = linear(linear_extra(patches, params, cfg), params.gate.weight, params.gate.bias);
  out.h_t = add(scale_rows(patches, out.gate), history);
  return out;
}

struct WaveOutput {
  Tensor h_f;                      // [B, N, d]
  ComplexSpectrum freq;            // masked spectra, [B, N, d/2+1, 2]
  ComplexSpectrum wave;            // spectral differences (constant), same layout
  std::vector<std::size_t> picks;  // [B, N, k] selected bins, strongest first
};

// Indices of the k largest values, ties resolved toward the lower index.
inline std::vector<std::size_t> top_k_indices(std::span<const double> v, std::size_t k) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

// Spectral differencing between consecutive patches, top-k selection on the
// difference magnitudes, masking of the (undifferenced) spectra, inverse FFT.
inline WaveOutput frequency_wave(const Tensor& h_t, const ModelConfig& cfg) {
  const std::size_t d = h_t.dim(-1), n = h_t.dim(-2), nb = d / 2 + 1, k = cfg.top_k;
  if (d % 2 != 0) throw ConfigError("frequency_wave: d must be even, got " + std::to_string(d));
  if (k == 0 || k > nb) throw ConfigError("frequency_wave: top_k must lie in [1, " + std::to_string(nb) + "]");
  const std::size_t batch = h_t.size() / (n * d);
  WaveOutput out;
  ComplexSpectrum spec = rfft(h_t);
  const auto& s = spec.tensor().values();
  std::vector<double> wave(s.size());
  std::vector<double> mask(s.size(), 0.0);
  std::vector<double> mags(nb);
  out.picks.reserve(batch * n * k);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t row = (b * n + i) * nb * 2;
      for (std::size_t f = 0; f < nb * 2; ++f) wave[row + f] = i == 0 ? s[row + f] : s[row + f] - s[row - nb * 2 + f];
      for (std::size_t f = 0; f < nb; ++f) mags[f] = std::hypot(wave[row + 2 * f], wave[row + 2 * f + 1]);
      for (std::size_t f : top_k_indices(mags, k)) {
        out.picks.push_back(f);
        mask[row + 2 * f] = mask[row + 2 * f + 1] = 1.0;
      }
    }
  }
  out.wave = ComplexSpectrum(Tensor(spec.tensor().shape(), std::move(wave)));
  out.freq = ComplexSpectrum(mul_const(spec.tensor(), std::move(mask)));
  out.h_f = irfft(out.freq, d);
  return out;
}

// Single-head scaled dot-product self-attention; dropout on the value projection.
inline Tensor self_attention(const Tensor& h, const AttentionParams& a, const ModelConfig& cfg,
                             const ForwardOptions& opts, std::uint64_t site) {
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(h.dim(-1)));
  Tensor q = linear(h, a.query);
  Tensor k = linear(h, a.key);
  Tensor v = dropout(linear(h, a.value), cfg.dropout, DropoutKey{opts.rng, site, opts.step}, opts.training);
  Tensor weights = softmax(scale(matmul(q, transpose_last2(k)), inv_sqrt_d), -1);
  return matmul(weights, v);
}

// Temporal branch rows first, then frequency branch rows: [B, 2N, d].
inline Tensor dual_branch_attention(const Tensor& h_t, const Tensor& h_f, DtafParams& params, const ModelConfig& cfg,
                                    const ForwardOptions& opts = {}) {
  if (h_t.shape() != h_f.shape()) {
    throw ShapeError("dual_branch_attention: branch shapes differ " + shape_str(h_t.shape()) + " vs " +
                     shape_str(h_f.shape()));
  }
  Tensor at = self_attention(h_t, params.attn_temporal, cfg, opts, stream::attention_temporal);
  Tensor af = self_attention(h_f, params.attn_frequency, cfg, opts, stream::attention_frequency);
  return concat(at, af, -2);
}

// Flatten, affine map to the horizon, undo the instance normalization.
inline Tensor predict(const Tensor& fusion, DtafParams& params, std::span<const NormStats> stats) {
  const std::size_t per_row = fusion.dim(-2) * fusion.dim(-1);
  const std::size_t batch = fusion.size() / per_row;
  if (params.predictor.weight.dim(1) != per_row) {
    throw ShapeError("predictor expects " + std::to_string(params.predictor.weight.dim(1)) +
                     " flattened features, fusion provides " + std::to_string(per_row));
  }
  if (stats.size() != batch) throw ShapeError("predict: one normalization record per batch row required");
  Tensor y = linear(reshape(fusion, {batch, per_row}), params.predictor.weight, params.predictor.bias);
  std::vector<double> sc(batch), sh(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    sc[b] = stats[b].std + kNormEps;
    sh[b] = stats[b].mean;
  }
  return rescale_rows(y, std::move(sc), sh);
}

// ------------------------------------------------------------------ forward

struct ForwardTrace {
  Tensor patches;          // X_patch [B, N, d]
  Tensor patterns;         // X_patterns
  Tensor stable;           // X_stable
  Tensor router;           // [B, N, m]
  Tensor history_weights;  // [B, N, N]
  Tensor h_t;
  ComplexSpectrum freq;  // masked
  ComplexSpectrum wave;
  std::vector<std::size_t> picks;  // [B, N, k]
  Tensor h_f;
  Tensor fusion;  // [B, 2N, d]
  std::vector<NormStats> norm;
};

struct ForwardResult {
  Tensor forecast;  // [B, F]
  ForwardTrace trace;
};

// x: [B, T_in] raw window values. Normalization statistics are constants of
// the graph (gradients flow through the scaling, not through the statistics).
inline ForwardResult forward(const Tensor& x, DtafParams& params, const ModelConfig& cfg,
                             const ForwardOptions& opts = {}) {
  if (x.rank() != 2 || x.dim(1) != cfg.input_len) {
    throw ShapeError("forward expects [batch, " + std::to_string(cfg.input_len) + "], got " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0), t = cfg.input_len;
  ForwardResult r;
  auto& tr = r.trace;
  tr.norm.resize(batch);
  std::vector<double> sc(batch), sh(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    tr.norm[b] = norm_stats(x.data().subspan(b * t, t));
    sc[b] = 1.0 / (tr.norm[b].std + kNormEps);
    sh[b] = -tr.norm[b].mean * sc[b];
  }
  Tensor xn = rescale_rows(x, std::move(sc), sh);
  tr.patches = patchify_embed(xn, params, cfg);
  auto moe = moe_filter(tr.patches, params, cfg, opts);
  tr.patterns = moe.patterns;
  tr.stable = moe.stable;
  tr.router = moe.router;
  auto fusion = temporal_fusion(tr.patches, tr.stable, params, cfg);
  tr.h_t = fusion.h_t;
  tr.history_weights = fusion.history_weights;
  auto wave = frequency_wave(tr.h_t, cfg);
  tr.freq = wave.freq;
  tr.wave = wave.wave;
  tr.picks = std::move(wave.picks);
  tr.h_f = wave.h_f;
  tr.fusion = dual_branch_attention(tr.h_t, tr.h_f, params, cfg, opts);
  r.forecast = predict(tr.fusion, params, tr.norm);
  return r;
}

inline ForwardResult forward(std::span<const double> window, DtafParams& params, const ModelConfig& cfg,
                             const ForwardOptions& opts = {}) {
  return forward(Tensor({1, window.size()}, std::vector<double>(window.begin(), window.end())), params, cfg, opts);
}

}  // namespace dtaf
