#pragma once

#include <cstddef>
#include <string>

#include "dtaf/errors.hpp"

namespace dtaf {

// Architecture and loss hyperparameters of one DTAF model.
struct ModelConfig {
  std::size_t input_len = 96;  // lookback T_in
  std::size_t horizon = 24;    // forecast length F
  std::size_t patch_len = 16;
  std::size_t stride = 8;
  std::size_t d_model = 64;  // must be even
  std::size_t n_experts = 4;
  std::size_t expert_depth = 2;
  std::size_t top_k = 4;
  std::size_t pool_kernel = 3;  // odd
  double dropout = 0.1;
  double alpha = 0.1;  // stable-loss weight
  double beta = 0.1;   // robust-loss weight

  std::size_t num_patches() const {
    if (patch_len == 0 || stride == 0 || patch_len > input_len) return 0;
    return (input_len - patch_len) / stride + 1;
  }
  std::size_t num_bins() const { return d_model / 2 + 1; }

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) { throw ConfigError(field + ": " + why); };
    if (input_len < 2) fail("input_len", "must be at least 2");
    if (horizon == 0) fail("horizon", "must be positive");
    if (patch_len == 0 || patch_len > input_len) fail("patch_len", "must lie in [1, input_len=" + std::to_string(input_len) + "]");
    if (stride == 0) fail("stride", "must be positive");
    if (num_patches() < 2) {
      fail("patch_len", "input_len=" + std::to_string(input_len) + ", patch_len=" + std::to_string(patch_len) +
                            ", stride=" + std::to_string(stride) + " give " + std::to_string(num_patches()) +
                            " patch(es); at least 2 are required");
    }
    if (d_model < 2 || d_model % 2 != 0) fail("d_model", "must be even and >= 2, got " + std::to_string(d_model));
    if (n_experts == 0) fail("n_experts", "must be at least 1");
    if (expert_depth == 0) fail("expert_depth", "must be at least 1");
    if (top_k == 0 || top_k > num_bins()) {
      fail("top_k", "must lie in [1, d_model/2+1=" + std::to_string(num_bins()) + "], got " + std::to_string(top_k));
    }
    if (pool_kernel == 0 || pool_kernel % 2 == 0) fail("pool_kernel", "must be odd and positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout", "must lie in [0, 1)");
    if (!(alpha >= 0.0)) fail("alpha", "must be non-negative");
    if (!(beta >= 0.0)) fail("beta", "must be non-negative");
  }
};

}  // namespace dtaf
