#include "mmfuse/model.hpp"

#include <algorithm>
#include <cmath>

namespace mmfuse {

PatchGrid make_patch_grid(int64_t channels, int64_t t_samples, int64_t patch_len) {
  if (channels <= 0 || t_samples <= 0 || patch_len <= 0)
    throw ConfigError("make_patch_grid: dimensions must be positive");
  PatchGrid g;
  g.channels = channels;
  g.patch_len = patch_len;
  g.t_patches = (t_samples + patch_len - 1) / patch_len;
  g.pad_len = g.t_patches * patch_len - t_samples;
  return g;
}

MaskSpec sample_mask(int64_t n, double ratio, Rng& rng) {
  if (n <= 0) throw ConfigError("sample_mask: n must be positive");
  if (ratio < 0.0 || ratio >= 1.0) throw ConfigError("sample_mask: ratio must be in [0,1)");
  std::vector<int64_t> perm(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
  rng.shuffle(perm);
  const int64_t n_masked = static_cast<int64_t>(std::floor(ratio * static_cast<double>(n)));
  MaskSpec spec;
  spec.n = n;
  spec.ratio = ratio;
  spec.visible_idx.assign(perm.begin(), perm.end() - n_masked);
  spec.masked_idx.assign(perm.end() - n_masked, perm.end());
  std::sort(spec.visible_idx.begin(), spec.visible_idx.end());
  std::sort(spec.masked_idx.begin(), spec.masked_idx.end());
  return spec;
}

std::vector<double> sinusoidal_table(int64_t channels, int64_t t_patches, int64_t dim) {
  if (dim % 4 != 0) throw ConfigError("sinusoidal_table: dim must be divisible by 4");
  const int64_t axis_dim = dim / 2;
  const int64_t pairs = axis_dim / 2;
  std::vector<double> table(static_cast<size_t>(channels * t_patches * dim));
  for (int64_t c = 0; c < channels; ++c)
    for (int64_t t = 0; t < t_patches; ++t) {
      double* row = table.data() + (c * t_patches + t) * dim;
      for (int64_t k = 0; k < pairs; ++k) {
        const double freq =
            std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(axis_dim));
        row[2 * k] = std::sin(static_cast<double>(c) * freq);
        row[2 * k + 1] = std::cos(static_cast<double>(c) * freq);
        row[axis_dim + 2 * k] = std::sin(static_cast<double>(t) * freq);
        row[axis_dim + 2 * k + 1] = std::cos(static_cast<double>(t) * freq);
      }
    }
  return table;
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
  ModelConfig cfg;
  cfg.t_samples = 5000;
  cfg.patch_len = 100;
  cfg.enc_dim = 384;
  cfg.enc_att = 384;
  cfg.enc_depth = 3;
  cfg.enc_heads = 6;
  cfg.dec_dim = 256;
  cfg.dec_att = 256;
  cfg.dec_depth = 2;
  cfg.dec_heads = 8;
  cfg.proj_hidden = 512;
  cfg.proj_out = 128;
  return cfg;
}

}  // namespace mmfuse
