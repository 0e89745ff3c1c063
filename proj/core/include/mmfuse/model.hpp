#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mmfuse/error.hpp"
#include "mmfuse/ops.hpp"
#include "mmfuse/rng.hpp"
#include "mmfuse/tape.hpp"
#include "mmfuse/tensor.hpp"

namespace mmfuse {

// Temporal patch layout of a [C x T] signal. When T is not divisible by the
// patch length the signal is padded by repeating its last sample; pad_len
// records how many samples were appended per lead.
struct PatchGrid {
  int64_t channels = 0;
  int64_t patch_len = 0;
  int64_t t_patches = 0;
  int64_t pad_len = 0;
  int64_t n() const { return channels * t_patches; }
};

PatchGrid make_patch_grid(int64_t channels, int64_t t_samples, int64_t patch_len);

// Visible/masked partition of patch indices 0..n-1. Exactly floor(ratio * n)
// indices are masked; both lists are sorted ascending.
struct MaskSpec {
  int64_t n = 0;
  double ratio = 0;
  std::vector<int64_t> visible_idx;
  std::vector<int64_t> masked_idx;
};

MaskSpec sample_mask(int64_t n, double ratio, Rng& rng);

// Row-major [n x dim] table; rows are indexed n = c * t_patches + t and hold
// the concatenation of a dim/2 sinusoidal encoding of c and one of t, each
// laid out as interleaved sin/cos pairs with frequencies
// 10000^(-2k / (dim/2)). Requires dim divisible by 4.
std::vector<double> sinusoidal_table(int64_t channels, int64_t t_patches, int64_t dim);

struct ModelConfig {
  int64_t channels = 12;
  int64_t t_samples = 1000;
  int64_t patch_len = 20;
  int64_t enc_dim = 32;
  int64_t enc_att = 16;
  int64_t enc_depth = 3;
  int64_t enc_heads = 1;
  int64_t mlp_ratio = 4;
  int64_t dec_dim = 32;
  int64_t dec_att = 16;
  int64_t dec_depth = 1;
  int64_t dec_heads = 1;
  int64_t proj_hidden = 128;
  int64_t proj_out = 64;
  int64_t img_in_channels = 3;
  int64_t img_size = 64;
  std::vector<int64_t> img_channels = {32, 64, 128, 128};
  int64_t head_out = 2;

  // Benchtop geometry: 10 s of 12-lead signal at 100 Hz, 64x64 images.
  static ModelConfig desk();
  // Full-scale geometry: 10 s at 500 Hz, patch length 100, encoder 384x3x6.
  static ModelConfig paper();

  int64_t img_dim() const { return img_channels.back(); }
  int64_t img_grid_side() const {
    int64_t side = img_size;
    for (size_t s = 0; s < img_channels.size(); ++s) side = side / 2;
    return side;
  }
};

// Insertion-ordered named parameter tensors. Non-trainable entries hold
// derived constants (positional tables) that ship with checkpoints but are
// excluded from optimization and gradient checks.
template <typename T>
class ParamStore {
 public:
  struct Item {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;
  };

  Tensor<T>& add(const std::string& name, Tensor<T> t, bool trainable = true) {
    if (has(name)) throw ConfigError("ParamStore: duplicate parameter " + name);
    items_.push_back(Item{name, std::move(t), trainable});
    return items_.back().tensor;
  }

  bool has(const std::string& name) const {
    for (const Item& it : items_)
      if (it.name == name) return true;
    return false;
  }

  const Tensor<T>& at(const std::string& name) const {
    for (const Item& it : items_)
      if (it.name == name) return it.tensor;
    throw ConfigError("ParamStore: unknown parameter " + name);
  }

  Tensor<T>& at(const std::string& name) {
    for (Item& it : items_)
      if (it.name == name) return it.tensor;
    throw ConfigError("ParamStore: unknown parameter " + name);
  }

  const std::vector<Item>& items() const { return items_; }
  std::vector<Item>& items() { return items_; }

  int64_t count_with_prefix(const std::string& prefix, bool trainable_only = true) const {
    int64_t total = 0;
    for (const Item& it : items_) {
      if (trainable_only && !it.trainable) continue;
      if (it.name.rfind(prefix, 0) == 0) total += it.tensor.numel();
    }
    return total;
  }

 private:
  std::vector<Item> items_;
};

namespace detail {

template <typename T>
void add_block_params(ParamStore<T>& params, const std::string& prefix, int64_t dim,
                      int64_t att, int64_t mlp_ratio, Rng& rng) {
  const T sd = T(0.02);
  params.add(prefix + ".ln1.g", Tensor<T>::full({dim}, T(1)));
  params.add(prefix + ".ln1.b", Tensor<T>::zeros({dim}));
  params.add(prefix + ".wq", Tensor<T>::randn({dim, att}, rng, sd));
  params.add(prefix + ".bq", Tensor<T>::zeros({att}));
  params.add(prefix + ".wk", Tensor<T>::randn({dim, att}, rng, sd));
  params.add(prefix + ".bk", Tensor<T>::zeros({att}));
  params.add(prefix + ".wv", Tensor<T>::randn({dim, att}, rng, sd));
  params.add(prefix + ".bv", Tensor<T>::zeros({att}));
  params.add(prefix + ".wo", Tensor<T>::randn({att, dim}, rng, sd));
  params.add(prefix + ".bo", Tensor<T>::zeros({dim}));
  params.add(prefix + ".ln2.g", Tensor<T>::full({dim}, T(1)));
  params.add(prefix + ".ln2.b", Tensor<T>::zeros({dim}));
  params.add(prefix + ".mlp.w1", Tensor<T>::randn({dim, dim * mlp_ratio}, rng, sd));
  params.add(prefix + ".mlp.b1", Tensor<T>::zeros({dim * mlp_ratio}));
  params.add(prefix + ".mlp.w2", Tensor<T>::randn({dim * mlp_ratio, dim}, rng, sd));
  params.add(prefix + ".mlp.b2", Tensor<T>::zeros({dim}));
}

template <typename T>
Tensor<T> positional_tensor(int64_t channels, int64_t t_patches, int64_t dim) {
  const std::vector<double> table = sinusoidal_table(channels, t_patches, dim);
  std::vector<T> cast(table.size());
  for (size_t i = 0; i < table.size(); ++i) cast[i] = static_cast<T>(table[i]);
  return Tensor<T>::from_vector({channels * t_patches, dim}, std::move(cast));
}

}  // namespace detail

template <typename T>
struct ModelState {
  ModelConfig cfg;
  PatchGrid grid;
  ParamStore<T> params;

  static ModelState init(const ModelConfig& cfg, uint64_t seed) {
    if (cfg.enc_dim % 4 != 0 || cfg.dec_dim % 4 != 0)
      throw ConfigError("ModelState: encoder and decoder dims must be divisible by 4");
    if (cfg.enc_att % cfg.enc_heads != 0 || cfg.dec_att % cfg.dec_heads != 0)
      throw ConfigError("ModelState: attention width must be divisible by head count");
    if (cfg.img_grid_side() < 1)
      throw ConfigError("ModelState: image too small for the conv stage count");

    ModelState st;
    st.cfg = cfg;
    st.grid = make_patch_grid(cfg.channels, cfg.t_samples, cfg.patch_len);

    Rng rng = derive_rng(seed, {hash_str("model_init")});
    ParamStore<T>& p = st.params;
    const T sd = T(0.02);
    const int64_t D = cfg.enc_dim, DD = cfg.dec_dim, P = cfg.patch_len;
    const int64_t N = st.grid.n();

    p.add("patch_proj.w", Tensor<T>::randn({P, D}, rng, sd));
    p.add("patch_proj.b", Tensor<T>::zeros({D}));
    p.add("pos.enc", detail::positional_tensor<T>(cfg.channels, st.grid.t_patches, D),
          /*trainable=*/false);
    p.add("pos.dec", detail::positional_tensor<T>(cfg.channels, st.grid.t_patches, DD),
          /*trainable=*/false);
    for (int64_t k = 0; k < cfg.enc_depth; ++k)
      detail::add_block_params(p, "enc." + std::to_string(k), D, cfg.enc_att, cfg.mlp_ratio, rng);
    p.add("enc.ln.g", Tensor<T>::full({D}, T(1)));
    p.add("enc.ln.b", Tensor<T>::zeros({D}));

    p.add("dec.in.w", Tensor<T>::randn({D, DD}, rng, sd));
    p.add("dec.in.b", Tensor<T>::zeros({DD}));
    p.add("dec.mask_token", Tensor<T>::randn({1, DD}, rng, sd));
    for (int64_t k = 0; k < cfg.dec_depth; ++k)
      detail::add_block_params(p, "dec." + std::to_string(k), DD, cfg.dec_att, cfg.mlp_ratio, rng);
    p.add("dec.ln.g", Tensor<T>::full({DD}, T(1)));
    p.add("dec.ln.b", Tensor<T>::zeros({DD}));
    p.add("dec.head.w", Tensor<T>::randn({DD, P}, rng, sd));
    p.add("dec.head.b", Tensor<T>::zeros({P}));

    p.add("proj_s.w1", Tensor<T>::randn({D, cfg.proj_hidden}, rng, sd));
    p.add("proj_s.b1", Tensor<T>::zeros({cfg.proj_hidden}));
    p.add("proj_s.w2", Tensor<T>::randn({cfg.proj_hidden, cfg.proj_out}, rng, sd));
    p.add("proj_s.b2", Tensor<T>::zeros({cfg.proj_out}));

    int64_t in_ch = cfg.img_in_channels;
    for (size_t s = 0; s < cfg.img_channels.size(); ++s) {
      const int64_t out_ch = cfg.img_channels[s];
      const std::string prefix = "img." + std::to_string(s);
      p.add(prefix + ".w", Tensor<T>::randn({in_ch * 9, out_ch}, rng, sd));
      p.add(prefix + ".b", Tensor<T>::zeros({out_ch}));
      in_ch = out_ch;
    }

    p.add("proj_i.w1", Tensor<T>::randn({cfg.img_dim(), cfg.proj_hidden}, rng, sd));
    p.add("proj_i.b1", Tensor<T>::zeros({cfg.proj_hidden}));
    p.add("proj_i.w2", Tensor<T>::randn({cfg.proj_hidden, cfg.proj_out}, rng, sd));
    p.add("proj_i.b2", Tensor<T>::zeros({cfg.proj_out}));

    p.add("pool.q", Tensor<T>::randn({1, D}, rng, sd));
    p.add("pool.wk", Tensor<T>::randn({D, D}, rng, sd));
    p.add("pool.bk", Tensor<T>::zeros({D}));
    p.add("pool.wv", Tensor<T>::randn({D, D}, rng, sd));
    p.add("pool.bv", Tensor<T>::zeros({D}));
    p.add("pool.wo", Tensor<T>::randn({D, D}, rng, sd));
    p.add("pool.bo", Tensor<T>::zeros({D}));

    p.add("head.w", Tensor<T>::randn({D, cfg.head_out}, rng, sd));
    p.add("head.b", Tensor<T>::zeros({cfg.head_out}));
    return st;
  }
};

// Splits a [C x T] signal into [N x P] rows in channel-major order: row
// c * t_patches + t holds samples[c, t*P .. (t+1)*P), with the pad region
// repeating the lead's final sample.
template <typename T>
Tensor<T> patchify(const Tensor<T>& samples, const PatchGrid& grid) {
  if (samples.rank() != 2 || samples.dim(0) != grid.channels ||
      samples.dim(1) + grid.pad_len != grid.t_patches * grid.patch_len)
    throw DataError("patchify: samples shape does not match the patch grid");
  const int64_t t_in = samples.dim(1);
  const int64_t P = grid.patch_len;
  Tensor<T> out = Tensor<T>::zeros({grid.n(), P});
  const T* src = samples.data();
  T* dst = out.data();
  for (int64_t c = 0; c < grid.channels; ++c)
    for (int64_t t = 0; t < grid.t_patches; ++t)
      for (int64_t k = 0; k < P; ++k) {
        const int64_t s = t * P + k;
        dst[(c * grid.t_patches + t) * P + k] =
            src[c * t_in + (s < t_in ? s : t_in - 1)];
      }
  return out;
}

// Inverse of patchify up to the pad region, which is dropped.
template <typename T>
Tensor<T> unpatchify(const Tensor<T>& patches, const PatchGrid& grid) {
  if (patches.rank() != 2 || patches.dim(0) != grid.n() || patches.dim(1) != grid.patch_len)
    throw DataError("unpatchify: patch matrix does not match the grid");
  const int64_t t_out = grid.t_patches * grid.patch_len - grid.pad_len;
  Tensor<T> out = Tensor<T>::zeros({grid.channels, t_out});
  const T* src = patches.data();
  T* dst = out.data();
  for (int64_t c = 0; c < grid.channels; ++c)
    for (int64_t t = 0; t < grid.t_patches; ++t)
      for (int64_t k = 0; k < grid.patch_len; ++k) {
        const int64_t s = t * grid.patch_len + k;
        if (s < t_out) dst[c * t_out + s] = src[(c * grid.t_patches + t) * grid.patch_len + k];
      }
  return out;
}

// Projects already-gathered patch rows to the model dim and adds the
// positional rows for the given grid positions. Gathering before embedding
// keeps masked patches out of the encoder entirely.
template <typename T>
Tensor<T> embed_rows(Tape<T>& tape, const ModelState<T>& st, const Tensor<T>& patch_rows,
                     const std::vector<int64_t>& positions) {
  Tensor<T> x = ops::add_bias(tape, ops::matmul(tape, patch_rows, st.params.at("patch_proj.w")),
                              st.params.at("patch_proj.b"));
  Tensor<T> pos = ops::gather_rows(tape, st.params.at("pos.enc"), positions);
  return ops::add(tape, x, pos);
}

template <typename T>
Tensor<T> embed_patches(Tape<T>& tape, const ModelState<T>& st, const Tensor<T>& patches) {
  std::vector<int64_t> all(static_cast<size_t>(patches.dim(0)));
  for (size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int64_t>(i);
  return embed_rows(tape, st, patches, all);
}

// One pre-norm transformer block: x + O(attention(LN(x))) then x + MLP(LN(x)).
// A nonzero drop_path gates each residual branch with a shared per-call draw.
template <typename T>
Tensor<T> transformer_block(Tape<T>& tape, const ModelState<T>& st, const std::string& prefix,
                            const Tensor<T>& x, int64_t heads, T drop_path_rate = T(0),
                            Rng* rng = nullptr) {
  const ParamStore<T>& p = st.params;
  Tensor<T> h = ops::layer_norm(tape, x, p.at(prefix + ".ln1.g"), p.at(prefix + ".ln1.b"));
  Tensor<T> q = ops::add_bias(tape, ops::matmul(tape, h, p.at(prefix + ".wq")), p.at(prefix + ".bq"));
  Tensor<T> k = ops::add_bias(tape, ops::matmul(tape, h, p.at(prefix + ".wk")), p.at(prefix + ".bk"));
  Tensor<T> v = ops::add_bias(tape, ops::matmul(tape, h, p.at(prefix + ".wv")), p.at(prefix + ".bv"));
  Tensor<T> a = ops::attention(tape, q, k, v, heads);
  a = ops::add_bias(tape, ops::matmul(tape, a, p.at(prefix + ".wo")), p.at(prefix + ".bo"));
  if (drop_path_rate > T(0)) a = ops::drop_path(tape, a, drop_path_rate, *rng);
  Tensor<T> y = ops::add(tape, x, a);
  Tensor<T> h2 = ops::layer_norm(tape, y, p.at(prefix + ".ln2.g"), p.at(prefix + ".ln2.b"));
  Tensor<T> m = ops::add_bias(tape, ops::matmul(tape, h2, p.at(prefix + ".mlp.w1")),
                              p.at(prefix + ".mlp.b1"));
  m = ops::gelu(tape, m);
  m = ops::add_bias(tape, ops::matmul(tape, m, p.at(prefix + ".mlp.w2")), p.at(prefix + ".mlp.b2"));
  if (drop_path_rate > T(0)) m = ops::drop_path(tape, m, drop_path_rate, *rng);
  return ops::add(tape, y, m);
}

// Encoder stack over embedded tokens, final layer norm included.
template <typename T>
Tensor<T> encode_tokens(Tape<T>& tape, const ModelState<T>& st, const Tensor<T>& tokens,
                        T drop_path_rate = T(0), Rng* rng = nullptr) {
  Tensor<T> x = tokens;
  for (int64_t k = 0; k < st.cfg.enc_depth; ++k)
    x = transformer_block(tape, st, "enc." + std::to_string(k), x, st.cfg.enc_heads,
                          drop_path_rate, rng);
  return ops::layer_norm(tape, x, st.params.at("enc.ln.g"), st.params.at("enc.ln.b"));
}

// Embeds and encodes only the visible patches of a masked sample.
template <typename T>
Tensor<T> encode_visible(Tape<T>& tape, const ModelState<T>& st, const Tensor<T>& patches,
                         const MaskSpec& mask, T drop_path_rate = T(0), Rng* rng = nullptr) {
  Tensor<T> vis = ops::gather_rows(tape, patches, mask.visible_idx);
  Tensor<T> tokens = embed_rows(tape, st, vis, mask.visible_idx);
  return encode_tokens(tape, st, tokens, drop_path_rate, rng);
}

// Reconstructs all N patches from encoded visible tokens: project to the
// decoder dim, place the shared mask token at masked positions, re-add
// positional rows for every position, run the decoder stack, and map each
// token to P samples.
template <typename T>
Tensor<T> decode(Tape<T>& tape, const ModelState<T>& st, const Tensor<T>& encoded,
                 const MaskSpec& mask) {
  const ParamStore<T>& p = st.params;
  if (static_cast<int64_t>(mask.visible_idx.size()) != encoded.dim(0))
    throw ShapeError("decode: encoded rows do not match the visible index list");
  Tensor<T> y = ops::add_bias(tape, ops::matmul(tape, encoded, p.at("dec.in.w")), p.at("dec.in.b"));
  Tensor<T> full = ops::assemble_rows(tape, mask.n, y, mask.visible_idx, p.at("dec.mask_token"));
  full = ops::add(tape, full, p.at("pos.dec"));
  for (int64_t k = 0; k < st.cfg.dec_depth; ++k)
    full = transformer_block(tape, st, "dec." + std::to_string(k), full, st.cfg.dec_heads);
  full = ops::layer_norm(tape, full, p.at("dec.ln.g"), p.at("dec.ln.b"));
  return ops::add_bias(tape, ops::matmul(tape, full, p.at("dec.head.w")), p.at("dec.head.b"));
}

// Convolutional image encoder: stages of 3x3 stride-2 zero-padded
// convolutions expressed as im2col + matmul, GELU between stages, linear
// final stage. Returns the [positions x channels] feature grid (rows raster
// scan the output cells) and its spatial mean.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> image_encode(Tape<T>& tape, const ModelState<T>& st,
                                             const Tensor<T>& pixels) {
  const ModelConfig& cfg = st.cfg;
  if (pixels.rank() != 3 || pixels.dim(0) != cfg.img_in_channels ||
      pixels.dim(1) != cfg.img_size || pixels.dim(2) != cfg.img_size)
    throw ConfigError("image_encode: pixels must be [" + std::to_string(cfg.img_in_channels) +
                      " x " + std::to_string(cfg.img_size) + " x " + std::to_string(cfg.img_size) +
                      "]");
  Tensor<T> x = pixels;
  int64_t side = cfg.img_size;
  for (size_t s = 0; s < cfg.img_channels.size(); ++s) {
    const std::string prefix = "img." + std::to_string(s);
    Tensor<T> cols = ops::im2col(tape, x, 3, 2, 1);
    Tensor<T> y = ops::add_bias(tape, ops::matmul(tape, cols, st.params.at(prefix + ".w")),
                                st.params.at(prefix + ".b"));
    if (s + 1 < cfg.img_channels.size()) y = ops::gelu(tape, y);
    side = side / 2;
    if (s + 1 < cfg.img_channels.size()) {
      Tensor<T> t = ops::transpose(tape, y);
      x = ops::reshape(tape, t, {cfg.img_channels[s], side, side});
    } else {
      x = y;
    }
  }
  Tensor<T> pooled = ops::mean_rows(tape, x);
  return {x, pooled};
}

enum class Modality { signal, image };

// Two-layer projector followed by row normalization onto the unit sphere.
template <typename T>
Tensor<T> project(Tape<T>& tape, const ModelState<T>& st, const Tensor<T>& rep, Modality which) {
  const std::string g = which == Modality::signal ? "proj_s" : "proj_i";
  const ParamStore<T>& p = st.params;
  Tensor<T> h = ops::add_bias(tape, ops::matmul(tape, rep, p.at(g + ".w1")), p.at(g + ".b1"));
  h = ops::gelu(tape, h);
  h = ops::add_bias(tape, ops::matmul(tape, h, p.at(g + ".w2")), p.at(g + ".b2"));
  return ops::l2_normalize_rows(tape, h);
}

// Pools [N x D] tokens to [1 x D] with a single learned query attending over
// key/value projections of the tokens.
template <typename T>
Tensor<T> attention_pool(Tape<T>& tape, const ModelState<T>& st, const Tensor<T>& tokens) {
  const ParamStore<T>& p = st.params;
  Tensor<T> k = ops::add_bias(tape, ops::matmul(tape, tokens, p.at("pool.wk")), p.at("pool.bk"));
  Tensor<T> v = ops::add_bias(tape, ops::matmul(tape, tokens, p.at("pool.wv")), p.at("pool.bv"));
  Tensor<T> o = ops::attention(tape, p.at("pool.q"), k, v, st.cfg.enc_heads);
  return ops::add_bias(tape, ops::matmul(tape, o, p.at("pool.wo")), p.at("pool.bo"));
}

// Task head over a pooled representation: [1 x D] -> [1 x head_out].
template <typename T>
Tensor<T> head_forward(Tape<T>& tape, const ModelState<T>& st, const Tensor<T>& pooled) {
  return ops::add_bias(tape, ops::matmul(tape, pooled, st.params.at("head.w")),
                       st.params.at("head.b"));
}

}  // namespace mmfuse
