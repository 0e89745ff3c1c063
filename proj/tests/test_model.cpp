#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "doctest.h"
#include "mmfuse/error.hpp"
#include "mmfuse/gradcheck.hpp"
#include "mmfuse/model.hpp"
#include "mmfuse/ops.hpp"
#include "mmfuse/rng.hpp"

using mmfuse::MaskSpec;
using mmfuse::ModelConfig;
using mmfuse::ModelState;
using mmfuse::PatchGrid;
using mmfuse::Rng;
using mmfuse::Tape;
using mmfuse::Tensor;

TEST_SUITE("model") {

TEST_CASE("patch grid arithmetic") {
  PatchGrid g = mmfuse::make_patch_grid(12, 5000, 100);
  CHECK(g.t_patches == 50);
  CHECK(g.n() == 600);
  CHECK(g.pad_len == 0);

  g = mmfuse::make_patch_grid(12, 1000, 20);
  CHECK(g.t_patches == 50);
  CHECK(g.n() == 600);

  g = mmfuse::make_patch_grid(3, 1003, 40);
  CHECK(g.t_patches == 26);
  CHECK(g.pad_len == 37);
}

TEST_CASE("patchify round trip and padding") {
  Rng rng(11);
  PatchGrid g = mmfuse::make_patch_grid(4, 60, 10);
  Tensor<double> samples = Tensor<double>::randn({4, 60}, rng, 1.0);
  Tensor<double> patches = mmfuse::patchify(samples, g);
  CHECK(patches.dim(0) == 24);
  CHECK(patches.dim(1) == 10);
  Tensor<double> back = mmfuse::unpatchify(patches, g);
  REQUIRE(back.shape() == samples.shape());
  for (int64_t i = 0; i < samples.numel(); ++i)
    CHECK(back.data()[i] == samples.data()[i]);

  // Channel-major order: row c * t_patches + t.
  CHECK(patches.data()[(2 * 6 + 3) * 10 + 7] == samples.data()[2 * 60 + 37]);

  // Single patch equals the signal.
  PatchGrid g1 = mmfuse::make_patch_grid(1, 10, 10);
  Tensor<double> one = Tensor<double>::randn({1, 10}, rng, 1.0);
  Tensor<double> p1 = mmfuse::patchify(one, g1);
  for (int64_t i = 0; i < 10; ++i) CHECK(p1.data()[i] == one.data()[i]);

  // Pad region repeats the last sample of each lead.
  PatchGrid gp = mmfuse::make_patch_grid(2, 7, 5);
  Tensor<double> short_sig = Tensor<double>::randn({2, 7}, rng, 1.0);
  Tensor<double> pp = mmfuse::patchify(short_sig, gp);
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t k = 2; k < 5; ++k)
      CHECK(pp.data()[(c * 2 + 1) * 5 + k] == short_sig.data()[c * 7 + 6]);

  Tensor<double> wrong = Tensor<double>::zeros({3, 60});
  CHECK_THROWS_AS(mmfuse::patchify(wrong, g), mmfuse::DataError);
}

TEST_CASE("sinusoidal table origin and injectivity") {
  const int64_t dim = 32;
  std::vector<double> table = mmfuse::sinusoidal_table(12, 50, dim);
  // Origin row: all sine slots 0, all cosine slots 1.
  for (int64_t k = 0; k < dim / 4; ++k) {
    CHECK(table[static_cast<size_t>(2 * k)] == 0.0);
    CHECK(table[static_cast<size_t>(2 * k + 1)] == 1.0);
    CHECK(table[static_cast<size_t>(dim / 2 + 2 * k)] == 0.0);
    CHECK(table[static_cast<size_t>(dim / 2 + 2 * k + 1)] == 1.0);
  }

  double min_dist2 = 1e300;
  const int64_t n = 12 * 50;
  for (int64_t a = 0; a < n; ++a)
    for (int64_t b = a + 1; b < n; ++b) {
      double d2 = 0;
      for (int64_t k = 0; k < dim; ++k) {
        const double d = table[static_cast<size_t>(a * dim + k)] -
                         table[static_cast<size_t>(b * dim + k)];
        d2 += d * d;
      }
      min_dist2 = std::min(min_dist2, d2);
    }
  CHECK(std::sqrt(min_dist2) > 1e-6);

  CHECK_THROWS_AS(mmfuse::sinusoidal_table(2, 2, 6), mmfuse::ConfigError);
}

TEST_CASE("embedding of zero patches equals the positional rows") {
  ModelConfig cfg = ModelConfig::desk();
  auto st = ModelState<float>::init(cfg, 3);
  Tape<float> tape;
  tape.set_recording(false);
  Tensor<float> zeros = Tensor<float>::zeros({st.grid.n(), cfg.patch_len});
  Tensor<float> emb = mmfuse::embed_patches(tape, st, zeros);
  const Tensor<float>& pos = st.params.at("pos.enc");
  REQUIRE(emb.shape() == pos.shape());
  for (int64_t i = 0; i < emb.numel(); ++i) CHECK(emb.data()[i] == pos.data()[i]);
}

TEST_CASE("mask sampling partition and counts") {
  Rng rng(21);
  MaskSpec m = mmfuse::sample_mask(600, 0.8, rng);
  CHECK(m.masked_idx.size() == 480);
  CHECK(m.visible_idx.size() == 120);
  CHECK(std::is_sorted(m.visible_idx.begin(), m.visible_idx.end()));
  CHECK(std::is_sorted(m.masked_idx.begin(), m.masked_idx.end()));
  std::vector<char> seen(600, 0);
  for (int64_t i : m.visible_idx) seen[static_cast<size_t>(i)] += 1;
  for (int64_t i : m.masked_idx) seen[static_cast<size_t>(i)] += 1;
  CHECK(std::all_of(seen.begin(), seen.end(), [](char c) { return c == 1; }));

  MaskSpec all_vis = mmfuse::sample_mask(37, 0.0, rng);
  CHECK(all_vis.masked_idx.empty());
  CHECK(all_vis.visible_idx.size() == 37);

  CHECK_THROWS_AS(mmfuse::sample_mask(10, 1.0, rng), mmfuse::ConfigError);
}

TEST_CASE("mask sampling per-index frequency") {
  Rng rng(22);
  const int64_t n = 600;
  std::vector<int> hits(static_cast<size_t>(n), 0);
  const int draws = 10000;
  for (int d = 0; d < draws; ++d) {
    MaskSpec m = mmfuse::sample_mask(n, 0.8, rng);
    for (int64_t i : m.masked_idx) hits[static_cast<size_t>(i)] += 1;
  }
  for (int64_t i = 0; i < n; ++i) {
    const double freq = static_cast<double>(hits[static_cast<size_t>(i)]) / draws;
    CHECK(std::fabs(freq - 0.8) < 0.02);
  }
}

TEST_CASE("encoder output shapes across token counts") {
  ModelConfig cfg;
  cfg.channels = 12;
  cfg.t_samples = 5000;
  cfg.patch_len = 100;
  auto st = ModelState<float>::init(cfg, 5);
  Rng rng(31);
  Tape<float> tape;
  tape.set_recording(false);
  for (int64_t nv : {int64_t(1), int64_t(120), int64_t(600)}) {
    Tensor<float> patches = Tensor<float>::randn({nv, cfg.patch_len}, rng, 1.0f);
    std::vector<int64_t> positions(static_cast<size_t>(nv));
    for (int64_t i = 0; i < nv; ++i) positions[static_cast<size_t>(i)] = i;
    Tensor<float> tokens = mmfuse::embed_rows(tape, st, patches, positions);
    Tensor<float> out = mmfuse::encode_tokens(tape, st, tokens);
    CHECK(out.dim(0) == nv);
    CHECK(out.dim(1) == cfg.enc_dim);
    for (int64_t i = 0; i < out.numel(); ++i) REQUIRE(std::isfinite(out.data()[i]));
  }
}

TEST_CASE("encoder permutation equivariance") {
  ModelConfig cfg = ModelConfig::desk();
  auto st = ModelState<double>::init(cfg, 7);
  Rng rng(41);
  Tape<double> tape;
  tape.set_recording(false);
  const int64_t n = 10;
  Tensor<double> tokens = Tensor<double>::randn({n, cfg.enc_dim}, rng, 1.0);
  Tensor<double> out = mmfuse::encode_tokens(tape, st, tokens);

  std::vector<int64_t> perm(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
  rng.shuffle(perm);
  Tensor<double> permuted = Tensor<double>::zeros({n, cfg.enc_dim});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t k = 0; k < cfg.enc_dim; ++k)
      permuted.data()[i * cfg.enc_dim + k] =
          tokens.data()[perm[static_cast<size_t>(i)] * cfg.enc_dim + k];
  Tensor<double> out_p = mmfuse::encode_tokens(tape, st, permuted);

  double max_err = 0;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t k = 0; k < cfg.enc_dim; ++k)
      max_err = std::max(max_err,
                         std::fabs(out_p.data()[i * cfg.enc_dim + k] -
                                   out.data()[perm[static_cast<size_t>(i)] * cfg.enc_dim + k]));
  CHECK(max_err < 1e-9);

  mmfuse::Tape<double> t2;
  t2.set_recording(false);
  Tensor<double> mean_a = mmfuse::ops::mean_rows(t2, out);
  Tensor<double> mean_b = mmfuse::ops::mean_rows(t2, out_p);
  for (int64_t k = 0; k < cfg.enc_dim; ++k)
    CHECK(std::fabs(mean_a.data()[k] - mean_b.data()[k]) < 1e-9);
}

TEST_CASE("single token block reduces to value path plus mlp") {
  ModelConfig cfg = ModelConfig::desk();
  auto st = ModelState<double>::init(cfg, 9);
  Rng rng(51);
  Tensor<double> x = Tensor<double>::randn({1, cfg.enc_dim}, rng, 1.0);
  Tape<double> tape;
  tape.set_recording(false);
  Tensor<double> got = mmfuse::transformer_block(tape, st, "enc.0", x, cfg.enc_heads);

  // With one token attention weights collapse to 1, so the attention output
  // is exactly the value projection.
  namespace ops = mmfuse::ops;
  const auto& p = st.params;
  Tensor<double> h = ops::layer_norm(tape, x, p.at("enc.0.ln1.g"), p.at("enc.0.ln1.b"));
  Tensor<double> v = ops::add_bias(tape, ops::matmul(tape, h, p.at("enc.0.wv")), p.at("enc.0.bv"));
  Tensor<double> a = ops::add_bias(tape, ops::matmul(tape, v, p.at("enc.0.wo")), p.at("enc.0.bo"));
  Tensor<double> y = ops::add(tape, x, a);
  Tensor<double> h2 = ops::layer_norm(tape, y, p.at("enc.0.ln2.g"), p.at("enc.0.ln2.b"));
  Tensor<double> m = ops::add_bias(tape, ops::matmul(tape, h2, p.at("enc.0.mlp.w1")), p.at("enc.0.mlp.b1"));
  m = ops::gelu(tape, m);
  m = ops::add_bias(tape, ops::matmul(tape, m, p.at("enc.0.mlp.w2")), p.at("enc.0.mlp.b2"));
  Tensor<double> want = ops::add(tape, y, m);

  for (int64_t i = 0; i < got.numel(); ++i)
    CHECK(std::fabs(got.data()[i] - want.data()[i]) < 1e-12);
}

TEST_CASE("decoder mask token reaches only masked rows before mixing") {
  ModelConfig cfg = ModelConfig::desk();
  cfg.dec_depth = 0;
  auto st = ModelState<float>::init(cfg, 13);
  Rng rng(61);
  MaskSpec mask = mmfuse::sample_mask(st.grid.n(), 0.8, rng);
  Tensor<float> encoded =
      Tensor<float>::randn({static_cast<int64_t>(mask.visible_idx.size()), cfg.enc_dim}, rng, 1.0f);

  Tape<float> tape;
  tape.set_recording(false);
  Tensor<float> a = mmfuse::decode(tape, st, encoded, mask);

  Tensor<float>& tok = st.params.at("dec.mask_token");
  for (int64_t i = 0; i < tok.numel(); ++i) tok.data()[i] += 0.5f;
  Tensor<float> b = mmfuse::decode(tape, st, encoded, mask);

  for (int64_t i : mask.visible_idx)
    for (int64_t k = 0; k < cfg.patch_len; ++k)
      CHECK(a.data()[i * cfg.patch_len + k] == b.data()[i * cfg.patch_len + k]);
  int64_t changed = 0;
  for (int64_t i : mask.masked_idx)
    for (int64_t k = 0; k < cfg.patch_len; ++k)
      if (a.data()[i * cfg.patch_len + k] != b.data()[i * cfg.patch_len + k]) ++changed;
  CHECK(changed > 0);
}

TEST_CASE("image encoder grid shape and linearity at zero") {
  ModelConfig cfg = ModelConfig::desk();
  auto st = ModelState<float>::init(cfg, 17);
  Tape<float> tape;
  tape.set_recording(false);

  Tensor<float> zeros = Tensor<float>::zeros({3, 64, 64});
  auto [grid, pooled] = mmfuse::image_encode(tape, st, zeros);
  CHECK(grid.dim(0) == 16);
  CHECK(grid.dim(1) == 128);
  CHECK(pooled.dim(0) == 1);
  CHECK(pooled.dim(1) == 128);
  for (int64_t i = 0; i < grid.numel(); ++i) CHECK(grid.data()[i] == 0.0f);

  Tensor<float> wrong = Tensor<float>::zeros({3, 32, 32});
  CHECK_THROWS_AS(mmfuse::image_encode(tape, st, wrong), mmfuse::ConfigError);
}

TEST_CASE("image encoder impulse shifts the grid argmax") {
  ModelConfig cfg = ModelConfig::desk();
  auto st = ModelState<float>::init(cfg, 19);
  Tape<float> tape;
  tape.set_recording(false);

  auto argmax_cell = [&](int64_t y, int64_t x) {
    Tensor<float> img = Tensor<float>::zeros({3, 64, 64});
    for (int64_t c = 0; c < 3; ++c) img.data()[c * 64 * 64 + y * 64 + x] = 1.0f;
    auto [grid, pooled] = mmfuse::image_encode(tape, st, img);
    (void)pooled;
    int64_t best = 0;
    double best_norm = -1;
    for (int64_t r = 0; r < grid.dim(0); ++r) {
      double norm = 0;
      for (int64_t k = 0; k < grid.dim(1); ++k)
        norm += static_cast<double>(grid.data()[r * grid.dim(1) + k]) *
                grid.data()[r * grid.dim(1) + k];
      if (norm > best_norm) {
        best_norm = norm;
        best = r;
      }
    }
    return best;
  };

  // Impulses at cell centers (multiples of the total stride); shifting by one
  // full downsample step moves the argmax one cell right, then one cell down.
  const int64_t base = argmax_cell(16, 16);
  CHECK(base == 1 * 4 + 1);
  CHECK(argmax_cell(16, 32) == base + 1);
  CHECK(argmax_cell(32, 16) == base + 4);
}

TEST_CASE("projectors normalize and have disjoint parameters") {
  ModelConfig cfg = ModelConfig::desk();
  auto st = ModelState<float>::init(cfg, 23);
  Rng rng(71);
  Tape<float> tape;
  tape.set_recording(false);

  Tensor<float> rep_s = Tensor<float>::randn({5, cfg.enc_dim}, rng, 1.0f);
  Tensor<float> rep_i = Tensor<float>::randn({5, cfg.img_dim()}, rng, 1.0f);
  Tensor<float> zs = mmfuse::project(tape, st, rep_s, mmfuse::Modality::signal);
  Tensor<float> zi = mmfuse::project(tape, st, rep_i, mmfuse::Modality::image);
  CHECK(zs.dim(1) == cfg.proj_out);
  for (const Tensor<float>* z : {&zs, &zi})
    for (int64_t r = 0; r < 5; ++r) {
      double norm = 0;
      for (int64_t k = 0; k < cfg.proj_out; ++k)
        norm += static_cast<double>(z->data()[r * cfg.proj_out + k]) *
                z->data()[r * cfg.proj_out + k];
      CHECK(std::fabs(std::sqrt(norm) - 1.0) < 1e-6);
    }

  // Scaling the input still lands on the unit sphere.
  Tensor<float> doubled = Tensor<float>::zeros(rep_s.shape());
  for (int64_t i = 0; i < rep_s.numel(); ++i) doubled.data()[i] = 2.0f * rep_s.data()[i];
  Tensor<float> zs2 = mmfuse::project(tape, st, doubled, mmfuse::Modality::signal);
  double norm2 = 0;
  for (int64_t k = 0; k < cfg.proj_out; ++k)
    norm2 += static_cast<double>(zs2.data()[k]) * zs2.data()[k];
  CHECK(std::fabs(std::sqrt(norm2) - 1.0) < 1e-6);

  // Mutating the signal projector leaves image projections bit-identical.
  st.params.at("proj_s.w1").data()[0] += 1.0f;
  Tensor<float> zi2 = mmfuse::project(tape, st, rep_i, mmfuse::Modality::image);
  for (int64_t i = 0; i < zi.numel(); ++i) CHECK(zi.data()[i] == zi2.data()[i]);
}

TEST_CASE("attention pool emits one pooled row") {
  ModelConfig cfg = ModelConfig::desk();
  auto st = ModelState<float>::init(cfg, 29);
  Rng rng(81);
  Tape<float> tape;
  tape.set_recording(false);
  Tensor<float> tokens = Tensor<float>::randn({60, cfg.enc_dim}, rng, 1.0f);
  Tensor<float> pooled = mmfuse::attention_pool(tape, st, tokens);
  CHECK(pooled.dim(0) == 1);
  CHECK(pooled.dim(1) == cfg.enc_dim);
  Tensor<float> logits = mmfuse::head_forward(tape, st, pooled);
  CHECK(logits.dim(1) == cfg.head_out);
}

TEST_CASE("signal encoder parameter count at full-scale dims") {
  auto st = ModelState<float>::init(ModelConfig::paper(), 31);
  const int64_t count = st.params.count_with_prefix("patch_proj.") +
                        st.params.count_with_prefix("enc.");
  // Blocks: 4 projection matrices with bias, 2 layer norms, 2 MLP layers.
  const int64_t d = 384, mlp = 4 * 384;
  const int64_t per_block = 4 * (d * d + d) + 4 * d + (d * mlp + mlp) + (mlp * d + d);
  const int64_t want = (100 * d + d) + 3 * per_block + 2 * d;
  CHECK(count == want);
  CHECK(count > 4000000);
  CHECK(count < 6000000);
}

TEST_CASE("masked autoencoder end to end gradient check") {
  ModelConfig cfg;
  cfg.channels = 2;
  cfg.t_samples = 20;
  cfg.patch_len = 5;
  cfg.enc_dim = 8;
  cfg.enc_att = 8;
  cfg.enc_depth = 1;
  cfg.enc_heads = 2;
  cfg.dec_dim = 8;
  cfg.dec_att = 8;
  cfg.dec_depth = 1;
  cfg.dec_heads = 2;
  auto st = ModelState<double>::init(cfg, 37);

  Rng rng(91);
  Tensor<double> samples = Tensor<double>::randn({2, 20}, rng, 1.0);
  Tensor<double> patches = mmfuse::patchify(samples, st.grid);
  Tensor<double> target = mmfuse::patchify(samples, st.grid);
  MaskSpec mask = mmfuse::sample_mask(st.grid.n(), 0.5, rng);

  std::vector<Tensor<double>> leaves;
  for (auto& item : st.params.items())
    if (item.trainable) leaves.push_back(item.tensor);

  auto loss_fn = [&](Tape<double>& tape) {
    Tensor<double> enc = mmfuse::encode_visible(tape, st, patches, mask);
    Tensor<double> rec = mmfuse::decode(tape, st, enc, mask);
    return mmfuse::ops::mse(tape, rec, target);
  };
  auto res = mmfuse::grad_check(leaves, loss_fn);
  CAPTURE(res.worst);
  CHECK(res.max_rel_err < 1e-4);
}

}  // TEST_SUITE
