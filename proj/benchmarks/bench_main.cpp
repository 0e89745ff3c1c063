#include <benchmark/benchmark.h>

#include <vector>

#include "mmfuse/gemm.hpp"
#include "mmfuse/ops.hpp"
#include "mmfuse/rng.hpp"
#include "mmfuse/tape.hpp"
#include "mmfuse/tensor.hpp"

using namespace mmfuse;

static void BM_gemm(benchmark::State& state) {
  int64_t m = state.range(0), n = state.range(1), k = state.range(2);
  Rng rng(1);
  std::vector<float> a(size_t(m * k)), b(size_t(k * n)), c(size_t(m * n));
  for (auto& v : a) v = float(rng.normal());
  for (auto& v : b) v = float(rng.normal());
  for (auto _ : state) {
    detail::gemm(false, false, m, n, k, 1.f, a.data(), k, b.data(), n, 0.f, c.data(), n);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOP/s"] =
      benchmark::Counter(2.0 * double(m) * double(n) * double(k) * 1e-9,
                         benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_gemm)
    ->Args({600, 600, 32})
    ->Args({300, 300, 32})
    ->Args({240, 240, 32})
    ->Args({600, 32, 32})
    ->Args({600, 128, 32})
    ->Args({600, 32, 128})
    ->Args({256, 256, 128})
    ->Args({1024, 32, 27})
    ->Args({256, 64, 288})
    ->Args({64, 128, 576})
    ->Args({16, 128, 1152});

static void BM_attention_fwd(benchmark::State& state) {
  int64_t n = state.range(0), d = state.range(1), heads = state.range(2);
  Rng rng(2);
  auto q = Tensor<float>::randn({n, d}, rng, 0.5f);
  auto k = Tensor<float>::randn({n, d}, rng, 0.5f);
  auto v = Tensor<float>::randn({n, d}, rng, 0.5f);
  Tape<float> tape;
  tape.set_recording(false);
  for (auto _ : state) {
    auto out = ops::attention(tape, q, k, v, heads);
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_attention_fwd)
    ->Args({600, 32, 4})
    ->Args({300, 32, 4})
    ->Args({240, 32, 4})
    ->Args({120, 32, 4});

// One pre-norm transformer block: qkv projections, fused attention, output
// projection, 2-layer MLP with gelu, residuals; forward plus backward.
static void BM_block_fwd_bwd(benchmark::State& state) {
  int64_t n = state.range(0), d = state.range(1), heads = state.range(2), hidden = d * 4;
  Rng rng(3);
  auto x = Tensor<float>::randn({n, d}, rng, 1.f, true);
  auto wq = Tensor<float>::randn({d, d}, rng, 0.05f, true);
  auto wk = Tensor<float>::randn({d, d}, rng, 0.05f, true);
  auto wv = Tensor<float>::randn({d, d}, rng, 0.05f, true);
  auto wo = Tensor<float>::randn({d, d}, rng, 0.05f, true);
  auto w1 = Tensor<float>::randn({d, hidden}, rng, 0.05f, true);
  auto w2 = Tensor<float>::randn({hidden, d}, rng, 0.05f, true);
  auto g1 = Tensor<float>::full({d}, 1.f, true);
  auto b1 = Tensor<float>::zeros({d}, true);
  auto g2 = Tensor<float>::full({d}, 1.f, true);
  auto b2 = Tensor<float>::zeros({d}, true);
  for (auto _ : state) {
    Tape<float> tape;
    auto h = ops::layer_norm(tape, x, g1, b1);
    auto att = ops::attention(tape, ops::matmul(tape, h, wq), ops::matmul(tape, h, wk),
                              ops::matmul(tape, h, wv), heads);
    auto x1 = ops::add(tape, x, ops::matmul(tape, att, wo));
    auto h2 = ops::layer_norm(tape, x1, g2, b2);
    auto x2 = ops::add(tape, x1, ops::matmul(tape, ops::gelu(tape, ops::matmul(tape, h2, w1)), w2));
    auto loss = ops::mean_all(tape, x2);
    tape.backward(loss);
    benchmark::DoNotOptimize(x2.data());
  }
}
BENCHMARK(BM_block_fwd_bwd)
    ->Args({600, 32, 4})
    ->Args({300, 32, 4})
    ->Args({240, 32, 4})
    ->Args({120, 32, 4})
    ->Args({600, 64, 4})
    ->Args({120, 64, 4});
