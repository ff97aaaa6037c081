// Kernel benchmark: parallel kernels against their serial references, plus
// one end-to-end training step. Verifies bit-equality while timing.

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "wm/corpus.hpp"
#include "wm/kernels.hpp"
#include "wm/model.hpp"
#include "wm/optim.hpp"
#include "wm/rng.hpp"
#include "wm/textgen.hpp"
#include "wm/training.hpp"

using namespace wm;

namespace {

using Clock = std::chrono::steady_clock;

double time_ms(const std::function<void()>& fn, int reps) {
  fn();  // warm
  const auto t0 = Clock::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto t1 = Clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

std::vector<float> rand_vec(size_t n, uint64_t seed) {
  std::vector<float> v(n);
  SplitMix64 rng(seed);
  rng.fill_uniform<float>(v, -1.0, 1.0);
  return v;
}

void row(const char* name, double serial_ms, double parallel_ms, double gflop, bool equal) {
  std::printf("%-28s serial %8.3f ms   parallel %8.3f ms   speedup %4.2fx", name, serial_ms, parallel_ms,
              serial_ms / parallel_ms);
  if (gflop > 0) std::printf("   %6.2f GFLOP/s", gflop / (parallel_ms * 1e-3) / 1e9);
  std::printf("   %s\n", equal ? "bit-equal" : "MISMATCH");
}

}  // namespace

int main() {
  std::printf("threads: %d\n\n", kernels::max_threads());

  {
    const int64_t m = 1024, k = 128, n = 516;
    auto a = rand_vec(static_cast<size_t>(m * k), 1);
    auto b = rand_vec(static_cast<size_t>(k * n), 2);
    std::vector<float> cp(static_cast<size_t>(m * n)), cs(cp);
    const double ts = time_ms([&] { kernels::gemm_nn_serial(a.data(), b.data(), cs.data(), m, k, n, false); }, 20);
    const double tp = time_ms([&] { kernels::gemm_nn(a.data(), b.data(), cp.data(), m, k, n); }, 20);
    row("gemm_nn 1024x128x516", ts, tp, 2.0 * m * k * n, cp == cs);
  }
  {
    const int64_t rows = 1024, cols = 259;
    auto x = rand_vec(static_cast<size_t>(rows * cols), 3);
    auto xs = x, xp = x;
    const double ts = time_ms([&] { xs = x; kernels::log_softmax_rows_serial(xs.data(), rows, cols); }, 20);
    const double tp = time_ms([&] { xp = x; kernels::log_softmax_rows(xp.data(), rows, cols); }, 20);
    row("log_softmax 1024x259", ts, tp, 0, xp == xs);
  }
  {
    const int64_t rows = 1024, cols = 128;
    auto x = rand_vec(static_cast<size_t>(rows * cols), 4);
    auto gain = rand_vec(static_cast<size_t>(cols), 5);
    auto bias = rand_vec(static_cast<size_t>(cols), 6);
    std::vector<float> yp(x.size()), ys(x.size());
    const double ts =
        time_ms([&] { kernels::layer_norm_rows_serial(x.data(), gain.data(), bias.data(), ys.data(), rows, cols, 1e-5); }, 50);
    const double tp =
        time_ms([&] { kernels::layer_norm_rows(x.data(), gain.data(), bias.data(), yp.data(), rows, cols, 1e-5); }, 50);
    row("layer_norm 1024x128", ts, tp, 0, yp == ys);
  }
  {
    const int64_t B = 8, T = 128, H = 4, C = 128;
    auto q = rand_vec(static_cast<size_t>(B * T * C), 7);
    auto k = rand_vec(static_cast<size_t>(B * T * C), 8);
    auto v = rand_vec(static_cast<size_t>(B * T * C), 9);
    std::vector<float> sc(static_cast<size_t>(B * H * T * T));
    std::vector<float> op(q.size()), os(q.size());
    const double ts = time_ms(
        [&] { kernels::attention_forward_serial(q.data(), k.data(), v.data(), sc.data(), os.data(), B, T, H, C); }, 10);
    const double tp =
        time_ms([&] { kernels::attention_forward(q.data(), k.data(), v.data(), sc.data(), op.data(), B, T, H, C); }, 10);
    row("attention 8x128 h4 d128", ts, tp, 0, op == os);
  }

  // one full watermark-training step at the default desk scale
  {
    auto text = synth_text(1 << 20, 99);
    auto corpus = Corpus::from_bytes(text, 0.8, 0.1, 99);
    LMConfig cfg;
    auto teacher = CausalLM::init(cfg, 1);
    teacher.set_trainable(false);
    auto student = teacher.clone();
    student.set_trainable(true);
    WatermarkPolicy policy;
    policy.embedder = NGramEmbedder::init(2, 1, 64, cfg.vocab);
    policy.mapper = MappingMLP::init(64, 128, cfg.vocab, 3);
    TrainConfig tc;
    tc.steps = 1;
    auto opt = AdamWState::init(student.trainable_params(), tc.max_lr);
    BatchIterator batches(corpus, Split::train, tc.seq_len, tc.batch, 1);
    auto wm_batch = batches.next();
    const auto prompts = corpus.sample_prompts(Split::train, tc.anti_batch, tc.anti_prompt_len, 5);
    const auto anti = gen_anti_batch(teacher, policy, prompts, tc.anti_len, 6);
    const double ms = time_ms([&] { fpl_step(student, teacher, policy, wm_batch, anti, tc, opt, 1.0); }, 3);
    std::printf("\nfpl_step (B=%d, L=%lld, d=%d): %.1f ms/step -> %.1f min per 2000 steps\n", tc.batch,
                static_cast<long long>(tc.seq_len), cfg.d_model, ms, ms * 2000 / 60000.0);
  }
  return 0;
}
