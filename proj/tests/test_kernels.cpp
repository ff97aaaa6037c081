#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <vector>

#include "wm/kernels.hpp"
#include "wm/rng.hpp"

using namespace wm;

namespace {

std::vector<float> random_vec(size_t n, uint64_t seed) {
  std::vector<float> v(n);
  SplitMix64 rng(seed);
  rng.fill_uniform<float>(v, -1.0, 1.0);
  return v;
}

}  // namespace

TEST_CASE("parallel gemm variants are bit-identical to the serial reference") {
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, {3, 5, 7}, {64, 128, 96}, {200, 64, 300}}) {
    auto a = random_vec(static_cast<size_t>(m * k), 1);
    auto b = random_vec(static_cast<size_t>(k * n), 2);
    std::vector<float> c_par(static_cast<size_t>(m * n)), c_ser(c_par);

    for (bool accumulate : {false, true}) {
      kernels::gemm_nn(a.data(), b.data(), c_par.data(), m, k, n, accumulate);
      kernels::gemm_nn_serial(a.data(), b.data(), c_ser.data(), m, k, n, accumulate);
      CHECK(c_par == c_ser);

      auto bt = random_vec(static_cast<size_t>(n * k), 3);
      kernels::gemm_nt(a.data(), bt.data(), c_par.data(), m, k, n, accumulate);
      kernels::gemm_nt_serial(a.data(), bt.data(), c_ser.data(), m, k, n, accumulate);
      CHECK(c_par == c_ser);

      auto at = random_vec(static_cast<size_t>(k * m), 4);
      kernels::gemm_tn(at.data(), b.data(), c_par.data(), m, k, n, accumulate);
      kernels::gemm_tn_serial(at.data(), b.data(), c_ser.data(), m, k, n, accumulate);
      CHECK(c_par == c_ser);
    }
  }
}

TEST_CASE("gemm accumulate adds onto existing output") {
  auto a = random_vec(6, 5);
  auto b = random_vec(6, 6);
  std::vector<float> base(4, 1.f), once(4, 0.f);
  kernels::gemm_nn(a.data(), b.data(), once.data(), 2, 3, 2, false);
  kernels::gemm_nn(a.data(), b.data(), base.data(), 2, 3, 2, true);
  for (int i = 0; i < 4; ++i) CHECK(base[i] == doctest::Approx(1.f + once[i]));
}

TEST_CASE("softmax and log_softmax match their serial references bitwise") {
  const int64_t rows = 300, cols = 259;
  auto x = random_vec(static_cast<size_t>(rows * cols), 7);
  auto y_par = x, y_ser = x;
  kernels::softmax_rows(y_par.data(), rows, cols);
  kernels::softmax_rows_serial(y_ser.data(), rows, cols);
  CHECK(y_par == y_ser);

  y_par = x;
  y_ser = x;
  kernels::log_softmax_rows(y_par.data(), rows, cols);
  kernels::log_softmax_rows_serial(y_ser.data(), rows, cols);
  CHECK(y_par == y_ser);
}

TEST_CASE("softmax rows sum to one") {
  const int64_t rows = 64, cols = 101;
  auto x = random_vec(static_cast<size_t>(rows * cols), 8);
  kernels::softmax_rows(x.data(), rows, cols);
  for (int64_t r = 0; r < rows; ++r) {
    double s = 0;
    for (int64_t j = 0; j < cols; ++j) s += x[static_cast<size_t>(r * cols + j)];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("layer_norm parallel matches serial bitwise") {
  const int64_t rows = 500, cols = 128;
  auto x = random_vec(static_cast<size_t>(rows * cols), 9);
  auto gain = random_vec(static_cast<size_t>(cols), 10);
  auto bias = random_vec(static_cast<size_t>(cols), 11);
  std::vector<float> y_par(x.size()), y_ser(x.size());
  kernels::layer_norm_rows(x.data(), gain.data(), bias.data(), y_par.data(), rows, cols, 1e-5);
  kernels::layer_norm_rows_serial(x.data(), gain.data(), bias.data(), y_ser.data(), rows, cols, 1e-5);
  CHECK(y_par == y_ser);
}

TEST_CASE("attention parallel matches serial bitwise and respects causality") {
  const int64_t B = 3, T = 16, H = 4, C = 32;
  auto q = random_vec(static_cast<size_t>(B * T * C), 12);
  auto k = random_vec(static_cast<size_t>(B * T * C), 13);
  auto v = random_vec(static_cast<size_t>(B * T * C), 14);
  std::vector<float> sc_par(static_cast<size_t>(B * H * T * T)), sc_ser(sc_par);
  std::vector<float> out_par(q.size()), out_ser(q.size());
  kernels::attention_forward(q.data(), k.data(), v.data(), sc_par.data(), out_par.data(), B, T, H, C);
  kernels::attention_forward_serial(q.data(), k.data(), v.data(), sc_ser.data(), out_ser.data(), B, T, H, C);
  CHECK(out_par == out_ser);
  CHECK(sc_par == sc_ser);

  // mutating k/v at a later position leaves earlier outputs untouched
  auto k2 = k;
  auto v2 = v;
  const int64_t tcut = 9;
  for (int64_t c = 0; c < C; ++c) {
    k2[static_cast<size_t>(tcut * C + c)] += 10.f;
    v2[static_cast<size_t>(tcut * C + c)] -= 3.f;
  }
  std::vector<float> out2(q.size());
  kernels::attention_forward(q.data(), k2.data(), v2.data(), sc_par.data(), out2.data(), B, T, H, C);
  for (int64_t t = 0; t < tcut; ++t)
    for (int64_t c = 0; c < C; ++c)
      CHECK(out2[static_cast<size_t>(t * C + c)] == out_par[static_cast<size_t>(t * C + c)]);
}
