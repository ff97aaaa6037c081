#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "oracles.hpp"
#include "wm/gradcheck.hpp"
#include "wm/graph.hpp"
#include "wm/optim.hpp"
#include "wm/rng.hpp"

using namespace wm;

TEST_CASE("matmul value examples") {
  Graph g;
  auto eye = Graph::leaf(Tensor::from({2, 2}, {1, 0, 0, 1}));
  auto b = Graph::leaf(Tensor::from({2, 2}, {5, 6, 7, 8}));
  CHECK(g.matmul(eye, b)->data == b->data);

  auto a = Graph::leaf(Tensor::from({2, 2}, {1, 2, 3, 4}));
  auto c = g.matmul(a, b);
  CHECK(c->data == std::vector<float>{19, 22, 43, 50});

  auto zero = Graph::leaf(Tensor::zeros({2, 2}));
  CHECK(g.matmul(zero, b)->data == std::vector<float>{0, 0, 0, 0});

  auto bad = Graph::leaf(Tensor::zeros({3, 2}));
  CHECK_THROWS_AS((void)g.matmul(a, bad), std::invalid_argument);
}

TEST_CASE("log_softmax examples") {
  Graph g;
  const int V = 7;
  auto uniform = Graph::leaf(Tensor::from({1, V}, std::vector<float>(V, 2.5f)));
  auto out = g.log_softmax(uniform);
  for (float v : out->data) CHECK(v == doctest::Approx(-std::log(static_cast<double>(V))).epsilon(1e-6));

  // shift invariance
  auto x = Graph::leaf(Tensor::from({1, 3}, {0.3f, -1.2f, 2.0f}));
  auto xs = Graph::leaf(Tensor::from({1, 3}, {0.3f + 5.f, -1.2f + 5.f, 2.0f + 5.f}));
  auto ox = g.log_softmax(x);
  auto oxs = g.log_softmax(xs);
  for (int i = 0; i < 3; ++i) CHECK(ox->data[i] == doctest::Approx(oxs->data[i]).epsilon(1e-6));

  // [0, ln 3] -> [-ln 4, ln(3/4)]
  auto h = Graph::leaf(Tensor::from({1, 2}, {0.f, std::log(3.f)}));
  auto oh = g.log_softmax(h);
  CHECK(oh->data[0] == doctest::Approx(-std::log(4.0)).epsilon(1e-6));
  CHECK(oh->data[1] == doctest::Approx(std::log(0.75)).epsilon(1e-6));

  auto bad = Graph::leaf(Tensor::from({1, 2}, {std::numeric_limits<float>::infinity(), 0.f}));
  CHECK_THROWS((void)g.log_softmax(bad));
}

TEST_CASE("kl_from_logits examples") {
  Graph g;
  auto p = Graph::leaf(Tensor::from({1, 4}, {0.1f, -0.3f, 1.2f, 0.0f}));
  CHECK(g.kl_rows_mean(p, p)->data[0] == doctest::Approx(0.0).epsilon(1e-9));

  // heavy one-hot limit: p = [20, 0], q uniform -> approaches ln 2
  auto ph = Graph::leaf(Tensor::from({1, 2}, {20.f, 0.f}));
  auto qh = Graph::leaf(Tensor::from({1, 2}, {0.f, 0.f}));
  CHECK(g.kl_rows_mean(ph, qh)->data[0] == doctest::Approx(std::log(2.0)).epsilon(1e-6));

  // non-negativity on random pairs, against the direct-summation oracle
  SplitMix64 rng(99);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> pl(8), ql(8);
    rng.fill_uniform<double>(pl, -2, 2);
    rng.fill_uniform<double>(ql, -2, 2);
    std::vector<float> plf(pl.begin(), pl.end()), qlf(ql.begin(), ql.end());
    auto pp = Graph::leaf(Tensor::from({1, 8}, plf));
    auto qq = Graph::leaf(Tensor::from({1, 8}, qlf));
    const double kl = g.kl_rows_mean(pp, qq)->data[0];
    CHECK(kl >= -1e-9);
    CHECK(kl == doctest::Approx(oracles::kl_direct(pl, ql)).epsilon(1e-4));
  }
}

TEST_CASE("cross_entropy examples") {
  Graph g;
  const int V = 11;
  auto uniform = Graph::leaf(Tensor::from({3, V}, std::vector<float>(3 * V, 0.f)));
  CHECK(g.cross_entropy(uniform, {0, 5, 10})->data[0] ==
        doctest::Approx(std::log(static_cast<double>(V))).epsilon(1e-6));

  // large spike on the target
  std::vector<float> spike(V, 0.f);
  spike[3] = 50.f;
  CHECK(g.cross_entropy(Graph::leaf(Tensor::from({1, V}, spike)), {3})->data[0] ==
        doctest::Approx(0.0).epsilon(1e-6));

  // 2-class hand case: logits [0, ln 3], target 1 -> ln(4/3)
  auto h = Graph::leaf(Tensor::from({1, 2}, {0.f, std::log(3.f)}));
  CHECK(g.cross_entropy(h, {1})->data[0] == doctest::Approx(std::log(4.0 / 3.0)).epsilon(1e-6));

  CHECK_THROWS_AS((void)g.cross_entropy(h, {2}), std::invalid_argument);
}

TEST_CASE("backward basics: sum of squares, accumulation, determinism") {
  auto x = Graph::param({1, 5});
  x->data = {1.f, -2.f, 0.5f, 3.f, -0.25f};
  Graph g;
  auto loss = g.sum(g.mul(x, x));
  CHECK_THROWS_AS(g.backward(g.mul(x, x)), std::invalid_argument);  // non-scalar
  g.backward(loss);
  for (int i = 0; i < 5; ++i) CHECK(x->grad[static_cast<size_t>(i)] == doctest::Approx(2.f * x->data[static_cast<size_t>(i)]));

  // second backward on the retained tape accumulates the same gradients again
  g.backward(loss);
  for (int i = 0; i < 5; ++i) CHECK(x->grad[static_cast<size_t>(i)] == doctest::Approx(4.f * x->data[static_cast<size_t>(i)]));

  // zeroing and replaying reproduces the original values exactly
  auto grads_once = [&] {
    x->zero_grad();
    Graph g2;
    auto l = g2.sum(g2.mul(x, x));
    g2.backward(l);
    return x->grad;
  };
  CHECK(grads_once() == grads_once());
}

TEST_CASE("gradcheck suite covers every primitive at h=1e-3 (module contract)") {
  for (const auto& c : run_gradcheck_suite(1e-6, 1e-3, 4242)) {
    INFO(c.name, " max_err=", c.max_err);
    CHECK(c.pass);
  }
}

TEST_CASE("adamw examples") {
  auto p = Graph::param({1, 3});
  p->data = {1.f, -2.f, 3.f};
  const std::vector<Graph::Ptr> params = {p};

  SUBCASE("zero grad, zero decay: parameters unchanged") {
    auto opt = AdamWState::init(params, 0.1);
    p->zero_grad();
    const auto before = p->data;
    opt.step(params);
    CHECK(p->data == before);
    CHECK(opt.step_count == 1);
  }

  SUBCASE("first step moves by about -lr*sign(g) for large g") {
    auto opt = AdamWState::init(params, 0.01);
    p->grad = {100.f, -50.f, 25.f};
    const auto before = p->data;
    opt.step(params);
    CHECK(p->data[0] == doctest::Approx(before[0] - 0.01).epsilon(1e-4));
    CHECK(p->data[1] == doctest::Approx(before[1] + 0.01).epsilon(1e-4));
    CHECK(p->data[2] == doctest::Approx(before[2] - 0.01).epsilon(1e-4));
  }

  SUBCASE("decoupled decay with zero grad") {
    auto opt = AdamWState::init(params, 0.1, 0.9, 0.999, 1e-8, 0.5);
    p->zero_grad();
    const auto before = p->data;
    opt.step(params);
    for (int i = 0; i < 3; ++i)
      CHECK(p->data[static_cast<size_t>(i)] == doctest::Approx(before[static_cast<size_t>(i)] * (1.0 - 0.1 * 0.5)));
  }

  SUBCASE("non-finite gradient rejects the step") {
    auto opt = AdamWState::init(params, 0.1);
    p->grad = {1.f, std::numeric_limits<float>::quiet_NaN(), 0.f};
    CHECK_THROWS_AS(opt.step(params), std::runtime_error);
    CHECK(opt.step_count == 0);
  }

  SUBCASE("lr must be positive") { CHECK_THROWS_AS(AdamWState::init(params, 0.0), std::invalid_argument); }
}

TEST_CASE("clip_grad_norm examples") {
  auto p = Graph::param({1, 2});
  p->grad = {3.f, 4.f};
  const std::vector<Graph::Ptr> params = {p};

  CHECK(clip_grad_norm(params, 10.0) == doctest::Approx(5.0));
  CHECK(p->grad == std::vector<float>{3.f, 4.f});  // under the cap: unchanged

  CHECK(clip_grad_norm(params, 1.0) == doctest::Approx(5.0));
  CHECK(p->grad[0] == doctest::Approx(0.6f));
  CHECK(p->grad[1] == doctest::Approx(0.8f));

  double post = 0;
  for (float gv : p->grad) post += gv * gv;
  CHECK(std::sqrt(post) == doctest::Approx(1.0).epsilon(1e-6));
}
