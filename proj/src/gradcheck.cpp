#include "wm/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "wm/rng.hpp"

namespace wm {

using DGraph = GraphT<double>;
using DPtr = DGraph::Ptr;

double finite_diff_max_err(const std::function<DPtr(DGraph&)>& build_loss, const std::vector<DPtr>& params,
                           double h) {
  // reference gradient from one recorded forward/backward
  for (const auto& p : params) p->zero_grad();
  {
    DGraph g;
    auto loss = build_loss(g);
    g.backward(loss);
  }
  std::vector<std::vector<double>> ad;
  ad.reserve(params.size());
  for (const auto& p : params) ad.push_back(p->grad);

  auto eval = [&]() -> double {
    DGraph g;
    g.set_recording(false);
    return build_loss(g)->data[0];
  };

  double max_err = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& data = params[pi]->data;
    for (size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const double up = eval();
      data[i] = orig - h;
      const double dn = eval();
      data[i] = orig;
      const double fd = (up - dn) / (2.0 * h);
      const double a = ad[pi][i];
      const double err = std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

namespace {

DPtr dparam(std::vector<int64_t> shape, SplitMix64& rng, double lo, double hi) {
  auto p = DGraph::param(std::move(shape));
  rng.fill_uniform<double>(p->data, lo, hi);
  return p;
}

struct Case {
  std::string name;
  std::vector<DPtr> params;
  std::function<DPtr(DGraph&)> build;
};

// Each case leans on one primitive and ends in a scalar through an extra
// weighting parameter so no gradient path is trivially constant.
std::vector<Case> make_cases(uint64_t seed) {
  std::vector<Case> cases;
  SplitMix64 rng(mix_seed(seed, 0x6763ULL));

  auto weighted_mean = [](DGraph& g, DPtr x, DPtr w) { return g.mean(g.mul(std::move(x), std::move(w))); };

  {
    Case c{"matmul", {}, nullptr};
    auto a = dparam({3, 4}, rng, -1, 1), b = dparam({4, 5}, rng, -1, 1), w = dparam({3, 5}, rng, -1, 1);
    c.params = {a, b, w};
    c.build = [=](DGraph& g) { return weighted_mean(g, g.matmul(a, b), w); };
    cases.push_back(std::move(c));
  }
  {
    Case c{"add", {}, nullptr};
    auto a = dparam({4, 3}, rng, -1, 1), b = dparam({4, 3}, rng, -1, 1), w = dparam({4, 3}, rng, -1, 1);
    c.params = {a, b, w};
    c.build = [=](DGraph& g) { return weighted_mean(g, g.add(a, b), w); };
    cases.push_back(std::move(c));
  }
  {
    Case c{"add_scaled", {}, nullptr};
    auto a = dparam({3, 3}, rng, -1, 1), b = dparam({3, 3}, rng, -1, 1), w = dparam({3, 3}, rng, -1, 1);
    c.params = {a, b, w};
    c.build = [=](DGraph& g) { return weighted_mean(g, g.add_scaled(a, b, 0.7), w); };
    cases.push_back(std::move(c));
  }
  {
    Case c{"add_rowwise", {}, nullptr};
    auto x = dparam({5, 4}, rng, -1, 1), b = dparam({4}, rng, -1, 1), w = dparam({5, 4}, rng, -1, 1);
    c.params = {x, b, w};
    c.build = [=](DGraph& g) { return weighted_mean(g, g.add_rowwise(x, b), w); };
    cases.push_back(std::move(c));
  }
  {
    Case c{"mul", {}, nullptr};
    auto a = dparam({4, 4}, rng, -1, 1), b = dparam({4, 4}, rng, -1, 1);
    c.params = {a, b};
    c.build = [=](DGraph& g) { return g.mean(g.mul(a, b)); };
    cases.push_back(std::move(c));
  }
  {
    Case c{"scale", {}, nullptr};
    auto a = dparam({3, 5}, rng, -1, 1), w = dparam({3, 5}, rng, -1, 1);
    c.params = {a, w};
    c.build = [=](DGraph& g) { return weighted_mean(g, g.scale(a, -1.3), w); };
    cases.push_back(std::move(c));
  }
  {
    Case c{"relu", {}, nullptr};
    // mixed signs, magnitudes bounded away from the kink at 0
    auto a = dparam({4, 6}, rng, 0.3, 1.2), w = dparam({4, 6}, rng, -1, 1);
    for (size_t i = 0; i < a->data.size(); i += 2) a->data[i] = -a->data[i];
    c.params = {a, w};
    c.build = [=](DGraph& g) { return weighted_mean(g, g.relu(a), w); };
    cases.push_back(std::move(c));
  }
  {
    Case c{"tanh", {}, nullptr};
    auto a = dparam({4, 4}, rng, -1.5, 1.5), w = dparam({4, 4}, rng, -1, 1);
    c.params = {a, w};
    c.build = [=](DGraph& g) { return weighted_mean(g, g.tanh(a), w); };
    cases.push_back(std::move(c));
  }
  {
    Case c{"layer_norm", {}, nullptr};
    auto x = dparam({3, 8}, rng, -1, 1), gain = dparam({8}, rng, 0.5, 1.5), bias = dparam({8}, rng, -0.3, 0.3);
    auto w = dparam({3, 8}, rng, -1, 1);
    c.params = {x, gain, bias, w};
    c.build = [=](DGraph& g) { return weighted_mean(g, g.layer_norm(x, gain, bias), w); };
    cases.push_back(std::move(c));
  }
  {
    Case c{"gather_rows", {}, nullptr};
    auto table = dparam({6, 4}, rng, -1, 1), w = dparam({5, 4}, rng, -1, 1);
    c.params = {table, w};
    std::vector<int64_t> rows = {0, 3, 3, 5, 1};  // repeats exercise scatter-add
    c.build = [=](DGraph& g) { return weighted_mean(g, g.gather_rows(table, rows), w); };
    cases.push_back(std::move(c));
  }
  {
    Case c{"mean_pool_groups", {}, nullptr};
    auto x = dparam({6, 3}, rng, -1, 1), w = dparam({2, 3}, rng, -1, 1);
    c.params = {x, w};
    c.build = [=](DGraph& g) { return weighted_mean(g, g.mean_pool_groups(x, 3), w); };
    cases.push_back(std::move(c));
  }
  {
    Case c{"concat_rows", {}, nullptr};
    auto a = dparam({2, 4}, rng, -1, 1), b = dparam({3, 4}, rng, -1, 1), w = dparam({5, 4}, rng, -1, 1);
    c.params = {a, b, w};
    c.build = [=](DGraph& g) { return weighted_mean(g, g.concat_rows({a, b}), w); };
    cases.push_back(std::move(c));
  }
  {
    Case c{"log_softmax", {}, nullptr};
    auto x = dparam({4, 7}, rng, -2, 2), w = dparam({4, 7}, rng, -1, 1);
    c.params = {x, w};
    c.build = [=](DGraph& g) { return weighted_mean(g, g.log_softmax(x), w); };
    cases.push_back(std::move(c));
  }
  {
    Case c{"softmax", {}, nullptr};
    auto x = dparam({4, 7}, rng, -2, 2), w = dparam({4, 7}, rng, -1, 1);
    c.params = {x, w};
    c.build = [=](DGraph& g) { return weighted_mean(g, g.softmax(x), w); };
    cases.push_back(std::move(c));
  }
  {
    Case c{"attention", {}, nullptr};
    auto x = dparam({6, 4}, rng, -1, 1);  // B=2, T=3, C=4
    auto wq = dparam({4, 4}, rng, -0.7, 0.7), wk = dparam({4, 4}, rng, -0.7, 0.7),
         wv = dparam({4, 4}, rng, -0.7, 0.7), w = dparam({6, 4}, rng, -1, 1);
    c.params = {x, wq, wk, wv, w};
    c.build = [=](DGraph& g) {
      auto att = g.attention(g.matmul(x, wq), g.matmul(x, wk), g.matmul(x, wv), 2, 3, 2);
      return weighted_mean(g, att, w);
    };
    cases.push_back(std::move(c));
  }
  {
    Case c{"kl_rows_mean", {}, nullptr};
    auto p = dparam({3, 6}, rng, -1.5, 1.5), q = dparam({3, 6}, rng, -1.5, 1.5);
    c.params = {p, q};
    c.build = [=](DGraph& g) { return g.kl_rows_mean(p, q); };
    cases.push_back(std::move(c));
  }
  {
    Case c{"cross_entropy", {}, nullptr};
    auto x = dparam({4, 3}, rng, -1, 1), wt = dparam({3, 6}, rng, -1, 1);
    c.params = {x, wt};
    std::vector<int> targets = {1, 4, 0, 5};
    c.build = [=](DGraph& g) { return g.cross_entropy(g.matmul(x, wt), targets); };
    cases.push_back(std::move(c));
  }
  {
    Case c{"sum", {}, nullptr};
    auto a = dparam({5, 2}, rng, -1, 1), b = dparam({5, 2}, rng, -1, 1);
    c.params = {a, b};
    c.build = [=](DGraph& g) { return g.sum(g.mul(a, b)); };
    cases.push_back(std::move(c));
  }
  {
    Case c{"mean", {}, nullptr};
    auto a = dparam({3, 7}, rng, -1, 1);
    c.params = {a};
    c.build = [=](DGraph& g) { return g.mean(g.tanh(a)); };
    cases.push_back(std::move(c));
  }
  {
    Case c{"watermark_norm_loss", {}, nullptr};
    // strictly positive entries keep the loss away from all |.| kinks
    auto o = dparam({4, 5}, rng, 0.45, 1.2);
    c.params = {o};
    c.build = [=](DGraph& g) { return g.watermark_norm_loss(o, 0.2, 1.0); };
    cases.push_back(std::move(c));
  }
  return cases;
}

}  // namespace

std::vector<GradCheckCase> run_gradcheck_suite(double tol, double h, uint64_t seed) {
  std::vector<GradCheckCase> out;
  for (auto& c : make_cases(seed)) {
    GradCheckCase r;
    r.name = c.name;
    r.max_err = finite_diff_max_err(c.build, c.params, h);
    r.pass = r.max_err < tol;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace wm
