#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "wm/graph.hpp"

namespace wm {

struct GradCheckCase {
  std::string name;
  double max_err = 0.0;  // max over elements of |ad - fd| / max(1, |ad|, |fd|)
  bool pass = false;
};

// Central finite differences against the recorded gradient, fully in double:
// every parameter element is perturbed by +-h and the loss rebuilt.
// `build_loss` must be a pure function of the parameter values.
double finite_diff_max_err(
    const std::function<GraphT<double>::Ptr(GraphT<double>&)>& build_loss,
    const std::vector<GraphT<double>::Ptr>& params, double h);

// Twenty randomized small networks that collectively exercise every graph
// primitive: matmul, add, add_scaled, add_rowwise, mul, scale, relu, tanh,
// layer_norm, gather_rows (embedding lookup + scatter grad), mean_pool_groups,
// concat_rows, log_softmax, softmax, attention, kl_rows_mean, cross_entropy,
// sum, mean, watermark_norm_loss.
std::vector<GradCheckCase> run_gradcheck_suite(double tol, double h, uint64_t seed);

}  // namespace wm
