#pragma once

#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "wm/kernels.hpp"
#include "wm/tensor.hpp"

namespace wm {

// Define-by-run reverse-mode tape over TensorT<T>. Every op computes its
// value immediately and, while recording, pushes one backward closure onto
// the tape. backward() zeroes the gradients of all recorded intermediate
// nodes, seeds the loss, and replays the closures in reverse creation order
// (the tape order is already topological). Leaf gradients accumulate with +=
// across calls; the tape is retained until reset(), so a second backward()
// without zeroing leaf grads adds the same leaf gradients again.
//
// Single graph use is single-threaded by contract; the kernels parallelize
// internally over data.
template <typename T>
class GraphT {
 public:
  using Tensor = TensorT<T>;
  using Ptr = std::shared_ptr<Tensor>;

  // While off, ops compute values only: no closures, outputs never require
  // grad. Used for frozen-model forwards.
  void set_recording(bool on) { recording_ = on; }
  bool recording() const { return recording_; }

  size_t num_recorded() const { return tape_.size(); }

  void reset() {
    tape_.clear();
    recorded_outputs_.clear();
  }

  static Ptr leaf(Tensor t) { return std::make_shared<Tensor>(std::move(t)); }

  static Ptr param(std::vector<int64_t> shape) {
    auto p = std::make_shared<Tensor>(std::move(shape));
    p->set_requires_grad(true);
    return p;
  }

  static Ptr constant(Tensor t) {
    t.set_requires_grad(false);
    return std::make_shared<Tensor>(std::move(t));
  }

  // ------------------------------------------------------------- binary ops

  Ptr matmul(Ptr a, Ptr b) {
    if (a->ndim() != 2 || b->ndim() != 2 || a->cols() != b->rows())
      throw std::invalid_argument("matmul: shape mismatch " + shape_str(*a) + " x " + shape_str(*b));
    const int64_t m = a->rows(), k = a->cols(), n = b->cols();
    Ptr out = make_out({m, n}, {a, b});
    kernels::gemm_nn(a->data.data(), b->data.data(), out->data.data(), m, k, n);
    if (out->requires_grad)
      tape_.push_back([a, b, out, m, k, n] {
        if (a->requires_grad)
          kernels::gemm_nt(out->grad.data(), b->data.data(), a->grad.data(), m, n, k, /*accumulate=*/true);
        if (b->requires_grad)
          kernels::gemm_tn(a->data.data(), out->grad.data(), b->grad.data(), k, m, n, /*accumulate=*/true);
      });
    return out;
  }

  Ptr add(Ptr a, Ptr b) {
    if (!a->same_shape(*b)) throw std::invalid_argument("add: shape mismatch");
    Ptr out = make_out(a->shape, {a, b});
    const int64_t n = a->numel();
    const T* pa = a->data.data();
    const T* pb = b->data.data();
    T* po = out->data.data();
#pragma omp parallel for schedule(static) if (n > kernels::kParallelCutoff)
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    if (out->requires_grad)
      tape_.push_back([a, b, out, n] {
        if (a->requires_grad)
          for (int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i];
        if (b->requires_grad)
          for (int64_t i = 0; i < n; ++i) b->grad[i] += out->grad[i];
      });
    return out;
  }

  // out = a + c * b
  Ptr add_scaled(Ptr a, Ptr b, T c) {
    if (!a->same_shape(*b)) throw std::invalid_argument("add_scaled: shape mismatch");
    Ptr out = make_out(a->shape, {a, b});
    const int64_t n = a->numel();
    for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] + c * b->data[i];
    if (out->requires_grad)
      tape_.push_back([a, b, out, c, n] {
        if (a->requires_grad)
          for (int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i];
        if (b->requires_grad)
          for (int64_t i = 0; i < n; ++i) b->grad[i] += c * out->grad[i];
      });
    return out;
  }

  Ptr mul(Ptr a, Ptr b) {
    if (!a->same_shape(*b)) throw std::invalid_argument("mul: shape mismatch");
    Ptr out = make_out(a->shape, {a, b});
    const int64_t n = a->numel();
    for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] * b->data[i];
    if (out->requires_grad)
      tape_.push_back([a, b, out, n] {
        if (a->requires_grad)
          for (int64_t i = 0; i < n; ++i) a->grad[i] += b->data[i] * out->grad[i];
        if (b->requires_grad)
          for (int64_t i = 0; i < n; ++i) b->grad[i] += a->data[i] * out->grad[i];
      });
    return out;
  }

  // x: [R x C], bias: [C], broadcast over rows
  Ptr add_rowwise(Ptr x, Ptr bias) {
    if (x->ndim() != 2 || bias->numel() != x->cols())
      throw std::invalid_argument("add_rowwise: shape mismatch");
    const int64_t r = x->rows(), c = x->cols();
    Ptr out = make_out(x->shape, {x, bias});
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) out->at(i, j) = x->at(i, j) + bias->at(j);
    if (out->requires_grad)
      tape_.push_back([x, bias, out, r, c] {
        if (x->requires_grad)
          for (int64_t i = 0; i < r * c; ++i) x->grad[i] += out->grad[i];
        if (bias->requires_grad)
          for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j) bias->grad[j] += out->grad[i * c + j];
      });
    return out;
  }

  // ------------------------------------------------------------ unary ops

  Ptr scale(Ptr a, T c) {
    Ptr out = make_out(a->shape, {a});
    const int64_t n = a->numel();
    for (int64_t i = 0; i < n; ++i) out->data[i] = c * a->data[i];
    if (out->requires_grad)
      tape_.push_back([a, out, c, n] {
        if (a->requires_grad)
          for (int64_t i = 0; i < n; ++i) a->grad[i] += c * out->grad[i];
      });
    return out;
  }

  Ptr relu(Ptr a) {
    Ptr out = make_out(a->shape, {a});
    const int64_t n = a->numel();
    for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] > T(0) ? a->data[i] : T(0);
    if (out->requires_grad)
      tape_.push_back([a, out, n] {
        if (a->requires_grad)
          for (int64_t i = 0; i < n; ++i)
            if (a->data[i] > T(0)) a->grad[i] += out->grad[i];
      });
    return out;
  }

  Ptr tanh(Ptr a) {
    Ptr out = make_out(a->shape, {a});
    const int64_t n = a->numel();
    for (int64_t i = 0; i < n; ++i) out->data[i] = std::tanh(a->data[i]);
    if (out->requires_grad)
      tape_.push_back([a, out, n] {
        if (a->requires_grad)
          for (int64_t i = 0; i < n; ++i) a->grad[i] += (T(1) - out->data[i] * out->data[i]) * out->grad[i];
      });
    return out;
  }

  Ptr layer_norm(Ptr x, Ptr gain, Ptr bias, double eps = 1e-5) {
    if (x->ndim() != 2 || gain->numel() != x->cols() || bias->numel() != x->cols())
      throw std::invalid_argument("layer_norm: shape mismatch");
    const int64_t r = x->rows(), c = x->cols();
    Ptr out = make_out(x->shape, {x, gain, bias});
    kernels::layer_norm_rows(x->data.data(), gain->data.data(), bias->data.data(), out->data.data(), r, c, eps);
    if (out->requires_grad) {
      tape_.push_back([x, gain, bias, out, r, c, eps] {
        // dgain/dbias go into scratch when frozen so the kernel stays one path
        static thread_local std::vector<T> sink;
        sink.assign(static_cast<size_t>(2 * c), T(0));
        T* dg = gain->requires_grad ? gain->grad.data() : sink.data();
        T* db = bias->requires_grad ? bias->grad.data() : sink.data() + c;
        if (x->requires_grad) {
          kernels::layer_norm_rows_backward(x->data.data(), gain->data.data(), out->grad.data(), x->grad.data(),
                                            dg, db, r, c, eps);
        } else {
          std::vector<T> dx(static_cast<size_t>(r * c), T(0));
          kernels::layer_norm_rows_backward(x->data.data(), gain->data.data(), out->grad.data(), dx.data(), dg,
                                            db, r, c, eps);
        }
      });
    }
    return out;
  }

  // ------------------------------------------------------- structural ops

  // out[i] = x[rows[i]]; scatter-add on backward. Embedding lookup is
  // gather_rows(table, token_ids).
  Ptr gather_rows(Ptr x, std::vector<int64_t> rows) {
    if (x->ndim() != 2) throw std::invalid_argument("gather_rows: rank-2 input required");
    const int64_t c = x->cols(), nr = static_cast<int64_t>(rows.size());
    for (int64_t r : rows)
      if (r < 0 || r >= x->rows()) throw std::invalid_argument("gather_rows: index out of range");
    Ptr out = make_out({nr, c}, {x});
    for (int64_t i = 0; i < nr; ++i)
      for (int64_t j = 0; j < c; ++j) out->at(i, j) = x->at(rows[static_cast<size_t>(i)], j);
    if (out->requires_grad)
      tape_.push_back([x, out, rows = std::move(rows), nr, c] {
        if (!x->requires_grad) return;
        for (int64_t i = 0; i < nr; ++i) {
          const int64_t r = rows[static_cast<size_t>(i)];
          for (int64_t j = 0; j < c; ++j) x->grad[r * c + j] += out->grad[i * c + j];
        }
      });
    return out;
  }

  // (N*group) x C -> N x C, averaging each consecutive block of `group` rows.
  Ptr mean_pool_groups(Ptr x, int64_t group) {
    if (x->ndim() != 2 || group <= 0 || x->rows() % group != 0)
      throw std::invalid_argument("mean_pool_groups: bad group");
    const int64_t n = x->rows() / group, c = x->cols();
    Ptr out = make_out({n, c}, {x});
    const T inv = T(1) / static_cast<T>(group);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t g = 0; g < group; ++g)
        for (int64_t j = 0; j < c; ++j) out->at(i, j) += x->at(i * group + g, j) * inv;
    if (out->requires_grad)
      tape_.push_back([x, out, n, group, c, inv] {
        if (!x->requires_grad) return;
        for (int64_t i = 0; i < n; ++i)
          for (int64_t g = 0; g < group; ++g)
            for (int64_t j = 0; j < c; ++j) x->grad[(i * group + g) * c + j] += out->grad[i * c + j] * inv;
      });
    return out;
  }

  Ptr concat_rows(const std::vector<Ptr>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_rows: empty input");
    const int64_t c = xs[0]->cols();
    int64_t total = 0;
    for (const auto& x : xs) {
      if (x->ndim() != 2 || x->cols() != c) throw std::invalid_argument("concat_rows: column mismatch");
      total += x->rows();
    }
    Ptr out = make_out({total, c}, xs);
    int64_t off = 0;
    for (const auto& x : xs) {
      std::copy(x->data.begin(), x->data.end(), out->data.begin() + off);
      off += x->numel();
    }
    if (out->requires_grad)
      tape_.push_back([xs, out] {
        int64_t off = 0;
        for (const auto& x : xs) {
          if (x->requires_grad)
            for (int64_t i = 0; i < x->numel(); ++i) x->grad[i] += out->grad[off + i];
          off += x->numel();
        }
      });
    return out;
  }

  // ------------------------------------------------------------- softmaxes

  Ptr log_softmax(Ptr x) {
    if (x->ndim() < 1 || x->shape.back() < 1) throw std::invalid_argument("log_softmax: empty last axis");
    x->check_finite("log_softmax input");
    const int64_t c = x->shape.back(), r = x->numel() / c;
    Ptr out = make_out(x->shape, {x});
    out->data = x->data;
    kernels::log_softmax_rows(out->data.data(), r, c);
    if (out->requires_grad)
      tape_.push_back([x, out, r, c] {
        if (!x->requires_grad) return;
        for (int64_t i = 0; i < r; ++i) {
          double gsum = 0.0;
          for (int64_t j = 0; j < c; ++j) gsum += static_cast<double>(out->grad[i * c + j]);
          for (int64_t j = 0; j < c; ++j)
            x->grad[i * c + j] +=
                out->grad[i * c + j] - static_cast<T>(std::exp(static_cast<double>(out->data[i * c + j])) * gsum);
        }
      });
    return out;
  }

  Ptr softmax(Ptr x) {
    if (x->ndim() < 1 || x->shape.back() < 1) throw std::invalid_argument("softmax: empty last axis");
    const int64_t c = x->shape.back(), r = x->numel() / c;
    Ptr out = make_out(x->shape, {x});
    out->data = x->data;
    kernels::softmax_rows(out->data.data(), r, c);
    if (out->requires_grad)
      tape_.push_back([x, out, r, c] {
        if (!x->requires_grad) return;
        for (int64_t i = 0; i < r; ++i) {
          double dot = 0.0;
          for (int64_t j = 0; j < c; ++j)
            dot += static_cast<double>(out->data[i * c + j]) * static_cast<double>(out->grad[i * c + j]);
          for (int64_t j = 0; j < c; ++j)
            x->grad[i * c + j] += out->data[i * c + j] * (out->grad[i * c + j] - static_cast<T>(dot));
        }
      });
    return out;
  }

  // ------------------------------------------------------------ attention

  // q, k, v: [B*T x C] row-major; causal multi-head attention.
  Ptr attention(Ptr q, Ptr k, Ptr v, int64_t batch, int64_t seq, int64_t n_heads) {
    const int64_t c = q->cols();
    if (q->rows() != batch * seq || !q->same_shape(*k) || !q->same_shape(*v) || c % n_heads != 0)
      throw std::invalid_argument("attention: shape mismatch");
    Ptr out = make_out(q->shape, {q, k, v});
    auto scores = std::make_shared<std::vector<T>>(static_cast<size_t>(batch * n_heads * seq * seq));
    kernels::attention_forward(q->data.data(), k->data.data(), v->data.data(), scores->data(), out->data.data(),
                               batch, seq, n_heads, c);
    if (out->requires_grad)
      tape_.push_back([q, k, v, out, scores, batch, seq, n_heads, c] {
        std::vector<T> sink;
        auto grad_or_sink = [&](const Ptr& t) -> T* {
          if (t->requires_grad) return t->grad.data();
          if (sink.empty()) sink.assign(static_cast<size_t>(t->numel()), T(0));
          return sink.data();
        };
        kernels::attention_backward(q->data.data(), k->data.data(), v->data.data(), scores->data(),
                                    out->grad.data(), grad_or_sink(q), grad_or_sink(k), grad_or_sink(v), batch,
                                    seq, n_heads, c);
      });
    return out;
  }

  // ------------------------------------------------------------ loss heads

  // Mean over rows of KL(softmax(p_row) || softmax(q_row)). Differentiable
  // w.r.t. both logit sets; per-row sums accumulate in double.
  Ptr kl_rows_mean(Ptr p_logits, Ptr q_logits) {
    if (!p_logits->same_shape(*q_logits) || p_logits->ndim() != 2)
      throw std::invalid_argument("kl_rows_mean: shape mismatch");
    p_logits->check_finite("kl p_logits");
    q_logits->check_finite("kl q_logits");
    const int64_t r = p_logits->rows(), c = p_logits->cols();
    auto lp = std::make_shared<std::vector<T>>(p_logits->data);
    auto lq = std::make_shared<std::vector<T>>(q_logits->data);
    kernels::log_softmax_rows(lp->data(), r, c);
    kernels::log_softmax_rows(lq->data(), r, c);
    auto row_kl = std::make_shared<std::vector<double>>(static_cast<size_t>(r));
    double total = 0.0;
    for (int64_t i = 0; i < r; ++i) {
      double acc = 0.0;
      for (int64_t j = 0; j < c; ++j) {
        const double lpij = static_cast<double>((*lp)[static_cast<size_t>(i * c + j)]);
        acc += std::exp(lpij) * (lpij - static_cast<double>((*lq)[static_cast<size_t>(i * c + j)]));
      }
      (*row_kl)[static_cast<size_t>(i)] = acc;
      total += acc;
    }
    Ptr out = make_out({1}, {p_logits, q_logits});
    out->data[0] = static_cast<T>(total / static_cast<double>(r));
    if (out->requires_grad)
      tape_.push_back([p_logits, q_logits, out, lp, lq, row_kl, r, c] {
        const T up = out->grad[0] / static_cast<T>(r);
        for (int64_t i = 0; i < r; ++i) {
          const double kl_i = (*row_kl)[static_cast<size_t>(i)];
          for (int64_t j = 0; j < c; ++j) {
            const double lpij = static_cast<double>((*lp)[static_cast<size_t>(i * c + j)]);
            const double lqij = static_cast<double>((*lq)[static_cast<size_t>(i * c + j)]);
            const double sp = std::exp(lpij);
            if (p_logits->requires_grad)
              p_logits->grad[i * c + j] += up * static_cast<T>(sp * ((lpij - lqij) - kl_i));
            if (q_logits->requires_grad)
              q_logits->grad[i * c + j] += up * static_cast<T>(std::exp(lqij) - sp);
          }
        }
      });
    return out;
  }

  // Mean over positions of -log_softmax(logits)[t, target_t].
  Ptr cross_entropy(Ptr logits, std::vector<int> targets) {
    if (logits->ndim() != 2 || logits->rows() != static_cast<int64_t>(targets.size()))
      throw std::invalid_argument("cross_entropy: row/target count mismatch");
    const int64_t r = logits->rows(), c = logits->cols();
    for (int t : targets)
      if (t < 0 || t >= c) throw std::invalid_argument("cross_entropy: target id out of vocabulary");
    logits->check_finite("cross_entropy logits");
    auto lsm = std::make_shared<std::vector<T>>(logits->data);
    kernels::log_softmax_rows(lsm->data(), r, c);
    double total = 0.0;
    for (int64_t i = 0; i < r; ++i) total -= static_cast<double>((*lsm)[static_cast<size_t>(i * c + targets[static_cast<size_t>(i)])]);
    Ptr out = make_out({1}, {logits});
    out->data[0] = static_cast<T>(total / static_cast<double>(r));
    if (out->requires_grad)
      tape_.push_back([logits, out, lsm, targets = std::move(targets), r, c] {
        if (!logits->requires_grad) return;
        const T up = out->grad[0] / static_cast<T>(r);
        for (int64_t i = 0; i < r; ++i) {
          for (int64_t j = 0; j < c; ++j)
            logits->grad[i * c + j] += up * static_cast<T>(std::exp(static_cast<double>((*lsm)[static_cast<size_t>(i * c + j)])));
          logits->grad[i * c + targets[static_cast<size_t>(i)]] -= up;
        }
      });
    return out;
  }

  Ptr sum(Ptr x) {
    Ptr out = make_out({1}, {x});
    double acc = 0.0;
    for (T v : x->data) acc += static_cast<double>(v);
    out->data[0] = static_cast<T>(acc);
    if (out->requires_grad)
      tape_.push_back([x, out] {
        if (!x->requires_grad) return;
        for (auto& g : x->grad) g += out->grad[0];
      });
    return out;
  }

  Ptr mean(Ptr x) {
    Ptr out = make_out({1}, {x});
    double acc = 0.0;
    for (T v : x->data) acc += static_cast<double>(v);
    const int64_t n = x->numel();
    out->data[0] = static_cast<T>(acc / static_cast<double>(n));
    if (out->requires_grad)
      tape_.push_back([x, out, n] {
        if (!x->requires_grad) return;
        const T g = out->grad[0] / static_cast<T>(n);
        for (auto& gi : x->grad) gi += g;
      });
    return out;
  }

  // The three-term watermark regularizer over raw mapper outputs [N x V]:
  //   sum_i |row_mean_i| + sum_j |col_mean_j| + lambda1 * sum_ij max(0, eps - |o_ij|)
  Ptr watermark_norm_loss(Ptr outs, T eps, T lambda1) {
    if (outs->ndim() != 2) throw std::invalid_argument("watermark_norm_loss: rank-2 input required");
    if (eps < T(0)) throw std::invalid_argument("watermark_norm_loss: eps must be >= 0");
    const int64_t n = outs->rows(), v = outs->cols();
    auto row_mean = std::make_shared<std::vector<double>>(static_cast<size_t>(n), 0.0);
    auto col_mean = std::make_shared<std::vector<double>>(static_cast<size_t>(v), 0.0);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < v; ++j) {
        const double o = static_cast<double>(outs->at(i, j));
        (*row_mean)[static_cast<size_t>(i)] += o / static_cast<double>(v);
        (*col_mean)[static_cast<size_t>(j)] += o / static_cast<double>(n);
      }
    double term1 = 0.0, term2 = 0.0, term3 = 0.0;
    for (double m : *row_mean) term1 += std::abs(m);
    for (double m : *col_mean) term2 += std::abs(m);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < v; ++j)
        term3 += std::max(0.0, static_cast<double>(eps) - std::abs(static_cast<double>(outs->at(i, j))));
    Ptr out = make_out({1}, {outs});
    out->data[0] = static_cast<T>(term1 + term2 + static_cast<double>(lambda1) * term3);
    if (out->requires_grad)
      tape_.push_back([outs, out, row_mean, col_mean, eps, lambda1, n, v] {
        if (!outs->requires_grad) return;
        const T up = out->grad[0];
        auto sgn = [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); };
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < v; ++j) {
            const double o = static_cast<double>(outs->at(i, j));
            double g = sgn((*row_mean)[static_cast<size_t>(i)]) / static_cast<double>(v) +
                       sgn((*col_mean)[static_cast<size_t>(j)]) / static_cast<double>(n);
            if (std::abs(o) < static_cast<double>(eps)) g -= static_cast<double>(lambda1) * sgn(o);
            outs->grad[i * v + j] += up * static_cast<T>(g);
          }
      });
    return out;
  }

  // ------------------------------------------------------------- backward

  void backward(Ptr loss) {
    if (loss->numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    if (!loss->requires_grad) throw std::invalid_argument("backward: loss does not depend on trainable tensors");
    if (!std::isfinite(static_cast<double>(loss->data[0]))) throw std::runtime_error("backward: non-finite loss");
    for (const auto& o : recorded_outputs_) o->zero_grad();
    loss->grad[0] = T(1);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
  }

 private:
  Ptr make_out(std::vector<int64_t> shape, const std::vector<Ptr>& inputs) {
    auto out = std::make_shared<Tensor>(std::move(shape));
    if (recording_) {
      for (const auto& in : inputs)
        if (in->requires_grad) {
          out->set_requires_grad(true);
          recorded_outputs_.push_back(out);
          break;
        }
    }
    return out;
  }

  bool recording_ = true;
  std::vector<std::function<void()>> tape_;
  std::vector<Ptr> recorded_outputs_;
};

using Graph = GraphT<float>;

}  // namespace wm
