#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace wm {

// Dense row-major tensor with an optional gradient buffer. All model math in
// the project runs on these; float is the storage type for training, double
// for gradient checking.
template <typename T>
struct TensorT {
  std::vector<int64_t> shape;
  std::vector<T> data;
  std::vector<T> grad;  // same size as data when requires_grad
  bool requires_grad = false;

  TensorT() = default;

  explicit TensorT(std::vector<int64_t> s, bool req_grad = false) : shape(std::move(s)) {
    int64_t n = 1;
    for (int64_t e : shape) {
      if (e <= 0) throw std::invalid_argument("tensor extent must be positive");
      n *= e;
    }
    data.assign(static_cast<size_t>(n), T(0));
    set_requires_grad(req_grad);
  }

  static TensorT zeros(std::vector<int64_t> s) { return TensorT(std::move(s)); }

  static TensorT from(std::vector<int64_t> s, std::vector<T> values) {
    TensorT t(std::move(s));
    if (values.size() != t.data.size()) throw std::invalid_argument("value count does not match shape");
    t.data = std::move(values);
    return t;
  }

  static TensorT scalar(T v) {
    TensorT t({1});
    t.data[0] = v;
    return t;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t dim(size_t i) const { return shape.at(i); }
  size_t ndim() const { return shape.size(); }

  int64_t rows() const { return shape.size() == 2 ? shape[0] : throw_rank2(); }
  int64_t cols() const { return shape.size() == 2 ? shape[1] : throw_rank2(); }

  void set_requires_grad(bool on) {
    requires_grad = on;
    if (on)
      grad.assign(data.size(), T(0));
    else
      grad.clear();
  }

  void zero_grad() {
    for (auto& g : grad) g = T(0);
  }

  T& at(int64_t i) { return data[static_cast<size_t>(i)]; }
  T at(int64_t i) const { return data[static_cast<size_t>(i)]; }
  T& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * shape.back() + c)]; }
  T at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * shape.back() + c)]; }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  void check_finite(const char* what) const {
    if (!all_finite()) throw std::runtime_error(std::string("non-finite values in ") + what);
  }

 private:
  [[noreturn]] static int64_t throw_rank2() { throw std::invalid_argument("tensor is not rank 2"); }
};

using Tensor = TensorT<float>;

template <typename T>
std::string shape_str(const TensorT<T>& t) {
  std::string s = "[";
  for (size_t i = 0; i < t.shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(t.shape[i]);
  }
  return s + "]";
}

}  // namespace wm
