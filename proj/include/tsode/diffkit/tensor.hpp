#pragma once
#include <cstddef>
#include <initializer_list>
#include <vector>

namespace tsode::diffkit {

// Dense row-major matrix; cols == 1 makes it a column vector.
struct Tensor {
  int rows = 0;
  int cols = 1;
  std::vector<double> v;

  Tensor() = default;
  Tensor(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0.0) {}
  explicit Tensor(int r) : Tensor(r, 1) {}

  static Tensor vec(std::initializer_list<double> xs) {
    Tensor t(static_cast<int>(xs.size()), 1);
    size_t i = 0;
    for (double x : xs) t.v[i++] = x;
    return t;
  }

  int size() const { return rows * cols; }
  double& at(int i, int j) { return v[static_cast<size_t>(i) * cols + j]; }
  double at(int i, int j) const { return v[static_cast<size_t>(i) * cols + j]; }
  double& operator[](int i) { return v[static_cast<size_t>(i)]; }
  double operator[](int i) const { return v[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
};

}  // namespace tsode::diffkit
