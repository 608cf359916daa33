#ifndef AVTTS_TENSOR_HPP
#define AVTTS_TENSOR_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "avtts/common.hpp"

namespace avtts {

// Dense row-major tensor of doubles, rank 1..3. All model math runs in
// 64-bit precision; 32-bit floats appear only in dataset files.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) { v.assign(size_t(numel()), 0.0); }

  int64_t numel() const {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return shape.empty() ? 0 : n;
  }

  int dim(int i) const { return shape[size_t(i)]; }
  int rank() const { return int(shape.size()); }

  double& operator()(int i) { return v[size_t(i)]; }
  double operator()(int i) const { return v[size_t(i)]; }
  double& operator()(int i, int j) { return v[size_t(i) * shape[1] + j]; }
  double operator()(int i, int j) const { return v[size_t(i) * shape[1] + j]; }
  double& operator()(int i, int j, int k) {
    return v[(size_t(i) * shape[1] + j) * shape[2] + k];
  }
  double operator()(int i, int j, int k) const {
    return v[(size_t(i) * shape[1] + j) * shape[2] + k];
  }

  double* data() { return v.data(); }
  const double* data() const { return v.data(); }
  double* row(int i) { return v.data() + size_t(i) * shape[1]; }
  const double* row(int i) const { return v.data() + size_t(i) * shape[1]; }
  double* ptr3(int i, int j) { return v.data() + (size_t(i) * shape[1] + j) * shape[2]; }
  const double* ptr3(int i, int j) const {
    return v.data() + (size_t(i) * shape[1] + j) * shape[2];
  }

  void zero() { std::fill(v.begin(), v.end(), 0.0); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

  static Tensor randn(std::vector<int> s, Rng& rng, double std_dev) {
    Tensor t(std::move(s));
    for (double& x : t.v) x = rng.next_gaussian() * std_dev;
    return t;
  }
};

// A named parameter with its gradient accumulator.
struct Param {
  std::string name;
  Tensor w;
  Tensor g;

  void init(std::string n, Tensor t) {
    name = std::move(n);
    g = Tensor(t.shape);
    w = std::move(t);
  }
};

// y[T,O] = x[T,I] * W[I,O] (+ b[O] if b != nullptr); accumulate optional
void matmul(const Tensor& x, const Tensor& w, const double* b, Tensor& y, bool accumulate = false);
// dx[T,I] += dy[T,O] * W^T; dW[I,O] += x^T * dy; db[O] += column sums of dy
void matmul_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor* dx, Tensor& dw,
                     double* db);

double dot(const double* a, const double* b, int n);

}  // namespace avtts

#endif  // AVTTS_TENSOR_HPP
