#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "maskcons/common.hpp"

namespace maskcons {

// Dense N-d array, row-major, immutable shape. Values are plain reals; all
// operations are pure functions of their inputs and safe to share across
// threads once constructed.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<size_t> shape);
  Tensor(std::vector<size_t> shape, std::vector<real> data);

  static Tensor scalar(real v) { return Tensor({}, {v}); }
  static Tensor full(std::vector<size_t> shape, real v);

  const std::vector<size_t>& shape() const { return shape_; }
  size_t ndim() const { return shape_.size(); }
  size_t size() const { return data_.size(); }
  size_t extent(size_t axis) const { return shape_[axis]; }

  real* data() { return data_.data(); }
  const real* data() const { return data_.data(); }
  real& operator[](size_t i) { return data_[i]; }
  real operator[](size_t i) const { return data_[i]; }

  // Unchecked row-major accessors for the common ranks.
  real& at2(size_t i, size_t j) { return data_[i * shape_[1] + j]; }
  real at2(size_t i, size_t j) const { return data_[i * shape_[1] + j]; }
  real& at3(size_t i, size_t j, size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  real at3(size_t i, size_t j, size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  real& at4(size_t i, size_t j, size_t k, size_t l) {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }
  real at4(size_t i, size_t j, size_t k, size_t l) const {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;

  std::string shape_str() const;

 private:
  std::vector<size_t> shape_;
  std::vector<real> data_;
};

size_t shape_product(const std::vector<size_t>& shape);

// --- linear algebra / signal kernels -----------------------------------

// Matrix product a[m x k] * b[k x n]. Row-major accumulation over k for each
// output element, so results are bit-reproducible per build.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose(const Tensor& a);

// Cross-correlation (no kernel flip) of input[C_in x H x W] with
// kernel[C_out x C_in x kh x kw]; zero padding.
// Output extents: H' = floor((H + 2*pad - kh)/stride) + 1, likewise W'.
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int pad);

// Valid-mode unnormalized window sum of img[H x W]; output (H-wh+1) x (W-ww+1).
// Runs in O(HW) via an integral image.
Tensor box_filter(const Tensor& img, int window_h, int window_w);

enum class Reduce { sum, mean, max, argmax };

// Drops `axis` from the output shape. argmax ties break to the lowest index.
Tensor reduce(const Tensor& t, size_t axis, Reduce mode);

// --- elementwise plumbing ------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, real s);
// y += s * x
void axpy(Tensor& y, real s, const Tensor& x);
real sum_all(const Tensor& a);
real dot(const Tensor& a, const Tensor& b);
real l2_norm(const Tensor& a);
real mean_all(const Tensor& a);
real stddev_all(const Tensor& a);

namespace detail {
// c += a * b for row-major raw buffers, register-blocked. Accumulation
// grouping is fixed by compile-time tile constants, so results are
// bit-reproducible per build (and agree with the naive order to ~1 ulp
// per partial sum).
void gemm_acc(const real* a, const real* b, real* c, size_t m, size_t k, size_t n);
// Lane-split dot product with a fixed combine order.
real dot_lanes(const real* a, const real* b, size_t n);
}  // namespace detail

// --- TNSR v1 dump format --------------------------------------------------
// Text header "TNSR v1 <ndim> <extents...> <f32|f64>\n" followed by
// little-endian flat data. Loading converts between precisions.

void save_tensor(std::ostream& os, const Tensor& t);
Tensor load_tensor(std::istream& is);
void save_tensor_file(const std::string& path, const Tensor& t);
Tensor load_tensor_file(const std::string& path);

}  // namespace maskcons
