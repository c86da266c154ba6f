#include "maskcons/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace maskcons {

size_t shape_product(const std::vector<size_t>& shape) {
  size_t n = 1;
  for (size_t e : shape) n *= e;
  return n;
}

Tensor::Tensor(std::vector<size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), real(0)) {}

Tensor::Tensor(std::vector<size_t> shape, std::vector<real> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check(data_.size() == shape_product(shape_),
        "Tensor: data length does not match shape product");
}

Tensor Tensor::full(std::vector<size_t> shape, real v) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), v);
  return t;
}

bool Tensor::all_finite() const {
  for (real v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
  os << "]";
  return os.str();
}

namespace detail {

real dot_lanes(const real* a, const real* b, size_t n) {
  real lanes[8] = {};
  size_t x = 0;
  for (; x + 8 <= n; x += 8)
    for (size_t l = 0; l < 8; ++l) lanes[l] += a[x + l] * b[x + l];
  real tail = 0;
  for (; x < n; ++x) tail += a[x] * b[x];
  return (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
          ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))) +
         tail;
}

void gemm_acc(const real* a, const real* b, real* c, size_t m, size_t k, size_t n) {
  // 4 x 16 register tiles over 128-deep k panels; the b panel stays in L1
  // across the i sweep. Named accumulator arrays keep gcc in registers.
  constexpr size_t MR = 4, NR = 16, KB = 128;
  for (size_t j0 = 0; j0 < n; j0 += NR) {
    const size_t nr = std::min(NR, n - j0);
    for (size_t k0 = 0; k0 < k; k0 += KB) {
      const size_t kend = std::min(k0 + KB, k);
      size_t i0 = 0;
      if (nr == NR) {
        for (; i0 + MR <= m; i0 += MR) {
          real acc0[NR] = {}, acc1[NR] = {}, acc2[NR] = {}, acc3[NR] = {};
          for (size_t kk = k0; kk < kend; ++kk) {
            const real* MASKCONS_RESTRICT brow = b + kk * n + j0;
            const real a0 = a[(i0 + 0) * k + kk];
            const real a1 = a[(i0 + 1) * k + kk];
            const real a2 = a[(i0 + 2) * k + kk];
            const real a3 = a[(i0 + 3) * k + kk];
            for (size_t j = 0; j < NR; ++j) {
              const real bv = brow[j];
              acc0[j] += a0 * bv;
              acc1[j] += a1 * bv;
              acc2[j] += a2 * bv;
              acc3[j] += a3 * bv;
            }
          }
          real* MASKCONS_RESTRICT c0 = c + (i0 + 0) * n + j0;
          real* MASKCONS_RESTRICT c1 = c + (i0 + 1) * n + j0;
          real* MASKCONS_RESTRICT c2 = c + (i0 + 2) * n + j0;
          real* MASKCONS_RESTRICT c3 = c + (i0 + 3) * n + j0;
          for (size_t j = 0; j < NR; ++j) {
            c0[j] += acc0[j];
            c1[j] += acc1[j];
            c2[j] += acc2[j];
            c3[j] += acc3[j];
          }
        }
      }
      for (size_t i = i0; i < m; ++i) {
        for (size_t j = j0; j < j0 + nr; ++j) {
          real acc = 0;
          for (size_t kk = k0; kk < kend; ++kk) acc += a[i * k + kk] * b[kk * n + j];
          c[i * n + j] += acc;
        }
      }
    }
  }
}

}  // namespace detail

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.ndim() == 2 && b.ndim() == 2, "matmul: operands must be rank 2");
  check(a.extent(1) == b.extent(0),
        "matmul: inner extents differ, " + a.shape_str() + " vs " + b.shape_str());
  const size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor c({m, n});
  detail::gemm_acc(a.data(), b.data(), c.data(), m, k, n);
  return c;
}

Tensor transpose(const Tensor& a) {
  check(a.ndim() == 2, "transpose: rank 2 required");
  const size_t m = a.extent(0), n = a.extent(1);
  Tensor t({n, m});
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) t.at2(j, i) = a.at2(i, j);
  return t;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int pad) {
  check(input.ndim() == 3, "conv2d: input must be C_in x H x W");
  check(kernel.ndim() == 4, "conv2d: kernel must be C_out x C_in x kh x kw");
  check(stride >= 1, "conv2d: stride < 1");
  check(pad >= 0, "conv2d: negative pad");
  const size_t cin = input.extent(0), h = input.extent(1), w = input.extent(2);
  const size_t cout = kernel.extent(0), kh = kernel.extent(2), kw = kernel.extent(3);
  check(kernel.extent(1) == cin, "conv2d: kernel C_in mismatch");
  check(kh >= 1 && kw >= 1, "conv2d: kernel extents must be >= 1");
  check(h + 2 * static_cast<size_t>(pad) >= kh && w + 2 * static_cast<size_t>(pad) >= kw,
        "conv2d: kernel larger than padded input");
  const size_t oh = (h + 2 * pad - kh) / stride + 1;
  const size_t ow = (w + 2 * pad - kw) / stride + 1;
  Tensor out({cout, oh, ow});
  for (size_t co = 0; co < cout; ++co) {
    for (size_t oy = 0; oy < oh; ++oy) {
      for (size_t ox = 0; ox < ow; ++ox) {
        real acc = 0;
        const long y0 = static_cast<long>(oy) * stride - pad;
        const long x0 = static_cast<long>(ox) * stride - pad;
        for (size_t ci = 0; ci < cin; ++ci) {
          for (size_t ky = 0; ky < kh; ++ky) {
            const long y = y0 + static_cast<long>(ky);
            if (y < 0 || y >= static_cast<long>(h)) continue;
            for (size_t kx = 0; kx < kw; ++kx) {
              const long x = x0 + static_cast<long>(kx);
              if (x < 0 || x >= static_cast<long>(w)) continue;
              acc += input.at3(ci, y, x) * kernel.at4(co, ci, ky, kx);
            }
          }
        }
        out.at3(co, oy, ox) = acc;
      }
    }
  }
  return out;
}

Tensor box_filter(const Tensor& img, int window_h, int window_w) {
  check(img.ndim() == 2, "box_filter: image must be H x W");
  check(window_h >= 1 && window_w >= 1, "box_filter: window extents must be >= 1");
  const size_t h = img.extent(0), w = img.extent(1);
  const size_t wh = static_cast<size_t>(window_h), ww = static_cast<size_t>(window_w);
  check(wh <= h && ww <= w, "box_filter: window larger than image");
  // Integral image with a zero top row / left column.
  std::vector<double> integ((h + 1) * (w + 1), 0.0);
  const size_t iw = w + 1;
  for (size_t y = 0; y < h; ++y) {
    double rowsum = 0.0;
    for (size_t x = 0; x < w; ++x) {
      rowsum += static_cast<double>(img.at2(y, x));
      integ[(y + 1) * iw + (x + 1)] = integ[y * iw + (x + 1)] + rowsum;
    }
  }
  Tensor out({h - wh + 1, w - ww + 1});
  for (size_t y = 0; y + wh <= h; ++y) {
    for (size_t x = 0; x + ww <= w; ++x) {
      const double s = integ[(y + wh) * iw + (x + ww)] - integ[y * iw + (x + ww)] -
                       integ[(y + wh) * iw + x] + integ[y * iw + x];
      out.at2(y, x) = static_cast<real>(s);
    }
  }
  return out;
}

Tensor reduce(const Tensor& t, size_t axis, Reduce mode) {
  check(axis < t.ndim(), "reduce: axis out of range");
  const size_t extent = t.extent(axis);
  check(extent > 0, "reduce: empty axis");
  std::vector<size_t> out_shape;
  for (size_t i = 0; i < t.ndim(); ++i)
    if (i != axis) out_shape.push_back(t.extent(i));
  size_t outer = 1, inner = 1;
  for (size_t i = 0; i < axis; ++i) outer *= t.extent(i);
  for (size_t i = axis + 1; i < t.ndim(); ++i) inner *= t.extent(i);
  Tensor out(out_shape);
  for (size_t o = 0; o < outer; ++o) {
    for (size_t in = 0; in < inner; ++in) {
      const real* base = t.data() + (o * extent) * inner + in;
      real acc;
      size_t arg = 0;
      switch (mode) {
        case Reduce::sum:
        case Reduce::mean: {
          acc = 0;
          for (size_t e = 0; e < extent; ++e) acc += base[e * inner];
          if (mode == Reduce::mean) acc /= static_cast<real>(extent);
          break;
        }
        case Reduce::max:
        case Reduce::argmax: {
          acc = base[0];
          for (size_t e = 1; e < extent; ++e) {
            if (base[e * inner] > acc) {  // strict: ties keep the lowest index
              acc = base[e * inner];
              arg = e;
            }
          }
          if (mode == Reduce::argmax) acc = static_cast<real>(arg);
          break;
        }
      }
      out[o * inner + in] = acc;
    }
  }
  return out;
}

static void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  check(a.same_shape(b), std::string(op) + ": shape mismatch, " + a.shape_str() +
                             " vs " + b.shape_str());
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor c = a;
  for (size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor c = a;
  for (size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  return c;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor c = a;
  for (size_t i = 0; i < c.size(); ++i) c[i] *= b[i];
  return c;
}

Tensor scale(const Tensor& a, real s) {
  Tensor c = a;
  for (size_t i = 0; i < c.size(); ++i) c[i] *= s;
  return c;
}

void axpy(Tensor& y, real s, const Tensor& x) {
  check_same_shape(y, x, "axpy");
  for (size_t i = 0; i < y.size(); ++i) y[i] += s * x[i];
}

real sum_all(const Tensor& a) {
  real s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i];
  return s;
}

real dot(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "dot");
  real s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

real l2_norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

real mean_all(const Tensor& a) {
  check(a.size() > 0, "mean_all: empty tensor");
  return sum_all(a) / static_cast<real>(a.size());
}

real stddev_all(const Tensor& a) {
  check(a.size() > 0, "stddev_all: empty tensor");
  const real m = mean_all(a);
  real s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += (a[i] - m) * (a[i] - m);
  return std::sqrt(s / static_cast<real>(a.size()));
}

void save_tensor(std::ostream& os, const Tensor& t) {
  os << "TNSR v1 " << t.ndim();
  for (size_t e : t.shape()) os << " " << e;
  os << " " << kRealTag << "\n";
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.size() * sizeof(real)));
  require(os.good(), "save_tensor: write failed");
}

Tensor load_tensor(std::istream& is) {
  std::string magic, version, tag;
  size_t ndim = 0;
  is >> magic >> version >> ndim;
  require(is.good() && magic == "TNSR" && version == "v1", "load_tensor: bad header");
  std::vector<size_t> shape(ndim);
  for (size_t i = 0; i < ndim; ++i) is >> shape[i];
  is >> tag;
  require(is.good() && (tag == "f32" || tag == "f64"), "load_tensor: bad precision tag");
  is.get();  // consume the newline terminating the header
  const size_t n = shape_product(shape);
  Tensor t(shape);
  if (tag == kRealTag) {
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(n * sizeof(real)));
  } else if (tag == "f64") {
    std::vector<double> buf(n);
    is.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    for (size_t i = 0; i < n; ++i) t[i] = static_cast<real>(buf[i]);
  } else {
    std::vector<float> buf(n);
    is.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(n * sizeof(float)));
    for (size_t i = 0; i < n; ++i) t[i] = static_cast<real>(buf[i]);
  }
  require(is.good() || is.eof(), "load_tensor: truncated data");
  return t;
}

void save_tensor_file(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  require(os.is_open(), "save_tensor_file: cannot open " + path);
  save_tensor(os, t);
}

Tensor load_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.is_open(), "load_tensor_file: cannot open " + path);
  return load_tensor(is);
}

}  // namespace maskcons
