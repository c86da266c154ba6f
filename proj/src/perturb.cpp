#include "maskcons/perturb.hpp"

#include <algorithm>
#include <cmath>

#include "maskcons/image_io.hpp"

namespace maskcons {

Tensor RectMask::materialize() const {
  const real inside = polarity == MaskPolarity::zero_inside ? real(0) : real(1);
  const real outside = real(1) - inside;
  Tensor m = Tensor::full({h, w}, outside);
  for (size_t y = y0; y < y0 + rh; ++y)
    for (size_t x = x0; x < x0 + rw; ++x) m.at2(y, x) = inside;
  return m;
}

namespace {

size_t round_side(real v, size_t limit) {
  const real r = std::floor(v + real(0.5));
  return static_cast<size_t>(std::clamp(r, real(1), static_cast<real>(limit)));
}

// Log-uniform aspect draw on [lo_pref, hi_pref] intersected with the range
// where a rectangle of area `area` fits an h x w image; falls back to the
// nearest feasible endpoint when the preferred range is entirely infeasible.
real draw_aspect(real area, size_t h, size_t w, real lo_pref, real hi_pref, Rng& rng) {
  const real lo_fit = area / (static_cast<real>(w) * static_cast<real>(w));
  const real hi_fit = static_cast<real>(h) * static_cast<real>(h) / area;
  const real lo = std::max(lo_pref, lo_fit);
  const real hi = std::min(hi_pref, hi_fit);
  if (lo > hi) return lo_fit > hi_pref ? lo_fit : hi_fit;
  return rng.log_uniform(lo, hi);
}

}  // namespace

RectMask gen_cutout_mask(size_t h, size_t w, Rng& rng) {
  check(h >= 4 && w >= 4, "gen_cutout_mask: image too small (needs h,w >= 4)");
  const real area = rng.uniform(real(0.05), real(0.4)) * static_cast<real>(h * w);
  const real aspect = draw_aspect(area, h, w, real(1) / 3, real(3), rng);
  RectMask m;
  m.h = h;
  m.w = w;
  m.rh = round_side(std::sqrt(area * aspect), h);
  m.rw = round_side(std::sqrt(area / aspect), w);
  m.y0 = rng.uniform_int(h - m.rh + 1);
  m.x0 = rng.uniform_int(w - m.rw + 1);
  m.polarity = MaskPolarity::zero_inside;
  return m;
}

std::pair<real, real> cutmix_aspect_range(size_t h, size_t w) {
  const real area = static_cast<real>(h) * static_cast<real>(w) / 2;
  const real lo_fit = area / (static_cast<real>(w) * static_cast<real>(w));
  const real hi_fit = static_cast<real>(h) * static_cast<real>(h) / area;
  const real lo = std::max(real(0.5), lo_fit);
  const real hi = std::min(real(2), hi_fit);
  if (lo > hi) {
    const real a = lo_fit > 2 ? lo_fit : hi_fit;
    return {a, a};
  }
  return {lo, hi};
}

RectMask gen_cutmix_mask(size_t h, size_t w, Rng& rng) {
  check(h >= 4 && w >= 4, "gen_cutmix_mask: image too small (needs h,w >= 4)");
  const real area = static_cast<real>(h) * static_cast<real>(w) / 2;
  const auto [lo, hi] = cutmix_aspect_range(h, w);
  const real aspect = lo == hi ? lo : rng.log_uniform(lo, hi);
  RectMask m;
  m.h = h;
  m.w = w;
  m.rh = round_side(std::sqrt(area * aspect), h);
  m.rw = round_side(std::sqrt(area / aspect), w);
  m.y0 = rng.uniform_int(h - m.rh + 1);
  m.x0 = rng.uniform_int(w - m.rw + 1);
  m.polarity = MaskPolarity::one_inside;
  return m;
}

Tensor mix(const Tensor& a, const Tensor& b, const Tensor& m) {
  check(a.same_shape(b), "mix: a and b shapes differ");
  check(m.size() > 0 && a.size() % m.size() == 0,
        "mix: mask size does not divide input size");
  const size_t nd = a.ndim(), md = m.ndim();
  check(md <= nd, "mix: mask rank exceeds input rank");
  for (size_t i = 0; i < md; ++i)
    check(m.shape()[md - 1 - i] == a.shape()[nd - 1 - i],
          "mix: mask trailing extents mismatch");
  Tensor out(a.shape());
  const size_t span = m.size();
  for (size_t base = 0; base < a.size(); base += span)
    for (size_t i = 0; i < span; ++i) {
      const real mv = m[i];
      out[base + i] = (real(1) - mv) * a[base + i] + mv * b[base + i];
    }
  return out;
}

void write_mask_pgm(const std::string& path, const RectMask& mask) {
  write_pgm(path, mask.materialize());
}

AffineParams sample_affine(const AffineRanges& r, Rng& rng) {
  AffineParams p;
  p.scale = rng.uniform(r.scale_min, r.scale_max);
  p.rotation = rng.uniform(-r.rot_max, r.rot_max);
  p.flip_h = rng.bernoulli(r.flip_prob);
  p.translate_y = rng.uniform(-r.translate_max, r.translate_max);
  p.translate_x = rng.uniform(-r.translate_max, r.translate_max);
  return p;
}

AffineParams invert_affine(const AffineParams& p) {
  check(p.scale > 0, "invert_affine: degenerate scale");
  AffineParams q;
  q.scale = real(1) / p.scale;
  q.flip_h = p.flip_h;
  const real c = std::cos(p.rotation), s = std::sin(p.rotation);
  if (!p.flip_h) {
    // inverse of v = s R u + t is u = (1/s) R(-theta) (v - t)
    q.rotation = -p.rotation;
    const real tx = p.translate_x, ty = p.translate_y;
    q.translate_x = -q.scale * (c * tx + s * ty);
    q.translate_y = -q.scale * (-s * tx + c * ty);
  } else {
    // F R(-theta) = R(theta) F, so the inverse keeps theta and the flip
    q.rotation = p.rotation;
    const real fx = -p.translate_x, fy = p.translate_y;  // F applied to t
    const real c2 = std::cos(q.rotation), s2 = std::sin(q.rotation);
    q.translate_x = -q.scale * (c2 * fx - s2 * fy);
    q.translate_y = -q.scale * (s2 * fx + c2 * fy);
  }
  return q;
}

std::pair<Tensor, Tensor> warp(const Tensor& t, const AffineParams& p, WarpKind kind) {
  check(t.ndim() == 3, "warp: input must be C x H x W");
  check(p.scale > 0, "warp: degenerate (zero-scale) transform");
  const size_t ch = t.extent(0), h = t.extent(1), w = t.extent(2);
  const real cy = (static_cast<real>(h) - 1) / 2;
  const real cx = (static_cast<real>(w) - 1) / 2;
  // forward map: v = scale * R(theta) * F * u + translate (centered coords);
  // each output pixel samples the source at the inverse map.
  const real cth = std::cos(p.rotation), sth = std::sin(p.rotation);
  const real inv_s = real(1) / p.scale;
  Tensor out({ch, h, w});
  Tensor valid({h, w});
  for (size_t yo = 0; yo < h; ++yo) {
    for (size_t xo = 0; xo < w; ++xo) {
      const real vx = static_cast<real>(xo) - cx - p.translate_x;
      const real vy = static_cast<real>(yo) - cy - p.translate_y;
      real ux = inv_s * (cth * vx + sth * vy);
      const real uy = inv_s * (-sth * vx + cth * vy);
      if (p.flip_h) ux = -ux;
      const real xs = ux + cx, ys = uy + cy;
      if (xs < 0 || ys < 0 || xs > static_cast<real>(w - 1) ||
          ys > static_cast<real>(h - 1)) {
        continue;  // out pixels stay 0, valid stays 0
      }
      valid.at2(yo, xo) = 1;
      const size_t x0i = static_cast<size_t>(xs);
      const size_t y0i = static_cast<size_t>(ys);
      const size_t x1i = std::min(x0i + 1, w - 1);
      const size_t y1i = std::min(y0i + 1, h - 1);
      const real fx = xs - static_cast<real>(x0i);
      const real fy = ys - static_cast<real>(y0i);
      for (size_t c = 0; c < ch; ++c) {
        const real v00 = t.at3(c, y0i, x0i), v01 = t.at3(c, y0i, x1i);
        const real v10 = t.at3(c, y1i, x0i), v11 = t.at3(c, y1i, x1i);
        out.at3(c, yo, xo) = (1 - fy) * ((1 - fx) * v00 + fx * v01) +
                             fy * ((1 - fx) * v10 + fx * v11);
      }
      if (kind == WarpKind::probmap) {
        real sum = 0;
        for (size_t c = 0; c < ch; ++c) {
          if (out.at3(c, yo, xo) < 0) out.at3(c, yo, xo) = 0;
          sum += out.at3(c, yo, xo);
        }
        if (sum > 0)
          for (size_t c = 0; c < ch; ++c) out.at3(c, yo, xo) /= sum;
      }
    }
  }
  return {std::move(out), std::move(valid)};
}

Tensor ict_blend(const Tensor& a, const Tensor& b, real lambda) {
  check(lambda >= 0 && lambda <= 1, "ict_blend: lambda outside [0,1]");
  check(a.same_shape(b), "ict_blend: shape mismatch");
  Tensor out(a.shape());
  for (size_t i = 0; i < a.size(); ++i)
    out[i] = lambda * a[i] + (real(1) - lambda) * b[i];
  return out;
}

real input_gradient_magnitude(const Tensor& x, GradMagMode mode) {
  check(x.ndim() == 3 || x.ndim() == 1, "input_gradient_magnitude: need C x H x W or F");
  real acc = 0, mx = 0;
  size_t count = 0;
  auto feed = [&](real mag) {
    acc += (mode == GradMagMode::norm) ? mag * mag : mag;
    mx = std::max(mx, mag);
    ++count;
  };
  if (x.ndim() == 1) {
    for (size_t i = 0; i < x.size(); ++i) {
      const real dx = i + 1 < x.size() ? x[i + 1] - x[i] : real(0);
      feed(std::abs(dx));
    }
  } else {
    const size_t ch = x.extent(0), h = x.extent(1), w = x.extent(2);
    for (size_t c = 0; c < ch; ++c)
      for (size_t y = 0; y < h; ++y)
        for (size_t xx = 0; xx < w; ++xx) {
          const real dx = xx + 1 < w ? x.at3(c, y, xx + 1) - x.at3(c, y, xx) : real(0);
          const real dy = y + 1 < h ? x.at3(c, y + 1, xx) - x.at3(c, y, xx) : real(0);
          feed(std::sqrt(dx * dx + dy * dy));
        }
  }
  switch (mode) {
    case GradMagMode::mean: return acc / static_cast<real>(count);
    case GradMagMode::max: return mx;
    case GradMagMode::norm: return std::sqrt(acc);
  }
  return 0;
}

std::optional<Tensor> vat_direction(const Network& net, const Tensor& x,
                                    const VatConfig& cfg, Rng& rng) {
  check(cfg.xi > 0, "vat_direction: xi must be > 0");
  check(x.shape() == net.input_shape(), "vat_direction: x must be a single input item");
  std::vector<size_t> bshape = x.shape();
  bshape.insert(bshape.begin(), 1);
  Tensor xb(bshape, std::vector<real>(x.data(), x.data() + x.size()));

  const Tensor y0 = forward(net, xb);
  const real sigma = cfg.xi * stddev_all(x) /
                     std::sqrt(static_cast<real>(x.size()));
  Tensor xr = xb;
  for (size_t i = 0; i < xr.size(); ++i) xr[i] += sigma * rng.normal();
  auto [y1, tape] = forward_cached(net, xr);

  // d = mean over positions of the class-summed squared error.
  const size_t k = y1.extent(1);
  const size_t n_pos = y1.size() / k;
  Tensor dldy(y1.shape());
  for (size_t i = 0; i < y1.size(); ++i)
    dldy[i] = 2 * (y1[i] - y0[i]) / static_cast<real>(n_pos);
  Gradients grads = backward(net, tape, dldy);

  real gnorm = l2_norm(grads.input);
  if (gnorm == 0) return std::nullopt;
  const real eps = cfg.eps_scale * input_gradient_magnitude(x, cfg.grad_mag);
  Tensor r_adv(x.shape());
  const real scale_f = eps / gnorm;
  for (size_t i = 0; i < r_adv.size(); ++i) r_adv[i] = scale_f * grads.input[i];
  return r_adv;
}

}  // namespace maskcons
