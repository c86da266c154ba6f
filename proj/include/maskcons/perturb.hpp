#pragma once

#include <optional>
#include <utility>

#include "maskcons/nn.hpp"
#include "maskcons/rng.hpp"
#include "maskcons/tensor.hpp"

namespace maskcons {

enum class MaskPolarity { zero_inside, one_inside };

// Axis-aligned rectangle mask over an h x w image. The rectangle always lies
// entirely within the image.
struct RectMask {
  size_t h = 0, w = 0;
  size_t y0 = 0, x0 = 0, rh = 0, rw = 0;
  MaskPolarity polarity = MaskPolarity::zero_inside;

  Tensor materialize() const;  // H x W of exact {0,1}
  size_t area() const { return rh * rw; }
};

// Occlusion mask: rectangle area fraction uniform in [0.05, 0.4] of the
// image, aspect ratio (rh/rw) log-uniform in [1/3, 3] clipped to the range
// that fits, position uniform among valid placements. Zero inside.
RectMask gen_cutout_mask(size_t h, size_t w, Rng& rng);

// Paste mask: rectangle area fixed to half the image up to rounding
// (|rh*rw - h*w/2| <= max(h,w)), aspect ratio log-uniform in [1/2, 2]
// clipped to the feasible range for non-square images, position uniform.
// One inside.
RectMask gen_cutmix_mask(size_t h, size_t w, Rng& rng);

// Aspect-ratio interval actually sampled for an h x w cutmix rectangle;
// narrower than [1/2, 2] only when the image is non-square enough that a
// half-area rectangle would not fit.
std::pair<real, real> cutmix_aspect_range(size_t h, size_t w);

// Elementwise (1-M)*a + M*b. M must either match the full shape or match the
// trailing extents of a (it is then broadcast across the leading axes, e.g. a
// H x W mask over B x C x H x W images).
Tensor mix(const Tensor& a, const Tensor& b, const Tensor& m);

// Writes the mask as a PGM (P5) image, 0 -> black, 1 -> white.
void write_mask_pgm(const std::string& path, const RectMask& mask);

// --- affine augmentation ---------------------------------------------------

struct AffineParams {
  real scale = 1;        // > 0
  real rotation = 0;     // radians
  bool flip_h = false;
  real translate_y = 0;  // pixels
  real translate_x = 0;
};

struct AffineRanges {
  real scale_min = real(0.75), scale_max = real(1.25);
  real rot_max = real(0.5236);  // +/- 30 degrees
  real flip_prob = real(0.5);
  real translate_max = 8;       // pixels, +/- both axes
};

AffineParams sample_affine(const AffineRanges& ranges, Rng& rng);
AffineParams invert_affine(const AffineParams& p);

enum class WarpKind { image, probmap };

// Bilinear inverse warp of t[C x H x W] about the image center. Pixels that
// sample outside the source are 0 and flagged 0 in the returned valid mask
// (H x W). Probability maps are clamped at 0 and renormalized to sum 1 on
// valid pixels.
std::pair<Tensor, Tensor> warp(const Tensor& t, const AffineParams& p, WarpKind kind);

// --- ICT blending ------------------------------------------------------------

// lambda*a + (1-lambda)*b; the caller uses one lambda per batch pair for both
// inputs and teacher predictions.
Tensor ict_blend(const Tensor& a, const Tensor& b, real lambda);

// --- virtual adversarial direction ------------------------------------------

enum class GradMagMode { mean, max, norm };

struct VatConfig {
  // Finite-difference probe radius, relative to the per-image standard
  // deviation of x.
  real xi = real(1e-3);
  // Adversarial radius = eps_scale * spatial gradient magnitude of x.
  real eps_scale = 1;
  GradMagMode grad_mag = GradMagMode::mean;
};

// Mean over pixels of sqrt((dx x)^2 + (dy x)^2), averaged over channels
// (forward differences, zero at the far edges); or the max / Frobenius-norm
// variants selected by mode.
real input_gradient_magnitude(const Tensor& x, GradMagMode mode);

// Adversarial direction for one item x (shape = net input signature):
// r ~ N(0, (xi*std(x))^2), g = grad_r of the mean-over-pixel squared error
// between f(x) and f(x+r), r_adv = eps * g/|g| with eps as above.
// Returns nullopt when the probe gradient is exactly zero (constant nets);
// the caller skips the VAT term for that sample.
std::optional<Tensor> vat_direction(const Network& net, const Tensor& x,
                                    const VatConfig& cfg, Rng& rng);

}  // namespace maskcons
