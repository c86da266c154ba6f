#pragma once

#include <string>
#include <vector>

#include "maskcons/nn.hpp"
#include "maskcons/perturb.hpp"
#include "maskcons/rng.hpp"

namespace maskcons {

enum class Method { baseline, cutout, cutmix, stdaug, ict, vat };

const char* method_name(Method m);
Method method_from_name(const std::string& name);

struct TrainConfig {
  Method method = Method::baseline;
  real cons_weight = 1;
  real conf_threshold = real(0.97);
  real ema_alpha = real(0.99);
  int steps = 0;
  int batch_sup = 4;
  int batch_unsup = 4;
  real lr = real(1e-3);
  uint64_t seed = 0;
  // Whether the confidence factor also modulates the non-mask variants
  // (std-aug / ICT / VAT); on by default, switchable.
  bool conf_modulation = true;
  AffineRanges affine;
  VatConfig vat;
};

real default_cons_weight(Method m);  // 1 cutout/cutmix, 0.003 stdaug, 0.01 ict, 0.1 vat

// Student f and teacher g with identical architectures; the teacher starts as
// a copy of the student and afterwards changes only through ema_update.
struct TrainerState {
  Network student;
  Network teacher;
  AdamState adam;
  int64_t step = 0;
  Rng rng_mask{0};
  Rng rng_vat{0};
};

TrainerState make_trainer(std::vector<LayerSpec> arch, std::vector<size_t> input_shape,
                          const TrainConfig& cfg);

struct StepReport {
  real l_sup = 0;
  real l_cons = 0;
  real conf_factor = 0;
  int64_t step = 0;
  real total = 0;  // l_sup + cons_weight * conf_factor * l_cons
};

// --- losses -----------------------------------------------------------------

// Mean over non-ignored positions of -log p[target]; probabilities clamped at
// 1e-12 before the log. pred is [B x K x spatial...], target [B x spatial...].
real cross_entropy(const Tensor& pred, const Tensor& target, int ignore_label = -1);

// Squared error summed over the class axis (axis 1), then averaged over the
// remaining (batch and spatial) positions; pixel_mask, when given, selects
// which positions enter the mean (mask extents = the position extents).
real sq_err_cons(const Tensor& a, const Tensor& b, const Tensor* pixel_mask = nullptr);

// Fraction of positions whose max class probability exceeds the threshold.
real confidence_factor(const Tensor& teacher_pred, real threshold);

// --- the five consistency variants -------------------------------------------
// All run the teacher on clean inputs as a constant target (no gradient flows
// into the teacher); these entry points return the loss value only.

real cons_cutout(const Network& student, const Network& teacher, const Tensor& x, Rng& rng);
real cons_cutmix(const Network& student, const Network& teacher, const Tensor& x_a,
                 const Tensor& x_b, Rng& rng);
real cons_stdaug(const Network& student, const Network& teacher, const Tensor& x,
                 const AffineRanges& ranges, Rng& rng);
real cons_ict(const Network& student, const Network& teacher, const Tensor& x_a,
              const Tensor& x_b, Rng& rng);
real cons_vat(const Network& student, const Tensor& x, const VatConfig& cfg, Rng& rng);

// One optimization step: cross-entropy on the supervised batch plus
// cons_weight * confidence_factor * L_cons on the unsupervised batch, one Adam
// step on the student, then an EMA update of every teacher parameter.
StepReport train_step(TrainerState& state, const Tensor& sup_x, const Tensor& sup_y,
                      const Tensor& unsup_x, const TrainConfig& cfg);

// Appends "step,l_sup,l_cons,conf_factor,total" rows.
void write_step_reports_csv(const std::string& path, const std::vector<StepReport>& rows);

}  // namespace maskcons
