#include "maskcons/consistency.hpp"

#include <algorithm>
#include <cmath>

#include "maskcons/image_io.hpp"

namespace maskcons {

const char* method_name(Method m) {
  switch (m) {
    case Method::baseline: return "baseline";
    case Method::cutout: return "cutout";
    case Method::cutmix: return "cutmix";
    case Method::stdaug: return "stdaug";
    case Method::ict: return "ict";
    case Method::vat: return "vat";
  }
  return "?";
}

Method method_from_name(const std::string& name) {
  for (Method m : {Method::baseline, Method::cutout, Method::cutmix, Method::stdaug,
                   Method::ict, Method::vat})
    if (name == method_name(m)) return m;
  throw std::invalid_argument("unknown method: " + name);
}

real default_cons_weight(Method m) {
  switch (m) {
    case Method::baseline: return 0;
    case Method::cutout: return 1;
    case Method::cutmix: return 1;
    case Method::stdaug: return real(0.003);
    case Method::ict: return real(0.01);
    case Method::vat: return real(0.1);
  }
  return 0;
}

TrainerState make_trainer(std::vector<LayerSpec> arch, std::vector<size_t> input_shape,
                          const TrainConfig& cfg) {
  TrainerState st;
  Rng root(cfg.seed);
  st.student = Network(std::move(arch), std::move(input_shape),
                       root.split("init").next_u64());
  st.teacher = st.student;  // starts as an exact copy
  st.adam = AdamState(st.student.n_params(), cfg.lr);
  st.rng_mask = root.split("mask");
  st.rng_vat = root.split("vat");
  return st;
}

static constexpr real kProbClamp = real(1e-12);

real cross_entropy(const Tensor& pred, const Tensor& target, int ignore_label) {
  check(pred.ndim() >= 2, "cross_entropy: pred must be [B x K x ...]");
  const size_t batch = pred.extent(0), k = pred.extent(1);
  const size_t plane = pred.size() / (batch * k);
  check(target.size() == batch * plane, "cross_entropy: target count mismatch");
  real acc = 0;
  size_t counted = 0;
  for (size_t b = 0; b < batch; ++b) {
    for (size_t pos = 0; pos < plane; ++pos) {
      const real tv = target[b * plane + pos];
      if (static_cast<int>(tv) == ignore_label) continue;
      check(tv >= 0 && tv < static_cast<real>(k), "cross_entropy: target class >= K");
      const auto cls = static_cast<size_t>(tv);
      acc -= std::log(std::max(pred[(b * k + cls) * plane + pos], kProbClamp));
      ++counted;
    }
  }
  check(counted > 0, "cross_entropy: all pixels ignored");
  return acc / static_cast<real>(counted);
}

static Tensor cross_entropy_grad(const Tensor& pred, const Tensor& target,
                                 int ignore_label) {
  const size_t batch = pred.extent(0), k = pred.extent(1);
  const size_t plane = pred.size() / (batch * k);
  size_t counted = 0;
  for (size_t i = 0; i < target.size(); ++i)
    if (static_cast<int>(target[i]) != ignore_label) ++counted;
  Tensor g(pred.shape());
  for (size_t b = 0; b < batch; ++b) {
    for (size_t pos = 0; pos < plane; ++pos) {
      const real tv = target[b * plane + pos];
      if (static_cast<int>(tv) == ignore_label) continue;
      const size_t idx = (b * k + static_cast<size_t>(tv)) * plane + pos;
      if (pred[idx] > kProbClamp)
        g[idx] = -real(1) / (pred[idx] * static_cast<real>(counted));
    }
  }
  return g;
}

real sq_err_cons(const Tensor& a, const Tensor& b, const Tensor* pixel_mask) {
  check(a.same_shape(b), "sq_err_cons: shape mismatch");
  check(a.ndim() >= 2, "sq_err_cons: operands must be [B x K x ...]");
  const size_t batch = a.extent(0), k = a.extent(1);
  const size_t plane = a.size() / (batch * k);
  if (pixel_mask)
    check(pixel_mask->size() == batch * plane, "sq_err_cons: mask extents mismatch");
  real acc = 0, denom = 0;
  for (size_t bpos = 0; bpos < batch * plane; ++bpos) {
    const real w = pixel_mask ? (*pixel_mask)[bpos] : real(1);
    if (w == 0) continue;
    const size_t b0 = bpos / plane, pos = bpos % plane;
    real se = 0;
    for (size_t c = 0; c < k; ++c) {
      const size_t idx = (b0 * k + c) * plane + pos;
      const real d = a[idx] - b[idx];
      se += d * d;
    }
    acc += w * se;
    denom += w;
  }
  check(denom > 0, "sq_err_cons: empty unmasked set");
  return acc / denom;
}

// dLoss/da for sq_err_cons with the same weighting convention.
static Tensor sq_err_cons_grad(const Tensor& a, const Tensor& b, const Tensor* pixel_mask) {
  const size_t batch = a.extent(0), k = a.extent(1);
  const size_t plane = a.size() / (batch * k);
  real denom = 0;
  if (pixel_mask) {
    for (size_t i = 0; i < pixel_mask->size(); ++i) denom += (*pixel_mask)[i];
  } else {
    denom = static_cast<real>(batch * plane);
  }
  check(denom > 0, "sq_err_cons: empty unmasked set");
  Tensor g(a.shape());
  for (size_t b0 = 0; b0 < batch; ++b0) {
    for (size_t pos = 0; pos < plane; ++pos) {
      const real w = pixel_mask ? (*pixel_mask)[b0 * plane + pos] : real(1);
      if (w == 0) continue;
      for (size_t c = 0; c < k; ++c) {
        const size_t idx = (b0 * k + c) * plane + pos;
        g[idx] = 2 * w * (a[idx] - b[idx]) / denom;
      }
    }
  }
  return g;
}

real confidence_factor(const Tensor& teacher_pred, real threshold) {
  check(teacher_pred.size() > 0, "confidence_factor: empty input");
  check(teacher_pred.ndim() >= 2, "confidence_factor: pred must be [B x K x ...]");
  const size_t batch = teacher_pred.extent(0), k = teacher_pred.extent(1);
  const size_t plane = teacher_pred.size() / (batch * k);
  size_t above = 0;
  for (size_t b = 0; b < batch; ++b) {
    for (size_t pos = 0; pos < plane; ++pos) {
      real conf = 0;
      for (size_t c = 0; c < k; ++c)
        conf = std::max(conf, teacher_pred[(b * k + c) * plane + pos]);
      if (conf > threshold) ++above;
    }
  }
  return static_cast<real>(above) / static_cast<real>(batch * plane);
}

// --- internal consistency machinery ------------------------------------------

namespace {

Tensor item_view(const Tensor& batch, size_t i) {
  std::vector<size_t> shape(batch.shape().begin() + 1, batch.shape().end());
  const size_t span = shape_product(shape);
  return Tensor(shape,
                std::vector<real>(batch.data() + i * span, batch.data() + (i + 1) * span));
}

void item_store(Tensor& batch, size_t i, const Tensor& item) {
  const size_t span = item.size();
  std::copy(item.data(), item.data() + span, batch.data() + i * span);
}

struct ConsResult {
  real loss = 0;
  Tensor dparams;        // empty unless gradients were requested
  Tensor teacher_clean;  // teacher predictions on the clean unsup batch
  int vat_skipped = 0;
};

// Student loss against a constant target with optional position mask;
// fills gradients when requested.
void student_vs_target(const Network& student, const Tensor& student_in,
                       const Tensor& target, const Tensor* mask, bool want_grads,
                       ConsResult& out) {
  if (!want_grads) {
    out.loss = sq_err_cons(forward(student, student_in), target, mask);
    return;
  }
  auto [pred, tape] = forward_cached(student, student_in);
  out.loss = sq_err_cons(pred, target, mask);
  out.dparams = backward(student, tape, sq_err_cons_grad(pred, target, mask)).params;
}

ConsResult run_cons(const Network& student, const Network& teacher, Method method,
                    const Tensor& x, const TrainConfig& cfg, Rng& rng_mask, Rng& rng_vat,
                    bool want_grads) {
  ConsResult out;
  const size_t batch = x.extent(0);
  switch (method) {
    case Method::baseline:
      check(false, "run_cons: baseline has no consistency term");
      break;
    case Method::cutout: {
      check(x.ndim() == 4, "cons_cutout: image batch required");
      const size_t ch = x.extent(1), h = x.extent(2), w = x.extent(3);
      Tensor masks({batch, h, w});
      Tensor masked = x;
      for (size_t i = 0; i < batch; ++i) {
        const Tensor m = gen_cutout_mask(h, w, rng_mask).materialize();
        std::copy(m.data(), m.data() + m.size(), masks.data() + i * h * w);
        for (size_t c = 0; c < ch; ++c)
          for (size_t p = 0; p < h * w; ++p)
            masked[(i * ch + c) * h * w + p] *= m[p];
      }
      out.teacher_clean = forward(teacher, x);
      student_vs_target(student, masked, out.teacher_clean, &masks, want_grads, out);
      break;
    }
    case Method::cutmix: {
      check(x.ndim() == 4, "cons_cutmix: image batch required");
      const size_t h = x.extent(2), w = x.extent(3);
      out.teacher_clean = forward(teacher, x);
      Tensor mixed_x(x.shape());
      Tensor target(out.teacher_clean.shape());
      for (size_t i = 0; i < batch; ++i) {
        const size_t j = batch - 1 - i;
        const Tensor m = gen_cutmix_mask(h, w, rng_mask).materialize();
        item_store(mixed_x, i, mix(item_view(x, i), item_view(x, j), m));
        item_store(target, i,
                   mix(item_view(out.teacher_clean, i), item_view(out.teacher_clean, j), m));
      }
      student_vs_target(student, mixed_x, target, nullptr, want_grads, out);
      break;
    }
    case Method::stdaug: {
      check(x.ndim() == 4, "cons_stdaug: image batch required");
      const size_t h = x.extent(2), w = x.extent(3);
      out.teacher_clean = forward(teacher, x);
      Tensor student_in(x.shape());
      Tensor target(out.teacher_clean.shape());
      Tensor valid({batch, h, w});
      for (size_t i = 0; i < batch; ++i) {
        const AffineParams p = sample_affine(cfg.affine, rng_mask);
        item_store(student_in, i, warp(item_view(x, i), p, WarpKind::image).first);
        auto [twarp, v] = warp(item_view(out.teacher_clean, i), p, WarpKind::probmap);
        item_store(target, i, twarp);
        std::copy(v.data(), v.data() + v.size(), valid.data() + i * h * w);
      }
      student_vs_target(student, student_in, target, &valid, want_grads, out);
      break;
    }
    case Method::ict: {
      out.teacher_clean = forward(teacher, x);
      Tensor blended_x(x.shape());
      Tensor target(out.teacher_clean.shape());
      for (size_t i = 0; i < batch; ++i) {
        const size_t j = batch - 1 - i;
        const real lambda = rng_mask.u01();
        item_store(blended_x, i, ict_blend(item_view(x, i), item_view(x, j), lambda));
        item_store(target, i,
                   ict_blend(item_view(out.teacher_clean, i),
                             item_view(out.teacher_clean, j), lambda));
      }
      student_vs_target(student, blended_x, target, nullptr, want_grads, out);
      break;
    }
    case Method::vat: {
      out.teacher_clean = forward(teacher, x);
      Tensor perturbed = x;
      for (size_t i = 0; i < batch; ++i) {
        auto r = vat_direction(student, item_view(x, i), cfg.vat, rng_vat);
        if (!r) {
          ++out.vat_skipped;  // zero contribution for this sample
          continue;
        }
        const size_t span = r->size();
        for (size_t p = 0; p < span; ++p) perturbed[i * span + p] += (*r)[p];
      }
      const Tensor target = forward(student, x);  // constant target
      student_vs_target(student, perturbed, target, nullptr, want_grads, out);
      break;
    }
  }
  return out;
}

}  // namespace

real cons_cutout(const Network& student, const Network& teacher, const Tensor& x, Rng& rng) {
  TrainConfig cfg;
  Rng unused(0);
  return run_cons(student, teacher, Method::cutout, x, cfg, rng, unused, false).loss;
}

real cons_cutmix(const Network& student, const Network& teacher, const Tensor& x_a,
                 const Tensor& x_b, Rng& rng) {
  check(x_a.same_shape(x_b), "cons_cutmix: pair shape mismatch");
  // Stack the pair so element i mixes with element (B-1-i) of the same batch.
  check(x_a.extent(0) == 1, "cons_cutmix: pairwise entry point takes single items");
  std::vector<size_t> shape = x_a.shape();
  shape[0] = 2;
  Tensor both(shape);
  item_store(both, 0, item_view(x_a, 0));
  item_store(both, 1, item_view(x_b, 0));
  TrainConfig cfg;
  Rng unused(0);
  return run_cons(student, teacher, Method::cutmix, both, cfg, rng, unused, false).loss;
}

real cons_stdaug(const Network& student, const Network& teacher, const Tensor& x,
                 const AffineRanges& ranges, Rng& rng) {
  TrainConfig cfg;
  cfg.affine = ranges;
  Rng unused(0);
  return run_cons(student, teacher, Method::stdaug, x, cfg, rng, unused, false).loss;
}

real cons_ict(const Network& student, const Network& teacher, const Tensor& x_a,
              const Tensor& x_b, Rng& rng) {
  check(x_a.same_shape(x_b), "cons_ict: pair shape mismatch");
  check(x_a.extent(0) == 1, "cons_ict: pairwise entry point takes single items");
  std::vector<size_t> shape = x_a.shape();
  shape[0] = 2;
  Tensor both(shape);
  item_store(both, 0, item_view(x_a, 0));
  item_store(both, 1, item_view(x_b, 0));
  TrainConfig cfg;
  Rng unused(0);
  return run_cons(student, teacher, Method::ict, both, cfg, rng, unused, false).loss;
}

real cons_vat(const Network& student, const Tensor& x, const VatConfig& vcfg, Rng& rng) {
  TrainConfig cfg;
  cfg.vat = vcfg;
  Rng unused(0);
  // the teacher plays no role in the VAT term itself
  return run_cons(student, student, Method::vat, x, cfg, unused, rng, false).loss;
}

StepReport train_step(TrainerState& state, const Tensor& sup_x, const Tensor& sup_y,
                      const Tensor& unsup_x, const TrainConfig& cfg) {
  check(sup_x.size() > 0 && sup_x.extent(0) > 0, "train_step: empty supervised batch");
  check(cfg.method == Method::baseline || unsup_x.extent(0) > 0,
        "train_step: empty unsupervised batch");

  auto [sup_pred, sup_tape] = forward_cached(state.student, sup_x);
  const real l_sup = cross_entropy(sup_pred, sup_y);
  Tensor grads =
      backward(state.student, sup_tape, cross_entropy_grad(sup_pred, sup_y, -1)).params;

  StepReport rep;
  rep.l_sup = l_sup;
  if (cfg.method != Method::baseline) {
    ConsResult cons = run_cons(state.student, state.teacher, cfg.method, unsup_x, cfg,
                               state.rng_mask, state.rng_vat, true);
    rep.l_cons = cons.loss;
    rep.conf_factor = cfg.conf_modulation
                          ? confidence_factor(cons.teacher_clean, cfg.conf_threshold)
                          : real(1);
    const real scale_w = cfg.cons_weight * rep.conf_factor;
    if (scale_w != 0) axpy(grads, scale_w, cons.dparams);
  }
  rep.total = rep.l_sup + cfg.cons_weight * rep.conf_factor * rep.l_cons;
  require(std::isfinite(rep.total), "train_step: non-finite total loss (divergence)");

  adam_step(state.adam, state.student.mutable_params(), grads);
  ema_update(state.teacher.mutable_params(), state.student.params(),
             EmaConfig{cfg.ema_alpha});
  state.step += 1;
  rep.step = state.step;
  return rep;
}

void write_step_reports_csv(const std::string& path, const std::vector<StepReport>& rows) {
  CsvWriter csv(path, {"step", "l_sup", "l_cons", "conf_factor", "total"});
  for (const StepReport& r : rows)
    csv.row({std::to_string(r.step), fmt_real(r.l_sup), fmt_real(r.l_cons),
             fmt_real(r.conf_factor), fmt_real(r.total)});
}

}  // namespace maskcons
