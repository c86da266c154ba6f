#include "maskcons/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_set>

namespace maskcons {

const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv3x3: return "conv3x3";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2: return "maxpool2";
    case LayerKind::upsample2: return "upsample2";
    case LayerKind::concat_skip: return "concat_skip";
    case LayerKind::softmax_head: return "softmax_head";
  }
  return "?";
}

LayerKind layer_kind_from_name(const std::string& name) {
  for (LayerKind k : {LayerKind::dense, LayerKind::conv3x3, LayerKind::relu,
                      LayerKind::maxpool2, LayerKind::upsample2, LayerKind::concat_skip,
                      LayerKind::softmax_head}) {
    if (name == layer_kind_name(k)) return k;
  }
  throw std::invalid_argument("unknown layer kind: " + name);
}

LayerSpec dense_layer(size_t in, size_t out) { return {LayerKind::dense, in, out, 0}; }
LayerSpec conv3x3_layer(size_t in_ch, size_t out_ch) {
  return {LayerKind::conv3x3, in_ch, out_ch, 0};
}
LayerSpec relu_layer() { return {LayerKind::relu, 0, 0, 0}; }
LayerSpec maxpool2_layer() { return {LayerKind::maxpool2, 0, 0, 0}; }
LayerSpec upsample2_layer() { return {LayerKind::upsample2, 0, 0, 0}; }
LayerSpec concat_skip_layer(size_t skip_src) {
  return {LayerKind::concat_skip, 0, 0, skip_src};
}
LayerSpec softmax_head_layer() { return {LayerKind::softmax_head, 0, 0, 0}; }

static size_t param_count(const LayerSpec& s) {
  switch (s.kind) {
    case LayerKind::dense: return s.in_ch * s.out_ch + s.out_ch;
    case LayerKind::conv3x3: return s.out_ch * s.in_ch * 9 + s.out_ch;
    default: return 0;
  }
}

Network::Network(std::vector<LayerSpec> layers, std::vector<size_t> input_shape,
                 uint64_t seed)
    : layers_(std::move(layers)), input_shape_(std::move(input_shape)), rng_seed_(seed) {
  check(input_shape_.size() == 1 || input_shape_.size() == 3,
        "Network: input shape must be {F} or {C,H,W}");
  act_shapes_.push_back(input_shape_);
  offsets_.push_back(0);
  for (size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& s = layers_[i];
    const std::vector<size_t>& in = act_shapes_.back();
    std::vector<size_t> out;
    switch (s.kind) {
      case LayerKind::dense:
        check(in.size() == 1 && in[0] == s.in_ch,
              "Network: dense layer " + std::to_string(i) + " input mismatch");
        check(s.out_ch >= 1, "Network: dense out_ch must be >= 1");
        out = {s.out_ch};
        break;
      case LayerKind::conv3x3:
        check(in.size() == 3 && in[0] == s.in_ch,
              "Network: conv3x3 layer " + std::to_string(i) + " input mismatch");
        check(s.out_ch >= 1, "Network: conv3x3 out_ch must be >= 1");
        out = {s.out_ch, in[1], in[2]};
        break;
      case LayerKind::relu:
      case LayerKind::softmax_head:
        out = in;
        break;
      case LayerKind::maxpool2:
        check(in.size() == 3 && in[1] % 2 == 0 && in[2] % 2 == 0,
              "Network: maxpool2 needs even C x H x W input");
        out = {in[0], in[1] / 2, in[2] / 2};
        break;
      case LayerKind::upsample2:
        check(in.size() == 3, "Network: upsample2 needs C x H x W input");
        out = {in[0], in[1] * 2, in[2] * 2};
        break;
      case LayerKind::concat_skip: {
        check(in.size() == 3, "Network: concat_skip needs C x H x W input");
        check(s.skip_src < act_shapes_.size() - 1,
              "Network: concat_skip source must precede the layer");
        const auto& src = act_shapes_[s.skip_src];
        check(src.size() == 3 && src[1] == in[1] && src[2] == in[2],
              "Network: concat_skip spatial extents mismatch");
        out = {in[0] + src[0], in[1], in[2]};
        break;
      }
    }
    act_shapes_.push_back(out);
    offsets_.push_back(offsets_.back() + param_count(s));
  }
  params_ = Tensor({offsets_.back()});
  Rng rng(seed);
  for (size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& s = layers_[i];
    if (s.kind != LayerKind::dense && s.kind != LayerKind::conv3x3) continue;
    const size_t fan_in = s.kind == LayerKind::dense ? s.in_ch : s.in_ch * 9;
    const real std = static_cast<real>(std::sqrt(2.0 / static_cast<double>(fan_in)));
    const size_t n_w = param_count(s) - s.out_ch;
    real* p = params_.data() + offsets_[i];
    for (size_t j = 0; j < n_w; ++j) p[j] = rng.normal() * std;
    // biases stay zero
  }
}

// --- forward kernels -------------------------------------------------------

namespace {

struct Shape3 {
  size_t c, h, w;
};

Shape3 as3(const std::vector<size_t>& s) { return {s[0], s[1], s[2]}; }

void dense_fwd(const real* x, const real* w, const real* b, real* y, size_t batch,
               size_t fin, size_t fout) {
  for (size_t i = 0; i < batch; ++i) {
    real* yr = y + i * fout;
    for (size_t j = 0; j < fout; ++j) yr[j] = b[j];
  }
  detail::gemm_acc(x, w, y, batch, fin, fout);
}

// Zero-padded copy of one C x H x W item, pad 1 on each side.
std::vector<real> pad1(const real* x, Shape3 s) {
  const size_t ph = s.h + 2, pw = s.w + 2;
  std::vector<real> out(s.c * ph * pw, real(0));
  for (size_t c = 0; c < s.c; ++c)
    for (size_t y = 0; y < s.h; ++y)
      std::memcpy(out.data() + (c * ph + y + 1) * pw + 1, x + (c * s.h + y) * s.w,
                  s.w * sizeof(real));
  return out;
}

// Direct 3x3 convolution of one padded item. Output rows for all channels at
// one y accumulate in a small scratch so each input row is brought in once per
// (y, ci, ky) and reused across output channels from L1. Per output element
// the (ci, ky, kx) accumulation order matches the naive loop.
void conv3x3_fwd_item(const std::vector<real>& padded, const real* kernel, const real* bias,
                      real* out, size_t cin, size_t cout, size_t h, size_t w,
                      std::vector<real>& scratch) {
  const size_t pw = w + 2;
  scratch.resize(cout * w);
  for (size_t y = 0; y < h; ++y) {
    for (size_t co = 0; co < cout; ++co) {
      real* arow = scratch.data() + co * w;
      const real bv = bias ? bias[co] : real(0);
      for (size_t x = 0; x < w; ++x) arow[x] = bv;
    }
    for (size_t ci = 0; ci < cin; ++ci) {
      for (size_t ky = 0; ky < 3; ++ky) {
        const real* prow = padded.data() + (ci * (h + 2) + y + ky) * pw;
        for (size_t co = 0; co < cout; ++co) {
          const real* kq = kernel + (co * cin + ci) * 9 + ky * 3;
          const real k0 = kq[0], k1 = kq[1], k2 = kq[2];
          real* MASKCONS_RESTRICT arow = scratch.data() + co * w;
          for (size_t x = 0; x < w; ++x)
            arow[x] += k0 * prow[x] + k1 * prow[x + 1] + k2 * prow[x + 2];
        }
      }
    }
    for (size_t co = 0; co < cout; ++co)
      std::memcpy(out + (co * h + y) * w, scratch.data() + co * w, w * sizeof(real));
  }
}

inline real hsum_lanes(const real* l, real tail) {
  return (((l[0] + l[1]) + (l[2] + l[3])) + ((l[4] + l[5]) + (l[6] + l[7]))) + tail;
}

// dK[co,ci,ky,kx] += sum_y,x g[co,y,x] * padded[ci,y+ky,x+kx]. Lane
// accumulators persist across the whole plane and four output channels share
// each input row load, which keeps the fma chains off the latency path.
void conv3x3_dkernel_item(const std::vector<real>& padded, const real* g, real* dkernel,
                          real* dbias, size_t cin, size_t cout, size_t h, size_t w) {
  const size_t pw = w + 2;
  for (size_t co = 0; co < cout; ++co) {
    real db = 0;
    for (size_t y = 0; y < h; ++y) {
      const real* grow = g + (co * h + y) * w;
      for (size_t x = 0; x < w; ++x) db += grow[x];
    }
    dbias[co] += db;
  }
  for (size_t ci = 0; ci < cin; ++ci) {
    for (size_t ky = 0; ky < 3; ++ky) {
      size_t co = 0;
      for (; co + 4 <= cout; co += 4) {
        real A0[8] = {}, A1[8] = {}, A2[8] = {}, B0[8] = {}, B1[8] = {}, B2[8] = {};
        real C0[8] = {}, C1[8] = {}, C2[8] = {}, D0[8] = {}, D1[8] = {}, D2[8] = {};
        real tA[3] = {}, tB[3] = {}, tC[3] = {}, tD[3] = {};
        for (size_t y = 0; y < h; ++y) {
          const real* prow = padded.data() + (ci * (h + 2) + y + ky) * pw;
          const real* g0 = g + ((co + 0) * h + y) * w;
          const real* g1 = g + ((co + 1) * h + y) * w;
          const real* g2 = g + ((co + 2) * h + y) * w;
          const real* g3 = g + ((co + 3) * h + y) * w;
          size_t x = 0;
          for (; x + 8 <= w; x += 8) {
            for (size_t l = 0; l < 8; ++l) {
              const real p0 = prow[x + l], p1 = prow[x + l + 1], p2 = prow[x + l + 2];
              A0[l] += g0[x + l] * p0; A1[l] += g0[x + l] * p1; A2[l] += g0[x + l] * p2;
              B0[l] += g1[x + l] * p0; B1[l] += g1[x + l] * p1; B2[l] += g1[x + l] * p2;
              C0[l] += g2[x + l] * p0; C1[l] += g2[x + l] * p1; C2[l] += g2[x + l] * p2;
              D0[l] += g3[x + l] * p0; D1[l] += g3[x + l] * p1; D2[l] += g3[x + l] * p2;
            }
          }
          for (; x < w; ++x) {
            const real p0 = prow[x], p1 = prow[x + 1], p2 = prow[x + 2];
            tA[0] += g0[x] * p0; tA[1] += g0[x] * p1; tA[2] += g0[x] * p2;
            tB[0] += g1[x] * p0; tB[1] += g1[x] * p1; tB[2] += g1[x] * p2;
            tC[0] += g2[x] * p0; tC[1] += g2[x] * p1; tC[2] += g2[x] * p2;
            tD[0] += g3[x] * p0; tD[1] += g3[x] * p1; tD[2] += g3[x] * p2;
          }
        }
        real* dkA = dkernel + ((co + 0) * cin + ci) * 9 + ky * 3;
        real* dkB = dkernel + ((co + 1) * cin + ci) * 9 + ky * 3;
        real* dkC = dkernel + ((co + 2) * cin + ci) * 9 + ky * 3;
        real* dkD = dkernel + ((co + 3) * cin + ci) * 9 + ky * 3;
        dkA[0] += hsum_lanes(A0, tA[0]); dkA[1] += hsum_lanes(A1, tA[1]); dkA[2] += hsum_lanes(A2, tA[2]);
        dkB[0] += hsum_lanes(B0, tB[0]); dkB[1] += hsum_lanes(B1, tB[1]); dkB[2] += hsum_lanes(B2, tB[2]);
        dkC[0] += hsum_lanes(C0, tC[0]); dkC[1] += hsum_lanes(C1, tC[1]); dkC[2] += hsum_lanes(C2, tC[2]);
        dkD[0] += hsum_lanes(D0, tD[0]); dkD[1] += hsum_lanes(D1, tD[1]); dkD[2] += hsum_lanes(D2, tD[2]);
      }
      for (; co < cout; ++co) {
        real A0[8] = {}, A1[8] = {}, A2[8] = {};
        real tA[3] = {};
        for (size_t y = 0; y < h; ++y) {
          const real* prow = padded.data() + (ci * (h + 2) + y + ky) * pw;
          const real* g0 = g + (co * h + y) * w;
          size_t x = 0;
          for (; x + 8 <= w; x += 8) {
            for (size_t l = 0; l < 8; ++l) {
              const real gv = g0[x + l];
              A0[l] += gv * prow[x + l];
              A1[l] += gv * prow[x + l + 1];
              A2[l] += gv * prow[x + l + 2];
            }
          }
          for (; x < w; ++x) {
            tA[0] += g0[x] * prow[x];
            tA[1] += g0[x] * prow[x + 1];
            tA[2] += g0[x] * prow[x + 2];
          }
        }
        real* dk = dkernel + (co * cin + ci) * 9 + ky * 3;
        dk[0] += hsum_lanes(A0, tA[0]);
        dk[1] += hsum_lanes(A1, tA[1]);
        dk[2] += hsum_lanes(A2, tA[2]);
      }
    }
  }
}

// dIn of a stride-1 pad-1 3x3 conv equals a forward conv of the padded output
// gradient with the channel-transposed, spatially flipped kernel.
void conv3x3_flip_kernel(const real* kernel, real* flipped, size_t cin, size_t cout) {
  for (size_t co = 0; co < cout; ++co)
    for (size_t ci = 0; ci < cin; ++ci)
      for (size_t ky = 0; ky < 3; ++ky)
        for (size_t kx = 0; kx < 3; ++kx)
          flipped[(ci * cout + co) * 9 + (2 - ky) * 3 + (2 - kx)] =
              kernel[(co * cin + ci) * 9 + ky * 3 + kx];
}

// Stable softmax at one position; stride is the element distance between
// consecutive classes.
void softmax_one(const real* z, real* p, size_t k, size_t stride) {
  real m = z[0];
  for (size_t c = 1; c < k; ++c) m = std::max(m, z[c * stride]);
  real sum = 0;
  for (size_t c = 0; c < k; ++c) {
    const real e = std::exp(z[c * stride] - m);
    p[c * stride] = e;
    sum += e;
  }
  const real inv = real(1) / sum;
  for (size_t c = 0; c < k; ++c) p[c * stride] *= inv;
}

}  // namespace

static void check_finite(const Tensor& t, size_t layer_idx) {
  if (!t.all_finite())
    throw std::runtime_error("forward: non-finite activation at layer " +
                             std::to_string(layer_idx) + " (divergence)");
}

static std::pair<Tensor, ActivationTape> run_forward(const Network& net, const Tensor& x,
                                                     bool cache) {
  const auto& in_shape = net.input_shape();
  check(x.ndim() == in_shape.size() + 1, "forward: input must be batched [B x ...]");
  for (size_t i = 0; i < in_shape.size(); ++i)
    check(x.extent(i + 1) == in_shape[i], "forward: input shape mismatch");
  const size_t batch = x.extent(0);
  check(batch >= 1, "forward: empty batch");

  ActivationTape tape;
  tape.net_version = net.version();
  std::vector<Tensor>& acts = tape.acts;
  acts.reserve(net.layers().size() + 1);
  acts.push_back(x);
  tape.pool_argmax.resize(net.layers().size());

  for (size_t li = 0; li < net.layers().size(); ++li) {
    const LayerSpec& s = net.layers()[li];
    const Tensor& in = acts.back();
    std::vector<size_t> out_shape = net.act_shape(li + 1);
    out_shape.insert(out_shape.begin(), batch);
    Tensor out(out_shape);
    const real* params = net.params().data() + net.layer_offset(li);
    switch (s.kind) {
      case LayerKind::dense: {
        dense_fwd(in.data(), params, params + s.in_ch * s.out_ch, out.data(), batch,
                  s.in_ch, s.out_ch);
        break;
      }
      case LayerKind::conv3x3: {
        const Shape3 is = as3(net.act_shape(li));
        const size_t in_item = is.c * is.h * is.w;
        const size_t out_item = s.out_ch * is.h * is.w;
        std::vector<real> scratch;
        for (size_t b = 0; b < batch; ++b) {
          auto padded = pad1(in.data() + b * in_item, is);
          conv3x3_fwd_item(padded, params, params + s.out_ch * s.in_ch * 9,
                           out.data() + b * out_item, is.c, s.out_ch, is.h, is.w, scratch);
        }
        break;
      }
      case LayerKind::relu: {
        for (size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0 ? in[i] : real(0);
        break;
      }
      case LayerKind::maxpool2: {
        const Shape3 is = as3(net.act_shape(li));
        const size_t oh = is.h / 2, ow = is.w / 2;
        auto& arg = tape.pool_argmax[li];
        arg.resize(batch * is.c * oh * ow);
        size_t oi = 0;
        for (size_t b = 0; b < batch; ++b) {
          const real* ip = in.data() + b * is.c * is.h * is.w;
          for (size_t c = 0; c < is.c; ++c) {
            const real* plane = ip + c * is.h * is.w;
            for (size_t y = 0; y < oh; ++y) {
              for (size_t xo = 0; xo < ow; ++xo) {
                real best = plane[(2 * y) * is.w + 2 * xo];
                uint32_t bi = 0;
                for (uint32_t d = 1; d < 4; ++d) {
                  const real v = plane[(2 * y + d / 2) * is.w + 2 * xo + d % 2];
                  if (v > best) {
                    best = v;
                    bi = d;
                  }
                }
                out[oi] = best;
                arg[oi] = bi;
                ++oi;
              }
            }
          }
        }
        break;
      }
      case LayerKind::upsample2: {
        const Shape3 is = as3(net.act_shape(li));
        for (size_t b = 0; b < batch; ++b) {
          for (size_t c = 0; c < is.c; ++c) {
            const real* plane = in.data() + (b * is.c + c) * is.h * is.w;
            real* oplane = out.data() + (b * is.c + c) * 4 * is.h * is.w;
            for (size_t y = 0; y < is.h; ++y) {
              for (size_t x = 0; x < is.w; ++x) {
                const real v = plane[y * is.w + x];
                const size_t ow2 = 2 * is.w;
                oplane[(2 * y) * ow2 + 2 * x] = v;
                oplane[(2 * y) * ow2 + 2 * x + 1] = v;
                oplane[(2 * y + 1) * ow2 + 2 * x] = v;
                oplane[(2 * y + 1) * ow2 + 2 * x + 1] = v;
              }
            }
          }
        }
        break;
      }
      case LayerKind::concat_skip: {
        const Shape3 is = as3(net.act_shape(li));
        const Tensor& src = acts[s.skip_src];
        const size_t sc = net.act_shape(s.skip_src)[0];
        const size_t plane = is.h * is.w;
        for (size_t b = 0; b < batch; ++b) {
          std::memcpy(out.data() + b * (is.c + sc) * plane,
                      in.data() + b * is.c * plane, is.c * plane * sizeof(real));
          std::memcpy(out.data() + (b * (is.c + sc) + is.c) * plane,
                      src.data() + b * sc * plane, sc * plane * sizeof(real));
        }
        break;
      }
      case LayerKind::softmax_head: {
        const auto& is = net.act_shape(li);
        const size_t k = is[0];
        const size_t plane = is.size() == 1 ? 1 : is[1] * is[2];
        const size_t stride = is.size() == 1 ? 1 : plane;
        for (size_t b = 0; b < batch; ++b) {
          const real* ip = in.data() + b * k * plane;
          real* op = out.data() + b * k * plane;
          for (size_t pos = 0; pos < plane; ++pos)
            softmax_one(ip + pos, op + pos, k, stride);
        }
        break;
      }
    }
    check_finite(out, li);
    acts.push_back(std::move(out));
  }
  Tensor y = acts.back();
  if (!cache) tape.acts.clear();
  return {std::move(y), std::move(tape)};
}

Tensor forward(const Network& net, const Tensor& x) {
  return run_forward(net, x, false).first;
}

std::pair<Tensor, ActivationTape> forward_cached(const Network& net, const Tensor& x) {
  return run_forward(net, x, true);
}

Gradients backward(const Network& net, const ActivationTape& tape, const Tensor& dloss_dy) {
  check(tape.net_version == net.version(),
        "backward: stale tape (parameters changed since forward)");
  check(tape.acts.size() == net.layers().size() + 1, "backward: tape incomplete");
  check(dloss_dy.same_shape(tape.acts.back()), "backward: dLoss/dy shape mismatch");
  const size_t n_layers = net.layers().size();
  const size_t batch = tape.acts[0].extent(0);

  Gradients out;
  out.params = Tensor({net.n_params()});
  std::vector<Tensor> grad_acts(n_layers + 1);
  grad_acts[n_layers] = dloss_dy;

  auto accumulate = [](Tensor& dst, Tensor&& src) {
    if (dst.size() == 0)
      dst = std::move(src);
    else
      axpy(dst, real(1), src);
  };

  for (size_t li = n_layers; li-- > 0;) {
    const LayerSpec& s = net.layers()[li];
    Tensor& g = grad_acts[li + 1];
    if (g.size() == 0) g = Tensor(tape.acts[li + 1].shape());  // no downstream use
    const Tensor& in = tape.acts[li];
    const real* params = net.params().data() + net.layer_offset(li);
    real* dparams = out.params.data() + net.layer_offset(li);
    Tensor din(in.shape());
    switch (s.kind) {
      case LayerKind::dense: {
        const size_t fin = s.in_ch, fout = s.out_ch;
        // dW = x^T g, db = column sums of g, dx = g W^T; both products run
        // through the blocked gemm on materialized transposes.
        real* dw = dparams;
        real* db = dparams + fin * fout;
        std::vector<real> xt(fin * batch);
        for (size_t i = 0; i < batch; ++i)
          for (size_t k = 0; k < fin; ++k) xt[k * batch + i] = in[i * fin + k];
        detail::gemm_acc(xt.data(), g.data(), dw, fin, batch, fout);
        for (size_t i = 0; i < batch; ++i) {
          const real* gr = g.data() + i * fout;
          for (size_t j = 0; j < fout; ++j) db[j] += gr[j];
        }
        std::vector<real> wt(fout * fin);
        for (size_t k = 0; k < fin; ++k)
          for (size_t j = 0; j < fout; ++j) wt[j * fin + k] = params[k * fout + j];
        detail::gemm_acc(g.data(), wt.data(), din.data(), batch, fout, fin);
        break;
      }
      case LayerKind::conv3x3: {
        const Shape3 is = as3(net.act_shape(li));
        const size_t in_item = is.c * is.h * is.w;
        const size_t out_item = s.out_ch * is.h * is.w;
        std::vector<real> flipped(s.out_ch * s.in_ch * 9);
        conv3x3_flip_kernel(params, flipped.data(), is.c, s.out_ch);
        std::vector<real> scratch;
        const Shape3 gs{s.out_ch, is.h, is.w};
        for (size_t b = 0; b < batch; ++b) {
          auto padded = pad1(in.data() + b * in_item, is);
          conv3x3_dkernel_item(padded, g.data() + b * out_item, dparams,
                               dparams + s.out_ch * s.in_ch * 9, is.c, s.out_ch, is.h,
                               is.w);
          auto gpadded = pad1(g.data() + b * out_item, gs);
          conv3x3_fwd_item(gpadded, flipped.data(), nullptr, din.data() + b * in_item,
                           s.out_ch, is.c, is.h, is.w, scratch);
        }
        break;
      }
      case LayerKind::relu: {
        const Tensor& y = tape.acts[li + 1];
        for (size_t i = 0; i < din.size(); ++i) din[i] = y[i] > 0 ? g[i] : real(0);
        break;
      }
      case LayerKind::maxpool2: {
        const Shape3 is = as3(net.act_shape(li));
        const auto& arg = tape.pool_argmax[li];
        const size_t oh = is.h / 2, ow = is.w / 2;
        size_t oi = 0;
        for (size_t b = 0; b < batch; ++b) {
          real* dip = din.data() + b * is.c * is.h * is.w;
          for (size_t c = 0; c < is.c; ++c) {
            real* plane = dip + c * is.h * is.w;
            for (size_t y = 0; y < oh; ++y) {
              for (size_t xo = 0; xo < ow; ++xo) {
                const uint32_t d = arg[oi];
                plane[(2 * y + d / 2) * is.w + 2 * xo + d % 2] += g[oi];
                ++oi;
              }
            }
          }
        }
        break;
      }
      case LayerKind::upsample2: {
        const Shape3 is = as3(net.act_shape(li));
        for (size_t b = 0; b < batch; ++b) {
          for (size_t c = 0; c < is.c; ++c) {
            real* dplane = din.data() + (b * is.c + c) * is.h * is.w;
            const real* gplane = g.data() + (b * is.c + c) * 4 * is.h * is.w;
            const size_t ow2 = 2 * is.w;
            for (size_t y = 0; y < is.h; ++y)
              for (size_t x = 0; x < is.w; ++x)
                dplane[y * is.w + x] = gplane[(2 * y) * ow2 + 2 * x] +
                                       gplane[(2 * y) * ow2 + 2 * x + 1] +
                                       gplane[(2 * y + 1) * ow2 + 2 * x] +
                                       gplane[(2 * y + 1) * ow2 + 2 * x + 1];
          }
        }
        break;
      }
      case LayerKind::concat_skip: {
        const Shape3 is = as3(net.act_shape(li));
        const size_t sc = net.act_shape(s.skip_src)[0];
        const size_t plane = is.h * is.w;
        Tensor dskip(tape.acts[s.skip_src].shape());
        for (size_t b = 0; b < batch; ++b) {
          std::memcpy(din.data() + b * is.c * plane,
                      g.data() + b * (is.c + sc) * plane, is.c * plane * sizeof(real));
          std::memcpy(dskip.data() + b * sc * plane,
                      g.data() + (b * (is.c + sc) + is.c) * plane,
                      sc * plane * sizeof(real));
        }
        accumulate(grad_acts[s.skip_src], std::move(dskip));
        break;
      }
      case LayerKind::softmax_head: {
        const Tensor& p = tape.acts[li + 1];
        const auto& is = net.act_shape(li);
        const size_t k = is[0];
        const size_t plane = is.size() == 1 ? 1 : is[1] * is[2];
        for (size_t b = 0; b < batch; ++b) {
          for (size_t pos = 0; pos < plane; ++pos) {
            const size_t base = b * k * plane + pos;
            real dotgp = 0;
            for (size_t c = 0; c < k; ++c)
              dotgp += g[base + c * plane] * p[base + c * plane];
            for (size_t c = 0; c < k; ++c)
              din[base + c * plane] = p[base + c * plane] * (g[base + c * plane] - dotgp);
          }
        }
        break;
      }
    }
    accumulate(grad_acts[li], std::move(din));
  }
  out.input = std::move(grad_acts[0]);
  return out;
}

AdamState::AdamState(size_t n_params, real lr_) : m({n_params}), v({n_params}), lr(lr_) {}

void adam_step(AdamState& state, Tensor& params, const Tensor& grads) {
  check(params.same_shape(grads) && params.same_shape(state.m) &&
            params.same_shape(state.v),
        "adam_step: shape mismatch");
  require(grads.all_finite(), "adam_step: non-finite gradient");
  state.t += 1;
  const real b1 = state.beta1, b2 = state.beta2;
  const real c1 = real(1) - static_cast<real>(std::pow(static_cast<double>(b1),
                                                       static_cast<double>(state.t)));
  const real c2 = real(1) - static_cast<real>(std::pow(static_cast<double>(b2),
                                                       static_cast<double>(state.t)));
  real* p = params.data();
  real* m = state.m.data();
  real* v = state.v.data();
  const real* g = grads.data();
  const real lr = state.lr, eps = state.eps;
  for (size_t i = 0; i < params.size(); ++i) {
    m[i] = b1 * m[i] + (real(1) - b1) * g[i];
    v[i] = b2 * v[i] + (real(1) - b2) * g[i] * g[i];
    const real mhat = m[i] / c1;
    const real vhat = v[i] / c2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

void ema_update(Tensor& teacher, const Tensor& student, const EmaConfig& cfg) {
  check(teacher.same_shape(student), "ema_update: shape mismatch");
  check(cfg.alpha >= 0 && cfg.alpha < 1, "ema_update: alpha must be in [0,1)");
  real* t = teacher.data();
  const real* s = student.data();
  const real a = cfg.alpha;
  for (size_t i = 0; i < teacher.size(); ++i) t[i] = a * t[i] + (real(1) - a) * s[i];
}

ScalarLoss sum_loss() {
  ScalarLoss l;
  l.value = [](const Tensor& y) { return sum_all(y); };
  l.grad = [](const Tensor& y) { return Tensor::full(y.shape(), real(1)); };
  return l;
}

static constexpr real kProbClamp = real(1e-12);

ScalarLoss xent_loss(Tensor targets) {
  ScalarLoss l;
  l.value = [targets](const Tensor& y) {
    const size_t k = y.extent(1);
    const size_t plane = y.size() / (y.extent(0) * k);
    const size_t n = targets.size();
    check(n == y.extent(0) * plane, "xent_loss: target count mismatch");
    real acc = 0;
    for (size_t b = 0; b < y.extent(0); ++b) {
      for (size_t pos = 0; pos < plane; ++pos) {
        const auto cls = static_cast<size_t>(targets[b * plane + pos]);
        check(cls < k, "xent_loss: target class out of range");
        const real p = y[(b * k) * plane + cls * plane + pos];
        acc -= std::log(std::max(p, kProbClamp));
      }
    }
    return acc / static_cast<real>(n);
  };
  l.grad = [targets](const Tensor& y) {
    Tensor g(y.shape());
    const size_t k = y.extent(1);
    const size_t plane = y.size() / (y.extent(0) * k);
    const size_t n = targets.size();
    for (size_t b = 0; b < y.extent(0); ++b) {
      for (size_t pos = 0; pos < plane; ++pos) {
        const auto cls = static_cast<size_t>(targets[b * plane + pos]);
        const size_t idx = (b * k) * plane + cls * plane + pos;
        if (y[idx] > kProbClamp) g[idx] = -real(1) / (y[idx] * static_cast<real>(n));
      }
    }
    return g;
  };
  return l;
}

ScalarLoss sqerr_to_target_loss(Tensor target) {
  ScalarLoss l;
  l.value = [target](const Tensor& y) {
    check(y.same_shape(target), "sqerr_to_target_loss: shape mismatch");
    real acc = 0;
    for (size_t i = 0; i < y.size(); ++i) acc += (y[i] - target[i]) * (y[i] - target[i]);
    return acc;
  };
  l.grad = [target](const Tensor& y) {
    Tensor g(y.shape());
    for (size_t i = 0; i < y.size(); ++i) g[i] = 2 * (y[i] - target[i]);
    return g;
  };
  return l;
}

real finite_diff_check(const Network& net, const Tensor& x, const ScalarLoss& loss, real h,
                       size_t n_check, Rng& rng) {
  static_assert(sizeof(real) == 8 || sizeof(real) == 4, "unexpected real");
  check(sizeof(real) == 8, "finite_diff_check requires the 64-bit build");
  Network work = net;
  auto [y, tape] = forward_cached(work, x);
  require(std::isfinite(loss.value(y)), "finite_diff_check: non-finite loss");
  Gradients g = backward(work, tape, loss.grad(y));

  std::vector<size_t> param_idx;
  if (net.n_params() <= n_check) {
    param_idx.resize(net.n_params());
    for (size_t i = 0; i < param_idx.size(); ++i) param_idx[i] = i;
  } else {
    std::unordered_set<size_t> seen;
    while (seen.size() < n_check)
      seen.insert(static_cast<size_t>(rng.uniform_int(net.n_params())));
    param_idx.assign(seen.begin(), seen.end());
    std::sort(param_idx.begin(), param_idx.end());
  }

  real worst = 0;
  auto rel_err = [](real a, real n) {
    const real denom = std::max({std::abs(a), std::abs(n), real(1e-8)});
    return std::abs(a - n) / denom;
  };
  for (size_t idx : param_idx) {
    Tensor& p = work.mutable_params();
    const real saved = p[idx];
    p[idx] = saved + h;
    const real lp = loss.value(forward(work, x));
    work.mutable_params()[idx] = saved - h;
    const real lm = loss.value(forward(work, x));
    work.mutable_params()[idx] = saved;
    worst = std::max(worst, rel_err(g.params[idx], (lp - lm) / (2 * h)));
  }
  Tensor xw = x;
  for (size_t idx = 0; idx < x.size(); ++idx) {
    const real saved = xw[idx];
    xw[idx] = saved + h;
    const real lp = loss.value(forward(work, xw));
    xw[idx] = saved - h;
    const real lm = loss.value(forward(work, xw));
    xw[idx] = saved;
    worst = std::max(worst, rel_err(g.input[idx], (lp - lm) / (2 * h)));
  }
  return worst;
}

void save_network(const std::string& path, const Network& net) {
  std::ofstream os(path, std::ios::binary);
  require(os.is_open(), "save_network: cannot open " + path);
  os << "MCNET v1\n";
  os << "input";
  for (size_t e : net.input_shape()) os << " " << e;
  os << "\nseed " << net.rng_seed() << "\nlayers " << net.layers().size() << "\n";
  for (const LayerSpec& s : net.layers())
    os << layer_kind_name(s.kind) << " " << s.in_ch << " " << s.out_ch << " " << s.skip_src
       << "\n";
  save_tensor(os, net.params());
}

Network load_network(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.is_open(), "load_network: cannot open " + path);
  std::string magic, version;
  is >> magic >> version;
  require(magic == "MCNET" && version == "v1", "load_network: bad header");
  std::string tok;
  is >> tok;
  require(tok == "input", "load_network: missing input shape");
  std::string line;
  std::getline(is, line);
  std::vector<size_t> input_shape;
  {
    size_t v;
    std::istringstream ls(line);
    while (ls >> v) input_shape.push_back(v);
  }
  uint64_t seed = 0;
  size_t n_layers = 0;
  is >> tok >> seed;
  require(tok == "seed", "load_network: missing seed");
  is >> tok >> n_layers;
  require(tok == "layers", "load_network: missing layer count");
  std::vector<LayerSpec> specs(n_layers);
  for (auto& s : specs) {
    std::string kind;
    is >> kind >> s.in_ch >> s.out_ch >> s.skip_src;
    s.kind = layer_kind_from_name(kind);
  }
  is.get();  // newline before the TNSR blob
  Network net(specs, input_shape, seed);
  Tensor params = load_tensor(is);
  require(params.size() == net.n_params(), "load_network: parameter count mismatch");
  net.mutable_params() = std::move(params);
  return net;
}

}  // namespace maskcons
