#pragma once

// Dense float32 tensors with just enough machinery for the occupancy
// context models: shape-preserving 3D convolution (plain and causally
// masked), ResNet blocks, a reverse-mode tape, and Adam.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "msvdnn/common.hpp"

namespace msvdnn {

// ---------------------------------------------------------------------------
// Tensor

struct Tensor {
  std::vector<int> dims;  // up to 5 axes; activations use (C, D, H, W)
  std::vector<float> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> d) : dims(std::move(d)) {
    v.assign(count(dims), 0.0f);
  }

  static std::size_t count(const std::vector<int>& d) {
    std::size_t n = 1;
    for (int x : d) n *= static_cast<std::size_t>(x);
    return n;
  }
  static Tensor zeros(std::vector<int> d) { return Tensor(std::move(d)); }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.dims); }
  static Tensor full(std::vector<int> d, float x) {
    Tensor t(std::move(d));
    std::fill(t.v.begin(), t.v.end(), x);
    return t;
  }

  std::size_t size() const { return v.size(); }
  int rank() const { return static_cast<int>(dims.size()); }
  bool same_shape(const Tensor& o) const { return dims == o.dims; }

  float* data() { return v.data(); }
  const float* data() const { return v.data(); }

  // Rank-4 activation accessor (c, z, y, x).
  float& at4(int c, int z, int y, int x) {
    return v[((static_cast<std::size_t>(c) * dims[1] + z) * dims[2] + y) * dims[3] + x];
  }
  float at4(int c, int z, int y, int x) const {
    return v[((static_cast<std::size_t>(c) * dims[1] + z) * dims[2] + y) * dims[3] + x];
  }

  bool all_finite() const {
    for (float x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }
};

// ---------------------------------------------------------------------------
// Raster indexing. The scan order everywhere is depth, then height, then
// width; indices are zero-based.

inline long raster_index(int z, int y, int x, const std::array<int, 3>& dims) {
  require(z >= 0 && z < dims[0] && y >= 0 && y < dims[1] && x >= 0 && x < dims[2],
          "raster_index: coordinate out of range");
  return (static_cast<long>(z) * dims[1] + y) * dims[2] + x;
}

// ---------------------------------------------------------------------------
// Causal kernel masks.
//
// Taps strictly before the kernel center in raster order pass, taps
// strictly after are zeroed; the center passes for type B only.

enum class Mask : std::uint8_t { None, A, B };

inline std::vector<std::uint8_t> mask_taps(Mask kind, int k) {
  require(k >= 1 && k % 2 == 1, "mask_taps: kernel size must be odd");
  const long n = static_cast<long>(k) * k * k;
  const long center = (n - 1) / 2;
  std::vector<std::uint8_t> taps(n, 0);
  if (kind == Mask::None) {
    std::fill(taps.begin(), taps.end(), 1);
    return taps;
  }
  for (long t = 0; t < n; ++t) {
    if (t < center)
      taps[t] = 1;
    else if (t == center)
      taps[t] = (kind == Mask::B) ? 1 : 0;
  }
  return taps;
}

// Full (out_ch, in_ch, k, k, k) mask tensor; the spatial pattern repeats
// across every channel pair.
inline Tensor make_mask(Mask kind, int k, int in_ch, int out_ch) {
  const auto taps = mask_taps(kind, k);
  Tensor m({out_ch, in_ch, k, k, k});
  const long n = static_cast<long>(k) * k * k;
  for (int o = 0; o < out_ch; ++o)
    for (int i = 0; i < in_ch; ++i)
      for (long t = 0; t < n; ++t)
        m.v[(static_cast<std::size_t>(o) * in_ch + i) * n + t] = taps[t];
  return m;
}

// ---------------------------------------------------------------------------
// Convolution kernels.
//
// Shape-preserving cross-correlation, stride 1, zero padding (k-1)/2.
// Written as per-tap row saxpy so the x loop vectorizes. For one output
// element the accumulation order is bias, then taps in (ic, kz, ky, kx)
// order; the order never depends on `limit`, so computing a prefix of the
// volume yields bit-identical values on that prefix.
//
// `limit` >= 0 restricts computed outputs to raster indices <= limit
// (later positions hold the bias only). -1 computes everything.

namespace detail {

struct RowSpan {
  int zmax, ymax, xmax;  // inclusive bounds of the last computed row
};

inline RowSpan row_span(int D, int H, int W, long limit) {
  if (limit < 0 || limit >= static_cast<long>(D) * H * W - 1)
    return {D - 1, H - 1, W - 1};
  const int z = static_cast<int>(limit / (static_cast<long>(H) * W));
  const int rem = static_cast<int>(limit % (static_cast<long>(H) * W));
  return {z, rem / W, rem % W};
}

inline void conv3d_forward(const Tensor& x, const Tensor& w, const Tensor& b,
                           const std::vector<std::uint8_t>* taps, Tensor& out,
                           long limit = -1) {
  const int Ci = x.dims[0], D = x.dims[1], H = x.dims[2], W = x.dims[3];
  const int Co = w.dims[0], k = w.dims[2], r = k / 2;
  const RowSpan lim = row_span(D, H, W, limit);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const std::size_t vol = static_cast<std::size_t>(D) * plane;

  if (!out.same_shape(Tensor({Co, D, H, W}))) out = Tensor({Co, D, H, W});
  for (int oc = 0; oc < Co; ++oc) {
    float* o0 = out.data() + oc * vol;
    std::fill(o0, o0 + vol, b.v[oc]);
  }

  for (int oc = 0; oc < Co; ++oc) {
    float* oplane = out.data() + oc * vol;
    for (int ic = 0; ic < Ci; ++ic) {
      const float* xplane = x.data() + static_cast<std::size_t>(ic) * vol;
      const float* wk = w.data() + (static_cast<std::size_t>(oc) * Ci + ic) * k * k * k;
      for (int kz = 0; kz < k; ++kz) {
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const long t = (static_cast<long>(kz) * k + ky) * k + kx;
            if (taps && !(*taps)[t]) continue;
            const float wv = wk[t];
            const int x0 = std::max(0, r - kx);
            const int x1full = std::min(W, W + r - kx);
            for (int z = 0; z <= lim.zmax; ++z) {
              const int zi = z + kz - r;
              if (zi < 0 || zi >= D) continue;
              const int ylast = (z == lim.zmax) ? lim.ymax : H - 1;
              for (int y = 0; y <= ylast; ++y) {
                const int yi = y + ky - r;
                if (yi < 0 || yi >= H) continue;
                int x1 = x1full;
                if (z == lim.zmax && y == lim.ymax) x1 = std::min(x1, lim.xmax + 1);
                if (x0 >= x1) continue;
                float* orow = oplane + z * plane + static_cast<std::size_t>(y) * W;
                const float* xrow =
                    xplane + zi * plane + static_cast<std::size_t>(yi) * W + (kx - r);
                for (int xo = x0; xo < x1; ++xo) orow[xo] += wv * xrow[xo];
              }
            }
          }
        }
      }
    }
  }
}

inline void conv3d_grad_input(const Tensor& gout, const Tensor& w,
                              const std::vector<std::uint8_t>* taps, Tensor& gx) {
  const int Co = gout.dims[0], D = gout.dims[1], H = gout.dims[2], W = gout.dims[3];
  const int Ci = w.dims[1], k = w.dims[2], r = k / 2;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const std::size_t vol = static_cast<std::size_t>(D) * plane;

  for (int ic = 0; ic < Ci; ++ic) {
    float* gplane = gx.data() + static_cast<std::size_t>(ic) * vol;
    for (int oc = 0; oc < Co; ++oc) {
      const float* goplane = gout.data() + static_cast<std::size_t>(oc) * vol;
      const float* wk = w.data() + (static_cast<std::size_t>(oc) * Ci + ic) * k * k * k;
      for (int kz = 0; kz < k; ++kz) {
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const long t = (static_cast<long>(kz) * k + ky) * k + kx;
            if (taps && !(*taps)[t]) continue;
            const float wv = wk[t];
            const int x0 = std::max(0, r - kx);
            const int x1 = std::min(W, W + r - kx);
            if (x0 >= x1) continue;
            for (int z = 0; z < D; ++z) {
              const int zi = z + kz - r;
              if (zi < 0 || zi >= D) continue;
              for (int y = 0; y < H; ++y) {
                const int yi = y + ky - r;
                if (yi < 0 || yi >= H) continue;
                float* grow = gplane + zi * plane + static_cast<std::size_t>(yi) * W + (kx - r);
                const float* gorow = goplane + z * plane + static_cast<std::size_t>(y) * W;
                for (int xo = x0; xo < x1; ++xo) grow[xo] += wv * gorow[xo];
              }
            }
          }
        }
      }
    }
  }
}

inline void conv3d_grad_params(const Tensor& x, const Tensor& gout,
                               const std::vector<std::uint8_t>* taps, Tensor& gw,
                               Tensor& gb) {
  const int Ci = x.dims[0], D = x.dims[1], H = x.dims[2], W = x.dims[3];
  const int Co = gout.dims[0], k = gw.dims[2], r = k / 2;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const std::size_t vol = static_cast<std::size_t>(D) * plane;

  for (int oc = 0; oc < Co; ++oc) {
    const float* goplane = gout.data() + static_cast<std::size_t>(oc) * vol;
    float acc = 0.0f;
    for (std::size_t i = 0; i < vol; ++i) acc += goplane[i];
    gb.v[oc] += acc;
    for (int ic = 0; ic < Ci; ++ic) {
      const float* xplane = x.data() + static_cast<std::size_t>(ic) * vol;
      float* gwk = gw.data() + (static_cast<std::size_t>(oc) * Ci + ic) * k * k * k;
      for (int kz = 0; kz < k; ++kz) {
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const long t = (static_cast<long>(kz) * k + ky) * k + kx;
            if (taps && !(*taps)[t]) continue;
            const int x0 = std::max(0, r - kx);
            const int x1 = std::min(W, W + r - kx);
            if (x0 >= x1) continue;
            float sum = 0.0f;
            for (int z = 0; z < D; ++z) {
              const int zi = z + kz - r;
              if (zi < 0 || zi >= D) continue;
              for (int y = 0; y < H; ++y) {
                const int yi = y + ky - r;
                if (yi < 0 || yi >= H) continue;
                const float* gorow = goplane + z * plane + static_cast<std::size_t>(y) * W;
                const float* xrow =
                    xplane + zi * plane + static_cast<std::size_t>(yi) * W + (kx - r);
                for (int xo = x0; xo < x1; ++xo) sum += gorow[xo] * xrow[xo];
              }
            }
            gwk[t] += sum;
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Reverse-mode tape.

struct Node {
  Tensor val;
  Tensor grad;
  bool needs_grad = false;

  void ensure_grad() {
    if (grad.v.empty()) grad = Tensor::zeros_like(val);
  }
};

using Var = std::shared_ptr<Node>;

inline Var make_var(Tensor t, bool needs_grad = false) {
  auto n = std::make_shared<Node>();
  n->val = std::move(t);
  n->needs_grad = needs_grad;
  return n;
}

class Tape {
 public:
  void record(std::function<void()> f) { steps_.push_back(std::move(f)); }

  // Seeds d(loss)/d(loss) = 1 and replays recorded steps in reverse.
  void backward(const Var& loss) {
    require(loss->val.size() == 1, "backward: loss must be scalar");
    loss->ensure_grad();
    loss->grad.v[0] = 1.0f;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

  std::size_t size() const { return steps_.size(); }
  void clear() { steps_.clear(); }

 private:
  std::vector<std::function<void()>> steps_;
};

// ---------------------------------------------------------------------------
// Tape ops. Passing tape == nullptr runs pure inference on the identical
// arithmetic path, recording nothing.

inline Var conv3d(Tape* tape, const Var& x, const Var& w, const Var& b,
                  const std::vector<std::uint8_t>* taps, long limit = -1) {
  require(w.get() && w->val.rank() == 5 && w->val.dims[2] % 2 == 1,
          "conv3d: weights must be (out,in,k,k,k) with odd k");
  require(x->val.rank() == 4 && x->val.dims[0] == w->val.dims[1],
          "conv3d: input channel mismatch");
  require(limit < 0 || tape == nullptr, "conv3d: partial evaluation is inference-only");
  Tensor out;
  detail::conv3d_forward(x->val, w->val, b->val, taps, out, limit);
  Var r = make_var(std::move(out));
  if (tape && (x->needs_grad || w->needs_grad || b->needs_grad)) {
    r->needs_grad = true;
    tape->record([x, w, b, r, taps]() {
      if (x->needs_grad) {
        x->ensure_grad();
        detail::conv3d_grad_input(r->grad, w->val, taps, x->grad);
      }
      if (w->needs_grad || b->needs_grad) {
        w->ensure_grad();
        b->ensure_grad();
        detail::conv3d_grad_params(x->val, r->grad, taps, w->grad, b->grad);
      }
    });
  }
  return r;
}

inline Var relu(Tape* tape, const Var& x) {
  Var r = make_var(Tensor::zeros_like(x->val));
  const std::size_t n = x->val.size();
  for (std::size_t i = 0; i < n; ++i) r->val.v[i] = x->val.v[i] > 0.0f ? x->val.v[i] : 0.0f;
  if (tape && x->needs_grad) {
    r->needs_grad = true;
    tape->record([x, r]() {
      x->ensure_grad();
      for (std::size_t i = 0; i < x->val.size(); ++i)
        if (x->val.v[i] > 0.0f) x->grad.v[i] += r->grad.v[i];
    });
  }
  return r;
}

inline Var add(Tape* tape, const Var& a, const Var& b) {
  require(a->val.same_shape(b->val), "add: shape mismatch");
  Var r = make_var(Tensor::zeros_like(a->val));
  for (std::size_t i = 0; i < a->val.size(); ++i) r->val.v[i] = a->val.v[i] + b->val.v[i];
  if (tape && (a->needs_grad || b->needs_grad)) {
    r->needs_grad = true;
    tape->record([a, b, r]() {
      if (a->needs_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < a->val.size(); ++i) a->grad.v[i] += r->grad.v[i];
      }
      if (b->needs_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < b->val.size(); ++i) b->grad.v[i] += r->grad.v[i];
      }
    });
  }
  return r;
}

inline Var clamp(Tape* tape, const Var& x, float lo, float hi) {
  Var r = make_var(Tensor::zeros_like(x->val));
  for (std::size_t i = 0; i < x->val.size(); ++i)
    r->val.v[i] = std::min(hi, std::max(lo, x->val.v[i]));
  if (tape && x->needs_grad) {
    r->needs_grad = true;
    tape->record([x, r, lo, hi]() {
      x->ensure_grad();
      for (std::size_t i = 0; i < x->val.size(); ++i)
        if (x->val.v[i] > lo && x->val.v[i] < hi) x->grad.v[i] += r->grad.v[i];
    });
  }
  return r;
}

// Mean binary cross-entropy against {0,1} targets, computed from logits
// with the usual max/log1p stabilization. Natural-log units.
inline Var bce_with_logits_mean(Tape* tape, const Var& logits, const Tensor& targets) {
  require(logits->val.same_shape(targets), "bce: shape mismatch");
  const std::size_t n = logits->val.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = logits->val.v[i];
    const double y = targets.v[i];
    acc += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  Var r = make_var(Tensor({1}));
  r->val.v[0] = static_cast<float>(acc / static_cast<double>(n));
  if (tape && logits->needs_grad) {
    r->needs_grad = true;
    Tensor tgt = targets;
    tape->record([logits, r, tgt = std::move(tgt), n]() {
      logits->ensure_grad();
      const float g = r->grad.v[0] / static_cast<float>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double z = logits->val.v[i];
        const float s = static_cast<float>(1.0 / (1.0 + std::exp(-z)));
        logits->grad.v[i] += g * (s - tgt.v[i]);
      }
    });
  }
  return r;
}

// Masked mean binary cross-entropy: positions with mask 0 contribute
// neither loss nor gradient, and the mean is taken over the mask weight.
// Used to fit a model to the subset of voxels a reduced coding schedule
// actually codes. An all-zero mask yields loss 0.
inline Var bce_with_logits_masked_mean(Tape* tape, const Var& logits, const Tensor& targets,
                                       const Tensor& mask) {
  require(logits->val.same_shape(targets), "masked bce: target shape mismatch");
  require(logits->val.same_shape(mask), "masked bce: mask shape mismatch");
  const std::size_t n = logits->val.size();
  double acc = 0.0, weight = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double m = mask.v[i];
    if (m == 0.0) continue;
    const double z = logits->val.v[i];
    const double y = targets.v[i];
    acc += m * (std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z))));
    weight += m;
  }
  Var r = make_var(Tensor({1}));
  r->val.v[0] = weight > 0.0 ? static_cast<float>(acc / weight) : 0.0f;
  if (tape && logits->needs_grad && weight > 0.0) {
    r->needs_grad = true;
    Tensor tgt = targets;
    Tensor msk = mask;
    tape->record([logits, r, tgt = std::move(tgt), msk = std::move(msk), n, weight]() {
      logits->ensure_grad();
      const float g = r->grad.v[0] / static_cast<float>(weight);
      for (std::size_t i = 0; i < n; ++i) {
        if (msk.v[i] == 0.0f) continue;
        const double z = logits->val.v[i];
        const float s = static_cast<float>(1.0 / (1.0 + std::exp(-z)));
        logits->grad.v[i] += g * msk.v[i] * (s - tgt.v[i]);
      }
    });
  }
  return r;
}

// Inference-side logistic map (double-precision exp, float storage).
inline Tensor sigmoid(const Tensor& logits) {
  Tensor p = Tensor::zeros_like(logits);
  for (std::size_t i = 0; i < logits.size(); ++i)
    p.v[i] = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(logits.v[i]))));
  return p;
}

// ---------------------------------------------------------------------------
// Layers.

struct ConvSpec {
  int in_ch = 1;
  int out_ch = 1;
  int k = 3;  // odd; padding (k-1)/2, stride 1
  Mask mask = Mask::None;
};

struct ConvLayer {
  ConvSpec spec;
  Var w, b;
  std::vector<std::uint8_t> taps;  // empty when unmasked

  ConvLayer() = default;
  ConvLayer(ConvSpec s, Rng& rng) : spec(s) {
    require(s.k % 2 == 1, "ConvLayer: kernel size must be odd");
    if (s.mask != Mask::None) taps = mask_taps(s.mask, s.k);
    Tensor wt({s.out_ch, s.in_ch, s.k, s.k, s.k});
    long live = 0;
    const long kk = static_cast<long>(s.k) * s.k * s.k;
    for (long t = 0; t < kk; ++t)
      if (taps.empty() || taps[t]) ++live;
    const double stddev = std::sqrt(2.0 / (static_cast<double>(s.in_ch) * std::max(live, 1L)));
    for (int o = 0; o < s.out_ch; ++o)
      for (int i = 0; i < s.in_ch; ++i)
        for (long t = 0; t < kk; ++t) {
          const bool alive = taps.empty() || taps[t];
          wt.v[(static_cast<std::size_t>(o) * s.in_ch + i) * kk + t] =
              alive ? static_cast<float>(rng.normal() * stddev) : 0.0f;
        }
    w = make_var(std::move(wt), true);
    b = make_var(Tensor({s.out_ch}), true);
  }

  Var operator()(Tape* tape, const Var& x, long limit = -1) const {
    return conv3d(tape, x, w, b, taps.empty() ? nullptr : &taps, limit);
  }
};

// out = x + f(x), f = 1x1x1 conv -> ReLU -> kxkxk conv -> ReLU -> 1x1x1 conv.
// The spatial conv carries the causal mask when the block sits in a masked
// stack.
struct ResNetBlock {
  ConvLayer reduce, spatial, expand;

  ResNetBlock() = default;
  ResNetBlock(int width, int k, Mask mask, Rng& rng)
      : reduce({width, width, 1, Mask::None}, rng),
        spatial({width, width, k, mask}, rng),
        expand({width, width, 1, Mask::None}, rng) {}

  Var operator()(Tape* tape, const Var& x, long limit = -1) const {
    Var h = relu(tape, reduce(tape, x, limit));
    h = relu(tape, spatial(tape, h, limit));
    h = expand(tape, h, limit);
    return add(tape, x, h);
  }

  void collect_params(std::vector<Var>& out) const {
    out.push_back(reduce.w);
    out.push_back(reduce.b);
    out.push_back(spatial.w);
    out.push_back(spatial.b);
    out.push_back(expand.w);
    out.push_back(expand.b);
  }
};

// ---------------------------------------------------------------------------
// Adam.

struct AdamConfig {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  // Applies one bias-corrected update from each param's accumulated grad.
  void step(const std::vector<Var>& params) {
    if (state_.empty()) {
      for (const auto& p : params) state_.push_back({Tensor::zeros_like(p->val), Tensor::zeros_like(p->val)});
    }
    require(state_.size() == params.size(), "adam: parameter set changed");
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      Node& p = *params[pi];
      p.ensure_grad();
      auto& [m, v] = state_[pi];
      for (std::size_t i = 0; i < p.val.size(); ++i) {
        const double g = p.grad.v[i];
        const double mi = cfg_.beta1 * m.v[i] + (1.0 - cfg_.beta1) * g;
        const double vi = cfg_.beta2 * v.v[i] + (1.0 - cfg_.beta2) * g * g;
        m.v[i] = static_cast<float>(mi);
        v.v[i] = static_cast<float>(vi);
        p.val.v[i] -= static_cast<float>(cfg_.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg_.eps));
      }
    }
  }

  long steps_taken() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<std::pair<Tensor, Tensor>> state_;
  long t_ = 0;
};

inline void zero_grads(const std::vector<Var>& params) {
  for (const auto& p : params) {
    if (!p->grad.v.empty()) std::fill(p->grad.v.begin(), p->grad.v.end(), 0.0f);
  }
}

}  // namespace msvdnn
