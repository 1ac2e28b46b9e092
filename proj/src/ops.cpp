// SPDX-License-Identifier: Apache-2.0
#include "eavl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "kernels.hpp"

namespace eavl {

std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

}  // namespace eavl

namespace eavl::ops {
namespace {

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + to_string(t.shape()));
  }
}

template <typename T>
Tape<T>& tape_of(Var<T> a) {
  return *a.tape;
}

template <typename T>
std::size_t last_dim(const Tensor<T>& t) {
  return t.shape().back();
}

// Per-axis bilinear source indices for 2x upsampling with half-pixel centres.
struct Interp {
  std::size_t lo;
  std::size_t hi;
  double frac;
};

std::vector<Interp> upsample_axis(std::size_t in) {
  std::vector<Interp> out(2 * in);
  for (std::size_t o = 0; o < 2 * in; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (src < 0.0) src = 0.0;
    const auto lo = static_cast<std::size_t>(src);
    const std::size_t hi = std::min(lo + 1, in - 1);
    out[o] = {lo, hi, src - static_cast<double>(lo)};
  }
  return out;
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require_rank(av, 2, "matmul");
  require_rank(bv, 2, "matmul");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree for " + to_string(av.shape()) +
                         " x " + to_string(bv.shape()));
  }
  Tensor<T> out({m, n});
  kernels::gemm_nn(av.ptr(), bv.ptr(), out.ptr(), m, k, n);
  return tape_of(a).record(std::move(out), {a, b}, [a, b, m, k, n](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(a)) kernels::gemm_nt(g.ptr(), t.value(b).ptr(), t.grad(a).ptr(), m, n, k);
    if (t.requires_grad(b)) kernels::gemm_tn(t.value(a).ptr(), g.ptr(), t.grad(b).ptr(), k, m, n);
  });
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require_rank(av, 2, "matmul_nt");
  require_rank(bv, 2, "matmul_nt");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(0);
  if (bv.dim(1) != k) {
    throw DimensionError("matmul_nt: inner dimensions disagree for " + to_string(av.shape()) +
                         " x " + to_string(bv.shape()) + "^T");
  }
  Tensor<T> out({m, n});
  kernels::gemm_nt(av.ptr(), bv.ptr(), out.ptr(), m, k, n);
  return tape_of(a).record(std::move(out), {a, b}, [a, b, m, k, n](Tape<T>& t, const Tensor<T>& g) {
    // dA = G B, dB = G^T A
    if (t.requires_grad(a)) kernels::gemm_nn(g.ptr(), t.value(b).ptr(), t.grad(a).ptr(), m, n, k);
    if (t.requires_grad(b)) kernels::gemm_tn(g.ptr(), t.value(a).ptr(), t.grad(b).ptr(), n, m, k);
  });
}

template <typename T>
Var<T> transpose(Var<T> x) {
  const Tensor<T>& xv = x.value();
  require_rank(xv, 2, "transpose");
  const std::size_t r = xv.dim(0), c = xv.dim(1);
  Tensor<T> out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  return tape_of(x).record(std::move(out), {x}, [x, r, c](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad(x);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                         " differ");
  }
  Tensor<T> out = a.value();
  out += b.value();
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(a)) t.grad(a) += g;
    if (t.requires_grad(b)) t.grad(b) += g;
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                         " differ");
  }
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& av = t.value(a);
    const Tensor<T>& bv = t.value(b);
    if (t.requires_grad(a)) {
      Tensor<T>& ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      Tensor<T>& gb = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

namespace {

template <typename T>
void check_rowwise(const Tensor<T>& x, const Tensor<T>& v, const char* op) {
  if (v.size() != last_dim(x)) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + to_string(v.shape()) +
                         " against " + to_string(x.shape()));
  }
}

}  // namespace

template <typename T>
Var<T> add_rowwise(Var<T> x, Var<T> v) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& vv = v.value();
  check_rowwise(xv, vv, "add_rowwise");
  const std::size_t c = vv.size(), rows = xv.size() / c;
  Tensor<T> out = xv;
  for (std::size_t r = 0; r < rows; ++r) {
    T* o = out.ptr() + r * c;
    for (std::size_t j = 0; j < c; ++j) o[j] += vv[j];
  }
  return tape_of(x).record(std::move(out), {x, v}, [x, v, c, rows](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(x)) t.grad(x) += g;
    if (t.requires_grad(v)) {
      Tensor<T>& gv = t.grad(v);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) gv[j] += g[r * c + j];
    }
  });
}

template <typename T>
Var<T> mul_rowwise(Var<T> x, Var<T> v) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& vv = v.value();
  check_rowwise(xv, vv, "mul_rowwise");
  const std::size_t c = vv.size(), rows = xv.size() / c;
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = xv[r * c + j] * vv[j];
  return tape_of(x).record(std::move(out), {x, v}, [x, v, c, rows](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& xv = t.value(x);
    const Tensor<T>& vv = t.value(v);
    if (t.requires_grad(x)) {
      Tensor<T>& gx = t.grad(x);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += g[r * c + j] * vv[j];
    }
    if (t.requires_grad(v)) {
      Tensor<T>& gv = t.grad(v);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) gv[j] += g[r * c + j] * xv[r * c + j];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, T s) {
  Tensor<T> out = x.value();
  for (T& e : out.data()) e *= s;
  return tape_of(x).record(std::move(out), {x}, [x, s](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
  });
}

namespace {
thread_local std::vector<bool>* relu_trace = nullptr;
}  // namespace

void set_relu_trace(std::vector<bool>* trace) { relu_trace = trace; }

template <typename T>
Var<T> relu(Var<T> x) {
  Tensor<T> out = x.value();
  if (relu_trace != nullptr) {
    for (T e : out.data()) relu_trace->push_back(e > T{0});
  }
  for (T& e : out.data()) e = e > T{0} ? e : T{0};
  return tape_of(x).record(std::move(out), {x}, [x](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& xv = t.value(x);
    Tensor<T>& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > T{0}) gx[i] += g[i];
  });
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> kernel, Var<T> bias) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& kv = kernel.value();
  const Tensor<T>& bv = bias.value();
  require_rank(xv, 3, "conv2d input");
  require_rank(kv, 4, "conv2d kernel");
  const std::size_t h = xv.dim(0), w = xv.dim(1), cin = xv.dim(2);
  const std::size_t ks = kv.dim(0), cout = kv.dim(3);
  if (kv.dim(1) != ks || (ks != 1 && ks != 3)) {
    throw DimensionError("conv2d: kernel must be 1x1 or 3x3, got " + to_string(kv.shape()));
  }
  if (kv.dim(2) != cin) {
    throw DimensionError("conv2d: input channels " + std::to_string(cin) +
                         " do not match kernel " + to_string(kv.shape()));
  }
  if (bv.size() != cout) {
    throw DimensionError("conv2d: bias " + to_string(bv.shape()) + " does not match kernel " +
                         to_string(kv.shape()));
  }
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(ks / 2);
  Tensor<T> out({h, w, cout});
  const T* xp = xv.ptr();
  const T* kp = kv.ptr();
  for (std::size_t oy = 0; oy < h; ++oy) {
    for (std::size_t ox = 0; ox < w; ++ox) {
      T* o = out.ptr() + (oy * w + ox) * cout;
      for (std::size_t co = 0; co < cout; ++co) o[co] = bv[co];
      for (std::size_t ky = 0; ky < ks; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - pad;
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kx = 0; kx < ks; ++kx) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - pad;
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
          const T* xin = xp + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin;
          const T* kk = kp + (ky * ks + kx) * cin * cout;
          if (cout == 1) {
            T acc = o[0];
            for (std::size_t ci = 0; ci < cin; ++ci) acc += xin[ci] * kk[ci];
            o[0] = acc;
          } else {
            for (std::size_t ci = 0; ci < cin; ++ci) kernels::axpy(xin[ci], kk + ci * cout, o, cout);
          }
        }
      }
    }
  }
  return tape_of(x).record(
      std::move(out), {x, kernel, bias},
      [x, kernel, bias, h, w, cin, ks, cout, pad](Tape<T>& t, const Tensor<T>& g) {
        const bool need_x = t.requires_grad(x);
        const bool need_k = t.requires_grad(kernel);
        if (t.requires_grad(bias)) {
          Tensor<T>& gb = t.grad(bias);
          for (std::size_t p = 0; p < h * w; ++p)
            for (std::size_t co = 0; co < cout; ++co) gb[co] += g[p * cout + co];
        }
        if (!need_x && !need_k) return;
        const T* xp = t.value(x).ptr();
        const T* kp = t.value(kernel).ptr();
        T* gxp = need_x ? t.grad(x).ptr() : nullptr;
        T* gkp = need_k ? t.grad(kernel).ptr() : nullptr;
        for (std::size_t oy = 0; oy < h; ++oy) {
          for (std::size_t ox = 0; ox < w; ++ox) {
            const T* go = g.ptr() + (oy * w + ox) * cout;
            for (std::size_t ky = 0; ky < ks; ++ky) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - pad;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t kx = 0; kx < ks; ++kx) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - pad;
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                const std::size_t in_off =
                    (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin;
                const std::size_t k_off = (ky * ks + kx) * cin * cout;
                for (std::size_t ci = 0; ci < cin; ++ci) {
                  if (need_k) kernels::axpy(xp[in_off + ci], go, gkp + k_off + ci * cout, cout);
                  if (need_x) gxp[in_off + ci] += kernels::dot(go, kp + k_off + ci * cout, cout);
                }
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> upsample2x(Var<T> x) {
  const Tensor<T>& xv = x.value();
  require_rank(xv, 3, "upsample2x");
  const std::size_t h = xv.dim(0), w = xv.dim(1), c = xv.dim(2);
  const auto ys = upsample_axis(h);
  const auto xs = upsample_axis(w);
  Tensor<T> out({2 * h, 2 * w, c});
  for (std::size_t oy = 0; oy < 2 * h; ++oy) {
    const T fy = static_cast<T>(ys[oy].frac);
    for (std::size_t ox = 0; ox < 2 * w; ++ox) {
      const T fx = static_cast<T>(xs[ox].frac);
      const T w00 = (T{1} - fy) * (T{1} - fx), w01 = (T{1} - fy) * fx;
      const T w10 = fy * (T{1} - fx), w11 = fy * fx;
      const T* p00 = xv.ptr() + (ys[oy].lo * w + xs[ox].lo) * c;
      const T* p01 = xv.ptr() + (ys[oy].lo * w + xs[ox].hi) * c;
      const T* p10 = xv.ptr() + (ys[oy].hi * w + xs[ox].lo) * c;
      const T* p11 = xv.ptr() + (ys[oy].hi * w + xs[ox].hi) * c;
      T* o = out.ptr() + (oy * 2 * w + ox) * c;
      for (std::size_t ch = 0; ch < c; ++ch)
        o[ch] = w00 * p00[ch] + w01 * p01[ch] + w10 * p10[ch] + w11 * p11[ch];
    }
  }
  return tape_of(x).record(std::move(out), {x}, [x, h, w, c, ys, xs](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad(x);
    for (std::size_t oy = 0; oy < 2 * h; ++oy) {
      const T fy = static_cast<T>(ys[oy].frac);
      for (std::size_t ox = 0; ox < 2 * w; ++ox) {
        const T fx = static_cast<T>(xs[ox].frac);
        const T* go = g.ptr() + (oy * 2 * w + ox) * c;
        kernels::axpy((T{1} - fy) * (T{1} - fx), go, gx.ptr() + (ys[oy].lo * w + xs[ox].lo) * c, c);
        kernels::axpy((T{1} - fy) * fx, go, gx.ptr() + (ys[oy].lo * w + xs[ox].hi) * c, c);
        kernels::axpy(fy * (T{1} - fx), go, gx.ptr() + (ys[oy].hi * w + xs[ox].lo) * c, c);
        kernels::axpy(fy * fx, go, gx.ptr() + (ys[oy].hi * w + xs[ox].hi) * c, c);
      }
    }
  });
}

template <typename T>
Var<T> avgpool2x(Var<T> x) {
  const Tensor<T>& xv = x.value();
  require_rank(xv, 3, "avgpool2x");
  const std::size_t h = xv.dim(0), w = xv.dim(1), c = xv.dim(2);
  if (h % 2 != 0 || w % 2 != 0) {
    throw DimensionError("avgpool2x: spatial dims must be even, got " + to_string(xv.shape()));
  }
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor<T> out({oh, ow, c});
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox)
      for (std::size_t ch = 0; ch < c; ++ch)
        out.at(oy, ox, ch) = (xv.at(2 * oy, 2 * ox, ch) + xv.at(2 * oy, 2 * ox + 1, ch) +
                              xv.at(2 * oy + 1, 2 * ox, ch) + xv.at(2 * oy + 1, 2 * ox + 1, ch)) *
                             T(0.25);
  return tape_of(x).record(std::move(out), {x}, [x, oh, ow, c](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad(x);
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T q = g.at(oy, ox, ch) * T(0.25);
          gx.at(2 * oy, 2 * ox, ch) += q;
          gx.at(2 * oy, 2 * ox + 1, ch) += q;
          gx.at(2 * oy + 1, 2 * ox, ch) += q;
          gx.at(2 * oy + 1, 2 * ox + 1, ch) += q;
        }
  });
}

template <typename T>
Var<T> softmax(Var<T> x, std::size_t axis) {
  const Tensor<T>& xv = x.value();
  if (axis >= xv.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         to_string(xv.shape()));
  }
  std::size_t outer = 1, inner = 1;
  const std::size_t n = xv.dim(axis);
  for (std::size_t i = 0; i < axis; ++i) outer *= xv.dim(i);
  for (std::size_t i = axis + 1; i < xv.rank(); ++i) inner *= xv.dim(i);
  Tensor<T> out(xv.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  }
  auto y = std::make_shared<const Tensor<T>>(out);
  return tape_of(x).record(std::move(out), {x}, [x, y, outer, inner, n](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad(x);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        T s = 0;
        for (std::size_t j = 0; j < n; ++j) s += g[base + j * inner] * (*y)[base + j * inner];
        for (std::size_t j = 0; j < n; ++j)
          gx[base + j * inner] += (*y)[base + j * inner] * (g[base + j * inner] - s);
      }
    }
  });
}

template <typename T>
Var<T> masked_softmax_rows(Var<T> x, const std::vector<bool>& valid) {
  const Tensor<T>& xv = x.value();
  require_rank(xv, 2, "masked_softmax_rows");
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  if (valid.size() != cols) {
    throw DimensionError("masked_softmax_rows: mask length " + std::to_string(valid.size()) +
                         " does not match " + to_string(xv.shape()));
  }
  if (std::none_of(valid.begin(), valid.end(), [](bool b) { return b; })) {
    throw DimensionError("masked_softmax_rows: every column is masked");
  }
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.ptr() + r * cols;
    T* o = out.ptr() + r * cols;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < cols; ++j)
      if (valid[j]) mx = std::max(mx, xr[j]);
    T total = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      o[j] = valid[j] ? std::exp(xr[j] - mx) : T{0};
      total += o[j];
    }
    for (std::size_t j = 0; j < cols; ++j) o[j] /= total;
  }
  std::shared_ptr<const Tensor<T>> y = std::make_shared<const Tensor<T>>(out);
  return tape_of(x).record(std::move(out), {x}, [x, y, rows, cols](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad(x);
    for (std::size_t r = 0; r < rows; ++r) {
      T s = 0;
      for (std::size_t j = 0; j < cols; ++j) s += g[r * cols + j] * (*y)[r * cols + j];
      for (std::size_t j = 0; j < cols; ++j)
        gx[r * cols + j] += (*y)[r * cols + j] * (g[r * cols + j] - s);
    }
  });
}

template <typename T>
Var<T> mean_rows(Var<T> x) {
  const Tensor<T>& xv = x.value();
  require_rank(xv, 2, "mean_rows");
  const std::size_t rows = xv.dim(0), c = xv.dim(1);
  Tensor<T> out({c});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out[j] += xv[r * c + j];
  const T inv = T{1} / static_cast<T>(rows);
  for (T& e : out.data()) e *= inv;
  return tape_of(x).record(std::move(out), {x}, [x, rows, c, inv](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad(x);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += g[j] * inv;
  });
}

template <typename T>
Var<T> row(Var<T> x, std::size_t i) {
  const Tensor<T>& xv = x.value();
  require_rank(xv, 2, "row");
  if (i >= xv.dim(0)) {
    throw DimensionError("row: index " + std::to_string(i) + " out of range for " +
                         to_string(xv.shape()));
  }
  const std::size_t c = xv.dim(1);
  Tensor<T> out({c}, std::vector<T>(xv.ptr() + i * c, xv.ptr() + (i + 1) * c));
  return tape_of(x).record(std::move(out), {x}, [x, i, c](Tape<T>& t, const Tensor<T>& g) {
    kernels::axpy(T{1}, g.ptr(), t.grad(x).ptr() + i * c, c);
  });
}

template <typename T>
Var<T> gather_rows(Var<T> table, std::span<const std::size_t> ids) {
  const Tensor<T>& tv = table.value();
  require_rank(tv, 2, "gather_rows");
  const std::size_t c = tv.dim(1);
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  Tensor<T> out({idx.size(), c});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= tv.dim(0)) {
      throw DimensionError("gather_rows: id " + std::to_string(idx[r]) + " out of range for " +
                           to_string(tv.shape()));
    }
    std::copy_n(tv.ptr() + idx[r] * c, c, out.ptr() + r * c);
  }
  return tape_of(table).record(std::move(out), {table}, [table, idx, c](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gt = t.grad(table);
    for (std::size_t r = 0; r < idx.size(); ++r) kernels::axpy(T{1}, g.ptr() + r * c, gt.ptr() + idx[r] * c, c);
  });
}

template <typename T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t count) {
  const Tensor<T>& xv = x.value();
  require_rank(xv, 2, "slice_rows");
  if (count == 0 || begin + count > xv.dim(0)) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of bounds for " +
                         to_string(xv.shape()));
  }
  const std::size_t c = xv.dim(1);
  Tensor<T> out({count, c}, std::vector<T>(xv.ptr() + begin * c, xv.ptr() + (begin + count) * c));
  return tape_of(x).record(std::move(out), {x}, [x, begin, count, c](Tape<T>& t, const Tensor<T>& g) {
    kernels::axpy(T{1}, g.ptr(), t.grad(x).ptr() + begin * c, count * c);
  });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> xs) {
  if (xs.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = xs[0].value().dim(1);
  std::size_t rows = 0;
  for (const Var<T>& v : xs) {
    require_rank(v.value(), 2, "concat_rows");
    if (v.value().dim(1) != c) {
      throw DimensionError("concat_rows: column count of " + to_string(v.shape()) +
                           " disagrees with " + to_string(xs[0].shape()));
    }
    rows += v.value().dim(0);
  }
  Tensor<T> out({rows, c});
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var<T>& v : xs) {
    offsets.push_back(off);
    std::copy_n(v.value().ptr(), v.value().size(), out.ptr() + off);
    off += v.value().size();
  }
  std::vector<Var<T>> inputs(xs.begin(), xs.end());
  return tape_of(xs[0]).record(std::move(out), xs, [inputs, offsets](Tape<T>& t, const Tensor<T>& g) {
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      if (!t.requires_grad(inputs[k])) continue;
      Tensor<T>& gk = t.grad(inputs[k]);
      kernels::axpy(T{1}, g.ptr() + offsets[k], gk.ptr(), gk.size());
    }
  });
}

template <typename T>
Var<T> stack_rows(std::span<const Var<T>> xs) {
  if (xs.empty()) throw DimensionError("stack_rows: no inputs");
  const std::size_t c = xs[0].value().size();
  Tensor<T> out({xs.size(), c});
  for (std::size_t r = 0; r < xs.size(); ++r) {
    const Tensor<T>& v = xs[r].value();
    if (v.size() != c) {
      throw DimensionError("stack_rows: input " + std::to_string(r) + " has shape " +
                           to_string(v.shape()) + ", expected " + std::to_string(c) + " elements");
    }
    std::copy_n(v.ptr(), c, out.ptr() + r * c);
  }
  std::vector<Var<T>> inputs(xs.begin(), xs.end());
  return tape_of(xs[0]).record(std::move(out), xs, [inputs, c](Tape<T>& t, const Tensor<T>& g) {
    for (std::size_t r = 0; r < inputs.size(); ++r)
      if (t.requires_grad(inputs[r])) kernels::axpy(T{1}, g.ptr() + r * c, t.grad(inputs[r]).ptr(), c);
  });
}

template <typename T>
Var<T> concat_last(std::span<const Var<T>> xs) {
  if (xs.empty()) throw DimensionError("concat_last: no inputs");
  Shape lead = xs[0].shape();
  lead.pop_back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var<T>& v : xs) {
    Shape s = v.shape();
    widths.push_back(s.back());
    total += s.back();
    s.pop_back();
    if (s != lead) {
      throw DimensionError("concat_last: leading dims of " + to_string(v.shape()) +
                           " disagree with " + to_string(xs[0].shape()));
    }
  }
  const std::size_t rows = shape_size(lead);
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor<T> out(out_shape);
  std::size_t off = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const Tensor<T>& v = xs[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.ptr() + r * widths[k], widths[k], out.ptr() + r * total + off);
    off += widths[k];
  }
  std::vector<Var<T>> inputs(xs.begin(), xs.end());
  return tape_of(xs[0]).record(std::move(out), xs, [inputs, widths, rows, total](Tape<T>& t, const Tensor<T>& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      if (t.requires_grad(inputs[k])) {
        T* gk = t.grad(inputs[k]).ptr();
        for (std::size_t r = 0; r < rows; ++r)
          kernels::axpy(T{1}, g.ptr() + r * total + off, gk + r * widths[k], widths[k]);
      }
      off += widths[k];
    }
  });
}

template <typename T>
Var<T> slice_last(Var<T> x, std::size_t begin, std::size_t count) {
  const Tensor<T>& xv = x.value();
  const std::size_t c = last_dim(xv);
  if (count == 0 || begin + count > c) {
    throw DimensionError("slice_last: range [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of bounds for " +
                         to_string(xv.shape()));
  }
  const std::size_t rows = xv.size() / c;
  Shape s = xv.shape();
  s.back() = count;
  Tensor<T> out(s);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(xv.ptr() + r * c + begin, count, out.ptr() + r * count);
  return tape_of(x).record(std::move(out), {x}, [x, begin, count, rows, c](Tape<T>& t, const Tensor<T>& g) {
    T* gx = t.grad(x).ptr();
    for (std::size_t r = 0; r < rows; ++r) kernels::axpy(T{1}, g.ptr() + r * count, gx + r * c + begin, count);
  });
}

template <typename T>
Var<T> slice_flat(Var<T> x, std::size_t offset, Shape shape) {
  const Tensor<T>& xv = x.value();
  const std::size_t n = shape_size(shape);
  if (offset + n > xv.size()) {
    throw DimensionError("slice_flat: range exceeds " + to_string(xv.shape()));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(xv.ptr() + offset, xv.ptr() + offset + n));
  return tape_of(x).record(std::move(out), {x}, [x, offset, n](Tape<T>& t, const Tensor<T>& g) {
    kernels::axpy(T{1}, g.ptr(), t.grad(x).ptr() + offset, n);
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return tape_of(x).record(std::move(out), {x}, [x](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad(x);
    kernels::axpy(T{1}, g.ptr(), gx.ptr(), g.size());
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  const Tensor<T>& xv = x.value();
  const std::size_t c = last_dim(xv), rows = xv.size() / c;
  if (gain.value().size() != c || bias.value().size() != c) {
    throw DimensionError("layer_norm: gain/bias do not match " + to_string(xv.shape()));
  }
  auto xhat = std::make_shared<Tensor<T>>(xv.shape());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  Tensor<T> out(xv.shape());
  const Tensor<T>& gv = gain.value();
  const Tensor<T>& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.ptr() + r * c;
    T mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += xr[j];
    mean /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(c);
    const T is = T{1} / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const T xh = (xr[j] - mean) * is;
      (*xhat)[r * c + j] = xh;
      out[r * c + j] = xh * gv[j] + bv[j];
    }
  }
  return tape_of(x).record(
      std::move(out), {x, gain, bias}, [x, gain, bias, xhat, inv_std, rows, c](Tape<T>& t, const Tensor<T>& g) {
        const Tensor<T>& gv = t.value(gain);
        if (t.requires_grad(gain)) {
          Tensor<T>& gg = t.grad(gain);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) gg[j] += g[r * c + j] * (*xhat)[r * c + j];
        }
        if (t.requires_grad(bias)) {
          Tensor<T>& gb = t.grad(bias);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) gb[j] += g[r * c + j];
        }
        if (!t.requires_grad(x)) return;
        Tensor<T>& gx = t.grad(x);
        std::vector<T> dxh(c);
        for (std::size_t r = 0; r < rows; ++r) {
          T m1 = 0, m2 = 0;
          for (std::size_t j = 0; j < c; ++j) {
            dxh[j] = g[r * c + j] * gv[j];
            m1 += dxh[j];
            m2 += dxh[j] * (*xhat)[r * c + j];
          }
          m1 /= static_cast<T>(c);
          m2 /= static_cast<T>(c);
          for (std::size_t j = 0; j < c; ++j)
            gx[r * c + j] += (*inv_std)[r] * (dxh[j] - m1 - (*xhat)[r * c + j] * m2);
        }
      });
}

template <typename T>
Var<T> sum(Var<T> x) {
  T s = 0;
  for (T e : x.value().data()) s += e;
  return tape_of(x).record(Tensor<T>::scalar(s), {x}, [x](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad(x);
    for (T& e : gx.data()) e += g[0];
  });
}

template <typename T>
Var<T> weighted_sum(Var<T> x, const Tensor<T>& weights) {
  const Tensor<T>& xv = x.value();
  if (weights.shape() != xv.shape()) {
    throw DimensionError("weighted_sum: weights " + to_string(weights.shape()) +
                         " do not match " + to_string(xv.shape()));
  }
  T s = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i] * weights[i];
  auto w = std::make_shared<const Tensor<T>>(weights);
  return tape_of(x).record(Tensor<T>::scalar(s), {x}, [x, w](Tape<T>& t, const Tensor<T>& g) {
    kernels::axpy(g[0], w->ptr(), t.grad(x).ptr(), w->size());
  });
}

template <typename T>
Var<T> bce_with_logits(Var<T> logits, const Tensor<T>& target) {
  const Tensor<T>& z = logits.value();
  if (target.shape() != z.shape()) {
    throw DimensionError("bce_with_logits: logits " + to_string(z.shape()) + " vs target " +
                         to_string(target.shape()));
  }
  const std::size_t n = z.size();
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T zi = z[i];
    total += std::max(zi, T{0}) - zi * target[i] + std::log1p(std::exp(-std::abs(zi)));
  }
  auto tgt = std::make_shared<const Tensor<T>>(target);
  return tape_of(logits).record(
      Tensor<T>::scalar(total / static_cast<T>(n)), {logits}, [logits, tgt, n](Tape<T>& t, const Tensor<T>& g) {
        const Tensor<T>& z = t.value(logits);
        Tensor<T>& gz = t.grad(logits);
        const T s = g[0] / static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i) {
          const T sig = z[i] >= T{0} ? T{1} / (T{1} + std::exp(-z[i]))
                                     : std::exp(z[i]) / (T{1} + std::exp(z[i]));
          gz[i] += s * (sig - (*tgt)[i]);
        }
      });
}

#define EAVL_INSTANTIATE_OPS(T)                                                          \
  template Var<T> matmul(Var<T>, Var<T>);                                                \
  template Var<T> matmul_nt(Var<T>, Var<T>);                                             \
  template Var<T> transpose(Var<T>);                                                     \
  template Var<T> add(Var<T>, Var<T>);                                                   \
  template Var<T> mul(Var<T>, Var<T>);                                                   \
  template Var<T> add_rowwise(Var<T>, Var<T>);                                           \
  template Var<T> mul_rowwise(Var<T>, Var<T>);                                           \
  template Var<T> scale(Var<T>, T);                                                      \
  template Var<T> relu(Var<T>);                                                          \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>);                                        \
  template Var<T> upsample2x(Var<T>);                                                    \
  template Var<T> avgpool2x(Var<T>);                                                     \
  template Var<T> softmax(Var<T>, std::size_t);                                          \
  template Var<T> masked_softmax_rows(Var<T>, const std::vector<bool>&);                 \
  template Var<T> mean_rows(Var<T>);                                                     \
  template Var<T> row(Var<T>, std::size_t);                                              \
  template Var<T> gather_rows(Var<T>, std::span<const std::size_t>);                     \
  template Var<T> slice_rows(Var<T>, std::size_t, std::size_t);                          \
  template Var<T> concat_rows(std::span<const Var<T>>);                                  \
  template Var<T> stack_rows(std::span<const Var<T>>);                                   \
  template Var<T> concat_last(std::span<const Var<T>>);                                  \
  template Var<T> slice_last(Var<T>, std::size_t, std::size_t);                          \
  template Var<T> slice_flat(Var<T>, std::size_t, Shape);                                \
  template Var<T> reshape(Var<T>, Shape);                                                \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                 \
  template Var<T> sum(Var<T>);                                                           \
  template Var<T> weighted_sum(Var<T>, const Tensor<T>&);                                \
  template Var<T> bce_with_logits(Var<T>, const Tensor<T>&);

EAVL_INSTANTIATE_OPS(float)
EAVL_INSTANTIATE_OPS(double)

}  // namespace eavl::ops
