#pragma once

// Differentiable primitives over Tensor. Every op computes its forward value
// eagerly and, when a tape is active and some input wants gradients, records
// one backward closure that accumulates into the inputs' grad buffers.

#include <cmath>
#include <cstring>
#include <memory>
#include <vector>

#include "resvox/tensor.hpp"

namespace resvox {

namespace detail {

// Right-aligned broadcast result shape, numpy rules.
inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    long da = (i < r - ra) ? 1 : a[i - (r - ra)];
    long db = (i < r - rb) ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1)
      fail(op, ": shapes ", shape_str(a), " and ", shape_str(b),
           " do not broadcast");
    out[i] = std::max(da, db);
  }
  return out;
}

// Offset into `in` for each linear index of `out` (0-stride on broadcast dims).
inline std::shared_ptr<std::vector<long>> broadcast_map(const Shape& in,
                                                        const Shape& out) {
  size_t r = out.size(), ri = in.size();
  std::vector<long> stride(r, 0);
  long acc = 1;
  for (size_t i = ri; i-- > 0;) {
    size_t oi = i + (r - ri);
    stride[oi] = (in[i] == 1 && out[oi] != 1) ? 0 : acc;
    acc *= in[i];
  }
  long n = shape_numel(out);
  auto map = std::make_shared<std::vector<long>>(size_t(n));
  std::vector<long> idx(r, 0);
  for (long o = 0; o < n; ++o) {
    long off = 0;
    for (size_t d = 0; d < r; ++d) off += idx[d] * stride[d];
    (*map)[size_t(o)] = off;
    for (size_t d = r; d-- > 0;) {
      if (++idx[d] < out[d]) break;
      idx[d] = 0;
    }
  }
  return map;
}

inline Tensor make_output(Shape shape, bool any_input_grad) {
  Tensor out(std::move(shape));
  out.set_requires_grad(Tape::active() != nullptr && any_input_grad);
  return out;
}

// Elementwise binary op with broadcasting. dfa/dfb give d(out)/d(input) at an
// element as functions of the two input values.
template <class F, class DA, class DB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f,
                 DA dfa, DB dfb) {
  Shape os = broadcast_shape(name, a.shape(), b.shape());
  bool plain = same_shape(a.shape(), os) && same_shape(b.shape(), os);
  Tensor out = make_output(os, a.requires_grad() || b.requires_grad());
  long n = out.size();
  const double* av = a.data();
  const double* bv = b.data();
  double* ov = out.data();
  std::shared_ptr<std::vector<long>> amap, bmap;
  if (plain) {
    for (long i = 0; i < n; ++i) ov[i] = f(av[i], bv[i]);
  } else {
    amap = broadcast_map(a.shape(), os);
    bmap = broadcast_map(b.shape(), os);
    for (long i = 0; i < n; ++i)
      ov[i] = f(av[size_t((*amap)[size_t(i)])], bv[size_t((*bmap)[size_t(i)])]);
  }
  check_finite(out, name);
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tensor am = a, bm = b, om = out;  // keep shared storage alive
    Tape::active()->record(name, on, [an, bn, on, amap, bmap, n, dfa, dfb]() {
      const double* g = on->grad.data();
      const double* av2 = an->value.data();
      const double* bv2 = bn->value.data();
      if (an->requires_grad) {
        if (an->grad.size() != an->value.size())
          an->grad.assign(an->value.size(), 0.0);
        double* ga = an->grad.data();
        for (long i = 0; i < n; ++i) {
          long ai = amap ? (*amap)[size_t(i)] : i;
          long bi = bmap ? (*bmap)[size_t(i)] : i;
          ga[ai] += g[i] * dfa(av2[ai], bv2[bi]);
        }
      }
      if (bn->requires_grad) {
        if (bn->grad.size() != bn->value.size())
          bn->grad.assign(bn->value.size(), 0.0);
        double* gb = bn->grad.data();
        for (long i = 0; i < n; ++i) {
          long ai = amap ? (*amap)[size_t(i)] : i;
          long bi = bmap ? (*bmap)[size_t(i)] : i;
          gb[bi] += g[i] * dfb(av2[ai], bv2[bi]);
        }
      }
    });
  }
  return out;
}

// Elementwise unary op; dfd gives d(out)/d(in) from (input, output) values.
template <class F, class D>
Tensor unary_op(const char* name, const Tensor& x, F f, D dfd) {
  Tensor out = make_output(x.shape(), x.requires_grad());
  long n = out.size();
  const double* xv = x.data();
  double* ov = out.data();
  for (long i = 0; i < n; ++i) ov[i] = f(xv[i]);
  check_finite(out, name);
  if (out.requires_grad()) {
    auto xn = x.node(), on = out.node();
    Tape::active()->record(name, on, [xn, on, n, dfd]() {
      if (xn->grad.size() != xn->value.size())
        xn->grad.assign(xn->value.size(), 0.0);
      const double* g = on->grad.data();
      double* gx = xn->grad.data();
      const double* xv2 = xn->value.data();
      const double* ov2 = on->value.data();
      for (long i = 0; i < n; ++i) gx[i] += g[i] * dfd(xv2[i], ov2[i]);
    });
  }
  return out;
}

inline void ensure_grad(const std::shared_ptr<TensorNode>& n) {
  if (n->grad.size() != n->value.size()) n->grad.assign(n->value.size(), 0.0);
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary_op(
      "scale", x, [c](double v) { return c * v; },
      [c](double, double) { return c; });
}

inline Tensor add_const(const Tensor& x, double c) {
  return detail::unary_op(
      "add_const", x, [c](double v) { return v + c; },
      [](double, double) { return 1.0; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary_op(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      "sigmoid", x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh_act(const Tensor& x) {
  return detail::unary_op(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

// a [*, m, k] x b [*, k, n] -> [*, m, n]; b may be rank-2 and shared across
// the leading dims of a.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2)
    fail("matmul: need rank >= 2, got ", shape_str(a.shape()), " and ",
         shape_str(b.shape()));
  long m = a.extent(a.rank() - 2), k = a.extent(a.rank() - 1);
  long kb = b.extent(b.rank() - 2), n = b.extent(b.rank() - 1);
  if (k != kb)
    fail("matmul: inner dims differ, ", shape_str(a.shape()), " vs ",
         shape_str(b.shape()));
  bool shared_b = (b.rank() == 2 && a.rank() > 2);
  long batch = 1;
  Shape os;
  if (b.rank() == 2 || a.rank() == b.rank()) {
    for (long d = 0; d + 2 < a.rank(); ++d) batch *= a.extent(d);
    if (!shared_b && a.rank() == b.rank()) {
      for (long d = 0; d + 2 < a.rank(); ++d)
        if (a.extent(d) != b.extent(d))
          fail("matmul: batch dims differ, ", shape_str(a.shape()), " vs ",
               shape_str(b.shape()));
    }
    os.assign(a.shape().begin(), a.shape().end() - 1);
    os.push_back(n);
  } else {
    fail("matmul: unsupported ranks ", shape_str(a.shape()), " vs ",
         shape_str(b.shape()));
  }
  if (b.rank() == 2) shared_b = true;
  Tensor out =
      detail::make_output(os, a.requires_grad() || b.requires_grad());
  const double* av = a.data();
  const double* bv = b.data();
  double* ov = out.data();
  for (long bi = 0; bi < batch; ++bi) {
    const double* A = av + bi * m * k;
    const double* B = shared_b ? bv : bv + bi * k * n;
    double* O = ov + bi * m * n;
    for (long i = 0; i < m; ++i) {
      double* orow = O + i * n;
      for (long j = 0; j < n; ++j) orow[j] = 0.0;
      for (long p = 0; p < k; ++p) {
        double aip = A[i * k + p];
        const double* brow = B + p * n;
        for (long j = 0; j < n; ++j) orow[j] += aip * brow[j];
      }
    }
  }
  detail::check_finite(out, "matmul");
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->record("matmul", on, [an, bn, on, batch, m, k, n, shared_b]() {
      const double* g = on->grad.data();
      if (an->requires_grad) {
        detail::ensure_grad(an);
        double* ga = an->grad.data();
        const double* bv2 = bn->value.data();
        for (long bi = 0; bi < batch; ++bi) {
          const double* G = g + bi * m * n;
          const double* B = shared_b ? bv2 : bv2 + bi * k * n;
          double* GA = ga + bi * m * k;
          for (long i = 0; i < m; ++i)
            for (long p = 0; p < k; ++p) {
              double acc = 0.0;
              const double* grow = G + i * n;
              const double* brow = B + p * n;
              for (long j = 0; j < n; ++j) acc += grow[j] * brow[j];
              GA[i * k + p] += acc;
            }
        }
      }
      if (bn->requires_grad) {
        detail::ensure_grad(bn);
        double* gb = bn->grad.data();
        const double* av2 = an->value.data();
        for (long bi = 0; bi < batch; ++bi) {
          const double* G = g + bi * m * n;
          const double* A = av2 + bi * m * k;
          double* GB = shared_b ? gb : gb + bi * k * n;
          for (long i = 0; i < m; ++i) {
            const double* grow = G + i * n;
            for (long p = 0; p < k; ++p) {
              double aip = A[i * k + p];
              double* gbrow = GB + p * n;
              for (long j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
            }
          }
        }
      }
    });
  }
  return out;
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size())
    fail("reshape: cannot view ", shape_str(x.shape()), " as ",
         shape_str(shape));
  Tensor out = detail::make_output(std::move(shape), x.requires_grad());
  out.vec() = x.vec();
  if (out.requires_grad()) {
    auto xn = x.node(), on = out.node();
    Tape::active()->record("reshape", on, [xn, on]() {
      detail::ensure_grad(xn);
      for (size_t i = 0; i < xn->grad.size(); ++i)
        xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

inline Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  if (long(perm.size()) != x.rank())
    fail("permute: perm rank ", perm.size(), " vs tensor rank ", x.rank());
  long r = x.rank();
  Shape os(size_t(r), 0);
  std::vector<char> seen(size_t(r), 0);
  for (long d = 0; d < r; ++d) {
    int p = perm[size_t(d)];
    if (p < 0 || p >= r || seen[size_t(p)]) fail("permute: invalid perm");
    seen[size_t(p)] = 1;
    os[size_t(d)] = x.extent(p);
  }
  // map[out_linear] = in_linear
  std::vector<long> in_strides(size_t(r), 1);
  for (long d = r - 2; d >= 0; --d)
    in_strides[size_t(d)] = in_strides[size_t(d + 1)] * x.extent(d + 1);
  long n = x.size();
  auto map = std::make_shared<std::vector<long>>(size_t(n));
  std::vector<long> idx(size_t(r), 0);
  for (long o = 0; o < n; ++o) {
    long off = 0;
    for (long d = 0; d < r; ++d)
      off += idx[size_t(d)] * in_strides[size_t(perm[size_t(d)])];
    (*map)[size_t(o)] = off;
    for (long d = r; d-- > 0;) {
      if (++idx[size_t(d)] < os[size_t(d)]) break;
      idx[size_t(d)] = 0;
    }
  }
  Tensor out = detail::make_output(os, x.requires_grad());
  const double* xv = x.data();
  double* ov = out.data();
  for (long o = 0; o < n; ++o) ov[o] = xv[(*map)[size_t(o)]];
  if (out.requires_grad()) {
    auto xn = x.node(), on = out.node();
    Tape::active()->record("permute", on, [xn, on, map, n]() {
      detail::ensure_grad(xn);
      for (long o = 0; o < n; ++o)
        xn->grad[size_t((*map)[size_t(o)])] += on->grad[size_t(o)];
    });
  }
  return out;
}

inline Tensor slice(const Tensor& x, int dim, long start, long len) {
  if (dim < 0 || dim >= x.rank()) fail("slice: bad dim ", dim);
  if (start < 0 || len < 0 || start + len > x.extent(dim))
    fail("slice: range [", start, ",", start + len, ") exceeds extent ",
         x.extent(dim));
  Shape os = x.shape();
  os[size_t(dim)] = len;
  long outer = 1, inner = 1;
  for (int d = 0; d < dim; ++d) outer *= x.extent(d);
  for (long d = dim + 1; d < x.rank(); ++d) inner *= x.extent(d);
  long xdim = x.extent(dim);
  Tensor out = detail::make_output(os, x.requires_grad());
  const double* xv = x.data();
  double* ov = out.data();
  for (long o = 0; o < outer; ++o)
    std::memcpy(ov + o * len * inner, xv + (o * xdim + start) * inner,
                size_t(len * inner) * sizeof(double));
  if (out.requires_grad()) {
    auto xn = x.node(), on = out.node();
    Tape::active()->record("slice", on, [xn, on, outer, inner, len, xdim, start]() {
      detail::ensure_grad(xn);
      for (long o = 0; o < outer; ++o) {
        const double* g = on->grad.data() + o * len * inner;
        double* gx = xn->grad.data() + (o * xdim + start) * inner;
        for (long i = 0; i < len * inner; ++i) gx[i] += g[i];
      }
    });
  }
  return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, int dim) {
  if (parts.empty()) fail("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (dim < 0 || dim >= long(s0.size())) fail("concat: bad dim ", dim);
  long total = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    if (p.rank() != long(s0.size())) fail("concat: rank mismatch");
    for (long d = 0; d < p.rank(); ++d)
      if (d != dim && p.extent(d) != s0[size_t(d)])
        fail("concat: shape mismatch at dim ", d);
    total += p.extent(dim);
    rg = rg || p.requires_grad();
  }
  Shape os = s0;
  os[size_t(dim)] = total;
  long outer = 1, inner = 1;
  for (int d = 0; d < dim; ++d) outer *= s0[size_t(d)];
  for (size_t d = size_t(dim) + 1; d < s0.size(); ++d) inner *= s0[d];
  Tensor out = detail::make_output(os, rg);
  double* ov = out.data();
  long at = 0;
  for (const Tensor& p : parts) {
    long pd = p.extent(dim);
    const double* pv = p.data();
    for (long o = 0; o < outer; ++o)
      std::memcpy(ov + (o * total + at) * inner, pv + o * pd * inner,
                  size_t(pd * inner) * sizeof(double));
    at += pd;
  }
  if (out.requires_grad()) {
    std::vector<std::shared_ptr<TensorNode>> ins;
    for (const Tensor& p : parts) ins.push_back(p.node());
    auto on = out.node();
    Tape::active()->record("concat", on, [ins, on, outer, inner, total]() {
      long at2 = 0;
      for (const auto& xn : ins) {
        long pd = long(xn->value.size()) / std::max(outer * inner, 1l);
        if (xn->requires_grad) {
          detail::ensure_grad(xn);
          for (long o = 0; o < outer; ++o) {
            const double* g = on->grad.data() + (o * total + at2) * inner;
            double* gx = xn->grad.data() + o * pd * inner;
            for (long i = 0; i < pd * inner; ++i) gx[i] += g[i];
          }
        }
        at2 += pd;
      }
    });
  }
  return out;
}

// Softmax over the last dim. With a mask (0/1, broadcastable), masked entries
// are exact zeros and excluded from the normalization; fully masked rows come
// out all-zero.
inline Tensor softmax_lastdim(const Tensor& x, const Tensor& mask = Tensor()) {
  if (x.rank() < 1) fail("softmax: need rank >= 1");
  long d = x.extent(x.rank() - 1);
  long rows = x.size() / d;
  std::shared_ptr<std::vector<long>> mmap;
  if (mask.defined()) {
    if (mask.requires_grad()) fail("softmax: mask must not require gradients");
    Shape bs = detail::broadcast_shape("softmax", x.shape(), mask.shape());
    if (!same_shape(bs, x.shape()))
      fail("softmax: mask shape ", shape_str(mask.shape()),
           " does not broadcast to ", shape_str(x.shape()));
    mmap = detail::broadcast_map(mask.shape(), x.shape());
  }
  Tensor out = detail::make_output(x.shape(), x.requires_grad());
  const double* xv = x.data();
  const double* mv = mask.defined() ? mask.data() : nullptr;
  double* ov = out.data();
  for (long r = 0; r < rows; ++r) {
    const double* row = xv + r * d;
    double* orow = ov + r * d;
    double mx = -1e300;
    long alive = 0;
    for (long j = 0; j < d; ++j) {
      bool on = !mv || mv[(*mmap)[size_t(r * d + j)]] != 0.0;
      if (on) {
        mx = std::max(mx, row[j]);
        ++alive;
      }
    }
    if (alive == 0) {
      for (long j = 0; j < d; ++j) orow[j] = 0.0;
      continue;
    }
    double sum = 0.0;
    for (long j = 0; j < d; ++j) {
      bool on = !mv || mv[(*mmap)[size_t(r * d + j)]] != 0.0;
      orow[j] = on ? std::exp(row[j] - mx) : 0.0;
      sum += orow[j];
    }
    for (long j = 0; j < d; ++j) orow[j] /= sum;
  }
  detail::check_finite(out, "softmax");
  if (out.requires_grad()) {
    auto xn = x.node(), on = out.node();
    Tape::active()->record("softmax", on, [xn, on, rows, d]() {
      detail::ensure_grad(xn);
      for (long r = 0; r < rows; ++r) {
        const double* y = on->value.data() + r * d;
        const double* g = on->grad.data() + r * d;
        double* gx = xn->grad.data() + r * d;
        double dot = 0.0;
        for (long j = 0; j < d; ++j) dot += y[j] * g[j];
        for (long j = 0; j < d; ++j) gx[j] += y[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

// Normalizes the last dim: (x - mean) / sqrt(var + eps) * gain + bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain,
                         const Tensor& bias, double eps = 1e-5) {
  long d = x.extent(x.rank() - 1);
  if (gain.size() != d || bias.size() != d)
    fail("layer_norm: gain/bias size must be ", d);
  long rows = x.size() / d;
  Tensor out = detail::make_output(
      x.shape(),
      x.requires_grad() || gain.requires_grad() || bias.requires_grad());
  const double* xv = x.data();
  const double* gv = gain.data();
  const double* bv = bias.data();
  double* ov = out.data();
  auto stats = std::make_shared<std::vector<double>>(size_t(rows * 2));
  for (long r = 0; r < rows; ++r) {
    const double* row = xv + r * d;
    double mu = 0.0;
    for (long j = 0; j < d; ++j) mu += row[j];
    mu /= double(d);
    double var = 0.0;
    for (long j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= double(d);
    double inv = 1.0 / std::sqrt(var + eps);
    (*stats)[size_t(2 * r)] = mu;
    (*stats)[size_t(2 * r + 1)] = inv;
    double* orow = ov + r * d;
    for (long j = 0; j < d; ++j) orow[j] = (row[j] - mu) * inv * gv[j] + bv[j];
  }
  detail::check_finite(out, "layer_norm");
  if (out.requires_grad()) {
    auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
    Tape::active()->record("layer_norm", on, [xn, gn, bn, on, stats, rows, d]() {
      const double* g = on->grad.data();
      const double* xv2 = xn->value.data();
      const double* gv2 = gn->value.data();
      if (xn->requires_grad) detail::ensure_grad(xn);
      if (gn->requires_grad) detail::ensure_grad(gn);
      if (bn->requires_grad) detail::ensure_grad(bn);
      for (long r = 0; r < rows; ++r) {
        double mu = (*stats)[size_t(2 * r)];
        double inv = (*stats)[size_t(2 * r + 1)];
        const double* row = xv2 + r * d;
        const double* grow = g + r * d;
        if (gn->requires_grad || bn->requires_grad) {
          for (long j = 0; j < d; ++j) {
            double xhat = (row[j] - mu) * inv;
            if (gn->requires_grad) gn->grad[size_t(j)] += grow[j] * xhat;
            if (bn->requires_grad) bn->grad[size_t(j)] += grow[j];
          }
        }
        if (xn->requires_grad) {
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (long j = 0; j < d; ++j) {
            double xhat = (row[j] - mu) * inv;
            double dxhat = grow[j] * gv2[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
          }
          double* gx = xn->grad.data() + r * d;
          for (long j = 0; j < d; ++j) {
            double xhat = (row[j] - mu) * inv;
            double dxhat = grow[j] * gv2[j];
            gx[j] += inv * (dxhat - sum_dxhat / double(d) -
                            xhat * sum_dxhat_xhat / double(d));
          }
        }
      }
    });
  }
  return out;
}

// Per-channel batch norm over [B, C, H, W]. Training mode normalizes with the
// statistics of this batch and updates the running buffers in place; inference
// mode normalizes with the frozen running statistics and touches nothing.
inline Tensor batch_norm2d(const Tensor& x, const Tensor& gain,
                           const Tensor& bias, Tensor running_mean,
                           Tensor running_var, bool training,
                           double momentum = 0.1, double eps = 1e-5) {
  if (x.rank() != 4) fail("batch_norm2d: need [B,C,H,W], got ",
                          shape_str(x.shape()));
  long B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  if (gain.size() != C || bias.size() != C || running_mean.size() != C ||
      running_var.size() != C)
    fail("batch_norm2d: per-channel params must have size ", C);
  long plane = H * W, n = B * plane;
  Tensor out = detail::make_output(
      x.shape(),
      x.requires_grad() || gain.requires_grad() || bias.requires_grad());
  auto stats = std::make_shared<std::vector<double>>(size_t(C * 2));
  const double* xv = x.data();
  double* ov = out.data();
  for (long c = 0; c < C; ++c) {
    double mu, var;
    if (training) {
      mu = 0.0;
      for (long b = 0; b < B; ++b) {
        const double* p = xv + (b * C + c) * plane;
        for (long i = 0; i < plane; ++i) mu += p[i];
      }
      mu /= double(n);
      var = 0.0;
      for (long b = 0; b < B; ++b) {
        const double* p = xv + (b * C + c) * plane;
        for (long i = 0; i < plane; ++i) var += (p[i] - mu) * (p[i] - mu);
      }
      var /= double(n);
      running_mean.data()[c] =
          (1.0 - momentum) * running_mean.data()[c] + momentum * mu;
      running_var.data()[c] =
          (1.0 - momentum) * running_var.data()[c] + momentum * var;
    } else {
      mu = running_mean.data()[c];
      var = running_var.data()[c];
    }
    double inv = 1.0 / std::sqrt(var + eps);
    (*stats)[size_t(2 * c)] = mu;
    (*stats)[size_t(2 * c + 1)] = inv;
    double g = gain.data()[c], bb = bias.data()[c];
    for (long b = 0; b < B; ++b) {
      const double* p = xv + (b * C + c) * plane;
      double* o = ov + (b * C + c) * plane;
      for (long i = 0; i < plane; ++i) o[i] = (p[i] - mu) * inv * g + bb;
    }
  }
  detail::check_finite(out, "batch_norm2d");
  if (out.requires_grad()) {
    auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
    Tape::active()->record(
        "batch_norm2d", on,
        [xn, gn, bn, on, stats, B, C, plane, n, training]() {
          const double* g = on->grad.data();
          const double* xv2 = xn->value.data();
          if (xn->requires_grad) detail::ensure_grad(xn);
          if (gn->requires_grad) detail::ensure_grad(gn);
          if (bn->requires_grad) detail::ensure_grad(bn);
          for (long c = 0; c < C; ++c) {
            double mu = (*stats)[size_t(2 * c)];
            double inv = (*stats)[size_t(2 * c + 1)];
            double gv = gn->value[size_t(c)];
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (long b = 0; b < B; ++b) {
              const double* p = xv2 + (b * C + c) * plane;
              const double* gr = g + (b * C + c) * plane;
              for (long i = 0; i < plane; ++i) {
                double xhat = (p[i] - mu) * inv;
                double dxhat = gr[i] * gv;
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
                if (gn->requires_grad) gn->grad[size_t(c)] += gr[i] * xhat;
                if (bn->requires_grad) bn->grad[size_t(c)] += gr[i];
              }
            }
            if (xn->requires_grad) {
              for (long b = 0; b < B; ++b) {
                const double* p = xv2 + (b * C + c) * plane;
                const double* gr = g + (b * C + c) * plane;
                double* gx = xn->grad.data() + (b * C + c) * plane;
                for (long i = 0; i < plane; ++i) {
                  double xhat = (p[i] - mu) * inv;
                  double dxhat = gr[i] * gv;
                  if (training) {
                    gx[i] += inv * (dxhat - sum_dxhat / double(n) -
                                    xhat * sum_dxhat_xhat / double(n));
                  } else {
                    gx[i] += dxhat * inv;
                  }
                }
              }
            }
          }
        });
  }
  return out;
}

// 1-D convolution along the middle (time) dim of x [B, L, Cin] with odd-sized
// kernels and same padding; w is [Cout, Cin, K], bias [Cout] (optional).
inline Tensor conv1d_same(const Tensor& x, const Tensor& w,
                          const Tensor& bias = Tensor()) {
  if (x.rank() != 3) fail("conv1d: input must be [B,L,C], got ",
                          shape_str(x.shape()));
  if (w.rank() != 3) fail("conv1d: weight must be [Cout,Cin,K], got ",
                          shape_str(w.shape()));
  long B = x.extent(0), L = x.extent(1), Cin = x.extent(2);
  long Cout = w.extent(0), K = w.extent(2);
  if (w.extent(1) != Cin)
    fail("conv1d: weight expects ", w.extent(1), " channels, input has ", Cin);
  if (bias.defined() && bias.size() != Cout)
    fail("conv1d: bias size must be ", Cout);
  long pad = (K - 1) / 2;
  bool rg = x.requires_grad() || w.requires_grad() ||
            (bias.defined() && bias.requires_grad());
  Tensor out = detail::make_output({B, L, Cout}, rg);
  const double* xv = x.data();
  const double* wv = w.data();
  double* ov = out.data();
  for (long b = 0; b < B; ++b) {
    for (long l = 0; l < L; ++l) {
      double* orow = ov + (b * L + l) * Cout;
      for (long co = 0; co < Cout; ++co)
        orow[co] = bias.defined() ? bias.data()[co] : 0.0;
      for (long k = 0; k < K; ++k) {
        long t = l + k - pad;
        if (t < 0 || t >= L) continue;
        const double* xrow = xv + (b * L + t) * Cin;
        for (long co = 0; co < Cout; ++co) {
          const double* wrow = wv + (co * Cin) * K + k;
          double acc = 0.0;
          for (long ci = 0; ci < Cin; ++ci) acc += xrow[ci] * wrow[ci * K];
          orow[co] += acc;
        }
      }
    }
  }
  detail::check_finite(out, "conv1d");
  if (out.requires_grad()) {
    auto xn = x.node(), wn = w.node(), on = out.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    Tape::active()->record("conv1d", on, [xn, wn, bn, on, B, L, Cin, Cout, K,
                                      pad]() {
      const double* g = on->grad.data();
      const double* xv2 = xn->value.data();
      const double* wv2 = wn->value.data();
      if (xn->requires_grad) detail::ensure_grad(xn);
      if (wn->requires_grad) detail::ensure_grad(wn);
      if (bn && bn->requires_grad) detail::ensure_grad(bn);
      for (long b = 0; b < B; ++b) {
        for (long l = 0; l < L; ++l) {
          const double* grow = g + (b * L + l) * Cout;
          if (bn && bn->requires_grad)
            for (long co = 0; co < Cout; ++co) bn->grad[size_t(co)] += grow[co];
          for (long k = 0; k < K; ++k) {
            long t = l + k - pad;
            if (t < 0 || t >= L) continue;
            const double* xrow = xv2 + (b * L + t) * Cin;
            double* gxrow =
                xn->requires_grad ? xn->grad.data() + (b * L + t) * Cin : nullptr;
            for (long co = 0; co < Cout; ++co) {
              double gc = grow[co];
              if (gc == 0.0) continue;
              const double* wrow = wv2 + (co * Cin) * K + k;
              if (gxrow)
                for (long ci = 0; ci < Cin; ++ci)
                  gxrow[ci] += gc * wrow[ci * K];
              if (wn->requires_grad) {
                double* gwrow = wn->grad.data() + (co * Cin) * K + k;
                for (long ci = 0; ci < Cin; ++ci)
                  gwrow[ci * K] += gc * xrow[ci];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// 2-D strided convolution over [B, C, H, W] with same-style padding and
// ceiling output extents: out = ceil(in / stride).
inline Tensor conv2d_same(const Tensor& x, const Tensor& w, const Tensor& bias,
                          long stride_h, long stride_w) {
  if (x.rank() != 4) fail("conv2d: input must be [B,C,H,W], got ",
                          shape_str(x.shape()));
  if (w.rank() != 4) fail("conv2d: weight must be [Cout,Cin,KH,KW]");
  long B = x.extent(0), Cin = x.extent(1), H = x.extent(2), W = x.extent(3);
  long Cout = w.extent(0), KH = w.extent(2), KW = w.extent(3);
  if (w.extent(1) != Cin)
    fail("conv2d: weight expects ", w.extent(1), " channels, input has ", Cin);
  if (stride_h < 1 || stride_w < 1) fail("conv2d: strides must be >= 1");
  long Ho = (H + stride_h - 1) / stride_h;
  long Wo = (W + stride_w - 1) / stride_w;
  long pad_h = std::max((Ho - 1) * stride_h + KH - H, 0l) / 2;
  long pad_w = std::max((Wo - 1) * stride_w + KW - W, 0l) / 2;
  bool rg = x.requires_grad() || w.requires_grad() ||
            (bias.defined() && bias.requires_grad());
  Tensor out = detail::make_output({B, Cout, Ho, Wo}, rg);
  const double* xv = x.data();
  const double* wv = w.data();
  double* ov = out.data();
  for (long b = 0; b < B; ++b)
    for (long co = 0; co < Cout; ++co)
      for (long i = 0; i < Ho; ++i)
        for (long j = 0; j < Wo; ++j) {
          double acc = bias.defined() ? bias.data()[co] : 0.0;
          for (long ci = 0; ci < Cin; ++ci)
            for (long ki = 0; ki < KH; ++ki) {
              long hi = i * stride_h + ki - pad_h;
              if (hi < 0 || hi >= H) continue;
              for (long kj = 0; kj < KW; ++kj) {
                long wi = j * stride_w + kj - pad_w;
                if (wi < 0 || wi >= W) continue;
                acc += xv[((b * Cin + ci) * H + hi) * W + wi] *
                       wv[((co * Cin + ci) * KH + ki) * KW + kj];
              }
            }
          ov[((b * Cout + co) * Ho + i) * Wo + j] = acc;
        }
  detail::check_finite(out, "conv2d");
  if (out.requires_grad()) {
    auto xn = x.node(), wn = w.node(), on = out.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    Tape::active()->record("conv2d", on, [xn, wn, bn, on, B, Cin, Cout, H, W, Ho,
                                      Wo, KH, KW, stride_h, stride_w, pad_h,
                                      pad_w]() {
      const double* g = on->grad.data();
      const double* xv2 = xn->value.data();
      const double* wv2 = wn->value.data();
      if (xn->requires_grad) detail::ensure_grad(xn);
      if (wn->requires_grad) detail::ensure_grad(wn);
      if (bn && bn->requires_grad) detail::ensure_grad(bn);
      for (long b = 0; b < B; ++b)
        for (long co = 0; co < Cout; ++co)
          for (long i = 0; i < Ho; ++i)
            for (long j = 0; j < Wo; ++j) {
              double gc = g[((b * Cout + co) * Ho + i) * Wo + j];
              if (bn && bn->requires_grad) bn->grad[size_t(co)] += gc;
              if (gc == 0.0) continue;
              for (long ci = 0; ci < Cin; ++ci)
                for (long ki = 0; ki < KH; ++ki) {
                  long hi = i * stride_h + ki - pad_h;
                  if (hi < 0 || hi >= H) continue;
                  for (long kj = 0; kj < KW; ++kj) {
                    long wi = j * stride_w + kj - pad_w;
                    if (wi < 0 || wi >= W) continue;
                    long xo = ((b * Cin + ci) * H + hi) * W + wi;
                    long wo = ((co * Cin + ci) * KH + ki) * KW + kj;
                    if (xn->requires_grad)
                      xn->grad[size_t(xo)] += gc * wv2[wo];
                    if (wn->requires_grad)
                      wn->grad[size_t(wo)] += gc * xv2[xo];
                  }
                }
            }
    });
  }
  return out;
}

// Row lookup: out[prefix..., :] = table[ids[prefix...], :].
inline Tensor embedding_lookup(const Tensor& table, const std::vector<long>& ids,
                               Shape lead_shape) {
  if (table.rank() != 2) fail("embedding: table must be [rows, dim]");
  long rows = table.extent(0), dim = table.extent(1);
  if (long(ids.size()) != shape_numel(lead_shape))
    fail("embedding: ", ids.size(), " ids for lead shape ",
         shape_str(lead_shape));
  for (long id : ids)
    if (id < 0 || id >= rows)
      fail("embedding: id ", id, " out of range [0,", rows, ")");
  Shape os = lead_shape;
  os.push_back(dim);
  Tensor out = detail::make_output(os, table.requires_grad());
  const double* tv = table.data();
  double* ov = out.data();
  for (size_t i = 0; i < ids.size(); ++i)
    std::memcpy(ov + long(i) * dim, tv + ids[i] * dim,
                size_t(dim) * sizeof(double));
  if (out.requires_grad()) {
    auto tn = table.node(), on = out.node();
    auto idcopy = std::make_shared<std::vector<long>>(ids);
    Tape::active()->record("embedding", on, [tn, on, idcopy, dim]() {
      detail::ensure_grad(tn);
      for (size_t i = 0; i < idcopy->size(); ++i) {
        const double* g = on->grad.data() + long(i) * dim;
        double* gt = tn->grad.data() + (*idcopy)[i] * dim;
        for (long j = 0; j < dim; ++j) gt[j] += g[j];
      }
    });
  }
  return out;
}

// Inverted dropout. Rate 0 is the identity, and deterministic mode forces
// rate 0 regardless of what the caller asked for.
inline Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) fail("dropout: rate must be in [0,1), got ",
                                      rate);
  if (rate == 0.0 || numeric_options().deterministic) return x;
  long n = x.size();
  auto keep = std::make_shared<std::vector<double>>(size_t(n));
  double inv = 1.0 / (1.0 - rate);
  for (long i = 0; i < n; ++i)
    (*keep)[size_t(i)] = rng.uniform() >= rate ? inv : 0.0;
  Tensor out = detail::make_output(x.shape(), x.requires_grad());
  const double* xv = x.data();
  double* ov = out.data();
  for (long i = 0; i < n; ++i) ov[i] = xv[i] * (*keep)[size_t(i)];
  if (out.requires_grad()) {
    auto xn = x.node(), on = out.node();
    Tape::active()->record("dropout", on, [xn, on, keep, n]() {
      detail::ensure_grad(xn);
      for (long i = 0; i < n; ++i)
        xn->grad[size_t(i)] += on->grad[size_t(i)] * (*keep)[size_t(i)];
    });
  }
  return out;
}

// Identity on values, wall for gradients.
inline Tensor stop_gradient(const Tensor& x) {
  Tensor out(x.shape());
  out.vec() = x.vec();
  out.set_requires_grad(false);
  return out;
}

inline Tensor sum_all(const Tensor& x) {
  Tensor out = detail::make_output(Shape{}, x.requires_grad());
  double acc = 0.0;
  for (double v : x.vec()) acc += v;
  out.data()[0] = acc;
  detail::check_finite(out, "sum");
  if (out.requires_grad()) {
    auto xn = x.node(), on = out.node();
    Tape::active()->record("sum", on, [xn, on]() {
      detail::ensure_grad(xn);
      double g = on->grad[0];
      for (double& gv : xn->grad) gv += g;
    });
  }
  return out;
}

inline Tensor mean_all(const Tensor& x) {
  if (x.size() == 0) fail("mean: empty tensor");
  return scale(sum_all(x), 1.0 / double(x.size()));
}

namespace detail {

// Shared core of the (optionally masked) reductions. mask, when defined, must
// have a shape that is a prefix of pred's; one mask entry gates the whole
// trailing block of cells. Returns mean over the gated cells.
inline Tensor reduction_loss(const char* name, const Tensor& pred,
                             const Tensor& target, const Tensor& mask,
                             bool squared) {
  if (!same_shape(pred.shape(), target.shape()))
    fail(name, ": shape mismatch ", shape_str(pred.shape()), " vs ",
         shape_str(target.shape()));
  if (target.requires_grad())
    fail(name, ": target must not require gradients");
  long n = pred.size();
  long block = 1;
  if (mask.defined()) {
    if (mask.requires_grad()) fail(name, ": mask must not require gradients");
    if (mask.rank() > pred.rank())
      fail(name, ": mask rank exceeds prediction rank");
    for (long d = 0; d < mask.rank(); ++d)
      if (mask.extent(d) != pred.extent(d))
        fail(name, ": mask shape ", shape_str(mask.shape()),
             " is not a prefix of ", shape_str(pred.shape()));
    for (long d = mask.rank(); d < pred.rank(); ++d) block *= pred.extent(d);
  }
  double denom = 0.0;
  if (mask.defined()) {
    for (double m : mask.vec()) {
      if (m != 0.0 && m != 1.0) fail(name, ": mask entries must be 0 or 1");
      denom += m * double(block);
    }
  } else {
    denom = double(n);
  }
  if (denom == 0.0) fail(name, ": mask selects no cells");
  Tensor out = detail::make_output(Shape{}, pred.requires_grad());
  const double* pv = pred.data();
  const double* tv = target.data();
  const double* mv = mask.defined() ? mask.data() : nullptr;
  double acc = 0.0;
  for (long i = 0; i < n; ++i) {
    if (mv && mv[i / block] == 0.0) continue;
    double dlt = pv[i] - tv[i];
    acc += squared ? dlt * dlt : std::fabs(dlt);
  }
  out.data()[0] = acc / denom;
  detail::check_finite(out, name);
  if (out.requires_grad()) {
    auto pn = pred.node(), tn = target.node(), on = out.node();
    auto mn = mask.defined() ? mask.node() : nullptr;
    Tape::active()->record(name, on, [pn, tn, mn, on, n, block, denom, squared]() {
      detail::ensure_grad(pn);
      double g = on->grad[0] / denom;
      const double* pv2 = pn->value.data();
      const double* tv2 = tn->value.data();
      for (long i = 0; i < n; ++i) {
        if (mn && mn->value[size_t(i / block)] == 0.0) continue;
        double dlt = pv2[i] - tv2[i];
        double d = squared ? 2.0 * dlt : (dlt > 0.0 ? 1.0 : (dlt < 0.0 ? -1.0 : 0.0));
        pn->grad[size_t(i)] += g * d;
      }
    });
  }
  return out;
}

}  // namespace detail

inline Tensor mae_loss(const Tensor& pred, const Tensor& target) {
  return detail::reduction_loss("mae", pred, target, Tensor(), false);
}
inline Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  return detail::reduction_loss("mse", pred, target, Tensor(), true);
}
inline Tensor masked_mae(const Tensor& pred, const Tensor& target,
                         const Tensor& mask) {
  return detail::reduction_loss("masked_mae", pred, target, mask, false);
}
inline Tensor masked_mse(const Tensor& pred, const Tensor& target,
                         const Tensor& mask) {
  return detail::reduction_loss("masked_mse", pred, target, mask, true);
}

// Expands each phoneme row to its duration in frames: row l of item b is
// repeated durations[b][l] times, packed from t=0; rows past the item's total
// stay zero. Tmax must fit every item's total.
inline Tensor length_regulate(const Tensor& x,
                              const std::vector<std::vector<long>>& durations,
                              long t_max) {
  if (x.rank() != 3) fail("length_regulate: input must be [B,L,H]");
  long B = x.extent(0), L = x.extent(1), H = x.extent(2);
  if (long(durations.size()) != B)
    fail("length_regulate: durations for ", durations.size(), " items, batch ",
         B);
  for (long b = 0; b < B; ++b) {
    if (long(durations[size_t(b)].size()) != L)
      fail("length_regulate: item ", b, " has ", durations[size_t(b)].size(),
           " durations for ", L, " phonemes");
    long total = 0;
    for (long d : durations[size_t(b)]) {
      if (d < 0) fail("length_regulate: negative duration");
      total += d;
    }
    if (total > t_max)
      fail("length_regulate: item ", b, " expands to ", total,
           " frames, exceeding ", t_max);
    if (total == 0)
      fail("length_regulate: item ", b, " expands to zero frames");
  }
  Tensor out = detail::make_output({B, t_max, H}, x.requires_grad());
  const double* xv = x.data();
  double* ov = out.data();
  for (long b = 0; b < B; ++b) {
    long t = 0;
    for (long l = 0; l < L; ++l) {
      const double* row = xv + (b * L + l) * H;
      for (long r = 0; r < durations[size_t(b)][size_t(l)]; ++r, ++t)
        std::memcpy(ov + (b * t_max + t) * H, row, size_t(H) * sizeof(double));
    }
  }
  if (out.requires_grad()) {
    auto xn = x.node(), on = out.node();
    auto dur = std::make_shared<std::vector<std::vector<long>>>(durations);
    Tape::active()->record("length_regulate", on, [xn, on, dur, B, L, H, t_max]() {
      detail::ensure_grad(xn);
      for (long b = 0; b < B; ++b) {
        long t = 0;
        for (long l = 0; l < L; ++l) {
          double* gx = xn->grad.data() + (b * L + l) * H;
          for (long r = 0; r < (*dur)[size_t(b)][size_t(l)]; ++r, ++t) {
            const double* g = on->grad.data() + (b * t_max + t) * H;
            for (long j = 0; j < H; ++j) gx[j] += g[j];
          }
        }
      }
    });
  }
  return out;
}

inline Tensor transpose_last2(const Tensor& x) {
  std::vector<int> perm(size_t(x.rank()));
  for (long d = 0; d < x.rank(); ++d) perm[size_t(d)] = int(d);
  std::swap(perm[size_t(x.rank() - 2)], perm[size_t(x.rank() - 1)]);
  return permute(x, perm);
}

}  // namespace resvox
