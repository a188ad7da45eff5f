#include "eevit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "eevit/errors.hpp"

namespace eevit {

namespace {

std::size_t norm_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

// Splits a shape around `axis` into (outer, extent, inner) element counts.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit out;
  for (std::size_t i = 0; i < axis; ++i) out.outer *= s[i];
  out.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) out.inner *= s[i];
  return out;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Flat source index for every element of `out` when broadcasting `in` to it.
std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  const std::size_t offset = r - in.size();
  std::vector<std::size_t> stride(r, 0);
  std::size_t acc = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    stride[i + offset] = in[i] == 1 ? 0 : acc;
    acc *= in[i];
  }
  const std::size_t n = numel(out);
  std::vector<std::size_t> index(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    index[flat] = src;
    for (std::size_t d = r; d-- > 0;) {
      if (++counter[d] < out[d]) {
        src += stride[d];
        break;
      }
      src -= stride[d] * (counter[d] - 1);
      counter[d] = 0;
    }
  }
  return index;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

enum class Binary { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, Binary kind) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const std::size_t n = numel(out_shape);
  // Index maps; empty means identity.
  std::vector<std::size_t> ia, ib;
  if (a.shape() != out_shape) ia = broadcast_index(a.shape(), out_shape);
  if (b.shape() != out_shape) {
    if (is_suffix(b.shape(), out_shape)) {
      ib.resize(n);
      const std::size_t nb = b.numel();
      for (std::size_t i = 0; i < n; ++i) ib[i] = i % nb;
    } else {
      ib = broadcast_index(b.shape(), out_shape);
    }
  }
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[ia.empty() ? i : ia[i]];
    const double y = bv[ib.empty() ? i : ib[i]];
    switch (kind) {
      case Binary::Add: out[i] = x + y; break;
      case Binary::Sub: out[i] = x - y; break;
      case Binary::Mul: out[i] = x * y; break;
    }
  }
  auto an = a.node();
  auto bn = b.node();
  const char* name = kind == Binary::Add ? "add" : kind == Binary::Sub ? "sub" : "mul";
  return make_result(out_shape, std::move(out), {a, b},
                     [an, bn, ia = std::move(ia), ib = std::move(ib), kind](Node& self) {
                       const std::size_t n = self.grad.size();
                       if (an->requires_grad) {
                         an->ensure_grad();
                         for (std::size_t i = 0; i < n; ++i) {
                           const std::size_t j = ia.empty() ? i : ia[i];
                           double g = self.grad[i];
                           if (kind == Binary::Mul) g *= bn->value[ib.empty() ? i : ib[i]];
                           an->grad[j] += g;
                         }
                       }
                       if (bn->requires_grad) {
                         bn->ensure_grad();
                         for (std::size_t i = 0; i < n; ++i) {
                           const std::size_t j = ib.empty() ? i : ib[i];
                           double g = self.grad[i];
                           if (kind == Binary::Sub) g = -g;
                           if (kind == Binary::Mul) g *= an->value[ia.empty() ? i : ia[i]];
                           bn->grad[j] += g;
                         }
                       }
                     },
                     name);
}

// Elementwise unary op with a derivative computed from (input, output).
template <typename F, typename DF>
Tensor unary(const Tensor& x, F f, DF df, const char* name) {
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  auto xn = x.node();
  return make_result(x.shape(), std::move(out), {x},
                     [xn, df](Node& self) {
                       xn->ensure_grad();
                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                         xn->grad[i] += self.grad[i] * df(xn->value[i], self.value[i]);
                       }
                     },
                     name);
}

// C[p x r] += A[p x q] * B[q x r]
void gemm_nn(const double* A, const double* B, double* C, std::size_t p, std::size_t q, std::size_t r) {
  for (std::size_t i = 0; i < p; ++i) {
    double* c = C + i * r;
    const double* a = A + i * q;
    for (std::size_t k = 0; k < q; ++k) {
      const double aik = a[k];
      if (aik == 0.0) continue;
      const double* b = B + k * r;
      for (std::size_t j = 0; j < r; ++j) c[j] += aik * b[j];
    }
  }
}

// C[p x r] += A[p x q] * B[r x q]^T
void gemm_nt(const double* A, const double* B, double* C, std::size_t p, std::size_t q, std::size_t r) {
  for (std::size_t i = 0; i < p; ++i) {
    const double* a = A + i * q;
    for (std::size_t j = 0; j < r; ++j) {
      const double* b = B + j * q;
      double acc = 0.0;
      for (std::size_t k = 0; k < q; ++k) acc += a[k] * b[k];
      C[i * r + j] += acc;
    }
  }
}

// C[p x r] += A[k x p]^T * B[k x r]
void gemm_tn(const double* A, const double* B, double* C, std::size_t k, std::size_t p, std::size_t r) {
  for (std::size_t t = 0; t < k; ++t) {
    const double* a = A + t * p;
    const double* b = B + t * r;
    for (std::size_t i = 0; i < p; ++i) {
      const double ati = a[i];
      if (ati == 0.0) continue;
      double* c = C + i * r;
      for (std::size_t j = 0; j < r; ++j) c[j] += ati * b[j];
    }
  }
}

}  // namespace

std::size_t grid_side(std::size_t tokens) {
  auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(tokens))));
  if (side * side != tokens) throw ShapeError("token count " + std::to_string(tokens) + " is not a square grid");
  return side;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::Mul); }

Tensor scale(const Tensor& x, double factor) {
  return unary(x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; }, "scale");
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(x, [value](double v) { return v + value; }, [](double, double) { return 1.0; }, "add_scalar");
}

Tensor square(const Tensor& x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; }, "square");
}

Tensor log(const Tensor& x) {
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; }, "log");
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [inv_sqrt_2pi](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      },
      "gelu");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul needs rank >= 2 operands");
  const std::size_t p = a.dim(-2), q = a.dim(-1);
  const std::size_t q2 = b.dim(-2), r = b.dim(-1);
  if (q != q2) {
    throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t batch = a.numel() / (p * q);
  const bool shared_b = b.rank() == 2;
  if (!shared_b) {
    if (b.rank() != a.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      throw ShapeError("matmul batch extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(r);
  std::vector<double> out(batch * p * r, 0.0);
  const double* av = a.data().data();
  const double* bv = b.data().data();
  if (shared_b) {
    gemm_nn(av, bv, out.data(), batch * p, q, r);
  } else {
    for (std::size_t t = 0; t < batch; ++t) gemm_nn(av + t * p * q, bv + t * q * r, out.data() + t * p * r, p, q, r);
  }
  auto an = a.node();
  auto bn = b.node();
  return make_result(std::move(out_shape), std::move(out), {a, b},
                     [an, bn, batch, p, q, r, shared_b](Node& self) {
                       const double* g = self.grad.data();
                       if (an->requires_grad) {
                         an->ensure_grad();
                         if (shared_b) {
                           gemm_nt(g, bn->value.data(), an->grad.data(), batch * p, r, q);
                         } else {
                           for (std::size_t t = 0; t < batch; ++t) {
                             gemm_nt(g + t * p * r, bn->value.data() + t * q * r, an->grad.data() + t * p * q, p, r, q);
                           }
                         }
                       }
                       if (bn->requires_grad) {
                         bn->ensure_grad();
                         if (shared_b) {
                           gemm_tn(an->value.data(), g, bn->grad.data(), batch * p, q, r);
                         } else {
                           for (std::size_t t = 0; t < batch; ++t) {
                             gemm_tn(an->value.data() + t * p * q, g + t * p * r, bn->grad.data() + t * q * r, p, q, r);
                           }
                         }
                       }
                     },
                     "matmul");
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  for (auto e : shape) {
    if (e == 0) throw ShapeError("reshape target has a zero extent");
  }
  auto xn = x.node();
  return make_result(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()), {x},
                     [xn](Node& self) {
                       xn->ensure_grad();
                       for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
                     },
                     "reshape");
}

Tensor gather(const Tensor& x, std::vector<std::size_t> indices, Shape out_shape) {
  if (numel(out_shape) != indices.size()) throw ShapeError("gather: index count does not match output shape");
  auto xv = x.data();
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= xv.size()) throw ShapeError("gather: index out of range");
    out[i] = xv[indices[i]];
  }
  auto xn = x.node();
  return make_result(std::move(out_shape), std::move(out), {x},
                     [xn, indices = std::move(indices)](Node& self) {
                       xn->ensure_grad();
                       for (std::size_t i = 0; i < indices.size(); ++i) xn->grad[indices[i]] += self.grad[i];
                     },
                     "gather");
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const std::size_t r = x.rank();
  if (order.size() != r) throw ShapeError("permute: order length differs from rank");
  std::vector<bool> used(r, false);
  for (auto o : order) {
    if (o >= r || used[o]) throw ShapeError("permute: order is not a permutation");
    used[o] = true;
  }
  const Shape& in = x.shape();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * in[i + 1];
  Shape out_shape(r);
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in[order[i]];
    stride[i] = in_stride[order[i]];
  }
  const std::size_t n = x.numel();
  std::vector<std::size_t> index(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    index[flat] = src;
    for (std::size_t d = r; d-- > 0;) {
      if (++counter[d] < out_shape[d]) {
        src += stride[d];
        break;
      }
      src -= stride[d] * (counter[d] - 1);
      counter[d] = 0;
    }
  }
  return gather(x, std::move(index), std::move(out_shape));
}

Tensor transpose_last(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose_last needs rank >= 2");
  std::vector<std::size_t> order(x.rank());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::swap(order[order.size() - 1], order[order.size() - 2]);
  return permute(x, order);
}

Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end) {
  const std::size_t a = norm_axis(axis, x.rank());
  if (begin >= end || end > x.shape()[a]) throw ShapeError("slice bounds out of range");
  const AxisSplit s = split_at(x.shape(), a);
  const std::size_t len = end - begin;
  std::vector<std::size_t> index;
  index.reserve(s.outer * len * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = begin; i < end; ++i) {
      const std::size_t base = (o * s.n + i) * s.inner;
      for (std::size_t j = 0; j < s.inner; ++j) index.push_back(base + j);
    }
  }
  Shape out_shape = x.shape();
  out_shape[a] = len;
  return gather(x, std::move(index), std::move(out_shape));
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const std::size_t a = norm_axis(axis, parts[0].rank());
  Shape out_shape = parts[0].shape();
  out_shape[a] = 0;
  for (const auto& t : parts) {
    if (t.rank() != out_shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < out_shape.size(); ++d) {
      if (d != a && t.shape()[d] != parts[0].shape()[d]) throw ShapeError("concat: extent mismatch off the axis");
    }
    out_shape[a] += t.shape()[a];
  }
  const AxisSplit s = split_at(out_shape, a);
  std::vector<double> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& t : parts) {
    const std::size_t len = t.shape()[a];
    auto v = t.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * len * s.inner), len * s.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * s.n + offset) * s.inner));
    }
    offsets.push_back(offset);
    offset += len;
  }
  std::vector<std::shared_ptr<Node>> nodes;
  for (const auto& t : parts) nodes.push_back(t.node());
  return make_result(out_shape, std::move(out), parts,
                     [nodes, offsets, s, a](Node& self) {
                       for (std::size_t k = 0; k < nodes.size(); ++k) {
                         Node& in = *nodes[k];
                         if (!in.requires_grad) continue;
                         in.ensure_grad();
                         const std::size_t len = in.shape[a];
                         for (std::size_t o = 0; o < s.outer; ++o) {
                           const double* g = self.grad.data() + (o * s.n + offsets[k]) * s.inner;
                           double* dst = in.grad.data() + o * len * s.inner;
                           for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += g[i];
                         }
                       }
                     },
                     "concat");
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  auto xn = x.node();
  return make_result({1}, {acc}, {x},
                     [xn](Node& self) {
                       xn->ensure_grad();
                       for (auto& g : xn->grad) g += self.grad[0];
                     },
                     "sum");
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum_axis(const Tensor& x, int axis, bool keepdim) {
  const std::size_t a = norm_axis(axis, x.rank());
  const AxisSplit s = split_at(x.shape(), a);
  auto xv = x.data();
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.n; ++i) {
      const double* src = xv.data() + (o * s.n + i) * s.inner;
      double* dst = out.data() + o * s.inner;
      for (std::size_t j = 0; j < s.inner; ++j) dst[j] += src[j];
    }
  }
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[a] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(a));
    if (out_shape.empty()) out_shape = {1};
  }
  auto xn = x.node();
  return make_result(std::move(out_shape), std::move(out), {x},
                     [xn, s](Node& self) {
                       xn->ensure_grad();
                       for (std::size_t o = 0; o < s.outer; ++o) {
                         const double* g = self.grad.data() + o * s.inner;
                         for (std::size_t i = 0; i < s.n; ++i) {
                           double* dst = xn->grad.data() + (o * s.n + i) * s.inner;
                           for (std::size_t j = 0; j < s.inner; ++j) dst[j] += g[j];
                         }
                       }
                     },
                     "sum_axis");
}

Tensor avg_pool_global(const Tensor& x, int axis, bool keepdim) {
  const std::size_t a = norm_axis(axis, x.rank());
  return scale(sum_axis(x, axis, keepdim), 1.0 / static_cast<double>(x.shape()[a]));
}

Tensor softmax(const Tensor& x, int axis) {
  const AxisSplit s = split_at(x.shape(), norm_axis(axis, x.rank()));
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.inner; ++j) {
      const std::size_t base = o * s.n * s.inner + j;
      double mx = xv[base];
      for (std::size_t i = 1; i < s.n; ++i) mx = std::max(mx, xv[base + i * s.inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < s.n; ++i) {
        const double e = std::exp(xv[base + i * s.inner] - mx);
        out[base + i * s.inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < s.n; ++i) out[base + i * s.inner] /= z;
    }
  }
  auto xn = x.node();
  return make_result(x.shape(), std::move(out), {x},
                     [xn, s](Node& self) {
                       xn->ensure_grad();
                       for (std::size_t o = 0; o < s.outer; ++o) {
                         for (std::size_t j = 0; j < s.inner; ++j) {
                           const std::size_t base = o * s.n * s.inner + j;
                           double dot = 0.0;
                           for (std::size_t i = 0; i < s.n; ++i) {
                             dot += self.grad[base + i * s.inner] * self.value[base + i * s.inner];
                           }
                           for (std::size_t i = 0; i < s.n; ++i) {
                             const std::size_t k = base + i * s.inner;
                             xn->grad[k] += self.value[k] * (self.grad[k] - dot);
                           }
                         }
                       }
                     },
                     "softmax");
}

Tensor log_softmax(const Tensor& x, int axis) {
  const AxisSplit s = split_at(x.shape(), norm_axis(axis, x.rank()));
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.inner; ++j) {
      const std::size_t base = o * s.n * s.inner + j;
      double mx = xv[base];
      for (std::size_t i = 1; i < s.n; ++i) mx = std::max(mx, xv[base + i * s.inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < s.n; ++i) z += std::exp(xv[base + i * s.inner] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t i = 0; i < s.n; ++i) out[base + i * s.inner] = xv[base + i * s.inner] - lse;
    }
  }
  auto xn = x.node();
  return make_result(x.shape(), std::move(out), {x},
                     [xn, s](Node& self) {
                       xn->ensure_grad();
                       for (std::size_t o = 0; o < s.outer; ++o) {
                         for (std::size_t j = 0; j < s.inner; ++j) {
                           const std::size_t base = o * s.n * s.inner + j;
                           double gsum = 0.0;
                           for (std::size_t i = 0; i < s.n; ++i) gsum += self.grad[base + i * s.inner];
                           for (std::size_t i = 0; i < s.n; ++i) {
                             const std::size_t k = base + i * s.inner;
                             xn->grad[k] += self.grad[k] - std::exp(self.value[k]) * gsum;
                           }
                         }
                       }
                     },
                     "log_softmax");
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.dim(-1);
  if (gain.numel() != d || bias.numel() != d) throw ShapeError("layer_norm: gain/bias extent must equal the last axis");
  const std::size_t rows = x.numel() / d;
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(d);
    inv[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) {
      const double h = (row[i] - mu) * inv[r];
      xhat[r * d + i] = h;
      out[r * d + i] = h * gv[i] + bv[i];
    }
  }
  auto xn = x.node();
  auto gn = gain.node();
  auto bn = bias.node();
  return make_result(x.shape(), std::move(out), {x, gain, bias},
                     [xn, gn, bn, xhat = std::move(xhat), inv = std::move(inv), d, rows](Node& self) {
                       if (gn->requires_grad) gn->ensure_grad();
                       if (bn->requires_grad) bn->ensure_grad();
                       if (xn->requires_grad) xn->ensure_grad();
                       std::vector<double> dxhat(d);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* g = self.grad.data() + r * d;
                         const double* h = xhat.data() + r * d;
                         double m1 = 0.0, m2 = 0.0;
                         for (std::size_t i = 0; i < d; ++i) {
                           if (gn->requires_grad) gn->grad[i] += g[i] * h[i];
                           if (bn->requires_grad) bn->grad[i] += g[i];
                           dxhat[i] = g[i] * gn->value[i];
                           m1 += dxhat[i];
                           m2 += dxhat[i] * h[i];
                         }
                         if (!xn->requires_grad) continue;
                         m1 /= static_cast<double>(d);
                         m2 /= static_cast<double>(d);
                         for (std::size_t i = 0; i < d; ++i) {
                           xn->grad[r * d + i] += inv[r] * (dxhat[i] - m1 - h[i] * m2);
                         }
                       }
                     },
                     "layer_norm");
}

Tensor batch_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, BatchNormState& state, NormMode mode) {
  if (mode == NormMode::Identity) return x;
  const std::size_t c = x.dim(-1);
  if (gain.numel() != c || bias.numel() != c || state.running_mean.numel() != c || state.running_var.numel() != c) {
    throw ShapeError("batch_norm: parameter extents must equal the channel axis");
  }
  const std::size_t rows = x.numel() / c;
  const bool batch_stats = mode == NormMode::Train && x.dim(0) > 1;
  auto xv = x.data();
  std::vector<double> mu(c, 0.0), var(c, 0.0);
  if (batch_stats) {
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < c; ++j) mu[j] += xv[r * c + j];
    }
    for (auto& m : mu) m /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < c; ++j) {
        const double dlt = xv[r * c + j] - mu[j];
        var[j] += dlt * dlt;
      }
    }
    for (auto& v : var) v /= static_cast<double>(rows);
    auto rm = state.running_mean.mutable_data();
    auto rv = state.running_var.mutable_data();
    const double unbias = rows > 1 ? static_cast<double>(rows) / static_cast<double>(rows - 1) : 1.0;
    for (std::size_t j = 0; j < c; ++j) {
      rm[j] = (1.0 - state.momentum) * rm[j] + state.momentum * mu[j];
      rv[j] = (1.0 - state.momentum) * rv[j] + state.momentum * var[j] * unbias;
    }
  } else {
    auto rm = state.running_mean.data();
    auto rv = state.running_var.data();
    std::copy(rm.begin(), rm.end(), mu.begin());
    std::copy(rv.begin(), rv.end(), var.begin());
  }
  std::vector<double> inv(c);
  for (std::size_t j = 0; j < c; ++j) inv[j] = 1.0 / std::sqrt(var[j] + state.eps);
  auto gv = gain.data();
  auto bv = bias.data();
  std::vector<double> xhat(xv.size()), out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t k = r * c + j;
      xhat[k] = (xv[k] - mu[j]) * inv[j];
      out[k] = xhat[k] * gv[j] + bv[j];
    }
  }
  auto xn = x.node();
  auto gn = gain.node();
  auto bn = bias.node();
  return make_result(x.shape(), std::move(out), {x, gain, bias},
                     [xn, gn, bn, xhat = std::move(xhat), inv = std::move(inv), c, rows, batch_stats](Node& self) {
                       if (gn->requires_grad) gn->ensure_grad();
                       if (bn->requires_grad) bn->ensure_grad();
                       std::vector<double> s1(c, 0.0), s2(c, 0.0);
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t j = 0; j < c; ++j) {
                           const std::size_t k = r * c + j;
                           const double g = self.grad[k];
                           if (gn->requires_grad) gn->grad[j] += g * xhat[k];
                           if (bn->requires_grad) bn->grad[j] += g;
                           const double dh = g * gn->value[j];
                           s1[j] += dh;
                           s2[j] += dh * xhat[k];
                         }
                       }
                       if (!xn->requires_grad) return;
                       xn->ensure_grad();
                       const double m = static_cast<double>(rows);
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t j = 0; j < c; ++j) {
                           const std::size_t k = r * c + j;
                           const double dh = self.grad[k] * gn->value[j];
                           if (batch_stats) {
                             xn->grad[k] += inv[j] * (dh - s1[j] / m - xhat[k] * s2[j] / m);
                           } else {
                             xn->grad[k] += inv[j] * dh;
                           }
                         }
                       }
                     },
                     "batch_norm");
}

Tensor avg_pool_window(const Tensor& x, std::size_t window) {
  if (x.rank() != 3) throw ShapeError("avg_pool_window expects [batch, tokens, channels]");
  if (window < 1) throw ShapeError("pooling window must be >= 1");
  const std::size_t batch = x.dim(0), c = x.dim(2);
  const std::size_t side = grid_side(x.dim(1));
  const std::size_t out_side = (side + window - 1) / window;
  const std::size_t out_tokens = out_side * out_side;
  auto xv = x.data();
  std::vector<double> out(batch * out_tokens * c, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t oy = 0; oy < out_side; ++oy) {
      const std::size_t y1 = std::min(side, (oy + 1) * window);
      for (std::size_t ox = 0; ox < out_side; ++ox) {
        const std::size_t x1 = std::min(side, (ox + 1) * window);
        double* dst = out.data() + ((b * out_tokens) + oy * out_side + ox) * c;
        const double count = static_cast<double>((y1 - oy * window) * (x1 - ox * window));
        for (std::size_t y = oy * window; y < y1; ++y) {
          for (std::size_t xx = ox * window; xx < x1; ++xx) {
            const double* src = xv.data() + ((b * side * side) + y * side + xx) * c;
            for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
          }
        }
        for (std::size_t j = 0; j < c; ++j) dst[j] /= count;
      }
    }
  }
  auto xn = x.node();
  return make_result({batch, out_tokens, c}, std::move(out), {x},
                     [xn, batch, c, side, out_side, window](Node& self) {
                       xn->ensure_grad();
                       const std::size_t out_tokens = out_side * out_side;
                       for (std::size_t b = 0; b < batch; ++b) {
                         for (std::size_t oy = 0; oy < out_side; ++oy) {
                           const std::size_t y1 = std::min(side, (oy + 1) * window);
                           for (std::size_t ox = 0; ox < out_side; ++ox) {
                             const std::size_t x1 = std::min(side, (ox + 1) * window);
                             const double count = static_cast<double>((y1 - oy * window) * (x1 - ox * window));
                             const double* g = self.grad.data() + ((b * out_tokens) + oy * out_side + ox) * c;
                             for (std::size_t y = oy * window; y < y1; ++y) {
                               for (std::size_t xx = ox * window; xx < x1; ++xx) {
                                 double* dst = xn->grad.data() + ((b * side * side) + y * side + xx) * c;
                                 for (std::size_t j = 0; j < c; ++j) dst[j] += g[j] / count;
                               }
                             }
                           }
                         }
                       }
                     },
                     "avg_pool_window");
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
                        std::size_t pad) {
  if (x.rank() != 3) throw ShapeError("depthwise_conv2d expects [batch, tokens, channels]");
  if (weight.rank() != 3 || weight.dim(0) != weight.dim(1) || weight.dim(2) != x.dim(2)) {
    throw ShapeError("depthwise_conv2d weight must be [k, k, channels], got " + shape_str(weight.shape()));
  }
  if (stride < 1) throw ShapeError("stride must be >= 1");
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != x.dim(2)) throw ShapeError("depthwise_conv2d bias must be [channels]");
  const std::size_t batch = x.dim(0), c = x.dim(2), k = weight.dim(0);
  const std::size_t side = grid_side(x.dim(1));
  if (side + 2 * pad < k) throw ShapeError("kernel larger than padded grid");
  const std::size_t out_side = (side + 2 * pad - k) / stride + 1;
  const std::size_t out_tokens = out_side * out_side;
  auto xv = x.data();
  auto wv = weight.data();
  std::vector<double> out(batch * out_tokens * c, 0.0);
  const auto ipad = static_cast<std::ptrdiff_t>(pad);
  const auto iside = static_cast<std::ptrdiff_t>(side);
  // Visits every (output cell, input cell, kernel tap) triple that lies inside the grid.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t oy = 0; oy < out_side; ++oy) {
        for (std::size_t ox = 0; ox < out_side; ++ox) {
          const std::size_t o = (b * out_tokens + oy * out_side + ox) * c;
          for (std::size_t ky = 0; ky < k; ++ky) {
            const auto y = static_cast<std::ptrdiff_t>(oy * stride + ky) - ipad;
            if (y < 0 || y >= iside) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const auto xx = static_cast<std::ptrdiff_t>(ox * stride + kx) - ipad;
              if (xx < 0 || xx >= iside) continue;
              const std::size_t i = (b * side * side + static_cast<std::size_t>(y) * side + static_cast<std::size_t>(xx)) * c;
              fn(o, i, (ky * k + kx) * c);
            }
          }
        }
      }
    }
  };
  for_each_tap([&](std::size_t o, std::size_t i, std::size_t w) {
    for (std::size_t j = 0; j < c; ++j) out[o + j] += wv[w + j] * xv[i + j];
  });
  if (has_bias) {
    auto bv = bias.data();
    for (std::size_t t = 0; t < batch * out_tokens; ++t) {
      for (std::size_t j = 0; j < c; ++j) out[t * c + j] += bv[j];
    }
  }
  auto xn = x.node();
  auto wn = weight.node();
  std::shared_ptr<Node> bn = has_bias ? bias.node() : nullptr;
  std::vector<Tensor> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result({batch, out_tokens, c}, std::move(out), std::move(inputs),
                     [xn, wn, bn, for_each_tap, c](Node& self) {
                       const double* g = self.grad.data();
                       if (xn->requires_grad) xn->ensure_grad();
                       if (wn->requires_grad) wn->ensure_grad();
                       for_each_tap([&](std::size_t o, std::size_t i, std::size_t w) {
                         for (std::size_t j = 0; j < c; ++j) {
                           if (xn->requires_grad) xn->grad[i + j] += g[o + j] * wn->value[w + j];
                           if (wn->requires_grad) wn->grad[w + j] += g[o + j] * xn->value[i + j];
                         }
                       });
                       if (bn && bn->requires_grad) {
                         bn->ensure_grad();
                         for (std::size_t t = 0; t < self.grad.size() / c; ++t) {
                           for (std::size_t j = 0; j < c; ++j) bn->grad[j] += g[t * c + j];
                         }
                       }
                     },
                     "depthwise_conv2d");
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy expects logits [rows, classes]");
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != rows) throw ShapeError("cross_entropy: label count differs from rows");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) throw ValueError("label out of range: " + std::to_string(y));
  }
  Tensor lp = log_softmax(logits, -1);
  std::vector<std::size_t> picks(rows);
  for (std::size_t r = 0; r < rows; ++r) picks[r] = r * classes + static_cast<std::size_t>(labels[r]);
  return scale(sum(gather(lp, std::move(picks), {rows})), -1.0 / static_cast<double>(rows));
}

Tensor kl_divergence(const Tensor& target, const Tensor& student_log_probs) {
  if (target.shape() != student_log_probs.shape()) throw ShapeError("kl_divergence: operand shapes differ");
  const std::size_t n = target.numel();
  const std::size_t rows = n / target.dim(-1);
  auto tv = target.data();
  auto sv = student_log_probs.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (tv[i] > 0.0) acc += tv[i] * (std::log(tv[i]) - sv[i]);
  }
  auto tn = target.node();
  auto sn = student_log_probs.node();
  const double inv_rows = 1.0 / static_cast<double>(rows);
  return make_result({1}, {acc * inv_rows}, {target, student_log_probs},
                     [tn, sn, inv_rows](Node& self) {
                       const double g = self.grad[0] * inv_rows;
                       if (sn->requires_grad) {
                         sn->ensure_grad();
                         for (std::size_t i = 0; i < sn->grad.size(); ++i) sn->grad[i] -= g * tn->value[i];
                       }
                       if (tn->requires_grad) {
                         tn->ensure_grad();
                         for (std::size_t i = 0; i < tn->grad.size(); ++i) {
                           const double t = tn->value[i];
                           if (t > 0.0) tn->grad[i] += g * (std::log(t) + 1.0 - sn->value[i]);
                         }
                       }
                     },
                     "kl_divergence");
}

void check_distribution(const Tensor& p, double tol) {
  const std::size_t d = p.dim(-1);
  auto v = p.data();
  for (std::size_t r = 0; r < v.size() / d; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double x = v[r * d + i];
      if (!(x >= 0.0) || !std::isfinite(x)) throw ValueError("probability vector has a negative or non-finite entry");
      s += x;
    }
    if (std::abs(s - 1.0) > tol) throw ValueError("probability vector sums to " + std::to_string(s) + ", not 1");
  }
}

Tensor loss_kl(const Tensor& target, const Tensor& student) {
  check_distribution(target);
  check_distribution(student);
  return kl_divergence(target, log(student));
}

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("mse: operand shapes differ");
  return mean(square(sub(a, b)));
}

}  // namespace eevit
