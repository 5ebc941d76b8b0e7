#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <initializer_list>
#include <memory>
#include <vector>

#include "amad/tensor.hpp"
#include "amad/threads.hpp"

namespace amad {

namespace detail {

inline GradTape* common_tape(std::initializer_list<const Tensor*> xs) {
  GradTape* tape = nullptr;
  for (const Tensor* x : xs) {
    if (!x->tracked()) continue;
    if (tape == nullptr) {
      tape = x->tape();
    } else if (tape != x->tape()) {
      throw ContractError("operands recorded on different tapes");
    }
  }
  return tape;
}

inline int parent_of(const Tensor& x) { return x.tracked() ? x.node() : -1; }

// Batch-dimension broadcasting for matmul: dimensions align from the
// trailing end; a missing or size-1 dimension broadcasts.
struct BatchMap {
  Shape out_dims;
  std::vector<std::size_t> a_stride, b_stride;  // in whole batch items; 0 = broadcast
  std::size_t batches = 1;
  bool a_bcast = false, b_bcast = false;

  std::size_t offset_a(std::size_t flat) const { return offset(flat, a_stride); }
  std::size_t offset_b(std::size_t flat) const { return offset(flat, b_stride); }

 private:
  std::size_t offset(std::size_t flat, const std::vector<std::size_t>& stride) const {
    std::size_t off = 0;
    for (std::size_t i = out_dims.size(); i-- > 0;) {
      const std::size_t digit = flat % out_dims[i];
      flat /= out_dims[i];
      off += digit * stride[i];
    }
    return off;
  }
};

inline BatchMap make_batch_map(const Shape& sa, const Shape& sb) {
  const std::size_t ra = sa.size() - 2, rb = sb.size() - 2;
  const std::size_t rank = std::max(ra, rb);
  BatchMap bm;
  bm.out_dims.assign(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < ra ? sa[ra - 1 - i] : 1;
    const std::size_t db = i < rb ? sb[rb - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("matmul: batch dimensions incompatible: " + shape_str(sa) + " x " +
                       shape_str(sb));
    }
    bm.out_dims[rank - 1 - i] = std::max(da, db);
  }
  auto strides_for = [&](const Shape& s, std::size_t r, bool& bcast) {
    std::vector<std::size_t> st(rank, 0);
    std::size_t run = 1;
    for (std::size_t i = 0; i < rank; ++i) {
      const std::size_t d = i < r ? s[r - 1 - i] : 1;
      const std::size_t out_d = bm.out_dims[rank - 1 - i];
      if (d == out_d && d != 1) {
        st[rank - 1 - i] = run;
        run *= d;
      } else if (d == 1 && out_d != 1) {
        bcast = true;  // stride stays 0
      } else if (d == 1) {
        st[rank - 1 - i] = 0;
      }
    }
    return st;
  };
  bm.a_stride = strides_for(sa, ra, bm.a_bcast);
  bm.b_stride = strides_for(sb, rb, bm.b_bcast);
  bm.batches = shape_numel(bm.out_dims);
  return bm;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul and layout ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) {
    throw ShapeError("matmul: operands must be at least 2-D: " + shape_str(sa) + " x " +
                     shape_str(sb));
  }
  const std::size_t m = sa[sa.size() - 2], k = sa[sa.size() - 1];
  const std::size_t kb = sb[sb.size() - 2], n = sb[sb.size() - 1];
  if (k != kb) {
    throw ShapeError("matmul: inner dimensions differ: " + shape_str(sa) + " x " + shape_str(sb));
  }
  const detail::BatchMap bm = detail::make_batch_map(sa, sb);

  Shape out_shape = bm.out_dims;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out(out_shape);

  const double* A = a.data();
  const double* B = b.data();
  double* O = out.data();
  parallel_for(bm.batches * m, 2 * k * n, [&](std::size_t r) {
    const std::size_t bi = r / m, i = r % m;
    const double* Ar = A + bm.offset_a(bi) * m * k + i * k;
    const double* Bb = B + bm.offset_b(bi) * k * n;
    double* Or = O + bi * m * n + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double t = Ar[kk];
      const double* Br = Bb + kk * n;
      for (std::size_t j = 0; j < n; ++j) Or[j] += t * Br[j];
    }
  });

  GradTape* tape = detail::common_tape({&a, &b});
  if (tape) {
    auto abuf = a.buffer();
    auto bbuf = b.buffer();
    const int pa = detail::parent_of(a);
    const int pb = detail::parent_of(b);
    const int id = tape->record(out.size(), [=](GradTape& t, const std::vector<double>& g) {
      const double* Av = abuf->data();
      const double* Bv = bbuf->data();
      if (pa >= 0) {
        std::vector<double>& da = t.grad(pa);
        double* DA = da.data();
        auto row_block = [&](std::size_t bi) {
          const double* Gb = g.data() + bi * m * n;
          const double* Bb = Bv + bm.offset_b(bi) * k * n;
          double* Da = DA + bm.offset_a(bi) * m * k;
          for (std::size_t i = 0; i < m; ++i) {
            const double* Gr = Gb + i * n;
            double* Dr = Da + i * k;
            for (std::size_t kk = 0; kk < k; ++kk) {
              const double* Br = Bb + kk * n;
              double s = 0.0;
              for (std::size_t j = 0; j < n; ++j) s += Gr[j] * Br[j];
              Dr[kk] += s;
            }
          }
        };
        if (!bm.a_bcast) {
          parallel_for(bm.batches, 2 * m * k * n, row_block);
        } else {
          for (std::size_t bi = 0; bi < bm.batches; ++bi) row_block(bi);
        }
      }
      if (pb >= 0) {
        std::vector<double>& db = t.grad(pb);
        double* DB = db.data();
        if (!bm.b_bcast) {
          parallel_for(bm.batches, 2 * m * k * n, [&](std::size_t bi) {
            const double* Gb = g.data() + bi * m * n;
            const double* Ab = Av + bm.offset_a(bi) * m * k;
            double* Db = DB + bm.offset_b(bi) * k * n;
            for (std::size_t kk = 0; kk < k; ++kk) {
              for (std::size_t i = 0; i < m; ++i) {
                const double t2 = Ab[i * k + kk];
                const double* Gr = Gb + i * n;
                double* Dr = Db + kk * n;
                for (std::size_t j = 0; j < n; ++j) Dr[j] += t2 * Gr[j];
              }
            }
          });
        } else {
          // Shared operand (e.g. a weight matrix): parallelising over rows of
          // the gradient keeps each output element single-writer.
          parallel_for(k, 2 * bm.batches * m * n, [&](std::size_t kk) {
            for (std::size_t bi = 0; bi < bm.batches; ++bi) {
              const double* Gb = g.data() + bi * m * n;
              const double* Ab = Av + bm.offset_a(bi) * m * k;
              double* Dr = DB + bm.offset_b(bi) * k * n + kk * n;
              for (std::size_t i = 0; i < m; ++i) {
                const double t2 = Ab[i * k + kk];
                const double* Gr = Gb + i * n;
                for (std::size_t j = 0; j < n; ++j) Dr[j] += t2 * Gr[j];
              }
            }
          });
        }
      }
    });
    out.bind(tape, id);
  }
  return out;
}

// Swaps the last two axes.
inline Tensor transpose(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw ShapeError("transpose: needs at least 2-D, got " + shape_str(s));
  const std::size_t m = s[s.size() - 2], n = s[s.size() - 1];
  const std::size_t batches = x.size() / (m * n);
  Shape out_shape = s;
  std::swap(out_shape[s.size() - 2], out_shape[s.size() - 1]);
  Tensor out(out_shape);
  const double* X = x.data();
  double* O = out.data();
  for (std::size_t b = 0; b < batches; ++b) {
    const double* Xb = X + b * m * n;
    double* Ob = O + b * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) Ob[j * m + i] = Xb[i * n + j];
  }
  GradTape* tape = detail::common_tape({&x});
  if (tape) {
    const int px = x.node();
    const int id = tape->record(out.size(), [=](GradTape& t, const std::vector<double>& g) {
      std::vector<double>& dx = t.grad(px);
      for (std::size_t b = 0; b < batches; ++b) {
        const double* Gb = g.data() + b * m * n;
        double* Db = dx.data() + b * m * n;
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t i = 0; i < m; ++i) Db[i * n + j] += Gb[j * m + i];
      }
    });
    out.bind(tape, id);
  }
  return out;
}

// [B,N,D] -> [B,h,N,D/h]
inline Tensor split_heads(const Tensor& x, std::size_t heads) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw ShapeError("split_heads: expected [B,N,D], got " + shape_str(s));
  if (heads == 0 || s[2] % heads != 0) {
    throw ShapeError("split_heads: feature dim " + std::to_string(s[2]) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  const std::size_t B = s[0], N = s[1], dh = s[2] / heads;
  Tensor out(Shape{B, heads, N, dh});
  const double* X = x.data();
  double* O = out.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t e = 0; e < heads; ++e)
      for (std::size_t p = 0; p < N; ++p)
        std::memcpy(O + ((b * heads + e) * N + p) * dh, X + (b * N + p) * heads * dh + e * dh,
                    dh * sizeof(double));
  GradTape* tape = detail::common_tape({&x});
  if (tape) {
    const int px = x.node();
    const int id = tape->record(out.size(), [=](GradTape& t, const std::vector<double>& g) {
      std::vector<double>& dx = t.grad(px);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t e = 0; e < heads; ++e)
          for (std::size_t p = 0; p < N; ++p) {
            const double* Gr = g.data() + ((b * heads + e) * N + p) * dh;
            double* Dr = dx.data() + (b * N + p) * heads * dh + e * dh;
            for (std::size_t j = 0; j < dh; ++j) Dr[j] += Gr[j];
          }
    });
    out.bind(tape, id);
  }
  return out;
}

// [B,h,N,dh] -> [B,N,h*dh]
inline Tensor merge_heads(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("merge_heads: expected [B,h,N,dh], got " + shape_str(s));
  const std::size_t B = s[0], heads = s[1], N = s[2], dh = s[3];
  Tensor out(Shape{B, N, heads * dh});
  const double* X = x.data();
  double* O = out.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t e = 0; e < heads; ++e)
      for (std::size_t p = 0; p < N; ++p)
        std::memcpy(O + (b * N + p) * heads * dh + e * dh, X + ((b * heads + e) * N + p) * dh,
                    dh * sizeof(double));
  GradTape* tape = detail::common_tape({&x});
  if (tape) {
    const int px = x.node();
    const int id = tape->record(out.size(), [=](GradTape& t, const std::vector<double>& g) {
      std::vector<double>& dx = t.grad(px);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t e = 0; e < heads; ++e)
          for (std::size_t p = 0; p < N; ++p) {
            const double* Gr = g.data() + (b * N + p) * heads * dh + e * dh;
            double* Dr = dx.data() + ((b * heads + e) * N + p) * dh;
            for (std::size_t j = 0; j < dh; ++j) Dr[j] += Gr[j];
          }
    });
    out.bind(tape, id);
  }
  return out;
}

inline Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.size()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(new_shape) +
                     " changes element count");
  }
  Tensor out(std::move(new_shape), std::vector<double>(x.data(), x.data() + x.size()));
  GradTape* tape = detail::common_tape({&x});
  if (tape) {
    const int px = x.node();
    const int id = tape->record(out.size(), [=](GradTape& t, const std::vector<double>& g) {
      std::vector<double>& dx = t.grad(px);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    });
    out.bind(tape, id);
  }
  return out;
}

inline Tensor concat_last_axis(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("concat_last_axis: no inputs");
  const Shape& s0 = xs[0].shape();
  std::size_t total_last = 0;
  for (const Tensor& x : xs) {
    const Shape& s = x.shape();
    if (s.size() != s0.size()) {
      throw ShapeError("concat_last_axis: rank mismatch " + shape_str(s0) + " vs " + shape_str(s));
    }
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      if (s[i] != s0[i]) {
        throw ShapeError("concat_last_axis: leading dims differ " + shape_str(s0) + " vs " +
                         shape_str(s));
      }
    }
    total_last += s.back();
  }
  Shape out_shape = s0;
  out_shape.back() = total_last;
  const std::size_t rows = shape_numel(out_shape) / total_last;
  Tensor out(out_shape);
  double* O = out.data();
  std::size_t off = 0;
  for (const Tensor& x : xs) {
    const std::size_t n = x.shape().back();
    const double* X = x.data();
    for (std::size_t r = 0; r < rows; ++r)
      std::memcpy(O + r * total_last + off, X + r * n, n * sizeof(double));
    off += n;
  }
  std::vector<const Tensor*> ptrs;
  for (const Tensor& x : xs) ptrs.push_back(&x);
  GradTape* tape = nullptr;
  for (const Tensor* p : ptrs) {
    GradTape* tp = detail::common_tape({p});
    if (tp) {
      if (tape && tape != tp) throw ContractError("operands recorded on different tapes");
      tape = tp;
    }
  }
  if (tape) {
    std::vector<int> parents;
    std::vector<std::size_t> lasts;
    for (const Tensor& x : xs) {
      parents.push_back(detail::parent_of(x));
      lasts.push_back(x.shape().back());
    }
    const int id = tape->record(out.size(), [=](GradTape& t, const std::vector<double>& g) {
      std::size_t o = 0;
      for (std::size_t xi = 0; xi < parents.size(); ++xi) {
        const std::size_t n = lasts[xi];
        if (parents[xi] >= 0) {
          std::vector<double>& dx = t.grad(parents[xi]);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) dx[r * n + j] += g[r * total_last + o + j];
        }
        o += n;
      }
    });
    out.bind(tape, id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise and reductions
// ---------------------------------------------------------------------------

namespace detail {

// b must either match a's shape or be a suffix of it (bias-style broadcast
// over the leading batch dimensions).
inline void check_suffix(const Shape& sa, const Shape& sb, const char* name) {
  if (sb.size() > sa.size()) {
    throw ShapeError(std::string(name) + ": shapes " + shape_str(sa) + " vs " + shape_str(sb));
  }
  for (std::size_t i = 0; i < sb.size(); ++i) {
    if (sb[sb.size() - 1 - i] != sa[sa.size() - 1 - i]) {
      throw ShapeError(std::string(name) + ": shapes " + shape_str(sa) + " vs " + shape_str(sb));
    }
  }
}

struct BinarySpec {
  double (*val)(double, double);
  double (*da)(double, double);
  double (*db)(double, double);
};

inline Tensor binary_suffix(const Tensor& a, const Tensor& b, const BinarySpec& spec,
                            const char* name) {
  check_suffix(a.shape(), b.shape(), name);
  const std::size_t nb = b.size();
  Tensor out(a.shape());
  const double* A = a.data();
  const double* B = b.data();
  double* O = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) O[i] = spec.val(A[i], B[i % nb]);
  GradTape* tape = common_tape({&a, &b});
  if (tape) {
    auto abuf = a.buffer();
    auto bbuf = b.buffer();
    const int pa = parent_of(a);
    const int pb = parent_of(b);
    const BinarySpec sp = spec;
    const int id = tape->record(out.size(), [=](GradTape& t, const std::vector<double>& g) {
      const double* Av = abuf->data();
      const double* Bv = bbuf->data();
      if (pa >= 0) {
        std::vector<double>& da = t.grad(pa);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * sp.da(Av[i], Bv[i % nb]);
      }
      if (pb >= 0) {
        std::vector<double>& db = t.grad(pb);
        for (std::size_t i = 0; i < g.size(); ++i) db[i % nb] += g[i] * sp.db(Av[i], Bv[i % nb]);
      }
    });
    out.bind(tape, id);
  }
  return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  static const detail::BinarySpec spec{[](double x, double y) { return x + y; },
                                       [](double, double) { return 1.0; },
                                       [](double, double) { return 1.0; }};
  return detail::binary_suffix(a, b, spec, "add");
}

inline Tensor subtract(const Tensor& a, const Tensor& b) {
  static const detail::BinarySpec spec{[](double x, double y) { return x - y; },
                                       [](double, double) { return 1.0; },
                                       [](double, double) { return -1.0; }};
  return detail::binary_suffix(a, b, spec, "subtract");
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  static const detail::BinarySpec spec{[](double x, double y) { return x * y; },
                                       [](double, double y) { return y; },
                                       [](double x, double) { return x; }};
  return detail::binary_suffix(a, b, spec, "hadamard");
}

namespace detail {

template <typename Val, typename Deriv>
Tensor unary_op(const Tensor& x, Val val, Deriv deriv) {
  Tensor out(x.shape());
  const double* X = x.data();
  double* O = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) O[i] = val(X[i]);
  GradTape* tape = common_tape({&x});
  if (tape) {
    auto xbuf = x.buffer();
    const int px = x.node();
    const int id = tape->record(out.size(), [=](GradTape& t, const std::vector<double>& g) {
      const double* Xv = xbuf->data();
      std::vector<double>& dx = t.grad(px);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * deriv(Xv[i]);
    });
    out.bind(tape, id);
  }
  return out;
}

}  // namespace detail

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary_op(
      x, [c](double v) { return c * v; }, [c](double) { return c; });
}

// ca*a + cb*b, same shapes. One node instead of three for fused mixes.
inline Tensor lincomb(double ca, const Tensor& a, double cb, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("lincomb: shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out(a.shape());
  const double* A = a.data();
  const double* B = b.data();
  double* O = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) O[i] = ca * A[i] + cb * B[i];
  GradTape* tape = detail::common_tape({&a, &b});
  if (tape) {
    const int pa = detail::parent_of(a);
    const int pb = detail::parent_of(b);
    const int id = tape->record(out.size(), [=](GradTape& t, const std::vector<double>& g) {
      if (pa >= 0) {
        std::vector<double>& da = t.grad(pa);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += ca * g[i];
      }
      if (pb >= 0) {
        std::vector<double>& db = t.grad(pb);
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += cb * g[i];
      }
    });
    out.bind(tape, id);
  }
  return out;
}

inline Tensor exp_elem(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}

inline Tensor log_elem(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

// Exact Gaussian-CDF form x * Phi(x).
inline Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return detail::unary_op(
      x, [](double v) { return v * 0.5 * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v) {
        const double phi_cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double phi_pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        return phi_cdf + v * phi_pdf;
      });
}

namespace detail {

template <typename Seed, typename Back>
Tensor reduce_all(const Tensor& x, Seed seed, Back back) {
  double acc = 0.0;
  const double* X = x.data();
  for (std::size_t i = 0; i < x.size(); ++i) acc += seed(X[i]);
  Tensor out = Tensor::scalar(acc);
  GradTape* tape = common_tape({&x});
  if (tape) {
    auto xbuf = x.buffer();
    const int px = x.node();
    const int id = tape->record(1, [=](GradTape& t, const std::vector<double>& g) {
      const double* Xv = xbuf->data();
      std::vector<double>& dx = t.grad(px);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[0] * back(Xv[i]);
    });
    out.bind(tape, id);
  }
  return out;
}

}  // namespace detail

inline Tensor sum_all(const Tensor& x) {
  return detail::reduce_all(
      x, [](double v) { return v; }, [](double) { return 1.0; });
}

inline Tensor mean_all(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.size());
  return detail::reduce_all(
      x, [inv](double v) { return v * inv; }, [inv](double) { return inv; });
}

inline Tensor frobenius_sq(const Tensor& x) {
  return detail::reduce_all(
      x, [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
}

// Subgradient at 0 is 0.
inline Tensor l1_norm(const Tensor& x) {
  return detail::reduce_all(
      x, [](double v) { return std::fabs(v); },
      [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

namespace detail {

inline Tensor reduce_axis(const Tensor& x, std::size_t axis, bool mean) {
  const Shape& s = x.shape();
  if (axis >= s.size()) {
    throw ShapeError("reduce_axis: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t mid = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape);
  const double* X = x.data();
  double* O = out.data();
  const double w = mean ? 1.0 / static_cast<double>(mid) : 1.0;
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t m = 0; m < mid; ++m)
      for (std::size_t i = 0; i < inner; ++i)
        O[o * inner + i] += w * X[(o * mid + m) * inner + i];
  GradTape* tape = common_tape({&x});
  if (tape) {
    const int px = x.node();
    const int id = tape->record(out.size(), [=](GradTape& t, const std::vector<double>& g) {
      std::vector<double>& dx = t.grad(px);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t m = 0; m < mid; ++m)
          for (std::size_t i = 0; i < inner; ++i)
            dx[(o * mid + m) * inner + i] += w * g[o * inner + i];
    });
    out.bind(tape, id);
  }
  return out;
}

}  // namespace detail

inline Tensor sum_axis(const Tensor& x, std::size_t axis) {
  return detail::reduce_axis(x, axis, false);
}

inline Tensor mean_axis(const Tensor& x, std::size_t axis) {
  return detail::reduce_axis(x, axis, true);
}

// ---------------------------------------------------------------------------
// normalisation and attention building blocks
// ---------------------------------------------------------------------------

inline Tensor softmax_last_axis(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.empty() || s.back() < 1) throw ShapeError("softmax: empty last axis");
  const std::size_t n = s.back();
  const std::size_t rows = x.size() / n;
  Tensor out(s);
  const double* X = x.data();
  double* O = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* Xr = X + r * n;
    double* Or = O + r * n;
    double mx = Xr[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, Xr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      Or[j] = std::exp(Xr[j] - mx);
      z += Or[j];
    }
    if (std::isnan(z)) throw NumericError("softmax: NaN in input");
    const double inv = 1.0 / z;
    for (std::size_t j = 0; j < n; ++j) Or[j] *= inv;
  }
  GradTape* tape = detail::common_tape({&x});
  if (tape) {
    auto ybuf = out.buffer();
    const int px = x.node();
    const int id = tape->record(out.size(), [=](GradTape& t, const std::vector<double>& g) {
      const double* Y = ybuf->data();
      std::vector<double>& dx = t.grad(px);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* Yr = Y + r * n;
        const double* Gr = g.data() + r * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += Gr[j] * Yr[j];
        double* Dr = dx.data() + r * n;
        for (std::size_t j = 0; j < n; ++j) Dr[j] += Yr[j] * (Gr[j] - dot);
      }
    });
    out.bind(tape, id);
  }
  return out;
}

// Normalises each last-axis slice; gamma/beta are 1-D of that length.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  const Shape& s = x.shape();
  const std::size_t n = s.back();
  if (gamma.size() != n || beta.size() != n) {
    throw ShapeError("layer_norm: gamma/beta length " + std::to_string(gamma.size()) + "/" +
                     std::to_string(beta.size()) + " vs last axis " + std::to_string(n));
  }
  const std::size_t rows = x.size() / n;
  Tensor out(s);
  auto norm = std::make_shared<std::vector<double>>(x.size());      // (x - mean)/std
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const double* X = x.data();
  const double* G = gamma.data();
  const double* Bt = beta.data();
  double* O = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* Xr = X + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += Xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = Xr[j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    double* Yr = norm->data() + r * n;
    double* Or = O + r * n;
    for (std::size_t j = 0; j < n; ++j) {
      Yr[j] = (Xr[j] - mu) * is;
      Or[j] = G[j] * Yr[j] + Bt[j];
    }
  }
  GradTape* tape = detail::common_tape({&x, &gamma, &beta});
  if (tape) {
    auto gbuf = gamma.buffer();
    const int px = detail::parent_of(x);
    const int pg = detail::parent_of(gamma);
    const int pb = detail::parent_of(beta);
    const int id = tape->record(out.size(), [=](GradTape& t, const std::vector<double>& g) {
      const double* Gm = gbuf->data();
      const double* Y = norm->data();
      if (px >= 0) {
        std::vector<double>& dx = t.grad(px);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* Yr = Y + r * n;
          const double* Gr = g.data() + r * n;
          double mh = 0.0, mhy = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double h = Gr[j] * Gm[j];
            mh += h;
            mhy += h * Yr[j];
          }
          mh /= static_cast<double>(n);
          mhy /= static_cast<double>(n);
          const double is = (*inv_std)[r];
          double* Dr = dx.data() + r * n;
          for (std::size_t j = 0; j < n; ++j) {
            const double h = Gr[j] * Gm[j];
            Dr[j] += is * (h - mh - Yr[j] * mhy);
          }
        }
      }
      if (pg >= 0) {
        std::vector<double>& dg = t.grad(pg);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) dg[j] += g[r * n + j] * Y[r * n + j];
      }
      if (pb >= 0) {
        std::vector<double>& db = t.grad(pb);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) db[j] += g[r * n + j];
      }
    });
    out.bind(tape, id);
  }
  return out;
}

// Pairwise 2-D rotations of feature pairs: pair kappa at position p of head
// eta turns by p * omega[eta] * base^(-2*kappa/d_head). Differentiable in x
// and omega; each pair's norm is preserved.
inline Tensor rotary_mask_embed(const Tensor& x, const Tensor& omega,
                                const std::vector<double>& positions, double rope_base) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("rotary_mask_embed: expected [B,h,N,d_head], got " + shape_str(s));
  const std::size_t B = s[0], H = s[1], N = s[2], dh = s[3];
  if (dh % 2 != 0) {
    throw ConfigError("rotary_mask_embed: d_head must be even, got " + std::to_string(dh));
  }
  if (omega.size() != H) {
    throw ShapeError("rotary_mask_embed: omega has " + std::to_string(omega.size()) +
                     " entries for " + std::to_string(H) + " heads");
  }
  if (positions.size() != N) {
    throw ShapeError("rotary_mask_embed: " + std::to_string(positions.size()) + " positions for " +
                     std::to_string(N) + " steps");
  }
  if (rope_base <= 0.0) throw ConfigError("rotary_mask_embed: rope_base must be positive");
  const std::size_t half = dh / 2;
  auto thetas = std::make_shared<std::vector<double>>(half);
  for (std::size_t kp = 0; kp < half; ++kp) {
    (*thetas)[kp] = std::pow(rope_base, -2.0 * static_cast<double>(kp) / static_cast<double>(dh));
  }
  // cos/sin per (head, position, pair)
  auto cs = std::make_shared<std::vector<double>>(H * N * half);
  auto sn = std::make_shared<std::vector<double>>(H * N * half);
  const double* W = omega.data();
  for (std::size_t e = 0; e < H; ++e)
    for (std::size_t p = 0; p < N; ++p)
      for (std::size_t kp = 0; kp < half; ++kp) {
        const double ang = positions[p] * W[e] * (*thetas)[kp];
        (*cs)[(e * N + p) * half + kp] = std::cos(ang);
        (*sn)[(e * N + p) * half + kp] = std::sin(ang);
      }
  Tensor out(s);
  const double* X = x.data();
  double* O = out.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t e = 0; e < H; ++e)
      for (std::size_t p = 0; p < N; ++p) {
        const std::size_t row = ((b * H + e) * N + p) * dh;
        const std::size_t trig = (e * N + p) * half;
        for (std::size_t kp = 0; kp < half; ++kp) {
          const double c = (*cs)[trig + kp], sgn = (*sn)[trig + kp];
          const double xe = X[row + 2 * kp], xo = X[row + 2 * kp + 1];
          O[row + 2 * kp] = xe * c - xo * sgn;
          O[row + 2 * kp + 1] = xe * sgn + xo * c;
        }
      }
  GradTape* tape = detail::common_tape({&x, &omega});
  if (tape) {
    auto xbuf = x.buffer();
    const int px = detail::parent_of(x);
    const int pw = detail::parent_of(omega);
    auto pos = std::make_shared<std::vector<double>>(positions);
    const int id = tape->record(out.size(), [=](GradTape& t, const std::vector<double>& g) {
      const double* Xv = xbuf->data();
      std::vector<double>* dx = px >= 0 ? &t.grad(px) : nullptr;
      std::vector<double>* dw = pw >= 0 ? &t.grad(pw) : nullptr;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t e = 0; e < H; ++e)
          for (std::size_t p = 0; p < N; ++p) {
            const std::size_t row = ((b * H + e) * N + p) * dh;
            const std::size_t trig = (e * N + p) * half;
            for (std::size_t kp = 0; kp < half; ++kp) {
              const double c = (*cs)[trig + kp], sgn = (*sn)[trig + kp];
              const double xe = Xv[row + 2 * kp], xo = Xv[row + 2 * kp + 1];
              const double ge = g[row + 2 * kp], go = g[row + 2 * kp + 1];
              if (dx) {
                (*dx)[row + 2 * kp] += ge * c + go * sgn;
                (*dx)[row + 2 * kp + 1] += -ge * sgn + go * c;
              }
              if (dw) {
                const double dang = ge * (-xe * sgn - xo * c) + go * (xe * c - xo * sgn);
                (*dw)[e] += dang * (*pos)[p] * (*thetas)[kp];
              }
            }
          }
    });
    out.bind(tape, id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// divergence and contrastive primitives
// ---------------------------------------------------------------------------

// Per-row Jensen-Shannon divergence between matching last-axis slices of a
// and b: [..., n] -> [...]. Natural log, probabilities floored at 1e-12
// inside the logs, zero entries contribute zero.
inline Tensor js_divergence_rows(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("js_divergence_rows: shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  constexpr double kFloor = 1e-12;
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.size() / n;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape);
  auto log_a = std::make_shared<std::vector<double>>(a.size());  // ln(a~/m~)
  auto log_b = std::make_shared<std::vector<double>>(a.size());  // ln(b~/m~)
  const double* A = a.data();
  const double* B = b.data();
  double* O = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double sa = 0.0, sb = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double av = A[r * n + j], bv = B[r * n + j];
      if (av < 0.0 || bv < 0.0 || std::isnan(av) || std::isnan(bv)) {
        throw ContractError("js_divergence: negative or NaN probability");
      }
      sa += av;
      sb += bv;
    }
    if (std::fabs(sa - 1.0) > 1e-6 || std::fabs(sb - 1.0) > 1e-6) {
      throw ContractError("js_divergence: rows must sum to 1 (got " + std::to_string(sa) + ", " +
                          std::to_string(sb) + ")");
    }
    double js = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t i = r * n + j;
      const double av = A[i], bv = B[i];
      const double m = 0.5 * (av + bv);
      const double lm = std::log(std::max(m, kFloor));
      const double la = std::log(std::max(av, kFloor)) - lm;
      const double lb = std::log(std::max(bv, kFloor)) - lm;
      (*log_a)[i] = la;
      (*log_b)[i] = lb;
      if (av > 0.0) js += 0.5 * av * la;
      if (bv > 0.0) js += 0.5 * bv * lb;
    }
    O[r] = js;
  }
  GradTape* tape = detail::common_tape({&a, &b});
  if (tape) {
    const int pa = detail::parent_of(a);
    const int pb = detail::parent_of(b);
    const int id = tape->record(out.size(), [=](GradTape& t, const std::vector<double>& g) {
      if (pa >= 0) {
        std::vector<double>& da = t.grad(pa);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) da[r * n + j] += 0.5 * (*log_a)[r * n + j] * g[r];
      }
      if (pb >= 0) {
        std::vector<double>& db = t.grad(pb);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) db[r * n + j] += 0.5 * (*log_b)[r * n + j] * g[r];
      }
    });
    out.bind(tape, id);
  }
  return out;
}

// Mean cross-entropy of square logits against the identity labelling
// (row i's positive is column i).
inline Tensor cross_entropy_identity(const Tensor& logits) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[0] != s[1]) {
    throw ShapeError("cross_entropy_identity: expected square [B,B] logits, got " + shape_str(s));
  }
  const std::size_t B = s[0];
  auto probs = std::make_shared<std::vector<double>>(logits.size());
  const double* L = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    const double* Lr = L + i * B;
    double mx = Lr[0];
    for (std::size_t j = 1; j < B; ++j) mx = std::max(mx, Lr[j]);
    if (std::isnan(mx)) throw NumericError("cross_entropy: NaN in logits");
    double z = 0.0;
    for (std::size_t j = 0; j < B; ++j) z += std::exp(Lr[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < B; ++j) (*probs)[i * B + j] = std::exp(Lr[j] - lse);
    total += lse - Lr[i];
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(B));
  GradTape* tape = detail::common_tape({&logits});
  if (tape) {
    const int pl = logits.node();
    const int id = tape->record(1, [=](GradTape& t, const std::vector<double>& g) {
      std::vector<double>& dl = t.grad(pl);
      const double w = g[0] / static_cast<double>(B);
      for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 0; j < B; ++j)
          dl[i * B + j] += w * ((*probs)[i * B + j] - (i == j ? 1.0 : 0.0));
    });
    out.bind(tape, id);
  }
  return out;
}

}  // namespace amad
