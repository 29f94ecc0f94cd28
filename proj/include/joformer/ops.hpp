#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "joformer/tensor.hpp"

namespace joformer {

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
template <typename S>
void mm_nn(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const S av = arow[p];
      const S* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,k] += G[m,n] * B[k,n]^T
template <typename S>
void mm_nt(const S* g, const S* b, S* c, int64_t m, int64_t n, int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    const S* grow = g + i * n;
    S* crow = c + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const S* brow = b + p * n;
      S acc{0};
      for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * G[m,n]
template <typename S>
void mm_tn(const S* a, const S* g, S* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    const S* grow = g + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const S av = arow[p];
      S* crow = c + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

template <typename S>
bool recording(const Tape<S>* tape, bool any_grad) {
  return tape != nullptr && any_grad;
}

}  // namespace detail

/// Batched matrix product. The right operand is either rank-2 (shared across
/// all leading batch dimensions of `a`) or has identical leading dimensions.
template <typename S>
Tensor<S> matmul(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul requires rank >= 2 operands, got " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const int64_t m = a.dim(-2), k = a.dim(-1);
  const int64_t n = b.dim(-1);
  const bool shared_b = b.rank() == 2;
  bool batched_b = false;
  if (!shared_b) {
    if (b.rank() != a.rank()) {
      throw ShapeError("matmul batch rank mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    for (int i = 0; i < a.rank() - 2; ++i) {
      if (a.dim(i) != b.dim(i)) {
        throw ShapeError("matmul batch dims mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
      }
    }
    batched_b = true;
  }
  if (b.dim(-2) != k) {
    throw ShapeError("matmul inner dims mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }

  Shape out_shape = a.shape();
  out_shape.back() = n;
  const int64_t batch = a.numel() / (m * k);

  Tensor<S> out(out_shape, detail::recording(tape, a.requires_grad() || b.requires_grad()));
  for (int64_t bi = 0; bi < batch; ++bi) {
    detail::mm_nn(a.data() + bi * m * k, b.data() + (batched_b ? bi * k * n : 0), out.data() + bi * m * n,
                  m, k, n);
  }

  if (out.requires_grad()) {
    Tensor<S> ta = a, tb = b, to = out;
    tape->record([ta, tb, to, m, k, n, batch, batched_b]() mutable {
      const S* g = to.grad_if_any();
      if (g == nullptr) return;
      S* ga = ta.requires_grad() ? ta.grad_data() : nullptr;
      S* gb = tb.requires_grad() ? tb.grad_data() : nullptr;
      for (int64_t bi = 0; bi < batch; ++bi) {
        const S* gs = g + bi * m * n;
        const int64_t boff = batched_b ? bi * k * n : 0;
        if (ga != nullptr) detail::mm_nt(gs, tb.data() + boff, ga + bi * m * k, m, n, k);
        if (gb != nullptr) detail::mm_tn(ta.data() + bi * m * k, gs, gb + boff, m, k, n);
      }
    });
  }
  return out;
}

namespace detail {

enum class EwOp { add, sub, mul };
enum class EwCase { same, b_scalar, a_scalar, b_trailing };

template <typename S>
EwCase classify_ewise(EwOp op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() == b.shape()) return EwCase::same;
  if (b.numel() == 1) return EwCase::b_scalar;
  if (a.numel() == 1) return EwCase::a_scalar;
  if (op == EwOp::add && b.rank() == 1 && a.rank() >= 2 && b.dim(0) == a.dim(-1)) {
    return EwCase::b_trailing;
  }
  throw ShapeError("elementwise operands not broadcastable: " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
}

template <typename S>
Tensor<S> ewise(Tape<S>* tape, EwOp op, const Tensor<S>& a, const Tensor<S>& b) {
  const EwCase c = classify_ewise(op, a, b);
  const Shape& out_shape = (c == EwCase::a_scalar) ? b.shape() : a.shape();
  Tensor<S> out(out_shape, recording(tape, a.requires_grad() || b.requires_grad()));

  const int64_t n = out.numel();
  const S* ad = a.data();
  const S* bd = b.data();
  S* od = out.data();

  switch (c) {
    case EwCase::same:
      for (int64_t i = 0; i < n; ++i) {
        od[i] = op == EwOp::add ? ad[i] + bd[i] : op == EwOp::sub ? ad[i] - bd[i] : ad[i] * bd[i];
      }
      break;
    case EwCase::b_scalar: {
      const S bv = bd[0];
      for (int64_t i = 0; i < n; ++i) {
        od[i] = op == EwOp::add ? ad[i] + bv : op == EwOp::sub ? ad[i] - bv : ad[i] * bv;
      }
      break;
    }
    case EwCase::a_scalar: {
      const S av = ad[0];
      for (int64_t i = 0; i < n; ++i) {
        od[i] = op == EwOp::add ? av + bd[i] : op == EwOp::sub ? av - bd[i] : av * bd[i];
      }
      break;
    }
    case EwCase::b_trailing: {
      const int64_t l = b.numel();
      const int64_t rows = n / l;
      for (int64_t r = 0; r < rows; ++r) {
        for (int64_t j = 0; j < l; ++j) od[r * l + j] = ad[r * l + j] + bd[j];
      }
      break;
    }
  }

  if (out.requires_grad()) {
    Tensor<S> ta = a, tb = b, to = out;
    tape->record([ta, tb, to, op, c]() mutable {
      const S* g = to.grad_if_any();
      if (g == nullptr) return;
      const int64_t n = to.numel();
      S* ga = ta.requires_grad() ? ta.grad_data() : nullptr;
      S* gb = tb.requires_grad() ? tb.grad_data() : nullptr;
      switch (c) {
        case EwCase::same:
          for (int64_t i = 0; i < n; ++i) {
            if (ga != nullptr) ga[i] += op == EwOp::mul ? g[i] * tb.data()[i] : g[i];
            if (gb != nullptr) {
              gb[i] += op == EwOp::add ? g[i] : op == EwOp::sub ? -g[i] : g[i] * ta.data()[i];
            }
          }
          break;
        case EwCase::b_scalar: {
          const S bv = tb.data()[0];
          for (int64_t i = 0; i < n; ++i) {
            if (ga != nullptr) ga[i] += op == EwOp::mul ? g[i] * bv : g[i];
            if (gb != nullptr) {
              gb[0] += op == EwOp::add ? g[i] : op == EwOp::sub ? -g[i] : g[i] * ta.data()[i];
            }
          }
          break;
        }
        case EwCase::a_scalar: {
          const S av = ta.data()[0];
          for (int64_t i = 0; i < n; ++i) {
            if (ga != nullptr) ga[0] += op == EwOp::mul ? g[i] * tb.data()[i] : g[i];
            if (gb != nullptr) {
              gb[i] += op == EwOp::add ? g[i] : op == EwOp::sub ? -g[i] : g[i] * av;
            }
          }
          break;
        }
        case EwCase::b_trailing: {
          const int64_t l = tb.numel();
          const int64_t rows = n / l;
          for (int64_t r = 0; r < rows; ++r) {
            for (int64_t j = 0; j < l; ++j) {
              if (ga != nullptr) ga[r * l + j] += g[r * l + j];
              if (gb != nullptr) gb[j] += g[r * l + j];
            }
          }
          break;
        }
      }
    });
  }
  return out;
}

}  // namespace detail

template <typename S>
Tensor<S> add(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
  return detail::ewise(tape, detail::EwOp::add, a, b);
}

template <typename S>
Tensor<S> sub(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
  return detail::ewise(tape, detail::EwOp::sub, a, b);
}

template <typename S>
Tensor<S> mul(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
  return detail::ewise(tape, detail::EwOp::mul, a, b);
}

/// Multiply by a constant.
template <typename S>
Tensor<S> scale(Tape<S>* tape, const Tensor<S>& a, double c) {
  const S cs = static_cast<S>(c);
  Tensor<S> out(a.shape(), detail::recording(tape, a.requires_grad()));
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * cs;
  if (out.requires_grad()) {
    Tensor<S> ta = a, to = out;
    tape->record([ta, to, cs]() mutable {
      const S* g = to.grad_if_any();
      if (g == nullptr) return;
      S* ga = ta.grad_data();
      for (int64_t i = 0; i < ta.numel(); ++i) ga[i] += g[i] * cs;
    });
  }
  return out;
}

/// Sum of all elements, as a scalar tensor.
template <typename S>
Tensor<S> sum(Tape<S>* tape, const Tensor<S>& a) {
  double acc = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) acc += static_cast<double>(a.data()[i]);
  Tensor<S> out = Tensor<S>::from_data({1}, {static_cast<S>(acc)}, detail::recording(tape, a.requires_grad()));
  if (out.requires_grad()) {
    Tensor<S> ta = a, to = out;
    tape->record([ta, to]() mutable {
      const S* g = to.grad_if_any();
      if (g == nullptr) return;
      S* ga = ta.grad_data();
      for (int64_t i = 0; i < ta.numel(); ++i) ga[i] += g[0];
    });
  }
  return out;
}

/// Softmax over the last dimension, with row-max subtraction.
template <typename S>
Tensor<S> softmax_lastdim(Tape<S>* tape, const Tensor<S>& x) {
  if (x.rank() < 1 || x.dim(-1) < 1) throw ShapeError("softmax needs a non-empty last dimension");
  const int64_t l = x.dim(-1);
  const int64_t rows = x.numel() / l;
  Tensor<S> out(x.shape(), detail::recording(tape, x.requires_grad()));
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = x.data() + r * l;
    S* yr = out.data() + r * l;
    S mx = xr[0];
    for (int64_t j = 1; j < l; ++j) mx = std::max(mx, xr[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < l; ++j) denom += std::exp(static_cast<double>(xr[j] - mx));
    for (int64_t j = 0; j < l; ++j) {
      yr[j] = static_cast<S>(std::exp(static_cast<double>(xr[j] - mx)) / denom);
    }
  }
  if (out.requires_grad()) {
    Tensor<S> tx = x, to = out;
    tape->record([tx, to, rows, l]() mutable {
      const S* g = to.grad_if_any();
      if (g == nullptr) return;
      S* gx = tx.grad_data();
      for (int64_t r = 0; r < rows; ++r) {
        const S* yr = to.data() + r * l;
        const S* gr = g + r * l;
        double dot = 0.0;
        for (int64_t j = 0; j < l; ++j) dot += static_cast<double>(gr[j]) * static_cast<double>(yr[j]);
        for (int64_t j = 0; j < l; ++j) {
          gx[r * l + j] += static_cast<S>((static_cast<double>(gr[j]) - dot) * static_cast<double>(yr[j]));
        }
      }
    });
  }
  return out;
}

/// Layer normalization over the last dimension with affine gain/bias.
template <typename S>
Tensor<S> layer_norm(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias,
                     double eps = 1e-5) {
  if (eps <= 0.0) throw ConfigError("layer_norm eps must be positive");
  const int64_t d = x.dim(-1);
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d) {
    throw ShapeError("layer_norm gain/bias must have shape [" + std::to_string(d) + "]");
  }
  const int64_t rows = x.numel() / d;
  Tensor<S> out(x.shape(),
                detail::recording(tape, x.requires_grad() || gain.requires_grad() || bias.requires_grad()));

  auto mean_v = std::make_shared<std::vector<double>>(rows);
  auto rstd_v = std::make_shared<std::vector<double>>(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = x.data() + r * d;
    double mu = 0.0;
    for (int64_t j = 0; j < d; ++j) mu += static_cast<double>(xr[j]);
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double c = static_cast<double>(xr[j]) - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + eps);
    (*mean_v)[r] = mu;
    (*rstd_v)[r] = rstd;
    S* yr = out.data() + r * d;
    for (int64_t j = 0; j < d; ++j) {
      const double xhat = (static_cast<double>(xr[j]) - mu) * rstd;
      yr[j] = static_cast<S>(static_cast<double>(gain.data()[j]) * xhat + static_cast<double>(bias.data()[j]));
    }
  }

  if (out.requires_grad()) {
    Tensor<S> tx = x, tg = gain, tb = bias, to = out;
    tape->record([tx, tg, tb, to, mean_v, rstd_v, rows, d]() mutable {
      const S* g = to.grad_if_any();
      if (g == nullptr) return;
      S* gx = tx.requires_grad() ? tx.grad_data() : nullptr;
      S* gg = tg.requires_grad() ? tg.grad_data() : nullptr;
      S* gb = tb.requires_grad() ? tb.grad_data() : nullptr;
      std::vector<double> xhat(static_cast<size_t>(d));
      std::vector<double> dxhat(static_cast<size_t>(d));
      for (int64_t r = 0; r < rows; ++r) {
        const S* xr = tx.data() + r * d;
        const S* gr = g + r * d;
        const double mu = (*mean_v)[r];
        const double rstd = (*rstd_v)[r];
        double sum1 = 0.0, sum2 = 0.0;
        for (int64_t j = 0; j < d; ++j) {
          xhat[j] = (static_cast<double>(xr[j]) - mu) * rstd;
          dxhat[j] = static_cast<double>(gr[j]) * static_cast<double>(tg.data()[j]);
          sum1 += dxhat[j];
          sum2 += dxhat[j] * xhat[j];
        }
        for (int64_t j = 0; j < d; ++j) {
          if (gx != nullptr) {
            gx[r * d + j] += static_cast<S>(
                rstd * (dxhat[j] - sum1 / static_cast<double>(d) - xhat[j] * sum2 / static_cast<double>(d)));
          }
          if (gg != nullptr) gg[j] += static_cast<S>(static_cast<double>(gr[j]) * xhat[j]);
          if (gb != nullptr) gb[j] += gr[j];
        }
      }
    });
  }
  return out;
}

/// GELU in its exact erf form: 0.5 x (1 + erf(x / sqrt(2))).
template <typename S>
Tensor<S> gelu(Tape<S>* tape, const Tensor<S>& x) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt_2pi = 0.3989422804014326779;
  Tensor<S> out(x.shape(), detail::recording(tape, x.requires_grad()));
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double v = static_cast<double>(x.data()[i]);
    out.data()[i] = static_cast<S>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  if (out.requires_grad()) {
    Tensor<S> tx = x, to = out;
    tape->record([tx, to]() mutable {
      const S* g = to.grad_if_any();
      if (g == nullptr) return;
      S* gx = tx.grad_data();
      for (int64_t i = 0; i < tx.numel(); ++i) {
        const double v = static_cast<double>(tx.data()[i]);
        const double d = 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
        gx[i] += static_cast<S>(static_cast<double>(g[i]) * d);
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> sin(Tape<S>* tape, const Tensor<S>& x) {
  Tensor<S> out(x.shape(), detail::recording(tape, x.requires_grad()));
  for (int64_t i = 0; i < x.numel(); ++i) out.data()[i] = std::sin(x.data()[i]);
  if (out.requires_grad()) {
    Tensor<S> tx = x, to = out;
    tape->record([tx, to]() mutable {
      const S* g = to.grad_if_any();
      if (g == nullptr) return;
      S* gx = tx.grad_data();
      for (int64_t i = 0; i < tx.numel(); ++i) gx[i] += g[i] * std::cos(tx.data()[i]);
    });
  }
  return out;
}

template <typename S>
Tensor<S> cos(Tape<S>* tape, const Tensor<S>& x) {
  Tensor<S> out(x.shape(), detail::recording(tape, x.requires_grad()));
  for (int64_t i = 0; i < x.numel(); ++i) out.data()[i] = std::cos(x.data()[i]);
  if (out.requires_grad()) {
    Tensor<S> tx = x, to = out;
    tape->record([tx, to]() mutable {
      const S* g = to.grad_if_any();
      if (g == nullptr) return;
      S* gx = tx.grad_data();
      for (int64_t i = 0; i < tx.numel(); ++i) gx[i] += -g[i] * std::sin(tx.data()[i]);
    });
  }
  return out;
}

/// Row lookup: out[..n..] = table[ids[n], :]. Backward scatter-adds into the table.
template <typename S>
Tensor<S> gather_rows(Tape<S>* tape, const Tensor<S>& table, const IdTensor& ids) {
  if (table.rank() != 2) throw ShapeError("gather_rows table must be rank 2, got " + shape_str(table.shape()));
  const int64_t v = table.dim(0);
  const int64_t d = table.dim(1);
  for (int64_t i = 0; i < ids.numel(); ++i) {
    const int32_t id = ids.data[static_cast<size_t>(i)];
    if (id < 0 || id >= v) {
      throw IndexError("token id " + std::to_string(id) + " out of range [0, " + std::to_string(v) +
                       ") at position " + std::to_string(i));
    }
  }
  Shape out_shape = ids.shape;
  out_shape.push_back(d);
  Tensor<S> out(out_shape, detail::recording(tape, table.requires_grad()));
  for (int64_t i = 0; i < ids.numel(); ++i) {
    const S* src = table.data() + static_cast<int64_t>(ids.data[static_cast<size_t>(i)]) * d;
    S* dst = out.data() + i * d;
    for (int64_t j = 0; j < d; ++j) dst[j] = src[j];
  }
  if (out.requires_grad()) {
    Tensor<S> tt = table, to = out;
    auto idv = std::make_shared<std::vector<int32_t>>(ids.data);
    tape->record([tt, to, idv, d]() mutable {
      const S* g = to.grad_if_any();
      if (g == nullptr) return;
      S* gt = tt.grad_data();
      for (size_t i = 0; i < idv->size(); ++i) {
        S* dst = gt + static_cast<int64_t>((*idv)[i]) * d;
        const S* src = g + static_cast<int64_t>(i) * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

/// Exclusive prefix sum along the sequence (middle) dimension of a [B,T,C]
/// tensor: out[b,t,c] = sum of x[b,i,c] for i < t, so out[b,0,c] == 0.
/// Accumulates in double so constant rows reduce to exact multiples.
template <typename S>
Tensor<S> exclusive_cumsum_seqdim(Tape<S>* tape, const Tensor<S>& x) {
  if (x.rank() != 3) throw ShapeError("exclusive_cumsum_seqdim expects [B,T,C], got " + shape_str(x.shape()));
  const int64_t b = x.dim(0), t = x.dim(1), c = x.dim(2);
  Tensor<S> out(x.shape(), detail::recording(tape, x.requires_grad()));
  std::vector<double> acc(static_cast<size_t>(c));
  for (int64_t bi = 0; bi < b; ++bi) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int64_t ti = 0; ti < t; ++ti) {
      const S* xr = x.data() + (bi * t + ti) * c;
      S* yr = out.data() + (bi * t + ti) * c;
      for (int64_t j = 0; j < c; ++j) {
        yr[j] = static_cast<S>(acc[static_cast<size_t>(j)]);
        acc[static_cast<size_t>(j)] += static_cast<double>(xr[j]);
      }
    }
  }
  if (out.requires_grad()) {
    Tensor<S> tx = x, to = out;
    tape->record([tx, to, b, t, c]() mutable {
      const S* g = to.grad_if_any();
      if (g == nullptr) return;
      S* gx = tx.grad_data();
      std::vector<double> acc(static_cast<size_t>(c));
      for (int64_t bi = 0; bi < b; ++bi) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int64_t ti = t - 1; ti >= 0; --ti) {
          const S* gr = g + (bi * t + ti) * c;
          S* gxr = gx + (bi * t + ti) * c;
          for (int64_t j = 0; j < c; ++j) {
            gxr[j] += static_cast<S>(acc[static_cast<size_t>(j)]);
            acc[static_cast<size_t>(j)] += static_cast<double>(gr[j]);
          }
        }
      }
    });
  }
  return out;
}

/// Mean cross-entropy per token from raw logits, via log-sum-exp with max
/// subtraction. Backward is softmax(logits) minus one-hot, averaged.
template <typename S>
Tensor<S> cross_entropy_logits(Tape<S>* tape, const Tensor<S>& logits, const IdTensor& targets) {
  if (logits.rank() < 2) throw ShapeError("cross_entropy_logits expects rank >= 2 logits");
  const int64_t v = logits.dim(-1);
  const int64_t rows = logits.numel() / v;
  if (targets.numel() != rows) {
    throw ShapeError("target count " + std::to_string(targets.numel()) + " does not match " +
                     std::to_string(rows) + " logit rows");
  }
  for (int64_t i = 0; i < rows; ++i) {
    const int32_t id = targets.data[static_cast<size_t>(i)];
    if (id < 0 || id >= v) {
      throw IndexError("target id " + std::to_string(id) + " out of range [0, " + std::to_string(v) +
                       ") at position " + std::to_string(i));
    }
  }
  auto lse_v = std::make_shared<std::vector<double>>(rows);
  double nll = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = logits.data() + r * v;
    S mx = xr[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, xr[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < v; ++j) denom += std::exp(static_cast<double>(xr[j]) - static_cast<double>(mx));
    const double lse = static_cast<double>(mx) + std::log(denom);
    (*lse_v)[r] = lse;
    nll += lse - static_cast<double>(xr[targets.data[static_cast<size_t>(r)]]);
  }
  Tensor<S> out = Tensor<S>::from_data({1}, {static_cast<S>(nll / static_cast<double>(rows))},
                                       detail::recording(tape, logits.requires_grad()));
  if (out.requires_grad()) {
    Tensor<S> tl = logits, to = out;
    auto tg = std::make_shared<std::vector<int32_t>>(targets.data);
    tape->record([tl, to, tg, lse_v, rows, v]() mutable {
      const S* g = to.grad_if_any();
      if (g == nullptr) return;
      S* gl = tl.grad_data();
      const double gscale = static_cast<double>(g[0]) / static_cast<double>(rows);
      for (int64_t r = 0; r < rows; ++r) {
        const S* xr = tl.data() + r * v;
        const double lse = (*lse_v)[r];
        const int32_t t = (*tg)[static_cast<size_t>(r)];
        for (int64_t j = 0; j < v; ++j) {
          const double p = std::exp(static_cast<double>(xr[j]) - lse);
          gl[r * v + j] += static_cast<S>((p - (j == t ? 1.0 : 0.0)) * gscale);
        }
      }
    });
  }
  return out;
}

/// Swap the last two dimensions (copying).
template <typename S>
Tensor<S> transpose_last2(Tape<S>* tape, const Tensor<S>& x) {
  if (x.rank() < 2) throw ShapeError("transpose_last2 requires rank >= 2, got " + shape_str(x.shape()));
  const int64_t m = x.dim(-2), n = x.dim(-1);
  const int64_t batch = x.numel() / (m * n);
  Shape out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  Tensor<S> out(out_shape, detail::recording(tape, x.requires_grad()));
  for (int64_t bi = 0; bi < batch; ++bi) {
    const S* xs = x.data() + bi * m * n;
    S* os = out.data() + bi * m * n;
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t j = 0; j < n; ++j) os[j * m + i] = xs[i * n + j];
    }
  }
  if (out.requires_grad()) {
    Tensor<S> tx = x, to = out;
    tape->record([tx, to, m, n, batch]() mutable {
      const S* g = to.grad_if_any();
      if (g == nullptr) return;
      S* gx = tx.grad_data();
      for (int64_t bi = 0; bi < batch; ++bi) {
        const S* gs = g + bi * m * n;
        S* gxs = gx + bi * m * n;
        for (int64_t i = 0; i < m; ++i) {
          for (int64_t j = 0; j < n; ++j) gxs[i * n + j] += gs[j * m + i];
        }
      }
    });
  }
  return out;
}

/// Causal mask on [B,T,T] attention scores: entries with key position q >
/// query position p become -inf, so softmax assigns them zero weight.
template <typename S>
Tensor<S> causal_mask(Tape<S>* tape, const Tensor<S>& scores) {
  if (scores.rank() != 3 || scores.dim(1) != scores.dim(2)) {
    throw ShapeError("causal_mask expects [B,T,T] scores, got " + shape_str(scores.shape()));
  }
  const int64_t b = scores.dim(0), t = scores.dim(1);
  const S ninf = -std::numeric_limits<S>::infinity();
  Tensor<S> out(scores.shape(), detail::recording(tape, scores.requires_grad()));
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t p = 0; p < t; ++p) {
      const S* xr = scores.data() + (bi * t + p) * t;
      S* yr = out.data() + (bi * t + p) * t;
      for (int64_t q = 0; q < t; ++q) yr[q] = q <= p ? xr[q] : ninf;
    }
  }
  if (out.requires_grad()) {
    Tensor<S> tx = scores, to = out;
    tape->record([tx, to, b, t]() mutable {
      const S* g = to.grad_if_any();
      if (g == nullptr) return;
      S* gx = tx.grad_data();
      for (int64_t bi = 0; bi < b; ++bi) {
        for (int64_t p = 0; p < t; ++p) {
          for (int64_t q = 0; q <= p; ++q) gx[(bi * t + p) * t + q] += g[(bi * t + p) * t + q];
        }
      }
    });
  }
  return out;
}

}  // namespace joformer
