#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "joformer/ops.hpp"
#include "joformer/tensor.hpp"

namespace joformer {

/// One rotation angle per 2-D subspace; length d/2.
template <typename S>
using AngleVector = std::vector<S>;

/// Rotary frequency schedule: omega_j = base^(-2j/d) for j = 0 .. d/2-1.
/// Strictly decreasing, starting at 1.
template <typename S>
AngleVector<S> rope_frequencies(int64_t d, double base) {
  if (d <= 0 || d % 2 != 0) throw ConfigError("rope_frequencies requires even positive d, got " + std::to_string(d));
  if (base <= 1.0) throw ConfigError("rope_frequencies requires base > 1");
  AngleVector<S> omega(static_cast<size_t>(d / 2));
  for (int64_t j = 0; j < d / 2; ++j) {
    omega[static_cast<size_t>(j)] =
        static_cast<S>(std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(d)));
  }
  return omega;
}

/// Cumulative angles for a position-independent schedule: phi[b,p,j] = p * omega_j.
/// Constant (no gradient participation).
template <typename S>
Tensor<S> cumulative_angles_fixed(int64_t batch, int64_t seq_len, const AngleVector<S>& omega) {
  if (seq_len < 1) throw ShapeError("cumulative_angles_fixed requires seq_len >= 1");
  const int64_t c = static_cast<int64_t>(omega.size());
  Tensor<S> phi({batch, seq_len, c});
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t p = 0; p < seq_len; ++p) {
      S* row = phi.data() + (b * seq_len + p) * c;
      for (int64_t j = 0; j < c; ++j) row[j] = static_cast<S>(p) * omega[static_cast<size_t>(j)];
    }
  }
  return phi;
}

/// Cumulative angles for token-dependent journeys: the exclusive prefix sum
/// over the sequence of each token's learned angle row. phi[b,0,:] == 0, and
/// gradients flow back into the table.
template <typename S>
Tensor<S> cumulative_angles_per_token(Tape<S>* tape, const IdTensor& token_ids, const Tensor<S>& table) {
  if (token_ids.shape.size() != 2) {
    throw ShapeError("cumulative_angles_per_token expects [B,T] token ids, got " + shape_str(token_ids.shape));
  }
  Tensor<S> per_position = gather_rows(tape, table, token_ids);
  return exclusive_cumsum_seqdim(tape, per_position);
}

/// Rotate each coordinate pair (x_{2j}, x_{2j+1}) of x by sign * phi[...,j].
/// Differentiable with respect to both x and phi.
template <typename S>
Tensor<S> apply_rotation(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& phi, int sign) {
  if (sign != 1 && sign != -1) throw ContractError("apply_rotation sign must be +1 or -1");
  if (x.rank() != 3) throw ShapeError("apply_rotation expects [B,T,d] input, got " + shape_str(x.shape()));
  const int64_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
  if (d % 2 != 0) throw ConfigError("apply_rotation requires even d, got " + std::to_string(d));
  const int64_t half = d / 2;
  if (phi.rank() != 3 || phi.dim(0) != b || phi.dim(1) != t || phi.dim(2) != half) {
    throw ShapeError("apply_rotation phi shape " + shape_str(phi.shape()) + " does not match input " +
                     shape_str(x.shape()));
  }

  Tensor<S> out(x.shape(), detail::recording(tape, x.requires_grad() || phi.requires_grad()));
  const double s_sign = static_cast<double>(sign);
  for (int64_t r = 0; r < b * t; ++r) {
    const S* xr = x.data() + r * d;
    const S* pr = phi.data() + r * half;
    S* yr = out.data() + r * d;
    for (int64_t j = 0; j < half; ++j) {
      const double a = s_sign * static_cast<double>(pr[j]);
      const double c = std::cos(a);
      const double s = std::sin(a);
      const double x0 = static_cast<double>(xr[2 * j]);
      const double x1 = static_cast<double>(xr[2 * j + 1]);
      yr[2 * j] = static_cast<S>(c * x0 - s * x1);
      yr[2 * j + 1] = static_cast<S>(s * x0 + c * x1);
    }
  }

  if (out.requires_grad()) {
    Tensor<S> tx = x, tp = phi, to = out;
    tape->record([tx, tp, to, b, t, d, half, s_sign]() mutable {
      const S* g = to.grad_if_any();
      if (g == nullptr) return;
      S* gx = tx.requires_grad() ? tx.grad_data() : nullptr;
      S* gp = tp.requires_grad() ? tp.grad_data() : nullptr;
      for (int64_t r = 0; r < b * t; ++r) {
        const S* pr = tp.data() + r * half;
        const S* yr = to.data() + r * d;
        const S* gr = g + r * d;
        for (int64_t j = 0; j < half; ++j) {
          const double a = s_sign * static_cast<double>(pr[j]);
          const double c = std::cos(a);
          const double s = std::sin(a);
          const double g0 = static_cast<double>(gr[2 * j]);
          const double g1 = static_cast<double>(gr[2 * j + 1]);
          if (gx != nullptr) {
            // transpose of the rotation
            gx[r * d + 2 * j] += static_cast<S>(c * g0 + s * g1);
            gx[r * d + 2 * j + 1] += static_cast<S>(-s * g0 + c * g1);
          }
          if (gp != nullptr) {
            // d out0/d phi = -sign * out1, d out1/d phi = sign * out0
            const double y0 = static_cast<double>(yr[2 * j]);
            const double y1 = static_cast<double>(yr[2 * j + 1]);
            gp[r * half + j] += static_cast<S>(s_sign * (g1 * y0 - g0 * y1));
          }
        }
      }
    });
  }
  return out;
}

/// Explicit block-diagonal rotation matrix diag(R(phi_0), ..., R(phi_{d/2-1})).
/// Oracle-side helper; the fast path never materializes it.
template <typename S>
Tensor<S> explicit_rotation_matrix(const AngleVector<S>& angles) {
  const int64_t half = static_cast<int64_t>(angles.size());
  const int64_t d = 2 * half;
  Tensor<S> m({d, d});
  for (int64_t j = 0; j < half; ++j) {
    const double a = static_cast<double>(angles[static_cast<size_t>(j)]);
    const double c = std::cos(a);
    const double s = std::sin(a);
    m.at({2 * j, 2 * j}) = static_cast<S>(c);
    m.at({2 * j, 2 * j + 1}) = static_cast<S>(-s);
    m.at({2 * j + 1, 2 * j}) = static_cast<S>(s);
    m.at({2 * j + 1, 2 * j + 1}) = static_cast<S>(c);
  }
  return m;
}

}  // namespace joformer
