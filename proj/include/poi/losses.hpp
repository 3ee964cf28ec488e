#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "poi/ops.hpp"

namespace poi {

inline constexpr double kProbFloor = 1e-12;
inline constexpr double kProbCeil = 1.0 - 1e-12;

namespace detail {

inline double clamp_prob(double p) { return p < kProbFloor ? kProbFloor : (p > kProbCeil ? kProbCeil : p); }
inline bool in_clamp(double p) { return p >= kProbFloor && p <= kProbCeil; }

inline void check_labels(std::span<const std::size_t> labels, std::size_t B, std::size_t C) {
  if (labels.size() != B) throw DimensionError("loss: label count does not match batch");
  for (std::size_t y : labels)
    if (y >= C) throw ContractError("loss: label " + std::to_string(y) + " out of range");
}

}  // namespace detail

/// Mean binary cross-entropy over every occurrence head. `probs[k]` and
/// `targets[k]` are equally sized; the sum is divided by `denom`.
inline Var loss_au(std::span<const Var> probs, std::span<const std::vector<double>> targets, double denom) {
  if (probs.empty() || probs.size() != targets.size()) throw DimensionError("loss_au: probs/targets mismatch");
  double s = 0.0;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    const auto p = probs[k].value();
    const auto& y = targets[k];
    if (p.size() != y.size()) throw DimensionError("loss_au: target size mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (!(p[i] >= 0.0 && p[i] <= 1.0)) throw NumericError("loss_au: occurrence probability outside [0, 1]");
      const double c = detail::clamp_prob(p[i]);
      s -= y[i] * std::log(c) + (1.0 - y[i]) * std::log(1.0 - c);
    }
  }
  std::vector<Var> ins(probs.begin(), probs.end());
  std::vector<std::vector<double>> ys(targets.begin(), targets.end());
  return probs[0].tape->record("loss_au", {1}, {s / denom}, probs, [ins, ys, denom](Tape& t, std::size_t self) {
    const double g = t.node(self).grad[0] / denom;
    for (std::size_t k = 0; k < ins.size(); ++k) {
      detail::with_grad(t, ins[k], [&](std::vector<double>& gp) {
        const auto& p = t.value_of(ins[k]);
        for (std::size_t i = 0; i < p.size(); ++i) {
          if (!detail::in_clamp(p[i])) continue;
          gp[i] -= g * (ys[k][i] / p[i] - (1.0 - ys[k][i]) / (1.0 - p[i]));
        }
      });
    }
  });
}

/// -(1/(B*N)) sum_n sum_i log p_n[i, y_i] over N distributions of shape BxC.
inline Var loss_ce(std::span<const Var> dists, std::span<const std::size_t> labels) {
  if (dists.empty()) throw DimensionError("loss_ce: no distributions");
  const std::size_t B = dists[0].dim(0), C = dists[0].dim(1);
  detail::check_labels(labels, B, C);
  const double denom = static_cast<double>(B * dists.size());
  double s = 0.0;
  for (const Var& d : dists) {
    if (d.shape() != Shape{B, C}) throw DimensionError("loss_ce: distributions must share shape");
    const auto p = d.value();
    for (std::size_t i = 0; i < B; ++i) s -= std::log(detail::clamp_prob(p[i * C + labels[i]]));
  }
  std::vector<Var> ins(dists.begin(), dists.end());
  std::vector<std::size_t> ys(labels.begin(), labels.end());
  return dists[0].tape->record("loss_ce", {1}, {s / denom}, dists, [ins, ys, B, C, denom](Tape& t, std::size_t self) {
    const double g = t.node(self).grad[0] / denom;
    for (const Var& d : ins) {
      detail::with_grad(t, d, [&](std::vector<double>& gp) {
        const auto& p = t.value_of(d);
        for (std::size_t i = 0; i < B; ++i) {
          const double v = p[i * C + ys[i]];
          if (detail::in_clamp(v)) gp[i * C + ys[i]] -= g / v;
        }
      });
    }
  });
}

inline Var loss_ce(Var dist, std::span<const std::size_t> labels) { return loss_ce(std::span<const Var>(&dist, 1), labels); }

/// sum_i w_i * KL(a_i || b_i) * scale over rows of BxC distributions, with
/// probabilities clamped inside the logarithms. Empty `row_weights` means 1.
inline Var kl_rows(Var a, Var b, std::span<const double> row_weights, double scale) {
  if (a.shape() != b.shape() || a.shape().size() != 2) throw DimensionError("kl_rows: shape mismatch");
  const std::size_t B = a.dim(0), C = a.dim(1);
  if (!row_weights.empty() && row_weights.size() != B) throw DimensionError("kl_rows: weight count != batch");
  const auto av = a.value();
  const auto bv = b.value();
  double s = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    const double w = row_weights.empty() ? 1.0 : row_weights[i];
    double kl = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double x = av[i * C + c];
      if (x == 0.0) continue;
      kl += x * (std::log(detail::clamp_prob(x)) - std::log(detail::clamp_prob(bv[i * C + c])));
    }
    s += w * kl;
  }
  std::vector<double> ws(row_weights.begin(), row_weights.end());
  return a.tape->record("kl_rows", {1}, {s * scale}, {a, b}, [a, b, ws, B, C, scale](Tape& t, std::size_t self) {
    const double g = t.node(self).grad[0] * scale;
    const auto& av = t.value_of(a);
    const auto& bv = t.value_of(b);
    detail::with_grad(t, a, [&](std::vector<double>& ga) {
      for (std::size_t i = 0; i < B; ++i) {
        const double w = ws.empty() ? 1.0 : ws[i];
        for (std::size_t c = 0; c < C; ++c) {
          const double x = av[i * C + c];
          double d = std::log(detail::clamp_prob(x)) - std::log(detail::clamp_prob(bv[i * C + c]));
          if (detail::in_clamp(x)) d += 1.0;
          ga[i * C + c] += g * w * d;
        }
      }
    });
    detail::with_grad(t, b, [&](std::vector<double>& gb) {
      for (std::size_t i = 0; i < B; ++i) {
        const double w = ws.empty() ? 1.0 : ws[i];
        for (std::size_t c = 0; c < C; ++c) {
          const double y = bv[i * C + c];
          if (detail::in_clamp(y)) gb[i * C + c] -= g * w * av[i * C + c] / y;
        }
      }
    });
  });
}

/// (1/(B*N)) sum_i sum_n KL(p_star_i || p_n,i). The caller decides whether
/// `p_star` carries gradient.
inline Var loss_kl_au(Var p_star, std::span<const Var> p_soft) {
  if (p_soft.empty()) throw DimensionError("loss_kl_au: no subregion distributions");
  const double scale = 1.0 / static_cast<double>(p_star.dim(0) * p_soft.size());
  std::vector<Var> terms;
  std::vector<double> ones(p_soft.size(), 1.0);
  for (const Var& p : p_soft) terms.push_back(kl_rows(p_star, p, {}, scale));
  return weighted_sum(terms, ones);
}

/// (1/(B*N)) sum_i sum_n beta_i KL(p_n,i || q_i). Subregion distributions are
/// teachers here and are detached.
inline Var loss_kl_tar(std::span<const Var> p_soft, Var q, std::span<const double> beta) {
  if (p_soft.empty()) throw DimensionError("loss_kl_tar: no subregion distributions");
  const double scale = 1.0 / static_cast<double>(q.dim(0) * p_soft.size());
  std::vector<Var> terms;
  std::vector<double> ones(p_soft.size(), 1.0);
  for (const Var& p : p_soft) terms.push_back(kl_rows(detach(p), q, beta, scale));
  return weighted_sum(terms, ones);
}

/// Per-sample confidence: one minus the across-subregion variance of the
/// predicted distributions, summed over classes (or averaged when
/// `class_mean`). Each entry of `dists` is a flattened BxC distribution.
inline std::vector<double> uncertainty(std::span<const std::span<const double>> dists, std::size_t C,
                                       bool class_mean = false) {
  const std::size_t N = dists.size();
  if (N < 2) throw ContractError("uncertainty: needs at least two subregion distributions");
  if (C == 0 || dists[0].size() % C) throw DimensionError("uncertainty: bad class count");
  const std::size_t B = dists[0].size() / C;
  for (const auto& d : dists)
    if (d.size() != B * C) throw DimensionError("uncertainty: distributions differ in size");
  std::vector<double> w(B);
  const double invN = 1.0 / static_cast<double>(N);
  for (std::size_t i = 0; i < B; ++i) {
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      double m = 0.0, m2 = 0.0;
      for (const auto& d : dists) {
        const double p = d[i * C + c];
        m += p;
        m2 += p * p;
      }
      m *= invN;
      m2 *= invN;
      var += std::max(0.0, m2 - m * m);
    }
    if (class_mean) var /= static_cast<double>(C);
    w[i] = 1.0 - var;
  }
  return w;
}

inline std::vector<double> uncertainty(std::span<const Var> dists, bool class_mean = false) {
  std::vector<std::span<const double>> views;
  for (const Var& d : dists) views.push_back(d.value());
  return uncertainty(views, dists.empty() ? 1 : dists[0].dim(1), class_mean);
}

/// Distillation weight; zero at full confidence and growing as it drops.
inline double beta(double w_au) { return std::exp(1.0 - w_au) - 1.0; }

inline std::vector<double> beta(std::span<const double> w_au) {
  std::vector<double> out(w_au.size());
  for (std::size_t i = 0; i < w_au.size(); ++i) out[i] = beta(w_au[i]);
  return out;
}

}  // namespace poi
