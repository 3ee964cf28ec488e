#pragma once

#include <cmath>
#include <span>
#include <vector>

#include <json.hpp>

#include "poi/config.hpp"
#include "poi/losses.hpp"
#include "poi/model.hpp"
#include "poi/prior.hpp"

namespace poi {

/// Scalar values of every loss term from one forward pass. KL components
/// carry the configured sign, so with the printed sign they are negative.
struct LossBreakdown {
  double l_au = 0.0;
  double l_ce_au = 0.0;
  double l_kl_au = 0.0;
  double l_ce_tar = 0.0;
  double l_kl_tar = 0.0;
  double l_gate = 0.0;
  double total = 0.0;
  std::vector<double> w_au;
  std::vector<double> beta;

  double mean_w_au() const { return mean(w_au); }
  double mean_beta() const { return mean(beta); }

 private:
  static double mean(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  }
};

struct Objective {
  Var total;      // lambda-weighted sum with T^2-scaled KL terms
  Var objective;  // total plus the weighted gate CE; this is what training minimises
  LossBreakdown breakdown;
};

/// AU targets for a branch's stacked occurrence probabilities: both
/// subregions of a sample get the same vector, chosen by its label.
inline std::vector<double> branch_targets(const AUPriorTable& table, Region region,
                                          std::span<const std::size_t> labels, double eps) {
  const std::size_t M = table.num_aus(region);
  const std::size_t B = labels.size();
  std::vector<double> out(2 * B * M);
  for (std::size_t side = 0; side < 2; ++side)
    for (std::size_t i = 0; i < B; ++i) {
      const auto y = table.pseudolabels(labels[i], region, eps);
      std::copy(y.begin(), y.end(), out.begin() + static_cast<std::ptrdiff_t>((side * B + i) * M));
    }
  return out;
}

inline Objective total_loss(Tape& /*tape*/, const ForwardResult& fr, std::span<const std::size_t> labels,
                            const AUPriorTable& table, const HyperParams& hp, const Flags& flags) {
  Objective o;
  std::vector<Var> terms;
  std::vector<double> weights;
  const double kl_sign = flags.kl_sign == KlSign::Printed ? -1.0 : 1.0;
  const double T2 = hp.T * hp.T;

  Var ce_tar = loss_ce(fr.trn.q, labels);
  o.breakdown.l_ce_tar = ce_tar.item();
  terms.push_back(ce_tar);
  weights.push_back(hp.lambda3);

  std::optional<Var> gate_ce;
  if (fr.pin) {
    const PinOutputs& pin = *fr.pin;
    const std::size_t B = labels.size();
    if (!flags.disable_pb) {
      const std::vector<Var> probs{pin.upper.probs, pin.lower.probs};
      const std::vector<std::vector<double>> targets{branch_targets(table, Region::Eye, labels, hp.epsilon),
                                                     branch_targets(table, Region::Mouth, labels, hp.epsilon)};
      const double heads = 2.0 * static_cast<double>(table.num_aus(Region::Eye) + table.num_aus(Region::Mouth));
      Var l_au = loss_au(probs, targets, static_cast<double>(B) * heads);
      o.breakdown.l_au = l_au.item();
      terms.push_back(l_au);
      weights.push_back(hp.lambda1);
    }

    const auto p = pin.p();
    const auto ps = pin.p_soft();
    Var ce_au = loss_ce(p, labels);
    o.breakdown.l_ce_au = ce_au.item();
    terms.push_back(ce_au);
    weights.push_back(hp.lambda2);

    if (pin.p_star) {
      Var teacher = flags.detach_pstar ? detach(*pin.p_star) : *pin.p_star;
      Var kl_au = loss_kl_au(teacher, ps);
      o.breakdown.l_kl_au = kl_sign * kl_au.item();
      terms.push_back(kl_au);
      weights.push_back(kl_sign * T2);

      std::vector<Var> fixed;
      for (const Var& v : p) fixed.push_back(detach(v));
      gate_ce = loss_ce(mix(*pin.gate_w, fixed), labels);
      o.breakdown.l_gate = gate_ce->item();
    }

    std::vector<double> b = flags.disable_uem ? std::vector<double>(B, 1.0) : fr.trn.beta;
    Var kl_tar = loss_kl_tar(ps, flags.temper_q ? fr.trn.q_soft : fr.trn.q, b);
    o.breakdown.l_kl_tar = kl_sign * kl_tar.item();
    terms.push_back(kl_tar);
    weights.push_back(kl_sign * T2);
    o.breakdown.w_au = fr.trn.w_au;
    o.breakdown.beta = std::move(b);
  }

  o.total = weighted_sum(terms, weights);
  o.breakdown.total = o.total.item();
  if (gate_ce && hp.gate_weight > 0.0) {
    const std::vector<Var> parts{o.total, *gate_ce};
    const std::vector<double> pw{1.0, hp.gate_weight};
    o.objective = weighted_sum(parts, pw);
  } else {
    o.objective = o.total;
  }
  return o;
}

inline nlohmann::json to_json(const LossBreakdown& b) {
  return nlohmann::json{{"l_au", b.l_au},         {"l_ce_au", b.l_ce_au}, {"l_kl_au", b.l_kl_au},
                        {"l_ce_tar", b.l_ce_tar}, {"l_kl_tar", b.l_kl_tar}, {"l_gate", b.l_gate},
                        {"total", b.total},       {"mean_w_au", b.mean_w_au()}, {"mean_beta", b.mean_beta()}};
}

}  // namespace poi
