#pragma once

#include <array>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "poi/config.hpp"
#include "poi/losses.hpp"
#include "poi/ops.hpp"
#include "poi/optim.hpp"
#include "poi/prior.hpp"

namespace poi {

inline constexpr std::size_t kNumSubregions = 4;

/// Subregion crops in fixed order: left eye, flipped right eye, left mouth,
/// flipped right mouth. Image coordinates put the subject's right on the
/// image left, so UL = right eye, UR = left eye, LL = right mouth,
/// LR = left mouth.
struct SubregionBundle {
  std::array<Var, kNumSubregions> regions;

  Var left_eye() const { return regions[0]; }
  Var right_eye_flipped() const { return regions[1]; }
  Var left_mouth() const { return regions[2]; }
  Var right_mouth_flipped() const { return regions[3]; }
};

inline SubregionBundle extract_subregions(Var g, std::size_t L_sub) {
  SubregionBundle b;
  b.regions[0] = crop2d(g, Corner::UpperRight, L_sub);
  b.regions[1] = hflip2d(crop2d(g, Corner::UpperLeft, L_sub));
  b.regions[2] = crop2d(g, Corner::LowerRight, L_sub);
  b.regions[3] = hflip2d(crop2d(g, Corner::LowerLeft, L_sub));
  return b;
}

/// Convex combination of the tempered subregion predictions.
inline Var intermediate_prediction(Var w, std::span<const Var> p_soft) { return mix(w, p_soft); }

/// Per-AU tensors of one branch. Rows stack the branch's two subregions:
/// [0, B) is the left side, [B, 2B) the flipped right side.
struct AuNetOutputs {
  std::vector<Var> latent;      // I^{n,m}
  std::vector<Var> attention;   // importance weight
  std::vector<Var> weighted;    // I_*^{n,m}
  std::vector<Var> reduced;
  std::vector<Var> occurrence;  // p_hat, rows x 1
  Var features;                 // concat of reduced, rows x (M * reduced)
  Var probs;                    // rows x M
};

struct HeadOutputs {
  Var logits;
  Var p;       // T = 1
  Var p_soft;  // temperature T
};

struct PinOutputs {
  AuNetOutputs upper;
  AuNetOutputs lower;
  std::array<Var, kNumSubregions> features;  // I_AU per subregion, B x (M * reduced)
  std::array<HeadOutputs, kNumSubregions> heads;
  std::optional<Var> gate_w;
  std::optional<Var> p_star;

  std::vector<Var> p() const { return {heads[0].p, heads[1].p, heads[2].p, heads[3].p}; }
  std::vector<Var> p_soft() const {
    return {heads[0].p_soft, heads[1].p_soft, heads[2].p_soft, heads[3].p_soft};
  }
};

struct TrnOutputs {
  Var logits;
  Var q;
  Var q_soft;
  // Train mode only; computed from detached subregion predictions.
  std::vector<double> w_au;
  std::vector<double> beta;
};

struct ForwardResult {
  std::optional<PinOutputs> pin;
  TrnOutputs trn;
};

enum class Mode { Train, Infer };

struct ForwardOptions {
  double T = 3.0;
  std::size_t L_sub = 9;
  bool with_pin = true;   // train mode only; false runs the target network alone
  bool with_gate = true;  // gate and intermediate prediction
  bool uem_class_mean = false;
};

/// Parameters and forward graph of the two-network model. The prior
/// inference network (PIN) only exists in train mode; inference reads the
/// shared extractor and the target recognition network (TRN) alone.
class PoiModel {
 public:
  PoiModel(ModelConfig cfg, const AUPriorTable& table, std::uint64_t seed)
      : cfg_(std::move(cfg)),
        classes_(table.num_classes()),
        m_upper_(table.num_aus(Region::Eye)),
        m_lower_(table.num_aus(Region::Mouth)),
        seed_(seed) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const auto& bb = cfg_.backbone;
    std::size_t ch = bb.in_channels;
    for (std::size_t s = 0; s < bb.stem.size(); ++s) {
      const std::size_t co = bb.stem[s].channels;
      if (s < bb.shared_depth) {
        shared_stem_.push_back(conv_params("stem." + std::to_string(s), ParamGroup::Shared, ch, co, rng));
      } else {
        pin_stem_.push_back(conv_params("pin.stem." + std::to_string(s), ParamGroup::Pin, ch, co, rng));
        trn_stem_.push_back(conv_params("trn.stem." + std::to_string(s), ParamGroup::Trn, ch, co, rng));
      }
      ch = co;
    }
    const std::size_t R = bb.R();
    branches_[0] = branch_params("pin.upper", R, table, Region::Eye, rng);
    branches_[1] = branch_params("pin.lower", R, table, Region::Mouth, rng);
    for (std::size_t n = 0; n < kNumSubregions; ++n) {
      const std::size_t in = (n < 2 ? m_upper_ : m_lower_) * cfg_.au_reduced;
      heads_[n] = linear_params("pin.head" + std::to_string(n), ParamGroup::Pin, in, classes_, rng);
    }
    const std::size_t gate_in = 2 * (m_upper_ + m_lower_) * cfg_.au_reduced;
    gate_ = linear_params("pin.gate", ParamGroup::Pin, gate_in, kNumSubregions, rng);
    trn_conv_ = conv_params("trn.conv", ParamGroup::Trn, R, cfg_.trn_feature, rng);
    trn_fc_ = linear_params("trn.fc", ParamGroup::Trn, cfg_.trn_feature, classes_, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  std::size_t num_classes() const { return classes_; }
  std::uint64_t seed() const { return seed_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// Shared stem stages. With the default full sharing this is g.
  Var extract_features(Tape& t, Var images) const {
    const auto& bb = cfg_.backbone;
    if (images.shape().size() != 4 || images.dim(1) != bb.in_channels || images.dim(2) != bb.in_size ||
        images.dim(3) != bb.in_size) {
      throw DimensionError("extract_features: expected Bx" + std::to_string(bb.in_channels) + "x" +
                           std::to_string(bb.in_size) + "x" + std::to_string(bb.in_size) + " images, got " +
                           to_string(images.shape()));
    }
    Var x = images;
    for (std::size_t s = 0; s < shared_stem_.size(); ++s) x = stage(t, x, shared_stem_[s], bb.stem[s].pool);
    return x;
  }

  Var pin_features(Tape& t, Var shared) const { return tail(t, shared, pin_stem_); }
  Var trn_features(Tape& t, Var shared) const { return tail(t, shared, trn_stem_); }

  /// conv3x3 -> relu -> GAP over both subregions of one branch; the two
  /// share the branch parameters. Returns 2B x shallow, left rows first.
  Var prior_branch(Tape& t, Var left, Var right_flipped, Region branch) const {
    const BranchParams& bp = branches_[branch == Region::Eye ? 0 : 1];
    Var x = concat_rows({left, right_flipped});
    Var h = relu(conv2d_3x3(x, params_.use(t, bp.conv.weight), params_.use(t, bp.conv.bias)));
    return global_avg_pool(h);
  }

  AuNetOutputs au_nets(Tape& t, Var F, Region branch) const {
    const BranchParams& bp = branches_[branch == Region::Eye ? 0 : 1];
    AuNetOutputs out;
    for (const AuNetParams& au : bp.aus) {
      Var latent = lin(t, F, au.latent);
      Var attn = sigmoid(lin(t, latent, au.attention));
      Var weighted = scale_rows(latent, attn);
      out.latent.push_back(latent);
      out.attention.push_back(attn);
      out.weighted.push_back(weighted);
      out.reduced.push_back(lin(t, weighted, au.reduce));
      out.occurrence.push_back(sigmoid(lin(t, weighted, au.occurrence)));
    }
    out.features = concat_cols(out.reduced);
    out.probs = concat_cols(out.occurrence);
    return out;
  }

  HeadOutputs subregion_emotion_head(Tape& t, Var i_au, std::size_t n, double T) const {
    HeadOutputs h;
    h.logits = lin(t, i_au, heads_.at(n));
    h.p = softmax_t(h.logits, 1.0);
    h.p_soft = softmax_t(h.logits, T);
    return h;
  }

  /// Subregion weights from the concatenated AU features.
  Var gate(Tape& t, Var all_features) const { return softmax_t(lin(t, all_features, gate_), 1.0); }

  HeadOutputs trn_head(Tape& t, Var g, double T) const {
    Var h = relu(conv2d_3x3(g, params_.use(t, trn_conv_.weight), params_.use(t, trn_conv_.bias)));
    HeadOutputs out;
    out.logits = lin(t, global_avg_pool(h), trn_fc_);
    out.p = softmax_t(out.logits, 1.0);
    out.p_soft = softmax_t(out.logits, T);
    return out;
  }

  ForwardResult poi_forward(Tape& t, const Tensor& images, Mode mode, const ForwardOptions& opt) const {
    Var x = t.constant(images);
    Var shared = extract_features(t, x);

    ForwardResult r;
    if (mode == Mode::Train && opt.with_pin) r.pin = run_pin(t, pin_features(t, shared), opt);

    const HeadOutputs th = trn_head(t, trn_features(t, shared), opt.T);
    r.trn.logits = th.logits;
    r.trn.q = th.p;
    r.trn.q_soft = th.p_soft;
    if (r.pin) {
      std::vector<Var> ps;
      for (const Var& p : r.pin->p_soft()) ps.push_back(detach(p));
      r.trn.w_au = uncertainty(ps, opt.uem_class_mean);
      r.trn.beta = beta(r.trn.w_au);
    }
    return r;
  }

  std::size_t upper_aus() const { return m_upper_; }
  std::size_t lower_aus() const { return m_lower_; }

 private:
  struct LinearParams {
    ParamStore::Handle weight = 0, bias = 0;
  };
  struct AuNetParams {
    LinearParams latent, attention, reduce, occurrence;
  };
  struct BranchParams {
    LinearParams conv;
    std::vector<AuNetParams> aus;
  };

  LinearParams conv_params(const std::string& name, ParamGroup g, std::size_t ci, std::size_t co,
                           std::mt19937_64& rng) {
    LinearParams p;
    p.weight = params_.add_glorot(name + ".weight", g, {co, ci, 3, 3}, ci * 9, co * 9, rng);
    p.bias = params_.add_zeros(name + ".bias", g, {co});
    return p;
  }

  LinearParams linear_params(const std::string& name, ParamGroup g, std::size_t in, std::size_t out,
                             std::mt19937_64& rng) {
    LinearParams p;
    p.weight = params_.add_glorot(name + ".weight", g, {out, in}, in, out, rng);
    p.bias = params_.add_zeros(name + ".bias", g, {out});
    return p;
  }

  BranchParams branch_params(const std::string& name, std::size_t R, const AUPriorTable& table, Region region,
                             std::mt19937_64& rng) {
    BranchParams bp;
    bp.conv = conv_params(name + ".conv", ParamGroup::Pin, R, cfg_.shallow, rng);
    for (int au : table.au_order(region)) {
      const std::string base = name + ".au" + std::to_string(au);
      AuNetParams a;
      a.latent = linear_params(base + ".latent", ParamGroup::Pin, cfg_.shallow, cfg_.au_latent, rng);
      a.attention = linear_params(base + ".attention", ParamGroup::Pin, cfg_.au_latent,
                                  cfg_.per_dim_attention ? cfg_.au_latent : 1, rng);
      a.reduce = linear_params(base + ".reduce", ParamGroup::Pin, cfg_.au_latent, cfg_.au_reduced, rng);
      a.occurrence = linear_params(base + ".occurrence", ParamGroup::Pin, cfg_.au_latent, 1, rng);
      bp.aus.push_back(a);
    }
    return bp;
  }

  Var lin(Tape& t, Var x, const LinearParams& p) const {
    return linear(x, params_.use(t, p.weight), params_.use(t, p.bias));
  }

  Var stage(Tape& t, Var x, const LinearParams& p, std::size_t pool) const {
    return avg_pool2d(relu(conv2d_3x3(x, params_.use(t, p.weight), params_.use(t, p.bias))), pool);
  }

  Var tail(Tape& t, Var x, const std::vector<LinearParams>& stages) const {
    const std::size_t first = cfg_.backbone.shared_depth;
    for (std::size_t s = 0; s < stages.size(); ++s) x = stage(t, x, stages[s], cfg_.backbone.stem[first + s].pool);
    return x;
  }

  PinOutputs run_pin(Tape& t, Var g, const ForwardOptions& opt) const {
    const std::size_t B = g.dim(0);
    const SubregionBundle bundle = extract_subregions(g, opt.L_sub);
    PinOutputs out;
    out.upper = au_nets(t, prior_branch(t, bundle.left_eye(), bundle.right_eye_flipped(), Region::Eye), Region::Eye);
    out.lower =
        au_nets(t, prior_branch(t, bundle.left_mouth(), bundle.right_mouth_flipped(), Region::Mouth), Region::Mouth);
    out.features[0] = slice_rows(out.upper.features, 0, B);
    out.features[1] = slice_rows(out.upper.features, B, 2 * B);
    out.features[2] = slice_rows(out.lower.features, 0, B);
    out.features[3] = slice_rows(out.lower.features, B, 2 * B);
    for (std::size_t n = 0; n < kNumSubregions; ++n) out.heads[n] = subregion_emotion_head(t, out.features[n], n, opt.T);
    if (opt.with_gate) {
      out.gate_w = gate(t, concat_cols(out.features));
      const auto ps = out.p_soft();
      out.p_star = intermediate_prediction(*out.gate_w, ps);
    }
    return out;
  }

  ModelConfig cfg_;
  std::size_t classes_;
  std::size_t m_upper_;
  std::size_t m_lower_;
  std::uint64_t seed_;
  ParamStore params_;
  std::vector<LinearParams> shared_stem_, pin_stem_, trn_stem_;
  std::array<BranchParams, 2> branches_;
  std::array<LinearParams, kNumSubregions> heads_;
  LinearParams gate_;
  LinearParams trn_conv_, trn_fc_;
};

}  // namespace poi
