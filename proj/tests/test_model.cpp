#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support.hpp"

namespace poi {
namespace {

using test::random_tensor;

void zero_params(PoiModel& model, const std::string& prefix) {
  for (Param& p : model.params())
    if (p.name.starts_with(prefix)) std::fill(p.value.data.begin(), p.value.data.end(), 0.0);
}

void expect_simplex(Var v, const char* what) {
  const std::size_t C = v.dim(1);
  const auto d = v.value();
  for (std::size_t i = 0; i < v.dim(0); ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      EXPECT_GT(d[i * C + c], 0.0) << what;
      s += d[i * C + c];
    }
    EXPECT_NEAR(s, 1.0, 1e-9) << what;
  }
}

std::size_t argmax(std::span<const double> v, std::size_t row, std::size_t C) {
  return static_cast<std::size_t>(std::max_element(v.begin() + row * C, v.begin() + (row + 1) * C) -
                                  (v.begin() + row * C));
}

struct Fixture {
  RunConfig cfg = test::tiny_config();
  AUPriorTable table = load_table(cfg.data);
  PoiModel model{cfg.model, table, 3};
  std::vector<Sample> samples = generate_dataset(cfg.data, table, 4, 1);
  Tensor images() const {
    const std::vector<std::size_t> idx{0, 1, 2};
    return make_batch(samples, idx, cfg.data.image_size);
  }
};

TEST(Backbone, DeskFeatureMapShape) {
  const RunConfig cfg;
  const AUPriorTable table = AUPriorTable::default_table();
  const PoiModel model(cfg.model, table, 1);
  Tape t;
  Var g = model.extract_features(t, t.constant(Tensor::zeros({1, 1, 56, 56})));
  EXPECT_EQ(g.shape(), (Shape{1, 32, 14, 14}));
  EXPECT_EQ(cfg.L_sub(), 9u);
  EXPECT_THROW(model.extract_features(t, t.constant(Tensor::zeros({1, 1, 32, 32}))), DimensionError);
}

TEST(Backbone, IdenticalImagesGiveIdenticalRows) {
  Fixture f;
  const std::vector<std::size_t> idx{1, 1};
  Tape t;
  Var g = f.model.extract_features(t, t.constant(make_batch(f.samples, idx, f.cfg.data.image_size)));
  const std::size_t n = g.size() / 2;
  for (std::size_t k = 0; k < n; ++k) EXPECT_EQ(g.value()[k], g.value()[n + k]);
}

TEST(Subregions, CornerMappingAndFlip) {
  const std::size_t L = 6, Ls = 4;
  std::vector<double> ramp(L * L);
  for (std::size_t k = 0; k < ramp.size(); ++k) ramp[k] = static_cast<double>(k);
  Tape t;
  const SubregionBundle b = extract_subregions(t.constant({1, 1, L, L}, ramp), Ls);
  for (std::size_t y = 0; y < Ls; ++y)
    for (std::size_t x = 0; x < Ls; ++x) {
      EXPECT_EQ(b.left_eye().value()[y * Ls + x], ramp[y * L + (L - Ls) + x]);
      EXPECT_EQ(b.right_eye_flipped().value()[y * Ls + x], ramp[y * L + (Ls - 1 - x)]);
      EXPECT_EQ(b.left_mouth().value()[y * Ls + x], ramp[(L - Ls + y) * L + (L - Ls) + x]);
      EXPECT_EQ(b.right_mouth_flipped().value()[y * Ls + x], ramp[(L - Ls + y) * L + (Ls - 1 - x)]);
    }
  EXPECT_THROW(extract_subregions(t.constant({1, 1, L, L}, ramp), L + 1), DimensionError);
}

TEST(Subregions, SymmetricInputGivesMatchingSides) {
  const std::size_t L = 7;
  std::mt19937_64 rng(11);
  Tensor g = random_tensor({2, 3, L, L}, rng, -1, 1, false);
  for (std::size_t p = 0; p < 6; ++p)
    for (std::size_t y = 0; y < L; ++y)
      for (std::size_t x = L / 2 + 1; x < L; ++x) g.data[(p * L + y) * L + x] = g.data[(p * L + y) * L + (L - 1 - x)];
  Tape t;
  const SubregionBundle b = extract_subregions(t.constant(g), 5);
  const auto a = b.left_eye().value(), c = b.right_eye_flipped().value();
  EXPECT_TRUE(std::equal(a.begin(), a.end(), c.begin(), c.end()));
  const auto m = b.left_mouth().value(), n = b.right_mouth_flipped().value();
  EXPECT_TRUE(std::equal(m.begin(), m.end(), n.begin(), n.end()));

  const SubregionBundle whole = extract_subregions(t.constant(g), L);
  const auto w = whole.left_eye().value();
  EXPECT_TRUE(std::equal(w.begin(), w.end(), g.data.begin(), g.data.end()));
}

TEST(PriorBranch, SharedWithinBranchIndependentAcross) {
  Fixture f;
  std::mt19937_64 rng(12);
  const Tensor x = random_tensor({1, f.cfg.model.backbone.stem.back().channels, 4, 4}, rng, 0, 1, false);
  Tape t;
  Var a = t.constant(x);
  Var up = f.model.prior_branch(t, a, a, Region::Eye);
  Var lo = f.model.prior_branch(t, a, a, Region::Mouth);
  ASSERT_EQ(up.shape(), (Shape{2, f.cfg.model.shallow}));
  const std::size_t D = f.cfg.model.shallow;
  bool differs = false;
  for (std::size_t k = 0; k < D; ++k) {
    EXPECT_EQ(up.value()[k], up.value()[D + k]);
    differs |= up.value()[k] != lo.value()[k];
  }
  EXPECT_TRUE(differs);
}

TEST(AuNets, DimensionsAndZeroHeads) {
  Fixture f;
  zero_params(f.model, "pin.upper.au");
  Tape t;
  Var F = t.constant(Tensor({2, f.cfg.model.shallow}, std::vector<double>(2 * f.cfg.model.shallow, 0.3)));
  const AuNetOutputs o = f.model.au_nets(t, F, Region::Eye);
  EXPECT_EQ(o.features.shape(), (Shape{2, 6 * f.cfg.model.au_reduced}));
  EXPECT_EQ(o.probs.shape(), (Shape{2, 6}));
  for (double p : o.probs.value()) EXPECT_EQ(p, 0.5);

  const RunConfig desk;
  EXPECT_EQ(6 * desk.model.au_reduced, 192u);
  EXPECT_EQ(7 * desk.model.au_reduced, 224u);
}

TEST(Heads, ZeroInitialisedHeadsAreUniform) {
  Fixture f;
  zero_params(f.model, "pin.head");
  zero_params(f.model, "pin.gate");
  zero_params(f.model, "trn.fc");
  Tape t;
  const ForwardResult r = f.model.poi_forward(t, f.images(), Mode::Train, forward_options(f.cfg));
  const double u = 1.0 / 3.0;
  for (const Var& p : r.pin->p())
    for (double v : p.value()) EXPECT_NEAR(v, u, 1e-15);
  for (double v : r.trn.q.value()) EXPECT_NEAR(v, u, 1e-15);
  for (double v : r.pin->gate_w->value()) EXPECT_NEAR(v, 0.25, 1e-15);
  for (double w : r.trn.w_au) EXPECT_NEAR(w, 1.0, 1e-12);
}

TEST(Heads, TemperatureKeepsArgmaxAndFlattens) {
  std::mt19937_64 rng(13);
  Tape t;
  const Var z = t.constant(random_tensor({4, 5}, rng, -3, 3, false));
  for (double T : {0.5, 1.0, 3.0, 50.0}) {
    Var p = softmax_t(z, 1.0), q = softmax_t(z, T);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(argmax(p.value(), i, 5), argmax(q.value(), i, 5));
  }
  for (double v : softmax_t(z, 1e6).value()) EXPECT_NEAR(v, 0.2, 1e-5);
}

TEST(Gate, MixingHandCases) {
  Tape t;
  Var w = t.constant({1, 4}, {0.5, 0.5, 0.0, 0.0});
  const std::vector<Var> ps{t.constant({1, 2}, {1, 0}), t.constant({1, 2}, {0, 1}), t.constant({1, 2}, {0.3, 0.7}),
                            t.constant({1, 2}, {0.9, 0.1})};
  Var m = intermediate_prediction(w, ps);
  EXPECT_EQ(m.value()[0], 0.5);
  EXPECT_EQ(m.value()[1], 0.5);
  Var one = intermediate_prediction(t.constant({1, 4}, {0, 0, 1, 0}), ps);
  EXPECT_EQ(one.value()[0], 0.3);
  const std::vector<Var> same(4, ps[2]);
  Var fixed = intermediate_prediction(t.constant({1, 4}, {0.1, 0.2, 0.3, 0.4}), same);
  EXPECT_NEAR(fixed.value()[0], 0.3, 1e-15);
  const std::vector<Var> single{ps[3]};
  Var w1 = softmax_t(t.constant({1, 1}, {0.7}), 1.0);
  EXPECT_EQ(w1.value()[0], 1.0);
  EXPECT_EQ(intermediate_prediction(w1, single).value()[0], 0.9);
}

TEST(Forward, AllDistributionsOnSimplex) {
  Fixture f;
  Tape t;
  const ForwardResult r = f.model.poi_forward(t, f.images(), Mode::Train, forward_options(f.cfg));
  ASSERT_TRUE(r.pin && r.pin->p_star && r.pin->gate_w);
  for (const Var& p : r.pin->p()) expect_simplex(p, "p");
  for (const Var& p : r.pin->p_soft()) expect_simplex(p, "p_soft");
  expect_simplex(*r.pin->p_star, "p_star");
  expect_simplex(*r.pin->gate_w, "gate");
  expect_simplex(r.trn.q, "q");
  expect_simplex(r.trn.q_soft, "q_soft");
  for (double w : r.trn.w_au) {
    EXPECT_GE(w, 1.0 / 3.0 - 1e-12);
    EXPECT_LE(w, 1.0);
  }
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(argmax(r.trn.q.value(), i, 3), argmax(r.trn.q_soft.value(), i, 3));
}

TEST(Forward, InferenceSkipsPriorNetworkAndMatchesTrainBitwise) {
  Fixture f;
  const Tensor x = f.images();
  Tape a, b;
  f.model.params().reset_reads();
  const ForwardResult inf = f.model.poi_forward(a, x, Mode::Infer, forward_options(f.cfg));
  EXPECT_EQ(f.model.params().reads(ParamGroup::Pin), 0u);
  EXPECT_GT(f.model.params().reads(ParamGroup::Trn), 0u);
  EXPECT_FALSE(inf.pin.has_value());
  EXPECT_TRUE(inf.trn.w_au.empty());
  const ForwardResult tr = f.model.poi_forward(b, x, Mode::Train, forward_options(f.cfg));
  EXPECT_GT(f.model.params().reads(ParamGroup::Pin), 0u);
  const auto qa = inf.trn.q.value(), qb = tr.trn.q.value();
  ASSERT_EQ(qa.size(), qb.size());
  for (std::size_t k = 0; k < qa.size(); ++k) EXPECT_EQ(std::bit_cast<std::uint64_t>(qa[k]), std::bit_cast<std::uint64_t>(qb[k]));
}

TEST(Forward, WithoutGateHasNoIntermediatePrediction) {
  Fixture f;
  f.cfg.flags.disable_inpre = true;
  Tape t;
  const ForwardResult r = f.model.poi_forward(t, f.images(), Mode::Train, forward_options(f.cfg));
  ASSERT_TRUE(r.pin.has_value());
  EXPECT_FALSE(r.pin->p_star.has_value());
  EXPECT_FALSE(r.pin->gate_w.has_value());
  EXPECT_EQ(r.trn.w_au.size(), 3u);
}

TEST(Params, GroupsAndDeterministicInit) {
  Fixture f;
  const PoiModel again(f.cfg.model, f.table, 3);
  const PoiModel other(f.cfg.model, f.table, 4);
  ASSERT_EQ(f.model.params().size(), again.params().size());
  bool differs = false;
  for (std::size_t k = 0; k < again.params().size(); ++k) {
    EXPECT_EQ(f.model.params()[k].value.data, again.params()[k].value.data);
    differs |= f.model.params()[k].value.data != other.params()[k].value.data;
  }
  EXPECT_TRUE(differs);
  EXPECT_GT(f.model.params().count(ParamGroup::Pin), 0u);
  EXPECT_GT(f.model.params().count(ParamGroup::Trn), 0u);
  EXPECT_GT(f.model.params().count(ParamGroup::Shared), 0u);
}

}  // namespace
}  // namespace poi
