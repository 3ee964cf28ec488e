#include <gtest/gtest.h>

#include "support.hpp"

namespace poi {
namespace {

TEST(PriorTable, FixedOrders) {
  const AUPriorTable t = AUPriorTable::default_table();
  EXPECT_EQ(t.au_order(Region::Eye), (std::vector<int>{1, 2, 4, 5, 6, 9}));
  EXPECT_EQ(t.au_order(Region::Mouth), (std::vector<int>{10, 12, 14, 15, 17, 24, 26}));
  EXPECT_EQ(t.num_classes(), 7u);
  EXPECT_EQ(AUPriorTable::default_table(true).num_classes(), 8u);
}

TEST(PriorTable, ActiveSets) {
  const AUPriorTable t = AUPriorTable::default_table(true);
  EXPECT_EQ(t.active("Happy", Region::Eye), (std::vector<int>{6}));
  EXPECT_EQ(t.active("Happy", Region::Mouth), (std::vector<int>{12, 26}));
  EXPECT_EQ(t.active("Surprise", Region::Mouth), (std::vector<int>{26}));
  EXPECT_EQ(t.active("Fear", Region::Eye), (std::vector<int>{1, 4, 5}));
  EXPECT_EQ(t.active("Anger", Region::Mouth), (std::vector<int>{24}));
  EXPECT_EQ(t.active("Sadness", Region::Mouth), (std::vector<int>{15, 17}));
  EXPECT_EQ(t.active("Disgust", Region::Eye), (std::vector<int>{9}));
  EXPECT_TRUE(t.active("Neutral", Region::Eye).empty());
  EXPECT_TRUE(t.active("Neutral", Region::Mouth).empty());
  EXPECT_TRUE(t.active("Contempt", Region::Eye).empty());
  EXPECT_EQ(t.active("Contempt", Region::Mouth), (std::vector<int>{14}));
}

TEST(Pseudolabels, SmoothedVectors) {
  const AUPriorTable t = AUPriorTable::default_table();
  EXPECT_EQ(t.pseudolabels("Happy", Region::Eye, 0.1), (std::vector<double>{0.1, 0.1, 0.1, 0.1, 0.9, 0.1}));
  EXPECT_EQ(t.pseudolabels("Surprise", Region::Mouth, 0.1),
            (std::vector<double>{0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.9}));
  EXPECT_EQ(t.pseudolabels("Fear", Region::Eye, 0.0), (std::vector<double>{1, 0, 1, 1, 0, 0}));
}

TEST(Pseudolabels, ValuesAndCounts) {
  for (bool contempt : {false, true}) {
    const AUPriorTable t = AUPriorTable::default_table(contempt);
    for (std::size_t c = 0; c < t.num_classes(); ++c)
      for (Region r : {Region::Eye, Region::Mouth})
        for (double eps : {0.0, 0.05, 0.1, 0.3}) {
          const auto y = t.pseudolabels(c, r, eps);
          ASSERT_EQ(y.size(), t.num_aus(r));
          std::size_t high = 0;
          for (double v : y) {
            EXPECT_TRUE(v == eps || v == 1.0 - eps);
            if (v == 1.0 - eps && eps < 0.5) ++high;
          }
          EXPECT_EQ(high, t.active(c, r).size());
        }
  }
}

TEST(Pseudolabels, UnknownNamesAreLookupErrors) {
  const AUPriorTable t = AUPriorTable::default_table();
  EXPECT_THROW(t.pseudolabels("Contempt", Region::Eye, 0.1), LookupError);
  EXPECT_THROW(t.class_index("Joy"), LookupError);
  EXPECT_THROW(region_from_string("nose"), LookupError);
  EXPECT_EQ(region_from_string("mouth"), Region::Mouth);
}

TEST(PriorTable, JsonRoundTrip) {
  for (bool contempt : {false, true}) {
    const AUPriorTable t = AUPriorTable::default_table(contempt);
    const auto text = t.to_json().dump();
    const AUPriorTable back = AUPriorTable::from_json(nlohmann::json::parse(text));
    EXPECT_EQ(back, t);
    EXPECT_EQ(back.to_json().dump(), text);
  }
}

TEST(PriorTable, RejectsInvalidTables) {
  EXPECT_THROW(AUPriorTable({"A"}, {1, 2}, {10}, {{3}}, {{}}), ConfigError);
  EXPECT_THROW(AUPriorTable({"A", "B"}, {1}, {10}, {{1}}, {{}}), ConfigError);
  nlohmann::json j = AUPriorTable::default_table().to_json();
  j["active"]["Happy"]["eye"] = {7};
  EXPECT_THROW(AUPriorTable::from_json(j), ConfigError);
}

TEST(PriorTable, LeadingSubset) {
  const AUPriorTable t = AUPriorTable::default_table().leading(3);
  EXPECT_EQ(t.expressions(), (std::vector<std::string>{"Surprise", "Fear", "Disgust"}));
  EXPECT_EQ(t.active("Disgust", Region::Mouth), (std::vector<int>{10, 17}));
}

TEST(Config, DefaultsAndValidation) {
  RunConfig c;
  EXPECT_EQ(c.hp.T, 3.0);
  EXPECT_EQ(c.hp.epsilon, 0.1);
  EXPECT_EQ(c.hp.lambda1, 0.5);
  EXPECT_EQ(c.hp.lambda2, 0.5);
  EXPECT_EQ(c.hp.lambda3, 1.0);
  EXPECT_EQ(c.hp.momentum, 0.9);
  EXPECT_EQ(c.hp.weight_decay, 1e-4);
  EXPECT_EQ(c.L_sub(), 9u);
  c.hp.T = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RunConfig{};
  c.hp.epsilon = 0.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RunConfig{};
  c.hp.L_sub = 15;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RunConfig{};
  c.hp.noise_ratio = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, OverridesAndStrictParsing) {
  nlohmann::json j = nlohmann::json::object();
  RunConfig::apply_override(j, "hp.T=4.5");
  RunConfig::apply_override(j, "flags.kl_sign=printed");
  const RunConfig c = RunConfig::from_json(j);
  EXPECT_EQ(c.hp.T, 4.5);
  EXPECT_EQ(c.flags.kl_sign, KlSign::Printed);
  EXPECT_THROW(RunConfig::apply_override(j, "hp.temperature=2"), ConfigError);
  EXPECT_THROW(RunConfig::from_json(nlohmann::json{{"hp", {{"bogus", 1}}}}), ConfigError);
  const RunConfig again = RunConfig::from_json(nlohmann::json::parse(c.to_json().dump()));
  EXPECT_EQ(again.to_json(), c.to_json());
  EXPECT_EQ(again.hash(), c.hash());
}

TEST(Config, BaselineImpliesOtherAblations) {
  nlohmann::json j{{"flags", {{"baseline_only", true}}}};
  const RunConfig c = RunConfig::from_json(j);
  EXPECT_TRUE(c.flags.disable_pb);
  EXPECT_TRUE(c.flags.disable_inpre);
  EXPECT_TRUE(c.flags.disable_uem);
}

}  // namespace
}  // namespace poi
