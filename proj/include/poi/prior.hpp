#pragma once

#include <algorithm>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "poi/tensor.hpp"

namespace poi {

enum class Region { Eye, Mouth };

inline const char* to_string(Region r) { return r == Region::Eye ? "eye" : "mouth"; }

inline Region region_from_string(std::string_view s) {
  if (s == "eye") return Region::Eye;
  if (s == "mouth") return Region::Mouth;
  throw LookupError("unknown facial region '" + std::string(s) + "'");
}

/// Expression -> (region -> active AU set) lookup with fixed per-region AU
/// orderings. Pseudolabel vectors follow those orderings.
class AUPriorTable {
 public:
  AUPriorTable(std::vector<std::string> expressions, std::vector<int> eye_aus, std::vector<int> mouth_aus,
               std::vector<std::vector<int>> eye_active, std::vector<std::vector<int>> mouth_active)
      : expressions_(std::move(expressions)), orders_{std::move(eye_aus), std::move(mouth_aus)} {
    if (expressions_.empty()) throw ConfigError("AU prior table: no expressions");
    for (std::size_t i = 0; i < expressions_.size(); ++i)
      for (std::size_t j = 0; j < i; ++j)
        if (expressions_[i] == expressions_[j]) throw ConfigError("AU prior table: duplicate expression " + expressions_[i]);
    if (eye_active.size() != expressions_.size() || mouth_active.size() != expressions_.size()) {
      throw ConfigError("AU prior table: active sets must cover every expression");
    }
    for (int r = 0; r < 2; ++r) {
      auto& order = orders_[r];
      if (order.empty()) throw ConfigError(std::string("AU prior table: empty AU order for region ") + to_string(Region(r)));
      auto sorted = order;
      std::sort(sorted.begin(), sorted.end());
      if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw ConfigError("AU prior table: duplicate AU in region order");
      const auto& src = r == 0 ? eye_active : mouth_active;
      active_[r].assign(expressions_.size(), std::vector<bool>(order.size(), false));
      for (std::size_t c = 0; c < expressions_.size(); ++c) {
        for (int au : src[c]) {
          auto it = std::find(order.begin(), order.end(), au);
          if (it == order.end()) {
            throw ConfigError("AU prior table: AU" + std::to_string(au) + " of " + expressions_[c] +
                              " is not in the " + to_string(Region(r)) + " order");
          }
          active_[r][c][static_cast<std::size_t>(it - order.begin())] = true;
        }
      }
    }
  }

  /// AU-expression correlations for the basic expressions. Neutral has no
  /// active AUs; Contempt (8-class roster only) activates AU14 alone.
  static AUPriorTable default_table(bool with_contempt = false) {
    std::vector<std::string> names{"Surprise", "Fear", "Disgust", "Happy", "Sadness", "Anger", "Neutral"};
    std::vector<std::vector<int>> eye{{1, 2, 5}, {1, 4, 5}, {9}, {6}, {1, 4}, {4}, {}};
    std::vector<std::vector<int>> mouth{{26}, {26}, {10, 17}, {12, 26}, {15, 17}, {24}, {}};
    if (with_contempt) {
      names.push_back("Contempt");
      eye.push_back({});
      mouth.push_back({14});
    }
    return AUPriorTable(std::move(names), {1, 2, 4, 5, 6, 9}, {10, 12, 14, 15, 17, 24, 26}, std::move(eye),
                        std::move(mouth));
  }

  std::size_t num_classes() const { return expressions_.size(); }
  const std::vector<std::string>& expressions() const { return expressions_; }
  const std::vector<int>& au_order(Region r) const { return orders_[idx(r)]; }
  std::size_t num_aus(Region r) const { return orders_[idx(r)].size(); }

  std::size_t class_index(std::string_view name) const {
    auto it = std::find(expressions_.begin(), expressions_.end(), name);
    if (it == expressions_.end()) throw LookupError("unknown expression '" + std::string(name) + "'");
    return static_cast<std::size_t>(it - expressions_.begin());
  }

  bool is_active(std::size_t cls, Region r, std::size_t m) const { return active_[idx(r)].at(cls).at(m); }

  /// Active AU numbers for an expression, in region order.
  std::vector<int> active(std::size_t cls, Region r) const {
    check_class(cls);
    std::vector<int> out;
    const auto& order = orders_[idx(r)];
    for (std::size_t m = 0; m < order.size(); ++m)
      if (active_[idx(r)][cls][m]) out.push_back(order[m]);
    return out;
  }
  std::vector<int> active(std::string_view name, Region r) const { return active(class_index(name), r); }

  /// Smoothed AU targets: 1 - eps where the AU is active, eps elsewhere.
  std::vector<double> pseudolabels(std::size_t cls, Region r, double eps) const {
    check_class(cls);
    const auto& mask = active_[idx(r)][cls];
    std::vector<double> out(mask.size());
    for (std::size_t m = 0; m < mask.size(); ++m) out[m] = mask[m] ? 1.0 - eps : eps;
    return out;
  }
  std::vector<double> pseudolabels(std::string_view name, Region r, double eps) const {
    return pseudolabels(class_index(name), r, eps);
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["expressions"] = expressions_;
    j["eye_au_order"] = orders_[0];
    j["mouth_au_order"] = orders_[1];
    nlohmann::json act = nlohmann::json::object();
    for (std::size_t c = 0; c < expressions_.size(); ++c) {
      act[expressions_[c]] = {{"eye", active(c, Region::Eye)}, {"mouth", active(c, Region::Mouth)}};
    }
    j["active"] = act;
    return j;
  }

  /// The first `n` expressions with their active sets; AU orders unchanged.
  AUPriorTable leading(std::size_t n) const {
    if (n == 0 || n > num_classes()) throw ConfigError("AU prior table: cannot take " + std::to_string(n) + " classes");
    std::vector<std::string> names(expressions_.begin(), expressions_.begin() + static_cast<std::ptrdiff_t>(n));
    std::vector<std::vector<int>> eye, mouth;
    for (std::size_t c = 0; c < n; ++c) {
      eye.push_back(active(c, Region::Eye));
      mouth.push_back(active(c, Region::Mouth));
    }
    return AUPriorTable(std::move(names), orders_[0], orders_[1], std::move(eye), std::move(mouth));
  }

  static AUPriorTable from_json(const nlohmann::json& j) {
    try {
      auto names = j.at("expressions").get<std::vector<std::string>>();
      std::vector<std::vector<int>> eye, mouth;
      const auto& act = j.at("active");
      for (const auto& n : names) {
        if (!act.contains(n)) {
          eye.emplace_back();
          mouth.emplace_back();
          continue;
        }
        eye.push_back(act.at(n).value("eye", std::vector<int>{}));
        mouth.push_back(act.at(n).value("mouth", std::vector<int>{}));
      }
      return AUPriorTable(std::move(names), j.at("eye_au_order").get<std::vector<int>>(),
                          j.at("mouth_au_order").get<std::vector<int>>(), std::move(eye), std::move(mouth));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("AU prior table: ") + e.what());
    }
  }

  friend bool operator==(const AUPriorTable&, const AUPriorTable&) = default;

 private:
  static std::size_t idx(Region r) { return r == Region::Eye ? 0 : 1; }
  void check_class(std::size_t cls) const {
    if (cls >= expressions_.size()) throw LookupError("class index " + std::to_string(cls) + " out of range");
  }

  std::vector<std::string> expressions_;
  std::vector<int> orders_[2];
  std::vector<std::vector<bool>> active_[2];
};

}  // namespace poi
