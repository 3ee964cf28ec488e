#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "poi/tensor.hpp"

namespace poi {

/// Every scalar the training objective and schedule expose.
struct HyperParams {
  double T = 3.0;
  double epsilon = 0.1;
  double lambda1 = 0.5;
  double lambda2 = 0.5;
  double lambda3 = 1.0;
  // Weight of the auxiliary gate CE; it is the gate's only training signal
  // while the intermediate prediction is detached.
  double gate_weight = 0.5;
  // 0 selects 9 on a 14x14 map, scaled to the configured map side.
  std::size_t L_sub = 0;
  double lr = 0.05;
  std::size_t lr_drop_epoch = 20;
  double lr_drop_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double noise_ratio = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(T > 0.0)) throw ConfigError("hp.T must be > 0");
    if (!(epsilon >= 0.0 && epsilon < 0.5)) throw ConfigError("hp.epsilon must lie in [0, 0.5)");
    if (lambda1 < 0.0 || lambda2 < 0.0 || lambda3 < 0.0) throw ConfigError("hp.lambda1..3 must be >= 0");
    if (gate_weight < 0.0) throw ConfigError("hp.gate_weight must be >= 0");
    if (lr < 0.0) throw ConfigError("hp.lr must be >= 0");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("hp.momentum must lie in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("hp.weight_decay must be >= 0");
    if (batch_size == 0) throw ConfigError("hp.batch_size must be > 0");
    if (!(noise_ratio >= 0.0 && noise_ratio < 1.0)) throw ConfigError("hp.noise_ratio must lie in [0, 1)");
  }

  /// Subregion side for a feature map of side L.
  std::size_t subregion_size(std::size_t L) const {
    const std::size_t s = L_sub ? L_sub : static_cast<std::size_t>(std::lround(9.0 * static_cast<double>(L) / 14.0));
    return std::max<std::size_t>(1, s);
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(HyperParams, T, epsilon, lambda1, lambda2, lambda3, gate_weight, L_sub, lr,
                                   lr_drop_epoch, lr_drop_factor, momentum, weight_decay, epochs, batch_size,
                                   noise_ratio, seed)

/// conv3x3 -> relu -> avg_pool(pool)
struct StemStage {
  std::size_t channels = 8;
  std::size_t pool = 1;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(StemStage, channels, pool)

struct BackboneConfig {
  std::size_t in_channels = 1;
  std::size_t in_size = 56;
  std::vector<StemStage> stem{{8, 2}, {16, 2}, {32, 1}};
  // Stages [0, shared_depth) serve both networks; later stages are
  // duplicated per network.
  std::size_t shared_depth = 3;

  std::size_t R() const { return stem.empty() ? in_channels : stem.back().channels; }
  std::size_t L() const {
    std::size_t s = in_size;
    for (const auto& st : stem) s /= st.pool;
    return s;
  }

  void validate() const {
    if (in_channels == 0 || in_size == 0) throw ConfigError("model.backbone input must be non-empty");
    if (shared_depth > stem.size()) throw ConfigError("model.backbone.shared_depth exceeds stem depth");
    std::size_t s = in_size;
    for (const auto& st : stem) {
      if (st.channels == 0 || st.pool == 0) throw ConfigError("model.backbone.stem stages need channels, pool > 0");
      if (s % st.pool) throw ConfigError("model.backbone.stem pooling does not divide the map size");
      s /= st.pool;
    }
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(BackboneConfig, in_channels, in_size, stem, shared_depth)

struct ModelConfig {
  BackboneConfig backbone;
  std::size_t shallow = 128;
  std::size_t au_latent = 64;
  std::size_t au_reduced = 32;
  std::size_t trn_feature = 128;
  // One attention weight per latent dimension instead of one per AU.
  bool per_dim_attention = false;

  void validate() const {
    backbone.validate();
    if (!shallow || !au_latent || !au_reduced || !trn_feature) throw ConfigError("model widths must be > 0");
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ModelConfig, backbone, shallow, au_latent, au_reduced, trn_feature,
                                   per_dim_attention)

struct DataSpec {
  std::size_t classes = 7;  // 7 basic expressions, 8 adds Contempt
  std::string prior_table;  // optional JSON table path; empty = built-in
  std::size_t samples_per_class = 200;
  std::size_t test_per_class = 50;
  std::size_t image_size = 56;
  double ambiguity = 0.15;
  double pixel_noise = 0.25;
  std::size_t glyph_jitter = 1;
  double intensity_jitter = 0.2;
  bool augment = true;
  std::size_t translate = 2;

  void validate() const {
    if (classes < 2) throw ConfigError("data.classes must be >= 2");
    if (samples_per_class == 0) throw ConfigError("data.samples_per_class must be > 0");
    if (image_size < 8 || image_size % 2) throw ConfigError("data.image_size must be even and >= 8");
    if (!(ambiguity >= 0.0 && ambiguity <= 1.0)) throw ConfigError("data.ambiguity must lie in [0, 1]");
    if (pixel_noise < 0.0) throw ConfigError("data.pixel_noise must be >= 0");
    if (!(intensity_jitter >= 0.0 && intensity_jitter < 1.0)) throw ConfigError("data.intensity_jitter must lie in [0, 1)");
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(DataSpec, classes, prior_table, samples_per_class, test_per_class, image_size,
                                   ambiguity, pixel_noise, glyph_jitter, intensity_jitter, augment, translate)

enum class KlSign { Corrected, Printed };
NLOHMANN_JSON_SERIALIZE_ENUM(KlSign, {{KlSign::Corrected, "corrected"}, {KlSign::Printed, "printed"}})

struct Flags {
  bool disable_pb = false;     // no AU prior supervision
  bool disable_inpre = false;  // no gate, no intermediate prediction, no subregion KL
  bool disable_uem = false;    // beta fixed to 1
  bool baseline_only = false;  // target network with CE only
  KlSign kl_sign = KlSign::Corrected;
  bool temper_q = true;        // distil into the tempered target distribution
  bool detach_pstar = true;    // intermediate prediction is a fixed teacher
  bool uem_class_mean = false; // average (not sum) variance over classes

  void normalize() {
    if (baseline_only) disable_pb = disable_inpre = disable_uem = true;
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(Flags, disable_pb, disable_inpre, disable_uem, baseline_only, kl_sign, temper_q,
                                   detach_pstar, uem_class_mean)

struct RunConfig {
  std::string profile = "desk";
  HyperParams hp;
  DataSpec data;
  ModelConfig model;
  Flags flags;

  void validate() const {
    hp.validate();
    data.validate();
    model.validate();
    if (model.backbone.in_size != data.image_size) throw ConfigError("model.backbone.in_size must equal data.image_size");
    const std::size_t L = model.backbone.L();
    const std::size_t ls = hp.subregion_size(L);
    if (ls > L) throw ConfigError("hp.L_sub exceeds feature map side " + std::to_string(L));
  }

  std::size_t L_sub() const { return hp.subregion_size(model.backbone.L()); }

  /// Named starting points. "desk" is the default laptop-scale setup,
  /// "fast" a reduced variant for repeated multi-seed runs, "tiny" the
  /// gradient-check network and "full" the full-scale dimensions.
  static RunConfig from_profile(const std::string& name) {
    RunConfig c;
    c.profile = name;
    if (name == "desk") return c;
    if (name == "fast") {
      c.data.image_size = 32;
      c.data.samples_per_class = 100;
      c.data.test_per_class = 200;
      c.data.translate = 1;
      c.data.pixel_noise = 0.1;
      c.model.backbone.in_size = 32;
      c.model.backbone.stem = {{8, 2}, {16, 2}};
      c.model.backbone.shared_depth = 2;
      c.model.shallow = 24;
      c.model.au_latent = 16;
      c.model.au_reduced = 8;
      c.model.trn_feature = 24;
      c.hp.epochs = 20;
      c.hp.lr_drop_epoch = 14;
      return c;
    }
    if (name == "tiny") {
      c.data.classes = 3;
      c.data.image_size = 12;
      c.data.samples_per_class = 20;
      c.data.test_per_class = 10;
      c.data.augment = false;
      c.model.backbone.in_size = 12;
      c.model.backbone.stem = {{4, 2}};
      c.model.backbone.shared_depth = 1;
      c.model.shallow = 16;
      c.model.au_latent = 8;
      c.model.au_reduced = 4;
      c.model.trn_feature = 8;
      c.hp.L_sub = 4;
      c.hp.batch_size = 8;
      c.hp.epochs = 3;
      return c;
    }
    if (name == "full") {
      c.data.image_size = 224;
      c.model.backbone.in_size = 224;
      c.model.backbone.stem = {{64, 2}, {128, 2}, {256, 2}, {512, 2}};
      c.model.backbone.shared_depth = 4;
      c.model.shallow = 512;
      c.model.au_latent = 128;
      c.model.au_reduced = 64;
      c.model.trn_feature = 512;
      c.hp.batch_size = 256;
      c.hp.lr = 0.1;
      c.hp.epochs = 60;
      return c;
    }
    throw ConfigError("unknown profile '" + name + "'");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"profile", profile}, {"hp", hp}, {"data", data}, {"model", model}, {"flags", flags}};
  }

  /// Strict parse: the profile named in `j` (default "desk") supplies
  /// defaults and every key in `j` must exist in that layout.
  static RunConfig from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    const std::string prof = j.contains("profile") ? j.at("profile").get<std::string>() : "desk";
    nlohmann::json merged = from_profile(prof).to_json();
    reject_unknown(j, merged, "");
    merged.merge_patch(j);
    RunConfig c;
    try {
      c.profile = merged.at("profile").get<std::string>();
      c.hp = merged.at("hp").get<HyperParams>();
      c.data = merged.at("data").get<DataSpec>();
      c.model = merged.at("model").get<ModelConfig>();
      c.flags = merged.at("flags").get<Flags>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("invalid config value: ") + e.what());
    }
    if (merged.at("flags").at("kl_sign") != "corrected" && merged.at("flags").at("kl_sign") != "printed") {
      throw ConfigError("flags.kl_sign must be \"corrected\" or \"printed\"");
    }
    c.flags.normalize();
    c.validate();
    return c;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
    }
    return from_json(j);
  }

  /// Applies "dotted.path=value". The value is parsed as JSON when possible,
  /// otherwise taken as a string.
  static void apply_override(nlohmann::json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;

    const RunConfig base = from_profile(j.contains("profile") ? j.at("profile").get<std::string>() : "desk");
    const nlohmann::json layout = base.to_json();
    const nlohmann::json* shape = &layout;
    nlohmann::json* node = &j;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (!shape->is_object() || !shape->contains(part)) throw ConfigError("unknown config key '" + key + "'");
      shape = &(*shape)[part];
      if (dot == std::string::npos) {
        (*node)[part] = value;
        break;
      }
      if (!node->contains(part)) (*node)[part] = nlohmann::json::object();
      node = &(*node)[part];
      start = dot + 1;
    }
  }

  std::uint64_t hash() const {
    const std::string s = to_json().dump();
    std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
    for (unsigned char ch : s) {
      h ^= ch;
      h *= 1099511628211ULL;
    }
    return h;
  }

 private:
  static void reject_unknown(const nlohmann::json& j, const nlohmann::json& layout, const std::string& prefix) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
      if (!layout.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
      const auto& sub = layout.at(it.key());
      if (sub.is_object() && it.value().is_object()) reject_unknown(it.value(), sub, key);
    }
  }
};

}  // namespace poi
