#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "poi/checkpoint.hpp"
#include "poi/config.hpp"
#include "poi/dataset.hpp"
#include "poi/evaluate.hpp"
#include "poi/gradcheck.hpp"
#include "poi/prior.hpp"
#include "poi/train.hpp"

namespace poi {

/// The default table (with Contempt for 8 classes, truncated below 7) unless
/// DataSpec::prior_table names a JSON table file.
inline AUPriorTable load_table(const DataSpec& data) {
  AUPriorTable table = [&] {
    if (data.prior_table.empty()) {
      if (data.classes < 7) return AUPriorTable::default_table().leading(data.classes);
      return AUPriorTable::default_table(data.classes == 8);
    }
    std::ifstream is(data.prior_table);
    if (!is) throw ConfigError("data.prior_table: cannot open " + data.prior_table);
    try {
      return AUPriorTable::from_json(nlohmann::json::parse(is));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("data.prior_table: " + std::string(e.what()));
    }
  }();
  if (table.num_classes() != data.classes)
    throw ConfigError("data.classes is " + std::to_string(data.classes) + " but the prior table has " +
                      std::to_string(table.num_classes()) + " expressions");
  return table;
}

struct Splits {
  std::vector<Sample> train;
  std::vector<Sample> test;
};

/// Train split with label noise at hp.noise_ratio, clean test split.
inline Splits make_splits(const RunConfig& cfg, const AUPriorTable& table) {
  Splits s;
  const std::uint64_t seed = cfg.hp.seed;
  s.train = inject_label_noise(generate_dataset(cfg.data, table, derive_seed(seed, kTrainData),
                                                cfg.data.samples_per_class),
                               cfg.hp.noise_ratio, table.num_classes(), derive_seed(seed, kNoise));
  s.test = generate_dataset(cfg.data, table, derive_seed(seed, kTestData), cfg.data.test_per_class);
  return s;
}

struct RunResult {
  Metrics metrics;
  double mean_w_au = 0.0;
  std::vector<double> w_au;          // per test sample, train-mode diagnostic forward
  std::vector<bool> correct;         // per test sample, infer-mode prediction vs clean label
  HeadComparison heads;
};

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

inline nlohmann::json metrics_json(const Metrics& m, const AUPriorTable& table) {
  nlohmann::json per_class = nlohmann::json::object();
  for (std::size_t c = 0; c < m.per_class.size(); ++c)
    per_class[table.expressions()[c]] = std::isnan(m.per_class[c]) ? nlohmann::json(nullptr) : nlohmann::json(m.per_class[c]);
  return {{"accuracy", m.accuracy}, {"per_class_accuracy", per_class}, {"confusion", m.confusion}};
}

inline nlohmann::json result_json(const RunResult& r, const AUPriorTable& table) {
  nlohmann::json m = metrics_json(r.metrics, table);
  m["mean_w_au"] = r.mean_w_au;
  m["heads"] = {{"intermediate", r.heads.intermediate}, {"average", r.heads.average}, {"target", r.heads.target}};
  return m;
}

inline void write_confusion_csv(const std::filesystem::path& path, const Metrics& m, const AUPriorTable& table) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  const auto& names = table.expressions();
  for (std::size_t c = 0; c < names.size(); ++c) os << (c ? "," : "") << names[c];
  os << '\n';
  char buf[32];
  for (const auto& row : m.confusion) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      std::snprintf(buf, sizeof buf, "%.6f", row[c]);
      os << (c ? "," : "") << buf;
    }
    os << '\n';
  }
}

/// Scores a trained model on the test split: infer-mode accuracy plus the
/// train-mode diagnostics (confidence and head comparison).
inline RunResult score(const PoiModel& model, const RunConfig& cfg, const std::vector<Sample>& test) {
  RunResult r;
  const ForwardOptions opt = forward_options(cfg);
  const auto truth = clean_labels(test);
  const auto pred = predict(model, test, opt);
  r.metrics = compute_metrics(pred, truth, model.num_classes());
  const Diagnostics d = diagnose(model, test, opt);
  r.w_au = d.w_au;
  for (std::size_t i = 0; i < truth.size(); ++i) r.correct.push_back(pred[i] == truth[i]);
  r.mean_w_au = std::accumulate(d.w_au.begin(), d.w_au.end(), 0.0) / static_cast<double>(d.w_au.size());
  r.heads = compare_heads(d, truth);
  return r;
}

/// Full run: data, training, checkpoint and reports. With an empty `out`
/// nothing is written to disk.
inline RunResult run_training(const RunConfig& cfg, const std::filesystem::path& out = {}) {
  cfg.validate();
  const AUPriorTable table = load_table(cfg.data);
  const Splits splits = make_splits(cfg, table);
  std::ofstream steps;
  if (!out.empty()) {
    std::filesystem::create_directories(out);
    write_json(out / "config.json", cfg.to_json());
    steps.open(out / "steps.jsonl");
    if (!steps) throw IoError("cannot write " + (out / "steps.jsonl").string());
  }
  StepSink sink;
  if (steps.is_open()) sink = [&](const StepLog& s) { steps << to_json(s).dump() << '\n'; };
  const PoiModel model = train(cfg, table, splits.train, sink);
  RunResult r = score(model, cfg, splits.test);
  if (!out.empty()) {
    save_checkpoint(out / "checkpoint", model, cfg, table);
    write_json(out / "metrics.json", result_json(r, table));
    write_confusion_csv(out / "confusion.csv", r.metrics, table);
  }
  return r;
}

/// Finite-difference check of the training loss over every model parameter
/// on a two-sample batch. `with_gate_term` selects the objective including
/// the gate CE instead of the lambda-weighted total alone.
inline GradCheckResult model_grad_check(const RunConfig& cfg, bool with_gate_term = true, double h = 1e-5) {
  cfg.validate();
  const AUPriorTable table = load_table(cfg.data);
  PoiModel model(cfg.model, table, derive_seed(cfg.hp.seed, kInit));
  const auto samples = generate_dataset(cfg.data, table, derive_seed(cfg.hp.seed, kTrainData), 1);
  if (samples.size() < 2) throw ContractError("gradient check needs at least two classes");
  const std::vector<std::size_t> idx{0, samples.size() - 1};
  const std::vector<std::size_t> labels{samples[idx[0]].label, samples[idx[1]].label};
  const Tensor images = make_batch(samples, idx, cfg.data.image_size);

  StopGradientMemo memo;
  bool captured = false;
  const auto f = [&](Tape& t) {
    if (captured) memo.rewind();
    captured = true;
    t.set_memo(&memo);
    const ForwardResult fr = model.poi_forward(t, images, Mode::Train, forward_options(cfg));
    const Objective o = total_loss(t, fr, labels, table, cfg.hp, cfg.flags);
    return with_gate_term ? o.objective : o.total;
  };
  std::vector<Tensor*> params;
  for (Param& p : model.params()) params.push_back(&p.value);
  return grad_check(f, params, h);
}

}  // namespace poi
