#pragma once

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "poi/checkpoint.hpp"
#include "poi/run.hpp"

namespace poi::cli {

enum ExitCode : int { kOk = 0, kConfigError = 1, kRuntimeError = 2 };

struct Options {
  std::string command;
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  std::string checkpoint;
  std::string data;
  std::vector<double> fractions{0.3, 0.5, 0.7};
  std::size_t bins = 10;
  std::vector<std::string> grid;
  std::size_t jobs = 1;
};

/// Profile defaults, then POI_SEED, then the config file, then --set.
inline RunConfig resolve_config(const Options& o) {
  nlohmann::json j = nlohmann::json::object();
  if (!o.config.empty()) j = RunConfig::load(o.config).to_json();
  if (const char* env = std::getenv("POI_SEED"); env && !(j.contains("hp") && j["hp"].contains("seed"))) {
    char* end = nullptr;
    const unsigned long long seed = std::strtoull(env, &end, 10);
    if (end == env || *end) throw ConfigError("POI_SEED must be an unsigned integer, got '" + std::string(env) + "'");
    j["hp"]["seed"] = seed;
  }
  for (const std::string& s : o.overrides) RunConfig::apply_override(j, s);
  return RunConfig::from_json(j);
}

/// One sweep axis from "key=v1,v2,...". Values are JSON when they parse.
struct Axis {
  std::string key;
  std::vector<std::string> values;
};

inline Axis parse_axis(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size())
    throw ConfigError("grid axis '" + spec + "' is not key=v1,v2,...");
  Axis a{spec.substr(0, eq), {}};
  std::stringstream ss(spec.substr(eq + 1));
  for (std::string v; std::getline(ss, v, ',');) {
    if (v.empty()) throw ConfigError("grid axis '" + a.key + "' has an empty value");
    a.values.push_back(v);
  }
  return a;
}

struct Cell {
  std::string name;
  std::vector<std::string> assignments;
  RunConfig config;
};

/// Cartesian product of the axes, first axis varying slowest. Every cell
/// is validated before anything runs.
inline std::vector<Cell> expand_grid(const Options& o) {
  std::vector<Axis> axes;
  for (const std::string& g : o.grid) axes.push_back(parse_axis(g));
  if (axes.empty()) throw ConfigError("sweep needs at least one --grid axis");
  std::vector<std::vector<std::string>> combos{{}};
  for (const Axis& a : axes) {
    std::vector<std::vector<std::string>> next;
    for (const auto& c : combos)
      for (const std::string& v : a.values) {
        auto d = c;
        d.push_back(a.key + "=" + v);
        next.push_back(std::move(d));
      }
    combos = std::move(next);
  }
  std::vector<Cell> cells;
  for (std::size_t i = 0; i < combos.size(); ++i) {
    Options co = o;
    co.overrides.insert(co.overrides.end(), combos[i].begin(), combos[i].end());
    char name[32];
    std::snprintf(name, sizeof name, "cell_%03zu", i);
    cells.push_back({name, combos[i], resolve_config(co)});
  }
  return cells;
}

inline std::vector<Sample> load_samples(const Options& o, const RunConfig& cfg, const AUPriorTable& table) {
  if (o.data.empty()) return make_splits(cfg, table).test;
  DatasetFile f = read_dataset(o.data, table.num_aus(Region::Eye), table.num_aus(Region::Mouth));
  if (f.classes != table.num_classes() || f.height != cfg.data.image_size || f.width != cfg.data.image_size)
    throw DimensionError(o.data + " does not match the checkpoint's class count or image size");
  return std::move(f.samples);
}

inline std::filesystem::path out_dir(const Options& o) {
  std::filesystem::path p = o.out.empty() ? std::filesystem::path(".") : std::filesystem::path(o.out);
  std::filesystem::create_directories(p);
  return p;
}

inline int cmd_gen_data(const Options& o) {
  const RunConfig cfg = resolve_config(o);
  const AUPriorTable table = load_table(cfg.data);
  const Splits s = make_splits(cfg, table);
  const auto out = out_dir(o);
  write_json(out / "config.json", cfg.to_json());
  const std::size_t S = cfg.data.image_size;
  write_dataset((out / "train.bin").string(), s.train, table.num_classes(), S, S);
  write_dataset((out / "test.bin").string(), s.test, table.num_classes(), S, S);
  std::cout << "wrote " << s.train.size() << " train and " << s.test.size() << " test samples to " << out.string()
            << '\n';
  return kOk;
}

inline int cmd_train(const Options& o) {
  const RunConfig cfg = resolve_config(o);
  const auto out = out_dir(o);
  const RunResult r = run_training(cfg, out);
  std::printf("accuracy %.4f  mean w_au %.4f\n", r.metrics.accuracy, r.mean_w_au);
  return kOk;
}

inline LoadedCheckpoint require_checkpoint(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required for " + o.command);
  return load_checkpoint(o.checkpoint);
}

inline int cmd_eval(const Options& o) {
  LoadedCheckpoint ck = require_checkpoint(o);
  const auto samples = load_samples(o, ck.config, ck.table);
  const RunResult r = score(ck.model, ck.config, samples);
  const auto out = out_dir(o);
  write_json(out / "metrics.json", result_json(r, ck.table));
  write_confusion_csv(out / "confusion.csv", r.metrics, ck.table);
  std::printf("accuracy %.4f  mean w_au %.4f\n", r.metrics.accuracy, r.mean_w_au);
  return kOk;
}

inline int cmd_stratify(const Options& o) {
  LoadedCheckpoint ck = require_checkpoint(o);
  const auto samples = load_samples(o, ck.config, ck.table);
  const RunResult r = score(ck.model, ck.config, samples);
  const auto strata = stratify_by_confidence(r.w_au, r.correct, o.fractions);
  const auto out = out_dir(o);
  std::ofstream csv(out / "stratify.csv");
  if (!csv) throw IoError("cannot write stratify.csv");
  csv << "fraction,top_count,top_accuracy,bottom_count,bottom_accuracy\n";
  for (const Stratum& s : strata) {
    char line[160];
    std::snprintf(line, sizeof line, "%.4f,%zu,%.6f,%zu,%.6f\n", s.fraction, s.top_count, s.top_accuracy,
                  s.bottom_count, s.bottom_accuracy);
    csv << line;
    std::printf("%3.0f%%  top %.4f  bottom %.4f\n", 100.0 * s.fraction, s.top_accuracy, s.bottom_accuracy);
  }
  return kOk;
}

inline int cmd_histogram(const Options& o) {
  LoadedCheckpoint ck = require_checkpoint(o);
  const auto samples = load_samples(o, ck.config, ck.table);
  const Diagnostics d = diagnose(ck.model, samples, forward_options(ck.config));
  const Histogram h = uncertainty_histogram(d.w_au, ck.table.num_classes(), o.bins);
  const auto out = out_dir(o);
  std::ofstream csv(out / "histogram.csv");
  if (!csv) throw IoError("cannot write histogram.csv");
  csv << "lo,hi,count\n";
  const double width = (h.hi - h.lo) / static_cast<double>(h.counts.size());
  for (std::size_t b = 0; b < h.counts.size(); ++b) {
    char line[96];
    std::snprintf(line, sizeof line, "%.6f,%.6f,%zu\n", h.lo + width * static_cast<double>(b),
                  h.lo + width * static_cast<double>(b + 1), h.counts[b]);
    csv << line;
    std::fputs(line, stdout);
  }
  return kOk;
}

inline int cmd_compare_heads(const Options& o) {
  LoadedCheckpoint ck = require_checkpoint(o);
  const auto samples = load_samples(o, ck.config, ck.table);
  const Diagnostics d = diagnose(ck.model, samples, forward_options(ck.config));
  const HeadComparison c = compare_heads(d, clean_labels(samples));
  const auto out = out_dir(o);
  write_json(out / "heads.json", {{"intermediate", c.intermediate}, {"average", c.average}, {"target", c.target}});
  std::printf("intermediate %.4f  average %.4f  target %.4f\n", c.intermediate, c.average, c.target);
  return kOk;
}

inline int cmd_gradcheck(const Options& o) {
  Options tiny = o;
  if (o.config.empty()) tiny.overrides.insert(tiny.overrides.begin(), "profile=tiny");
  const RunConfig cfg = resolve_config(tiny);
  const GradCheckResult r = model_grad_check(cfg);
  std::printf("max relative error %.3e over %zu coordinates\n", r.max_rel_error, r.coordinates);
  if (!o.out.empty())
    write_json(out_dir(o) / "gradcheck.json",
               {{"max_rel_error", r.max_rel_error}, {"coordinates", r.coordinates}, {"config", cfg.to_json()}});
  return r.max_rel_error < 1e-5 ? kOk : kRuntimeError;
}

inline int cmd_sweep(const Options& o) {
  const std::vector<Cell> cells = expand_grid(o);
  const auto out = out_dir(o);
  std::vector<RunResult> results(cells.size());
  std::vector<std::string> errors(cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex log;
  auto worker = [&] {
    for (std::size_t i; (i = next++) < cells.size();) {
      try {
        results[i] = run_training(cells[i].config, out / cells[i].name);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
      std::lock_guard<std::mutex> lock(log);
      std::printf("%s %s\n", cells[i].name.c_str(), errors[i].empty() ? "done" : errors[i].c_str());
      std::fflush(stdout);
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(o.jobs, cells.size()));
  std::vector<std::thread> pool;
  for (std::size_t k = 1; k < n; ++k) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::ofstream csv(out / "summary.csv");
  if (!csv) throw IoError("cannot write summary.csv");
  csv << "cell";
  for (const std::string& a : o.grid) csv << ',' << a.substr(0, a.find('='));
  csv << ",accuracy,mean_w_au,status\n";
  bool failed = false;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    csv << cells[i].name;
    for (const std::string& a : cells[i].assignments) csv << ',' << a.substr(a.find('=') + 1);
    char nums[64];
    std::snprintf(nums, sizeof nums, ",%.6f,%.6f", results[i].metrics.accuracy, results[i].mean_w_au);
    csv << (errors[i].empty() ? nums : ",,") << ',' << (errors[i].empty() ? "ok" : "failed") << '\n';
    failed = failed || !errors[i].empty();
  }
  return failed ? kRuntimeError : kOk;
}

/// Parses argv and dispatches; never throws.
inline int run(int argc, char** argv) {
  CLI::App app{"Prior-based objective inference: training and evaluation"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON run configuration");
    sub->add_option("--set", o.overrides, "Override as dotted.key=value (repeatable)");
    sub->add_option("--out", o.out, "Output directory");
  };
  auto with_checkpoint = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
    sub->add_option("--data", o.data, "Dataset cache file (default: regenerate the test split)");
  };

  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen-data", "Generate and cache the train and test splits"},
      {"train", "Train a model and write checkpoint, logs and metrics"},
      {"eval", "Evaluate a checkpoint"},
      {"stratify", "Accuracy of the most and least confident test fractions"},
      {"histogram", "Histogram of per-sample confidence"},
      {"compare-heads", "Accuracy of the intermediate, averaged and target predictions"},
      {"gradcheck", "Finite-difference check of the training loss"},
      {"sweep", "Train every cell of a configuration grid"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    common(sub);
    if (name == "eval" || name == "stratify" || name == "histogram" || name == "compare-heads")
      with_checkpoint(sub);
    if (name == "stratify")
      sub->add_option("--fractions", o.fractions, "Stratum fractions in (0, 1]")->delimiter(',');
    if (name == "histogram") sub->add_option("--bins", o.bins, "Number of bins")->check(CLI::Range(2, 1000));
    if (name == "sweep") {
      sub->add_option("--grid", o.grid, "Axis as key=v1,v2,... (repeatable)")->required();
      sub->add_option("--jobs", o.jobs, "Concurrent cells")->check(CLI::PositiveNumber);
    }
    sub->callback([&o, name] { o.command = name; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    if (o.command == "gen-data") return cmd_gen_data(o);
    if (o.command == "train") return cmd_train(o);
    if (o.command == "eval") return cmd_eval(o);
    if (o.command == "stratify") return cmd_stratify(o);
    if (o.command == "histogram") return cmd_histogram(o);
    if (o.command == "compare-heads") return cmd_compare_heads(o);
    if (o.command == "gradcheck") return cmd_gradcheck(o);
    if (o.command == "sweep") return cmd_sweep(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kConfigError;
}

}  // namespace poi::cli
