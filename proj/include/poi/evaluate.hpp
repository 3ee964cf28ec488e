#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "poi/dataset.hpp"
#include "poi/model.hpp"

namespace poi {

struct Metrics {
  double accuracy = 0.0;
  std::vector<double> per_class;               // NaN for classes absent from the set
  std::vector<std::vector<double>> confusion;  // rows = true class, row-normalised
  std::vector<std::size_t> class_counts;
};

/// Accuracy, per-class accuracy and a row-normalised confusion matrix.
inline Metrics compute_metrics(std::span<const std::size_t> predicted, std::span<const std::size_t> truth,
                               std::size_t classes) {
  if (truth.empty()) throw ContractError("compute_metrics: empty sample set");
  if (predicted.size() != truth.size()) throw DimensionError("compute_metrics: prediction count mismatch");
  Metrics m;
  m.confusion.assign(classes, std::vector<double>(classes, 0.0));
  m.class_counts.assign(classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= classes || predicted[i] >= classes) throw ContractError("compute_metrics: class out of range");
    m.confusion[truth[i]][predicted[i]] += 1.0;
    ++m.class_counts[truth[i]];
    if (truth[i] == predicted[i]) ++correct;
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());
  m.per_class.assign(classes, std::nan(""));
  for (std::size_t c = 0; c < classes; ++c) {
    if (!m.class_counts[c]) continue;
    const double n = static_cast<double>(m.class_counts[c]);
    m.per_class[c] = m.confusion[c][c] / n;
    for (double& v : m.confusion[c]) v /= n;
  }
  return m;
}

inline std::size_t argmax_row(std::span<const double> v, std::size_t row, std::size_t C) {
  const auto* p = v.data() + row * C;
  return static_cast<std::size_t>(std::max_element(p, p + C) - p);
}

inline std::vector<std::size_t> clean_labels(const std::vector<Sample>& samples) {
  std::vector<std::size_t> out;
  out.reserve(samples.size());
  for (const Sample& s : samples) out.push_back(s.clean_label);
  return out;
}

/// Target-network predictions in inference mode (no PIN computation).
inline std::vector<std::size_t> predict(const PoiModel& model, const std::vector<Sample>& samples,
                                        const ForwardOptions& opt, std::size_t batch = 64) {
  std::vector<std::size_t> out;
  const std::size_t C = model.num_classes();
  const std::size_t size = model.config().backbone.in_size;
  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t start = 0; start < samples.size(); start += batch) {
    const std::span<const std::size_t> part(idx.data() + start, std::min(batch, samples.size() - start));
    Tape tape;
    const ForwardResult fr = model.poi_forward(tape, make_batch(samples, part, size), Mode::Infer, opt);
    for (std::size_t i = 0; i < part.size(); ++i) out.push_back(argmax_row(fr.trn.q.value(), i, C));
  }
  return out;
}

/// Per-sample outputs of a train-mode forward, used for diagnostics only.
struct Diagnostics {
  std::vector<std::size_t> trn;        // argmax q
  std::vector<std::size_t> p_star;     // argmax of the intermediate prediction
  std::vector<std::size_t> p_avg;      // argmax of the mean tempered subregion prediction
  std::vector<double> w_au;
  std::vector<std::vector<double>> gate;  // per-sample subregion weights
};

inline Diagnostics diagnose(const PoiModel& model, const std::vector<Sample>& samples, ForwardOptions opt,
                            std::size_t batch = 64) {
  opt.with_pin = true;
  Diagnostics d;
  const std::size_t C = model.num_classes();
  const std::size_t size = model.config().backbone.in_size;
  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t start = 0; start < samples.size(); start += batch) {
    const std::span<const std::size_t> part(idx.data() + start, std::min(batch, samples.size() - start));
    Tape tape;
    const ForwardResult fr = model.poi_forward(tape, make_batch(samples, part, size), Mode::Train, opt);
    const PinOutputs& pin = *fr.pin;
    const auto ps = pin.p_soft();
    for (std::size_t i = 0; i < part.size(); ++i) {
      d.trn.push_back(argmax_row(fr.trn.q.value(), i, C));
      std::vector<double> avg(C, 0.0);
      for (const Var& p : ps)
        for (std::size_t c = 0; c < C; ++c) avg[c] += p.value()[i * C + c] / static_cast<double>(ps.size());
      d.p_avg.push_back(argmax_row(avg, 0, C));
      if (pin.p_star) {
        d.p_star.push_back(argmax_row(pin.p_star->value(), i, C));
        const auto w = pin.gate_w->value();
        d.gate.emplace_back(w.begin() + i * kNumSubregions, w.begin() + (i + 1) * kNumSubregions);
      } else {
        d.p_star.push_back(d.p_avg.back());
        d.gate.emplace_back(kNumSubregions, 1.0 / kNumSubregions);
      }
    }
    d.w_au.insert(d.w_au.end(), fr.trn.w_au.begin(), fr.trn.w_au.end());
  }
  return d;
}

struct Evaluation {
  Metrics metrics;
  double mean_w_au = 0.0;
};

inline Evaluation evaluate(const PoiModel& model, const std::vector<Sample>& samples, const ForwardOptions& opt) {
  if (samples.empty()) throw ContractError("evaluate: empty sample set");
  Evaluation e;
  const auto truth = clean_labels(samples);
  e.metrics = compute_metrics(predict(model, samples, opt), truth, model.num_classes());
  const Diagnostics d = diagnose(model, samples, opt);
  e.mean_w_au = std::accumulate(d.w_au.begin(), d.w_au.end(), 0.0) / static_cast<double>(d.w_au.size());
  return e;
}

struct Stratum {
  double fraction = 0.0;
  std::size_t top_count = 0;
  std::size_t bottom_count = 0;
  double top_accuracy = 0.0;
  double bottom_accuracy = 0.0;
};

/// Orders samples by confidence (descending, ties by original index) and
/// scores the most and least confident fractions. The top-f slice holds
/// round(f N) samples and the bottom-g slice N - round((1 - g) N), so top-f
/// and bottom-(1 - f) partition the set.
inline std::vector<Stratum> stratify_by_confidence(std::span<const double> w_au, const std::vector<bool>& correct,
                                                   std::span<const double> fractions) {
  const std::size_t N = w_au.size();
  if (N == 0 || correct.size() != N) throw ContractError("stratify: need one correctness flag per sample");
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return w_au[a] > w_au[b]; });
  auto acc = [&](std::size_t from, std::size_t to) {
    if (from >= to) return std::nan("");
    std::size_t c = 0;
    for (std::size_t k = from; k < to; ++k) c += correct[order[k]] ? 1 : 0;
    return static_cast<double>(c) / static_cast<double>(to - from);
  };
  const auto count = [N](double f) {
    return static_cast<std::size_t>(std::llround(f * static_cast<double>(N)));
  };
  std::vector<Stratum> out;
  for (double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw ContractError("stratify: fractions must lie in (0, 1]");
    Stratum s;
    s.fraction = f;
    s.top_count = count(f);
    s.bottom_count = N - count(1.0 - f);
    s.top_accuracy = acc(0, s.top_count);
    s.bottom_accuracy = acc(N - s.bottom_count, N);
    out.push_back(s);
  }
  return out;
}

struct Histogram {
  double lo = 0.0;
  double hi = 1.0;
  std::vector<std::size_t> counts;
};

/// Equal-width histogram of confidences over [1/C, 1]; values outside are
/// clipped into the end bins.
inline Histogram uncertainty_histogram(std::span<const double> w_au, std::size_t classes, std::size_t bins) {
  if (bins < 2) throw ContractError("histogram: need at least two bins");
  Histogram h;
  h.lo = 1.0 / static_cast<double>(classes);
  h.hi = 1.0;
  h.counts.assign(bins, 0);
  const double width = (h.hi - h.lo) / static_cast<double>(bins);
  for (double w : w_au) {
    auto b = static_cast<long long>(std::floor((w - h.lo) / width));
    b = std::clamp<long long>(b, 0, static_cast<long long>(bins) - 1);
    ++h.counts[static_cast<std::size_t>(b)];
  }
  return h;
}

struct HeadComparison {
  double intermediate = 0.0;  // argmax of the gated intermediate prediction
  double average = 0.0;       // argmax of the mean subregion prediction
  double target = 0.0;        // argmax of the target network
};

inline HeadComparison compare_heads(const Diagnostics& d, std::span<const std::size_t> truth) {
  auto acc = [&](const std::vector<std::size_t>& pred) {
    std::size_t c = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) c += pred[i] == truth[i] ? 1 : 0;
    return static_cast<double>(c) / static_cast<double>(truth.size());
  };
  if (truth.empty() || d.trn.size() != truth.size()) throw ContractError("compare_heads: size mismatch");
  return {acc(d.p_star), acc(d.p_avg), acc(d.trn)};
}

}  // namespace poi
