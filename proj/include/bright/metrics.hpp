// Classification metrics: AUROC (rank statistic, ties count half), macro
// one-vs-rest AUROC, confusion matrix, weighted F1, top-n accuracy,
// percentile bootstrap confidence intervals, and the NPV/PPV dual-threshold
// sweep used to estimate avoidable confirmatory testing.
#pragma once

#include <bright/common.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace bright {

// Area under the ROC curve via the Mann-Whitney U statistic with average
// ranks, so tied scores contribute 1/2. Returns NaN when either class is
// absent; the throwing wrapper below is the public entry point.
inline double auroc_or_nan(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) {
    throw std::invalid_argument("auroc: scores and labels differ in length");
  }
  const size_t n = scores.size();
  size_t n_pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw std::invalid_argument("auroc: labels must be 0 or 1");
    n_pos += size_t(y);
  }
  const size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::numeric_limits<double>::quiet_NaN();

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t(0));
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  // Average ranks over tie groups, accumulate rank sum of positives.
  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * (double(i + 1) + double(j));  // ranks are 1-based
    for (size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) rank_sum_pos += avg_rank;
    }
    i = j;
  }
  const double u = rank_sum_pos - double(n_pos) * (double(n_pos) + 1.0) / 2.0;
  return u / (double(n_pos) * double(n_neg));
}

inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  const double a = auroc_or_nan(scores, labels);
  if (std::isnan(a)) throw std::invalid_argument("auroc: both classes must be present");
  return a;
}

// Macro average of one-vs-rest AUROC over the classes present in `labels`.
// `scores` is row-major n x n_classes.
inline double macro_ovr_auroc(const std::vector<std::vector<double>>& scores,
                              const std::vector<int>& labels, int n_classes) {
  if (scores.size() != labels.size()) {
    throw std::invalid_argument("macro_ovr_auroc: scores and labels differ in length");
  }
  if (n_classes < 2) throw std::invalid_argument("macro_ovr_auroc: need at least 2 classes");
  double total = 0.0;
  int used = 0;
  std::vector<double> col(labels.size());
  std::vector<int> bin(labels.size());
  for (int k = 0; k < n_classes; ++k) {
    for (size_t i = 0; i < labels.size(); ++i) {
      if (int(scores[i].size()) != n_classes) {
        throw std::invalid_argument("macro_ovr_auroc: score row has wrong width");
      }
      col[i] = scores[i][size_t(k)];
      bin[i] = labels[i] == k ? 1 : 0;
    }
    const double a = auroc_or_nan(col, bin);
    if (!std::isnan(a)) {
      total += a;
      ++used;
    }
  }
  if (used == 0) return std::numeric_limits<double>::quiet_NaN();
  return total / double(used);
}

// Micro average: pool every (score, is-this-class) pair across classes into
// one binary problem.
inline double micro_ovr_auroc(const std::vector<std::vector<double>>& scores,
                              const std::vector<int>& labels, int n_classes) {
  if (scores.size() != labels.size()) {
    throw std::invalid_argument("micro_ovr_auroc: scores and labels differ in length");
  }
  std::vector<double> pooled;
  std::vector<int> bin;
  pooled.reserve(scores.size() * size_t(n_classes));
  bin.reserve(pooled.capacity());
  for (size_t i = 0; i < scores.size(); ++i) {
    if (int(scores[i].size()) != n_classes) {
      throw std::invalid_argument("micro_ovr_auroc: score row has wrong width");
    }
    for (int k = 0; k < n_classes; ++k) {
      pooled.push_back(scores[i][size_t(k)]);
      bin.push_back(labels[i] == k ? 1 : 0);
    }
  }
  return auroc_or_nan(pooled, bin);
}

// rows = true class, cols = predicted class.
inline std::vector<std::vector<int64_t>> confusion_matrix(const std::vector<int>& truth,
                                                          const std::vector<int>& pred,
                                                          int n_classes) {
  if (truth.size() != pred.size()) {
    throw std::invalid_argument("confusion_matrix: truth and pred differ in length");
  }
  std::vector<std::vector<int64_t>> m(size_t(n_classes), std::vector<int64_t>(size_t(n_classes), 0));
  for (size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= n_classes || pred[i] < 0 || pred[i] >= n_classes) {
      throw std::invalid_argument("confusion_matrix: class index out of range at row " +
                                  std::to_string(i));
    }
    ++m[size_t(truth[i])][size_t(pred[i])];
  }
  return m;
}

struct ClassPRF {
  double precision = 0.0;  // 0 when no predictions for the class
  double recall = 0.0;     // 0 when no true members
  double f1 = 0.0;
  int64_t support = 0;
};

inline std::vector<ClassPRF> per_class_prf(const std::vector<std::vector<int64_t>>& cm) {
  const size_t k = cm.size();
  std::vector<ClassPRF> out(k);
  for (size_t c = 0; c < k; ++c) {
    int64_t tp = cm[c][c], fn = 0, fp = 0;
    for (size_t j = 0; j < k; ++j) {
      if (j != c) {
        fn += cm[c][j];
        fp += cm[j][c];
      }
    }
    ClassPRF& r = out[c];
    r.support = tp + fn;
    r.precision = (tp + fp) > 0 ? double(tp) / double(tp + fp) : 0.0;
    r.recall = r.support > 0 ? double(tp) / double(r.support) : 0.0;
    r.f1 = (r.precision + r.recall) > 0.0
               ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
               : 0.0;
  }
  return out;
}

// Support-weighted mean of per-class F1.
inline double weighted_f1(const std::vector<int>& truth, const std::vector<int>& pred,
                          int n_classes) {
  const auto prf = per_class_prf(confusion_matrix(truth, pred, n_classes));
  int64_t total = 0;
  double acc = 0.0;
  for (const auto& r : prf) {
    total += r.support;
    acc += double(r.support) * r.f1;
  }
  if (total == 0) throw std::invalid_argument("weighted_f1: empty input");
  return acc / double(total);
}

inline double accuracy(const std::vector<int>& truth, const std::vector<int>& pred) {
  if (truth.size() != pred.size() || truth.empty()) {
    throw std::invalid_argument("accuracy: empty or mismatched inputs");
  }
  size_t hit = 0;
  for (size_t i = 0; i < truth.size(); ++i) hit += truth[i] == pred[i] ? 1 : 0;
  return double(hit) / double(truth.size());
}

// Fraction of rows whose true label appears among the n highest scores.
// Score ties are broken toward the lower class index, so results do not
// depend on sort implementation details.
inline double top_n_accuracy(const std::vector<std::vector<double>>& scores,
                             const std::vector<int>& labels, int n) {
  if (scores.size() != labels.size() || scores.empty()) {
    throw std::invalid_argument("top_n_accuracy: empty or mismatched inputs");
  }
  if (n < 1) throw std::invalid_argument("top_n_accuracy: n must be >= 1");
  size_t hit = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    const auto& row = scores[i];
    if (labels[i] < 0 || labels[i] >= int(row.size())) {
      throw std::invalid_argument("top_n_accuracy: label out of range at row " + std::to_string(i));
    }
    std::vector<int> idx(row.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
      if (row[size_t(a)] != row[size_t(b)]) return row[size_t(a)] > row[size_t(b)];
      return a < b;
    });
    const int take = std::min<int>(n, int(idx.size()));
    for (int j = 0; j < take; ++j) {
      if (idx[size_t(j)] == labels[i]) {
        ++hit;
        break;
      }
    }
  }
  return double(hit) / double(scores.size());
}

inline int argmax_row(const std::vector<double>& row) {
  if (row.empty()) throw std::invalid_argument("argmax_row: empty row");
  int best = 0;
  for (int j = 1; j < int(row.size()); ++j) {
    if (row[size_t(j)] > row[size_t(best)]) best = j;
  }
  return best;
}

// Linear-interpolation quantile of a sample (the common "type 7" rule:
// position q * (n - 1) between order statistics).
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("quantile: empty sample");
  if (q < 0.0 || q > 1.0) throw std::invalid_argument("quantile: q outside [0, 1]");
  std::sort(v.begin(), v.end());
  const double pos = q * double(v.size() - 1);
  const size_t lo = size_t(std::floor(pos));
  const size_t hi = size_t(std::ceil(pos));
  const double frac = pos - double(lo);
  return v[lo] * (1.0 - frac) + v[hi] * frac;
}

struct BootstrapCI {
  double point = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  int n_valid = 0;    // resamples that produced a defined statistic
  int n_skipped = 0;  // resamples abandoned after the redraw budget
};

// A named metric with its interval, ready for a report CSV row.
struct MetricReport {
  std::string name;
  double point = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  int n_boot = 0;
  uint64_t seed = 0;
};

// Percentile bootstrap over sampling units 0..n_units-1. The statistic is
// evaluated on resampled unit-index multisets. A resample where it is
// undefined (NaN, e.g. a single-class AUROC draw) is re-drawn up to 100
// times, then skipped and counted.
inline BootstrapCI bootstrap_ci(size_t n_units,
                                const std::function<double(const std::vector<size_t>&)>& statistic,
                                Rng& rng, int n_resamples = 1000, double alpha = 0.05) {
  if (n_units == 0) throw std::invalid_argument("bootstrap_ci: no sampling units");
  if (n_resamples < 1) throw std::invalid_argument("bootstrap_ci: n_resamples must be >= 1");
  std::vector<size_t> identity(n_units);
  std::iota(identity.begin(), identity.end(), size_t(0));
  BootstrapCI out;
  out.point = statistic(identity);
  if (std::isnan(out.point)) {
    throw std::invalid_argument("bootstrap_ci: statistic undefined on the full sample");
  }
  std::vector<double> stats;
  stats.reserve(size_t(n_resamples));
  std::vector<size_t> draw(n_units);
  for (int r = 0; r < n_resamples; ++r) {
    double s = std::numeric_limits<double>::quiet_NaN();
    for (int attempt = 0; attempt < 100; ++attempt) {
      for (size_t i = 0; i < n_units; ++i) {
        draw[i] = size_t(rng.uniform_int(uint64_t(n_units)));
      }
      s = statistic(draw);
      if (!std::isnan(s)) break;
    }
    if (std::isnan(s)) ++out.n_skipped;
    else stats.push_back(s);
  }
  out.n_valid = int(stats.size());
  if (stats.empty()) {
    out.lo = out.hi = std::numeric_limits<double>::quiet_NaN();
    return out;
  }
  out.lo = quantile(stats, alpha / 2.0);
  out.hi = quantile(stats, 1.0 - alpha / 2.0);
  return out;
}

// ---------------------------------------------------------------------------
// Dual-threshold triage: how much confirmatory testing could be skipped while
// keeping negative and positive predictive values above their targets.
// ---------------------------------------------------------------------------

struct TriageResult {
  std::optional<double> t_low;   // call negative when score <= t_low
  std::optional<double> t_high;  // call positive when score >= t_high
  double npv = 0.0;              // achieved NPV below t_low (0 if side unused)
  double ppv = 0.0;              // achieved PPV above t_high (0 if side unused)
  double fraction_avoided = 0.0;
  int64_t n_avoided = 0;
};

namespace triage_detail {

inline double npv_at(const std::vector<double>& s, const std::vector<int>& y, double t) {
  int64_t tn = 0, total = 0;
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] <= t) {
      ++total;
      if (y[i] == 0) ++tn;
    }
  }
  return total > 0 ? double(tn) / double(total) : std::numeric_limits<double>::quiet_NaN();
}

inline double ppv_at(const std::vector<double>& s, const std::vector<int>& y, double t) {
  int64_t tp = 0, total = 0;
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] >= t) {
      ++total;
      if (y[i] == 1) ++tp;
    }
  }
  return total > 0 ? double(tp) / double(total) : std::numeric_limits<double>::quiet_NaN();
}

// Largest candidate threshold (ascending unique scores) whose NPV meets the
// target; restricted to candidates < bound when bound is set.
inline std::optional<double> best_low(const std::vector<double>& cand, const std::vector<double>& s,
                                      const std::vector<int>& y, double target,
                                      std::optional<double> bound) {
  std::optional<double> best;
  for (double t : cand) {
    if (bound && t >= *bound) continue;
    if (npv_at(s, y, t) >= target - 1e-12) best = t;
  }
  return best;
}

inline std::optional<double> best_high(const std::vector<double>& cand, const std::vector<double>& s,
                                       const std::vector<int>& y, double target,
                                       std::optional<double> bound) {
  std::optional<double> best;
  for (auto it = cand.rbegin(); it != cand.rend(); ++it) {
    if (bound && *it <= *bound) continue;
    if (ppv_at(s, y, *it) >= target - 1e-12) best = *it;
  }
  return best;
}

inline int64_t count_low(const std::vector<double>& s, std::optional<double> t) {
  if (!t) return 0;
  int64_t c = 0;
  for (double v : s) c += v <= *t ? 1 : 0;
  return c;
}

inline int64_t count_high(const std::vector<double>& s, std::optional<double> t) {
  if (!t) return 0;
  int64_t c = 0;
  for (double v : s) c += v >= *t ? 1 : 0;
  return c;
}

}  // namespace triage_detail

// Pick t_low as the largest observed score with NPV(score <= t_low) >= npv_target
// and t_high as the smallest observed score with PPV(score >= t_high) >= ppv_target.
// If the two bands overlap (t_low >= t_high), the side that on its own avoids
// more cases wins (NPV side on ties) and the other side is re-chosen strictly
// inside the winner's band, possibly ending up unused.
inline TriageResult triage_thresholds(const std::vector<double>& scores,
                                      const std::vector<int>& labels, double npv_target,
                                      double ppv_target) {
  if (scores.size() != labels.size() || scores.empty()) {
    throw std::invalid_argument("triage_thresholds: empty or mismatched inputs");
  }
  for (int y : labels) {
    if (y != 0 && y != 1) throw std::invalid_argument("triage_thresholds: labels must be 0 or 1");
  }
  if (npv_target < 0 || npv_target > 1 || ppv_target < 0 || ppv_target > 1) {
    throw std::invalid_argument("triage_thresholds: targets must lie in [0, 1]");
  }
  std::vector<double> cand = scores;
  std::sort(cand.begin(), cand.end());
  cand.erase(std::unique(cand.begin(), cand.end()), cand.end());

  using namespace triage_detail;
  auto lo = best_low(cand, scores, labels, npv_target, std::nullopt);
  auto hi = best_high(cand, scores, labels, ppv_target, std::nullopt);

  if (lo && hi && *lo >= *hi) {
    const int64_t yield_lo = count_low(scores, lo);
    const int64_t yield_hi = count_high(scores, hi);
    if (yield_lo >= yield_hi) {
      hi = best_high(cand, scores, labels, ppv_target, lo);
    } else {
      lo = best_low(cand, scores, labels, npv_target, hi);
    }
  }

  TriageResult out;
  out.t_low = lo;
  out.t_high = hi;
  out.npv = lo ? npv_at(scores, labels, *lo) : 0.0;
  out.ppv = hi ? ppv_at(scores, labels, *hi) : 0.0;
  out.n_avoided = count_low(scores, lo) + count_high(scores, hi);
  out.fraction_avoided = double(out.n_avoided) / double(scores.size());
  return out;
}

struct TriageSweepRow {
  double target = 1.0;  // shared NPV/PPV target for this row
  TriageResult result;
};

// Sweep a shared NPV/PPV target from `from` down to `to` (inclusive) in
// `step` decrements, e.g. 1.00, 0.99, ..., 0.95.
inline std::vector<TriageSweepRow> triage_sweep(const std::vector<double>& scores,
                                                const std::vector<int>& labels, double from = 1.0,
                                                double to = 0.95, double step = 0.01) {
  if (step <= 0 || from < to) throw std::invalid_argument("triage_sweep: bad sweep range");
  std::vector<TriageSweepRow> rows;
  for (double t = from; t >= to - 1e-9; t -= step) {
    TriageSweepRow row;
    row.target = t;
    row.result = triage_thresholds(scores, labels, t, t);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace bright
