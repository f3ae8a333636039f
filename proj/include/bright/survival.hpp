// Survival analysis: Kaplan-Meier curves, the two-group log-rank test,
// Harrell's concordance index, and a Cox proportional-hazards model fitted by
// Newton-Raphson on the Breslow partial likelihood.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace bright {

inline void check_survival_inputs(const std::vector<double>& times, const std::vector<int>& events) {
  if (times.size() != events.size() || times.empty()) {
    throw std::invalid_argument("survival: empty or mismatched times/events");
  }
  for (size_t i = 0; i < times.size(); ++i) {
    if (!(times[i] >= 0.0)) {
      throw std::invalid_argument("survival: negative or NaN time at index " + std::to_string(i));
    }
    if (events[i] != 0 && events[i] != 1) {
      throw std::invalid_argument("survival: event indicator must be 0 or 1 at index " +
                                  std::to_string(i));
    }
  }
}

// Upper tail of the chi-squared distribution with one degree of freedom.
inline double chi2_sf_1df(double x) {
  if (x <= 0.0) return 1.0;
  return std::erfc(std::sqrt(x / 2.0));
}

// ---------------------------------------------------------------------------
// Kaplan-Meier
// ---------------------------------------------------------------------------

struct KMPoint {
  double time = 0.0;
  int64_t n_at_risk = 0;
  int64_t n_events = 0;
  int64_t n_censored = 0;  // censored exactly at this time
  double survival = 1.0;   // S(t) just after this time
};

struct KMCurve {
  std::vector<KMPoint> points;  // one row per distinct event time

  // Step-function evaluation: S(t) = product over event times <= t.
  double survival_at(double t) const {
    double s = 1.0;
    for (const auto& p : points) {
      if (p.time <= t) s = p.survival;
      else break;
    }
    return s;
  }
};

inline KMCurve kaplan_meier(const std::vector<double>& times, const std::vector<int>& events) {
  check_survival_inputs(times, events);
  const size_t n = times.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t(0));
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return times[a] < times[b]; });

  KMCurve curve;
  double s = 1.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    int64_t d = 0, c = 0;
    while (j < n && times[order[j]] == times[order[i]]) {
      if (events[order[j]] == 1) ++d;
      else ++c;
      ++j;
    }
    if (d > 0) {
      KMPoint p;
      p.time = times[order[i]];
      p.n_at_risk = int64_t(n - i);
      p.n_events = d;
      p.n_censored = c;
      s *= 1.0 - double(d) / double(p.n_at_risk);
      p.survival = s;
      curve.points.push_back(p);
    }
    i = j;
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Log-rank test (two groups, two-sided)
// ---------------------------------------------------------------------------

struct LogRankResult {
  double observed_minus_expected = 0.0;  // O - E for group 1
  double variance = 0.0;
  double chi2 = 0.0;
  double p_value = 1.0;
};

inline LogRankResult log_rank_test(const std::vector<double>& times, const std::vector<int>& events,
                                   const std::vector<int>& group) {
  check_survival_inputs(times, events);
  if (group.size() != times.size()) {
    throw std::invalid_argument("log_rank_test: group vector length mismatch");
  }
  bool has0 = false, has1 = false;
  for (int g : group) {
    if (g == 0) has0 = true;
    else if (g == 1) has1 = true;
    else throw std::invalid_argument("log_rank_test: group labels must be 0 or 1");
  }
  if (!has0 || !has1) throw std::invalid_argument("log_rank_test: both groups must be non-empty");

  const size_t n = times.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t(0));
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return times[a] < times[b]; });

  double o_minus_e = 0.0, variance = 0.0;
  int64_t at_risk1 = int64_t(std::count(group.begin(), group.end(), 1));
  int64_t at_risk = int64_t(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    int64_t d = 0, d1 = 0, leaving1 = 0;
    while (j < n && times[order[j]] == times[order[i]]) {
      const size_t idx = order[j];
      if (events[idx] == 1) {
        ++d;
        if (group[idx] == 1) ++d1;
      }
      if (group[idx] == 1) ++leaving1;
      ++j;
    }
    if (d > 0) {
      const double nn = double(at_risk);
      const double n1 = double(at_risk1);
      const double dd = double(d);
      o_minus_e += double(d1) - dd * n1 / nn;
      if (at_risk > 1) {
        variance += dd * (n1 / nn) * (1.0 - n1 / nn) * (nn - dd) / (nn - 1.0);
      }
    }
    at_risk -= int64_t(j - i);
    at_risk1 -= leaving1;
    i = j;
  }

  LogRankResult r;
  r.observed_minus_expected = o_minus_e;
  r.variance = variance;
  if (variance > 0.0) {
    r.chi2 = o_minus_e * o_minus_e / variance;
    r.p_value = chi2_sf_1df(r.chi2);
  } else {
    r.chi2 = 0.0;
    r.p_value = 1.0;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Harrell's concordance index
// ---------------------------------------------------------------------------

// Usable pairs: the earlier subject experienced the event and the later
// subject's time is strictly greater. Risk ties count one half. Higher risk
// scores should predict earlier events. NaN when no pair is comparable; the
// throwing wrapper below is the public entry point.
inline double concordance_or_nan(const std::vector<double>& times, const std::vector<int>& events,
                                 const std::vector<double>& risk) {
  check_survival_inputs(times, events);
  if (risk.size() != times.size()) {
    throw std::invalid_argument("concordance_index: risk vector length mismatch");
  }
  const size_t n = times.size();
  double concordant = 0.0;
  int64_t usable = 0;
  for (size_t i = 0; i < n; ++i) {
    if (events[i] != 1) continue;
    for (size_t j = 0; j < n; ++j) {
      if (times[j] <= times[i]) continue;
      ++usable;
      if (risk[i] > risk[j]) concordant += 1.0;
      else if (risk[i] == risk[j]) concordant += 0.5;
    }
  }
  if (usable == 0) return std::numeric_limits<double>::quiet_NaN();
  return concordant / double(usable);
}

inline double concordance_index(const std::vector<double>& times, const std::vector<int>& events,
                                const std::vector<double>& risk) {
  const double c = concordance_or_nan(times, events, risk);
  if (std::isnan(c)) throw std::invalid_argument("concordance_index: no comparable pairs");
  return c;
}

// ---------------------------------------------------------------------------
// Cox proportional hazards (Breslow ties)
// ---------------------------------------------------------------------------

// Negative log partial likelihood (sum over events, not averaged) for linear
// predictors eta. Breslow handling: every event at a tied time uses the full
// risk set {j : t_j >= t}. Templated so gradient checks can run in double.
template <typename Derived>
typename Derived::Scalar cox_partial_likelihood_loss(const Eigen::MatrixBase<Derived>& eta,
                                                     const std::vector<double>& times,
                                                     const std::vector<int>& events) {
  using S = typename Derived::Scalar;
  check_survival_inputs(times, events);
  if (size_t(eta.size()) != times.size()) {
    throw std::invalid_argument("cox loss: eta length mismatch");
  }
  const size_t n = times.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t(0));
  // Descending time: walk once, growing the risk set as time decreases.
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return times[a] > times[b]; });

  // Log-sum-exp with a running max for stability.
  S max_eta = -std::numeric_limits<S>::infinity();
  for (size_t i = 0; i < n; ++i) max_eta = std::max(max_eta, S(eta(Eigen::Index(i))));

  S loss = S(0);
  S denom = S(0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && times[order[j]] == times[order[i]]) {
      denom += std::exp(S(eta(Eigen::Index(order[j]))) - max_eta);
      ++j;
    }
    for (size_t k = i; k < j; ++k) {
      const size_t idx = order[k];
      if (events[idx] == 1) {
        loss += -S(eta(Eigen::Index(idx))) + std::log(denom) + max_eta;
      }
    }
    i = j;
  }
  return loss;
}

// Gradient of cox_partial_likelihood_loss with respect to eta (same sum
// convention). d loss / d eta_i = -e_i + sum over events k with t_k <= t_i of
// exp(eta_i) / sum_{j in risk(k)} exp(eta_j).
inline Eigen::VectorXd cox_loss_grad_eta(const Eigen::VectorXd& eta,
                                         const std::vector<double>& times,
                                         const std::vector<int>& events) {
  check_survival_inputs(times, events);
  if (size_t(eta.size()) != times.size()) {
    throw std::invalid_argument("cox grad: eta length mismatch");
  }
  const size_t n = times.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t(0));
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return times[a] > times[b]; });

  const double max_eta = eta.maxCoeff();
  Eigen::VectorXd w = (eta.array() - max_eta).exp();

  // Pass 1 (descending time): the risk-set denominator for each distinct time
  // is the running weight sum of everyone with time >= t.
  struct Group {
    size_t begin, end;  // half-open range into `order`
    int64_t d;
    double denom;
  };
  std::vector<Group> groups;
  double denom = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    int64_t d = 0;
    while (j < n && times[order[j]] == times[order[i]]) {
      denom += w(Eigen::Index(order[j]));
      if (events[order[j]] == 1) ++d;
      ++j;
    }
    groups.push_back({i, j, d, denom});
    i = j;
  }
  // Pass 2 (ascending time): subject i sits in the risk set of every event
  // time t_k <= t_i, so walk groups from smallest time up, accumulating
  // sum d_k / denom_k, and assign grad_i = -e_i + w_i * cum for members.
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(Eigen::Index(n));
  double cum = 0.0;
  for (auto it = groups.rbegin(); it != groups.rend(); ++it) {
    if (it->d > 0) cum += double(it->d) / it->denom;
    for (size_t k = it->begin; k < it->end; ++k) {
      const size_t idx = order[k];
      grad(Eigen::Index(idx)) = -double(events[idx]) + w(Eigen::Index(idx)) * cum;
    }
  }
  return grad;
}

enum class CoxTies { breslow, efron };

struct CoxFit {
  std::vector<std::string> names;
  Eigen::VectorXd beta;          // coefficients on the original covariate scale
  Eigen::VectorXd se;            // standard errors (inverse observed information)
  Eigen::VectorXd hazard_ratio;  // exp(beta)
  Eigen::VectorXd hr_ci_lo;      // exp(beta - 1.96 se)
  Eigen::VectorXd hr_ci_hi;
  Eigen::VectorXd p_values;      // two-sided Wald
  double log_likelihood = 0.0;   // log partial likelihood at the fit
  int iterations = 0;
  bool converged = false;

  Eigen::VectorXd risk_scores(const Eigen::MatrixXd& x) const { return x * beta; }
};

// Newton-Raphson with step halving on standardized covariates; converged
// when the accepted Newton step has max |component| < tol. Throws on
// constant or collinear covariate columns (named in the message).
inline CoxFit cox_fit(const Eigen::MatrixXd& x, const std::vector<double>& times,
                      const std::vector<int>& events, std::vector<std::string> names = {},
                      CoxTies ties = CoxTies::breslow, int max_iter = 100, double tol = 1e-8) {
  check_survival_inputs(times, events);
  const Eigen::Index n = x.rows();
  const Eigen::Index p = x.cols();
  if (size_t(n) != times.size()) throw std::invalid_argument("cox_fit: row count mismatch");
  if (p < 1) throw std::invalid_argument("cox_fit: need at least one covariate");
  if (std::count(events.begin(), events.end(), 1) == 0) {
    throw std::invalid_argument("cox_fit: no events observed");
  }
  if (names.empty()) {
    for (Eigen::Index c = 0; c < p; ++c) names.push_back("x" + std::to_string(c));
  }
  if (Eigen::Index(names.size()) != p) {
    throw std::invalid_argument("cox_fit: covariate name count mismatch");
  }

  Eigen::VectorXd mean = x.colwise().mean();
  Eigen::VectorXd sd(p);
  for (Eigen::Index c = 0; c < p; ++c) {
    const double var = (x.col(c).array() - mean(c)).square().sum() / double(n);
    sd(c) = std::sqrt(var);
    if (sd(c) <= 0.0) {
      throw std::invalid_argument("cox_fit: covariate '" + names[size_t(c)] + "' is constant");
    }
  }
  Eigen::MatrixXd z = (x.rowwise() - mean.transpose()).array().rowwise() /
                      sd.transpose().array();

  // Full-rank requirement: name the columns a pivoted QR leaves behind.
  {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(z);
    qr.setThreshold(1e-10);
    if (qr.rank() < p) {
      std::string cols;
      const auto perm = qr.colsPermutation().indices();
      for (Eigen::Index k = qr.rank(); k < p; ++k) {
        if (!cols.empty()) cols += ", ";
        cols += names[size_t(perm(k))];
      }
      throw std::invalid_argument("cox_fit: covariates not full rank; collinear columns: " + cols);
    }
  }

  // Sorted descending by time; groups of equal time share a risk-set prefix.
  std::vector<size_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), size_t(0));
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return times[a] > times[b]; });

  // Negative log partial likelihood with optional Efron tie correction: the
  // j-th of d tied events sees the full risk set minus j/d of the tied
  // events' own weight. Breslow is the factor-zero special case.
  auto evaluate = [&](const Eigen::VectorXd& beta, Eigen::VectorXd* grad, Eigen::MatrixXd* hess) {
    Eigen::VectorXd eta = z * beta;
    const double max_eta = eta.maxCoeff();
    double loss = 0.0;
    double s0 = 0.0;
    Eigen::VectorXd s1 = Eigen::VectorXd::Zero(p);
    Eigen::MatrixXd s2 = Eigen::MatrixXd::Zero(p, p);
    if (grad) grad->setZero(p);
    if (hess) hess->setZero(p, p);
    size_t i = 0;
    while (i < size_t(n)) {
      size_t j = i;
      double g0 = 0.0;
      Eigen::VectorXd g1 = Eigen::VectorXd::Zero(p);
      Eigen::MatrixXd g2 = Eigen::MatrixXd::Zero(p, p);
      int64_t d = 0;
      while (j < size_t(n) && times[order[j]] == times[order[i]]) {
        const Eigen::Index idx = Eigen::Index(order[j]);
        const double w = std::exp(eta(idx) - max_eta);
        s0 += w;
        s1 += w * z.row(idx).transpose();
        if (hess) s2 += w * z.row(idx).transpose() * z.row(idx);
        if (events[order[j]] == 1) {
          ++d;
          loss += -eta(idx);
          if (grad) *grad += -z.row(idx).transpose();
          if (ties == CoxTies::efron) {
            g0 += w;
            g1 += w * z.row(idx).transpose();
            if (hess) g2 += w * z.row(idx).transpose() * z.row(idx);
          }
        }
        ++j;
      }
      for (int64_t e = 0; e < d; ++e) {
        const double f = ties == CoxTies::efron ? double(e) / double(d) : 0.0;
        const double d0 = s0 - f * g0;
        loss += std::log(d0) + max_eta;
        if (grad || hess) {
          const Eigen::VectorXd d1 = (s1 - f * g1) / d0;
          if (grad) *grad += d1;
          if (hess) *hess += (s2 - f * g2) / d0 - d1 * d1.transpose();
        }
      }
      i = j;
    }
    return loss;
  };

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  Eigen::VectorXd grad(p);
  Eigen::MatrixXd hess(p, p);
  double loss = evaluate(beta, &grad, &hess);
  CoxFit fit;
  fit.names = names;
  for (int it = 0; it < max_iter && !fit.converged; ++it) {
    fit.iterations = it + 1;
    Eigen::MatrixXd h = hess;
    Eigen::VectorXd delta;
    for (int ridge = 0; ridge < 8; ++ridge) {
      Eigen::LDLT<Eigen::MatrixXd> ldlt(h);
      delta = ldlt.solve(-grad);
      if (ldlt.info() == Eigen::Success && delta.allFinite()) break;
      h = hess + Eigen::MatrixXd::Identity(p, p) * std::pow(10.0, ridge - 8);
    }
    // Step halving: insist on an actual decrease.
    double step = 1.0;
    bool accepted = false;
    for (int half = 0; half < 30; ++half) {
      Eigen::VectorXd candidate = beta + step * delta;
      const double cand_loss = evaluate(candidate, nullptr, nullptr);
      if (std::isfinite(cand_loss) && cand_loss <= loss + 1e-12) {
        beta = candidate;
        loss = cand_loss;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;  // no downhill step found; report converged=false
    if ((step * delta).lpNorm<Eigen::Infinity>() < tol) fit.converged = true;
    loss = evaluate(beta, &grad, &hess);
  }

  // Covariance on the standardized scale, then rescale to the original
  // covariates: beta_orig = beta_std / sd, se_orig = se_std / sd.
  Eigen::MatrixXd cov = hess.inverse();
  fit.beta = beta.array() / sd.array();
  fit.se = cov.diagonal().array().sqrt() / sd.array();
  fit.hazard_ratio = fit.beta.array().exp();
  fit.hr_ci_lo = (fit.beta.array() - 1.96 * fit.se.array()).exp();
  fit.hr_ci_hi = (fit.beta.array() + 1.96 * fit.se.array()).exp();
  fit.p_values.resize(p);
  for (Eigen::Index c = 0; c < p; ++c) {
    const double zc = std::abs(fit.beta(c) / fit.se(c));
    fit.p_values(c) = std::erfc(zc / std::sqrt(2.0));
  }
  fit.log_likelihood = -loss;
  return fit;
}

// Median split of training risk scores; scores strictly above the median go
// to the high-risk group (1). Even-length medians average the middle pair.
inline double median_of(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median_of: empty sample");
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::vector<int> risk_groups(const std::vector<double>& risk, double median) {
  std::vector<int> g(risk.size());
  for (size_t i = 0; i < risk.size(); ++i) g[i] = risk[i] > median ? 1 : 0;
  return g;
}

}  // namespace bright
