#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "msme/sampling.hpp"
#include "msme/tensor.hpp"

namespace msme {

// ---------------------------------------------------------------------------
// F1 / confusion counts
// ---------------------------------------------------------------------------

struct ConfusionCounts {
  uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
};

// 2TP / (2TP + FP + FN); an empty class predicted empty counts as a perfect 1.
inline double f1(const ConfusionCounts& c) {
  uint64_t denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return 1.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

template <class T, class U>
ConfusionCounts confusion(const std::vector<T>& pred, const std::vector<U>& truth) {
  if (pred.size() != truth.size()) throw DimError("confusion: mask sizes differ");
  ConfusionCounts c;
  for (size_t i = 0; i < pred.size(); ++i) {
    bool p = pred[i] != 0, t = truth[i] != 0;
    if (p && t) ++c.tp;
    else if (p && !t) ++c.fp;
    else if (!p && t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Combination lattice
// ---------------------------------------------------------------------------

struct CombinationLattice {
  int k = 0;

  std::vector<uint32_t> all() const {
    std::vector<uint32_t> out;
    for (uint32_t g = 1; g < (1u << k); ++g) out.push_back(g);
    return out;
  }
  size_t size() const { return (1u << k) - 1u; }
  std::string name(uint32_t bits) const { return MarkerAvailability(bits, k).name(); }
};

inline std::string combo_name(uint32_t bits, int k) { return MarkerAvailability(bits, k).name(); }

inline uint32_t combo_from_digits(const std::string& digits) {
  uint32_t bits = 0;
  for (char c : digits) {
    if (c < '1' || c > '9') throw ConfigError("combination digits must be 1..9, got: " + digits);
    bits |= 1u << (c - '1');
  }
  if (bits == 0) throw ConfigError("combination must be non-empty");
  return bits;
}

inline uint32_t parse_combo(const std::string& s) {
  std::string digits = s;
  if (digits.rfind("m_", 0) == 0) digits = digits.substr(2);
  return combo_from_digits(digits);
}

// Combinations a conventional per-combination model could train on: every
// non-empty G contained in at least one sample's assigned marker set.
inline std::vector<uint32_t> compute_M_UB(const std::vector<uint32_t>& train_assignment, int k) {
  std::vector<uint32_t> out;
  for (uint32_t g = 1; g < (1u << k); ++g)
    for (uint32_t a : train_assignment)
      if ((g & a) == g) {
        out.push_back(g);
        break;
      }
  return out;
}

// All non-empty subsets of the union of assigned markers.
inline std::vector<uint32_t> compute_M_total(const std::vector<uint32_t>& train_assignment,
                                             int k) {
  uint32_t uni = 0;
  for (uint32_t a : train_assignment) uni |= a;
  std::vector<uint32_t> out;
  for (uint32_t g = 1; g < (1u << k); ++g)
    if ((g & uni) == g) out.push_back(g);
  return out;
}

inline double ub_total_ratio(const std::vector<uint32_t>& train_assignment, int k) {
  auto total = compute_M_total(train_assignment, k);
  if (total.empty()) throw ContractError("ub_total_ratio: empty training assignment");
  return static_cast<double>(compute_M_UB(train_assignment, k).size()) /
         static_cast<double>(total.size());
}

// ---------------------------------------------------------------------------
// Normal / chi-square helpers
// ---------------------------------------------------------------------------

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

namespace detail {

// Regularized incomplete gamma functions (series + continued fraction).
inline double gamma_p(double a, double x) {
  if (x < 0.0 || a <= 0.0) throw NumericError("gamma_p: bad arguments");
  if (x == 0.0) return 0.0;
  double gln = std::lgamma(a);
  if (x < a + 1.0) {
    double ap = a, sum = 1.0 / a, del = sum;
    for (int i = 0; i < 500; ++i) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::fabs(del) < std::fabs(sum) * 1e-15) break;
    }
    return sum * std::exp(-x + a * std::log(x) - gln);
  }
  double b = x + 1.0 - a, c = 1e300, d = 1.0 / b, h = d;
  for (int i = 1; i <= 500; ++i) {
    double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < 1e-300) d = 1e-300;
    c = b + an / c;
    if (std::fabs(c) < 1e-300) c = 1e-300;
    d = 1.0 / d;
    double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < 1e-15) break;
  }
  return 1.0 - std::exp(-x + a * std::log(x) - gln) * h;
}

}  // namespace detail

// Survival function of the chi-square distribution with dof degrees.
inline double chi2_sf(double x, int dof) {
  if (x <= 0.0) return 1.0;
  return 1.0 - detail::gamma_p(dof / 2.0, x / 2.0);
}

// ---------------------------------------------------------------------------
// Rank helpers
// ---------------------------------------------------------------------------

namespace detail {

// Midranks (average rank for ties), 1-based. Also returns tie group sizes.
inline std::vector<double> midranks(const std::vector<double>& values,
                                    std::vector<size_t>* tie_sizes = nullptr) {
  size_t n = values.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](size_t i, size_t j) { return values[i] < values[j]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    double avg = 0.5 * static_cast<double>(i + 1 + j + 1);
    for (size_t q = i; q <= j; ++q) ranks[order[q]] = avg;
    if (tie_sizes && j > i) tie_sizes->push_back(j - i + 1);
    i = j + 1;
  }
  return ranks;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test (two-sided). Zero differences are dropped.
// Exact by sign enumeration for n <= 20, tie- and continuity-corrected
// normal approximation beyond.
// ---------------------------------------------------------------------------

struct TestResult {
  double statistic = 0.0;
  double p = 1.0;
  bool exact = false;
  bool degenerate = false;
  size_t n = 0;
};

namespace detail {

// Null distribution of 2*W+ given doubled midranks (integers): counts[s] is
// the number of sign assignments with doubled rank-sum s.
inline std::vector<double> signed_rank_counts(const std::vector<int64_t>& doubled_ranks) {
  int64_t total = std::accumulate(doubled_ranks.begin(), doubled_ranks.end(), int64_t{0});
  std::vector<double> dp(static_cast<size_t>(total) + 1, 0.0);
  dp[0] = 1.0;
  int64_t reach = 0;
  for (int64_t r : doubled_ranks) {
    reach += r;
    for (int64_t s = reach; s >= r; --s) dp[static_cast<size_t>(s)] += dp[static_cast<size_t>(s - r)];
  }
  return dp;
}

}  // namespace detail

inline TestResult wilcoxon_exact(const std::vector<double>& ranks, double w_plus) {
  std::vector<int64_t> doubled;
  doubled.reserve(ranks.size());
  for (double r : ranks) doubled.push_back(static_cast<int64_t>(std::llround(2.0 * r)));
  auto counts = detail::signed_rank_counts(doubled);
  double denom = std::ldexp(1.0, static_cast<int>(ranks.size()));  // 2^n
  int64_t w2 = static_cast<int64_t>(std::llround(2.0 * w_plus));
  double lo = 0.0, hi = 0.0;
  for (int64_t s = 0; s < static_cast<int64_t>(counts.size()); ++s) {
    if (s <= w2) lo += counts[static_cast<size_t>(s)];
    if (s >= w2) hi += counts[static_cast<size_t>(s)];
  }
  TestResult r;
  r.exact = true;
  r.n = ranks.size();
  r.p = std::min(1.0, 2.0 * std::min(lo, hi) / denom);
  return r;
}

inline TestResult wilcoxon_approx(const std::vector<double>& ranks,
                                  const std::vector<size_t>& tie_sizes, double w_plus) {
  double n = static_cast<double>(ranks.size());
  double mu = n * (n + 1.0) / 4.0;
  double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
  for (size_t t : tie_sizes) {
    double td = static_cast<double>(t);
    var -= (td * td * td - td) / 48.0;
  }
  TestResult r;
  r.exact = false;
  r.n = ranks.size();
  if (var <= 0.0) {
    r.degenerate = true;
    r.p = 1.0;
    return r;
  }
  double sd = std::sqrt(var);
  double lower = normal_cdf((w_plus - mu + 0.5) / sd);
  double upper = 1.0 - normal_cdf((w_plus - mu - 0.5) / sd);
  r.p = std::min(1.0, 2.0 * std::min(lower, upper));
  return r;
}

inline TestResult wilcoxon_signed_rank(const std::vector<double>& diffs,
                                       size_t exact_limit = 20) {
  std::vector<double> nz;
  for (double d : diffs)
    if (d != 0.0) nz.push_back(d);
  if (nz.empty()) {
    TestResult r;
    r.degenerate = true;
    r.p = 1.0;
    return r;
  }
  std::vector<double> mags;
  mags.reserve(nz.size());
  for (double d : nz) mags.push_back(std::fabs(d));
  std::vector<size_t> tie_sizes;
  auto ranks = detail::midranks(mags, &tie_sizes);
  double w_plus = 0.0, w_total = 0.0;
  for (size_t i = 0; i < nz.size(); ++i) {
    w_total += ranks[i];
    if (nz[i] > 0.0) w_plus += ranks[i];
  }
  TestResult r = nz.size() <= exact_limit ? wilcoxon_exact(ranks, w_plus)
                                          : wilcoxon_approx(ranks, tie_sizes, w_plus);
  r.statistic = std::min(w_plus, w_total - w_plus);
  r.n = nz.size();
  return r;
}

// ---------------------------------------------------------------------------
// Mann-Whitney U test (two-sided). Exact by label-permutation enumeration
// for |a|+|b| <= 12, tie-corrected normal approximation beyond.
// ---------------------------------------------------------------------------

namespace detail {

// Walks all C(n, k) index subsets, invoking fn with the chosen index mask.
template <class Fn>
void for_each_combination(size_t n, size_t k, Fn&& fn) {
  std::vector<size_t> idx(k);
  std::iota(idx.begin(), idx.end(), 0);
  while (true) {
    fn(idx);
    size_t i = k;
    while (i > 0) {
      --i;
      if (idx[i] != i + n - k) break;
      if (i == 0) return;
    }
    if (idx[i] == i + n - k) return;
    ++idx[i];
    for (size_t j = i + 1; j < k; ++j) idx[j] = idx[j - 1] + 1;
  }
}

}  // namespace detail

inline TestResult mann_whitney_u(const std::vector<double>& a, const std::vector<double>& b,
                                 size_t exact_limit = 12) {
  if (a.empty() || b.empty()) throw ContractError("mann_whitney_u: both samples must be non-empty");
  const size_t na = a.size(), nb = b.size(), n = na + nb;
  std::vector<double> pooled;
  pooled.reserve(n);
  pooled.insert(pooled.end(), a.begin(), a.end());
  pooled.insert(pooled.end(), b.begin(), b.end());
  std::vector<size_t> tie_sizes;
  auto ranks = detail::midranks(pooled, &tie_sizes);
  double ra = 0.0;
  for (size_t i = 0; i < na; ++i) ra += ranks[i];
  double ua = ra - static_cast<double>(na) * (na + 1) / 2.0;
  double ub = static_cast<double>(na) * static_cast<double>(nb) - ua;

  TestResult r;
  r.statistic = std::min(ua, ub);
  r.n = n;
  if (n <= exact_limit) {
    // exact null law: every choice of which pooled ranks belong to sample a
    size_t lo = 0, hi = 0, total = 0;
    std::vector<double> sorted_ranks = ranks;
    std::sort(sorted_ranks.begin(), sorted_ranks.end());
    detail::for_each_combination(n, na, [&](const std::vector<size_t>& idx) {
      double rsum = 0.0;
      for (size_t i : idx) rsum += sorted_ranks[i];
      double u = rsum - static_cast<double>(na) * (na + 1) / 2.0;
      if (u <= ua + 1e-12) ++lo;
      if (u >= ua - 1e-12) ++hi;
      ++total;
    });
    r.exact = true;
    r.p = std::min(1.0, 2.0 * std::min(lo, hi) / static_cast<double>(total));
    return r;
  }
  double mu = static_cast<double>(na) * static_cast<double>(nb) / 2.0;
  double nd = static_cast<double>(n);
  double tie_term = 0.0;
  for (size_t t : tie_sizes) {
    double td = static_cast<double>(t);
    tie_term += td * td * td - td;
  }
  double var = (static_cast<double>(na) * static_cast<double>(nb) / 12.0) *
               ((nd + 1.0) - tie_term / (nd * (nd - 1.0)));
  if (var <= 0.0) {
    r.degenerate = true;
    r.p = 1.0;
    return r;
  }
  double sd = std::sqrt(var);
  // Edgeworth-refined normal CDF: the U null law is symmetric with excess
  // kurtosis -(6/5)(na^2+nb^2+na*nb+na+nb)/(na*nb*(N+1)); the He3 term keeps
  // the approximation within ~0.005 of exact right above the exact cutoff.
  double g2 = -(6.0 / 5.0) *
              (static_cast<double>(na) * na + static_cast<double>(nb) * nb +
               static_cast<double>(na) * nb + na + nb) /
              (static_cast<double>(na) * nb * (nd + 1.0));
  auto cdf = [&](double z) {
    double phi = std::exp(-0.5 * z * z) / std::sqrt(2.0 * 3.141592653589793238462643);
    double f = normal_cdf(z) - phi * (g2 / 24.0) * (z * z * z - 3.0 * z);
    return std::clamp(f, 0.0, 1.0);
  };
  double lower = cdf((ua - mu + 0.5) / sd);
  double upper = 1.0 - cdf((ua - mu - 0.5) / sd);
  r.exact = false;
  r.p = std::min(1.0, 2.0 * std::min(lower, upper));
  return r;
}

// ---------------------------------------------------------------------------
// Boxplot summary: quartiles by linear interpolation on the sorted sample,
// whiskers at the furthest points within 1.5 IQR of the box.
// ---------------------------------------------------------------------------

struct BoxplotSummary {
  double q1 = 0.0, median = 0.0, q3 = 0.0;
  double whisker_lo = 0.0, whisker_hi = 0.0;
  std::vector<double> outliers;
};

inline double quantile_linear(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw ContractError("quantile of an empty sample");
  double pos = q * static_cast<double>(sorted.size() - 1);
  size_t lo = static_cast<size_t>(std::floor(pos));
  size_t hi = static_cast<size_t>(std::ceil(pos));
  double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline BoxplotSummary boxplot_summary(std::vector<double> values) {
  if (values.empty()) throw ContractError("boxplot_summary: empty sample");
  std::sort(values.begin(), values.end());
  BoxplotSummary s;
  s.q1 = quantile_linear(values, 0.25);
  s.median = quantile_linear(values, 0.5);
  s.q3 = quantile_linear(values, 0.75);
  double iqr = s.q3 - s.q1;
  double lo_fence = s.q1 - 1.5 * iqr, hi_fence = s.q3 + 1.5 * iqr;
  s.whisker_lo = s.q3;
  s.whisker_hi = s.q1;
  bool any = false;
  for (double v : values) {
    if (v >= lo_fence && v <= hi_fence) {
      if (!any) {
        s.whisker_lo = s.whisker_hi = v;
        any = true;
      } else {
        s.whisker_lo = std::min(s.whisker_lo, v);
        s.whisker_hi = std::max(s.whisker_hi, v);
      }
    } else {
      s.outliers.push_back(v);
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Volume-fraction quantification
// ---------------------------------------------------------------------------

template <class T, class U>
double quantify_fraction(const std::vector<T>& prediction, const std::vector<U>& tissue) {
  if (prediction.size() != tissue.size())
    throw DimError("quantify_fraction: mask sizes differ");
  uint64_t tis = 0, occ = 0;
  for (size_t i = 0; i < tissue.size(); ++i) {
    if (tissue[i] == 0) continue;
    ++tis;
    if (prediction[i] != 0) ++occ;
  }
  if (tis == 0) throw ContractError("quantify_fraction: empty tissue mask");
  return static_cast<double>(occ) / static_cast<double>(tis);
}

// ---------------------------------------------------------------------------
// Metric table: one row per (model, class, fold, combination).
// ---------------------------------------------------------------------------

struct MetricRow {
  std::string model;
  int class_index = 0;  // 1-based, matches dataset class ordering
  int fold = 0;
  uint32_t combo = 0;
  int k = 0;
  ConfusionCounts counts;
  double f1 = 0.0;
};

class MetricTable {
 public:
  void append(MetricRow row) {
    auto key = std::make_tuple(row.model, row.class_index, row.fold, row.combo);
    if (!keys_.insert(key).second)
      throw ContractError(strprintf("duplicate metric row %s class %d fold %d %s",
                                    row.model.c_str(), row.class_index, row.fold,
                                    combo_name(row.combo, row.k).c_str()));
    rows_.push_back(std::move(row));
  }

  const std::vector<MetricRow>& rows() const { return rows_; }
  size_t size() const { return rows_.size(); }

  void save_csv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path);
    f << "model,class,fold,combination,tp,fp,fn,tn,f1\n";
    for (const auto& r : rows_)
      f << strprintf("%s,%d,%d,%s,%llu,%llu,%llu,%llu,%.9f\n", r.model.c_str(), r.class_index,
                     r.fold, combo_name(r.combo, r.k).c_str(),
                     static_cast<unsigned long long>(r.counts.tp),
                     static_cast<unsigned long long>(r.counts.fp),
                     static_cast<unsigned long long>(r.counts.fn),
                     static_cast<unsigned long long>(r.counts.tn), r.f1);
  }

  static MetricTable load_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open " + path);
    std::string line;
    if (!std::getline(f, line) || line != "model,class,fold,combination,tp,fp,fn,tn,f1")
      throw DataError(path + ": not a metric table (bad header)");
    MetricTable t;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      std::vector<std::string> cols;
      size_t start = 0;
      while (true) {
        size_t pos = line.find(',', start);
        cols.push_back(line.substr(start, pos == std::string::npos ? pos : pos - start));
        if (pos == std::string::npos) break;
        start = pos + 1;
      }
      if (cols.size() != 9) throw DataError(path + ": malformed row: " + line);
      MetricRow r;
      r.model = cols[0];
      r.class_index = std::stoi(cols[1]);
      r.fold = std::stoi(cols[2]);
      r.combo = parse_combo(cols[3]);
      std::string digits = cols[3].rfind("m_", 0) == 0 ? cols[3].substr(2) : cols[3];
      r.k = digits.empty() ? 0 : (digits.back() - '0');
      r.counts.tp = std::stoull(cols[4]);
      r.counts.fp = std::stoull(cols[5]);
      r.counts.fn = std::stoull(cols[6]);
      r.counts.tn = std::stoull(cols[7]);
      r.f1 = std::stod(cols[8]);
      t.append(std::move(r));
    }
    return t;
  }

 private:
  std::vector<MetricRow> rows_;
  std::set<std::tuple<std::string, int, int, uint32_t>> keys_;
};

// ---------------------------------------------------------------------------
// Relative paired scores: candidate minus reference per matching
// (class, fold, combination) key; unmatched rows are reported, not dropped.
// ---------------------------------------------------------------------------

struct PairedDiff {
  int class_index = 0;
  int fold = 0;
  uint32_t combo = 0;
  double diff = 0.0;
};

struct RelativeScores {
  std::vector<PairedDiff> diffs;
  std::vector<std::string> unmatched_candidate;
  std::vector<std::string> unmatched_reference;
};

inline RelativeScores relative_scores(const MetricTable& candidate,
                                      const MetricTable& reference) {
  using Key = std::tuple<int, int, uint32_t>;
  auto index = [](const MetricTable& t) {
    std::map<Key, const MetricRow*> m;
    for (const auto& r : t.rows()) {
      Key key{r.class_index, r.fold, r.combo};
      if (m.count(key))
        throw ContractError("relative_scores: table has multiple rows for one "
                            "(class, fold, combination) key; filter by model first");
      m[key] = &r;
    }
    return m;
  };
  auto ci = index(candidate);
  auto ri = index(reference);
  RelativeScores out;
  for (const auto& [key, row] : ci) {
    auto it = ri.find(key);
    if (it == ri.end()) {
      out.unmatched_candidate.push_back(strprintf("class %d fold %d %s", std::get<0>(key),
                                                  std::get<1>(key),
                                                  combo_name(std::get<2>(key), row->k).c_str()));
      continue;
    }
    out.diffs.push_back(PairedDiff{std::get<0>(key), std::get<1>(key), std::get<2>(key),
                                   row->f1 - it->second->f1});
  }
  for (const auto& [key, row] : ri)
    if (!ci.count(key))
      out.unmatched_reference.push_back(strprintf("class %d fold %d %s", std::get<0>(key),
                                                  std::get<1>(key),
                                                  combo_name(std::get<2>(key), row->k).c_str()));
  if (out.diffs.empty()) throw ContractError("relative_scores: no matching keys");
  return out;
}

inline std::string significance_stars(double p) {
  if (p <= 0.001) return "***";
  if (p <= 0.01) return "**";
  if (p <= 0.05) return "*";
  return "n.s.";
}

}  // namespace msme
