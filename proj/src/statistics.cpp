#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "fedmap/analysis.hpp"

namespace fedmap {

void PairedSample::validate() const {
  if (a.size() != b.size()) throw ShapeError("paired sample: a and b differ in length");
  if (!site_ids.empty() && site_ids.size() != a.size()) throw ShapeError("paired sample: one site id per pair");
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::isnan(a[i]) || std::isnan(b[i])) throw DomainError("paired sample: NaN at index " + std::to_string(i));
}

WilcoxonResult wilcoxon_signed_rank(const PairedSample& pairs, WilcoxonMethod method) {
  pairs.validate();
  std::vector<double> absd;
  std::vector<bool> positive;
  for (std::size_t i = 0; i < pairs.a.size(); ++i) {
    const double d = pairs.b[i] - pairs.a[i];
    if (d == 0.0) continue;
    absd.push_back(std::abs(d));
    positive.push_back(d > 0);
  }
  const std::size_t n = absd.size();
  if (n == 0) throw DomainError("wilcoxon: all differences are zero");
  const auto ranks = average_ranks(absd);

  WilcoxonResult res;
  res.n = static_cast<Index>(n);
  for (std::size_t i = 0; i < n; ++i)
    if (positive[i]) res.statistic += ranks[i];
  const double nd = static_cast<double>(n);
  const double mean = nd * (nd + 1) / 4;
  const bool exact = method == WilcoxonMethod::Exact || (method == WilcoxonMethod::Auto && n <= 20);

  if (exact) {
    // Doubled ranks are integers even with ties; count sign patterns by their doubled W+.
    std::vector<int> r2(n);
    int total = 0;
    for (std::size_t i = 0; i < n; ++i) total += r2[i] = static_cast<int>(std::lround(2 * ranks[i]));
    std::vector<double> count(static_cast<std::size_t>(total) + 1, 0.0);
    count[0] = 1;
    int reach = 0;
    for (int r : r2) {
      for (int s = reach; s >= 0; --s)
        if (count[s] != 0) count[s + r] += count[s];
      reach += r;
    }
    const int w2 = static_cast<int>(std::lround(2 * res.statistic));
    const int dev = std::abs(2 * w2 - total);  // |2W - 2 mean| doubled
    double extreme = 0, all = 0;
    for (int s = 0; s <= total; ++s) {
      all += count[s];
      if (std::abs(2 * s - total) >= dev) extreme += count[s];
    }
    res.p_value = std::min(1.0, extreme / all);
    res.exact = true;
    return res;
  }

  double tie_term = 0;
  {
    std::vector<double> sorted = absd;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < n;) {
      std::size_t j = i;
      while (j < n && sorted[j] == sorted[i]) ++j;
      const double t = static_cast<double>(j - i);
      tie_term += t * t * t - t;
      i = j;
    }
  }
  const double var = nd * (nd + 1) * (2 * nd + 1) / 24 - tie_term / 48;
  const double z = std::max(0.0, std::abs(res.statistic - mean) - 0.5) / std::sqrt(var);
  res.p_value = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  return res;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("spearman: inputs differ in length");
  if (x.size() < 3) throw DomainError("spearman: need at least 3 pairs");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) throw DomainError("spearman: constant input");
  return sxy / std::sqrt(sxx * syy);
}

GainRegression gain_regression(const PairedSample& pairs) {
  pairs.validate();
  GainRegression out;
  for (std::size_t i = 0; i < pairs.a.size(); ++i) {
    const std::string id = pairs.site_ids.empty() ? std::to_string(i) : pairs.site_ids[i];
    if (pairs.a[i] == 0.0) {
      out.excluded.push_back(id);
      continue;
    }
    GainRow r;
    r.site_id = id;
    r.baseline = pairs.a[i];
    r.federated = pairs.b[i];
    r.absolute_gain = r.federated - r.baseline;
    r.relative_gain = r.absolute_gain / r.baseline;
    out.rows.push_back(r);
  }
  std::vector<double> x, y;
  for (const auto& r : out.rows) {
    x.push_back(r.baseline);
    y.push_back(r.relative_gain);
  }
  const double n = static_cast<double>(x.size());
  out.spearman_r = std::numeric_limits<double>::quiet_NaN();
  out.slope = out.intercept = std::numeric_limits<double>::quiet_NaN();
  if (x.empty()) return out;
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  if (sxx > 0) {
    out.slope = sxy / sxx;
    out.intercept = my - out.slope * mx;
  }
  try {
    out.spearman_r = spearman(x, y);
  } catch (const DomainError&) {
  }
  return out;
}

}  // namespace fedmap
