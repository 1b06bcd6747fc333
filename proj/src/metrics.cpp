#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedmap/analysis.hpp"

namespace fedmap {

namespace {

void check_binary(std::span<const int> labels, std::size_t n, const char* who) {
  if (labels.size() != n) throw ShapeError(std::string(who) + ": scores and labels differ in length");
  for (int y : labels)
    if (y != 0 && y != 1) throw DomainError(std::string(who) + ": labels must be 0 or 1");
}

/// Fenwick tree over counts.
class Fenwick {
 public:
  explicit Fenwick(std::size_t n) : tree_(n + 1, 0) {}
  void add(std::size_t i) {
    for (++i; i < tree_.size(); i += i & (~i + 1)) ++tree_[i];
  }
  /// Number of inserted positions < i.
  long long below(std::size_t i) const {
    long long s = 0;
    for (; i > 0; i -= i & (~i + 1)) s += tree_[i];
    return s;
  }

 private:
  std::vector<long long> tree_;
};

}  // namespace

std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return values[i] < values[j]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
  check_binary(labels, scores.size(), "auroc");
  const auto ranks = average_ranks(scores);
  double pos = 0, rank_sum = 0;
  for (std::size_t i = 0; i < ranks.size(); ++i)
    if (labels[i] == 1) {
      pos += 1;
      rank_sum += ranks[i];
    }
  const double neg = static_cast<double>(labels.size()) - pos;
  if (pos == 0 || neg == 0) throw DomainError("auroc: both classes must be present");
  return (rank_sum - pos * (pos + 1) / 2) / (pos * neg);
}

BinaryRates balanced_accuracy(std::span<const int> predictions, std::span<const int> labels) {
  check_binary(labels, predictions.size(), "balanced_accuracy");
  double tp = 0, tn = 0, pos = 0, neg = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) {
      pos += 1;
      tp += predictions[i] == 1;
    } else {
      neg += 1;
      tn += predictions[i] == 0;
    }
  }
  if (pos == 0 || neg == 0) throw DomainError("balanced_accuracy: both classes must be present");
  BinaryRates r;
  r.sensitivity = tp / pos;
  r.specificity = tn / neg;
  r.balanced_accuracy = balanced_accuracy(r.sensitivity, r.specificity);
  return r;
}

double c_index(std::span<const double> risks, std::span<const double> times, std::span<const int> events) {
  const std::size_t n = risks.size();
  if (times.size() != n || events.size() != n) throw ShapeError("c_index: inputs differ in length");
  // Dense ranks of the risk scores.
  std::vector<double> sorted(risks.begin(), risks.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  std::vector<std::size_t> rank(n);
  for (std::size_t i = 0; i < n; ++i)
    rank[i] = static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), risks[i]) - sorted.begin());

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return times[i] > times[j]; });

  // Walk times from the largest down; the tree holds everyone with a strictly later time.
  Fenwick later(sorted.size());
  long long inserted = 0;
  double concordant = 0, comparable = 0;
  for (std::size_t g = 0; g < n;) {
    std::size_t h = g;
    while (h < n && times[order[h]] == times[order[g]]) ++h;
    for (std::size_t k = g; k < h; ++k) {
      const std::size_t i = order[k];
      if (!events[i]) continue;
      const long long lower = later.below(rank[i]);
      const long long lower_eq = later.below(rank[i] + 1);
      concordant += static_cast<double>(lower) + 0.5 * static_cast<double>(lower_eq - lower);
      comparable += static_cast<double>(inserted);
    }
    for (std::size_t k = g; k < h; ++k) later.add(rank[order[k]]);
    inserted += static_cast<long long>(h - g);
    g = h;
  }
  if (comparable == 0) throw DomainError("c_index: no comparable pairs");
  return concordant / comparable;
}

double brier(std::span<const double> probabilities, std::span<const int> labels) {
  check_binary(labels, probabilities.size(), "brier");
  if (labels.empty()) throw DomainError("brier: empty input");
  double s = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double p = probabilities[i];
    if (!(p >= 0.0 && p <= 1.0)) throw DomainError("brier: probability outside [0,1] at index " + std::to_string(i));
    s += (p - labels[i]) * (p - labels[i]);
  }
  return s / static_cast<double>(labels.size());
}

}  // namespace fedmap
