#include "corfsep/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "corfsep/error.hpp"

namespace corfsep::metrics {

std::vector<double> mean_normalize(std::span<const double> x) {
  if (x.empty()) fail(Errc::empty_input, "mean_normalize of empty sequence");
  double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] - mean;
  return out;
}

double si_snr(std::span<const double> est, std::span<const double> ref) {
  if (est.size() != ref.size())
    fail(Errc::length_mismatch,
         "si_snr length mismatch: " + std::to_string(est.size()) + " vs " + std::to_string(ref.size()));
  if (est.empty()) fail(Errc::empty_input, "si_snr of empty sequences");

  const auto e = mean_normalize(est);
  const auto r = mean_normalize(ref);

  double ref_energy = 0.0, dot = 0.0;
  for (size_t i = 0; i < r.size(); ++i) {
    ref_energy += r[i] * r[i];
    dot += e[i] * r[i];
  }
  if (ref_energy == 0.0) fail(Errc::zero_energy_reference, "reference has zero energy after mean removal");

  const double alpha = dot / ref_energy;
  double target_energy = 0.0, noise_energy = 0.0;
  for (size_t i = 0; i < r.size(); ++i) {
    const double st = alpha * r[i];
    const double en = e[i] - st;
    target_energy += st * st;
    noise_energy += en * en;
  }
  if (target_energy == 0.0) return -kSiSnrCapDb;
  const double ratio = target_energy / (noise_energy + kSiSnrEpsRel * target_energy);
  const double db = 10.0 * std::log10(ratio);
  return std::max(db, -kSiSnrCapDb);
}

double si_snr_improvement(std::span<const double> est, std::span<const double> ref,
                          std::span<const double> mix) {
  return si_snr(est, ref) - si_snr(mix, ref);
}

std::vector<std::vector<double>> pairwise_si_snr(const std::vector<std::vector<double>>& ests,
                                                 const std::vector<std::vector<double>>& refs) {
  std::vector<std::vector<double>> m(ests.size(), std::vector<double>(refs.size()));
  for (size_t i = 0; i < ests.size(); ++i)
    for (size_t j = 0; j < refs.size(); ++j) m[i][j] = si_snr(ests[i], refs[j]);
  return m;
}

std::vector<int> exhaustive_max_assignment(const std::vector<std::vector<double>>& score) {
  const int n = static_cast<int>(score.size());
  std::vector<int> perm(n), best(n);
  std::iota(perm.begin(), perm.end(), 0);
  best = perm;
  double best_sum = -std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += score[i][perm[i]];
    if (s > best_sum) {
      best_sum = s;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

// Jonker-Volgenant style shortest augmenting path, O(n^3), cost-minimizing.
static std::vector<int> min_cost_assignment(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based with a dummy column 0
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      int i0 = p[j0], j1 = -1;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> assignment(n, -1);
  for (int j = 1; j <= n; ++j) assignment[p[j] - 1] = j - 1;
  return assignment;
}

std::vector<int> hungarian_max_assignment(const std::vector<std::vector<double>>& score) {
  const int n = static_cast<int>(score.size());
  std::vector<std::vector<double>> cost(n, std::vector<double>(n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) cost[i][j] = -score[i][j];
  return min_cost_assignment(cost);
}

AlignmentReport best_permutation_alignment(const std::vector<std::vector<double>>& ests,
                                           const std::vector<std::vector<double>>& refs,
                                           std::span<const double> mix) {
  if (ests.size() != refs.size() || ests.empty())
    fail(Errc::length_mismatch, "best_permutation_alignment: need equal, nonzero counts");
  const size_t n = ests.size();
  for (size_t i = 1; i < n; ++i)
    if (ests[i].size() != ests[0].size() || refs[i].size() != ests[0].size() || refs[0].size() != ests[0].size())
      fail(Errc::length_mismatch, "best_permutation_alignment: sequences must share one length");

  const auto score = pairwise_si_snr(ests, refs);
  const auto perm = (n <= 6) ? exhaustive_max_assignment(score) : hungarian_max_assignment(score);

  AlignmentReport rep;
  rep.permutation = perm;
  rep.per_source_si_snr_db.resize(n);
  double sum = 0.0;
  for (size_t i = 0; i < n; ++i) {
    rep.per_source_si_snr_db[i] = score[i][perm[i]];
    sum += rep.per_source_si_snr_db[i];
  }
  rep.mean_si_snr_db = sum / static_cast<double>(n);

  if (!mix.empty()) {
    double imp = 0.0;
    for (size_t i = 0; i < n; ++i) imp += rep.per_source_si_snr_db[i] - si_snr(mix, refs[perm[i]]);
    rep.mean_si_snr_improvement_db = imp / static_cast<double>(n);
  }
  return rep;
}

}  // namespace corfsep::metrics
