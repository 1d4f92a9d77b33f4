#pragma once

#include <optional>
#include <span>
#include <vector>

namespace corfsep::metrics {

// Relative epsilon added to the noise energy; makes SI-SNR finite with a
// +80 dB cap at perfect reconstruction. Mirrored at -80 dB when the target
// projection vanishes.
constexpr double kSiSnrEpsRel = 1e-8;
constexpr double kSiSnrCapDb = 80.0;

std::vector<double> mean_normalize(std::span<const double> x);

// Scale-invariant SNR in dB of `est` against reference `ref` (Eq. form:
// project the mean-normalized estimate onto the reference, score the ratio
// of projected energy to residual energy). Errors: length mismatch, empty
// input, reference with zero energy after mean removal.
double si_snr(std::span<const double> est, std::span<const double> ref);

double si_snr_improvement(std::span<const double> est, std::span<const double> ref,
                          std::span<const double> mix);

struct AlignmentReport {
  std::vector<int> permutation;  // estimate index -> reference index
  std::vector<double> per_source_si_snr_db;
  double mean_si_snr_db = 0.0;
  std::optional<double> mean_si_snr_improvement_db;  // set when a mixture is given
};

// Pairwise SI-SNR matrix m[i][j] = si_snr(ests[i], refs[j]).
std::vector<std::vector<double>> pairwise_si_snr(const std::vector<std::vector<double>>& ests,
                                                 const std::vector<std::vector<double>>& refs);

// Bijection maximizing the mean SI-SNR. Exhaustive for N <= 6, optimal
// assignment on the pairwise matrix above. When `mix` is given the report
// also carries the mean improvement over the mixture.
AlignmentReport best_permutation_alignment(const std::vector<std::vector<double>>& ests,
                                           const std::vector<std::vector<double>>& refs,
                                           std::span<const double> mix = {});

// Both search strategies, exposed so tests can cross-check them.
std::vector<int> exhaustive_max_assignment(const std::vector<std::vector<double>>& score);
std::vector<int> hungarian_max_assignment(const std::vector<std::vector<double>>& score);

}  // namespace corfsep::metrics
