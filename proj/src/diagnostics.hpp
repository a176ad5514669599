#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "net.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace lbsac {

// Lower-confidence-bound coefficient of a size-N ensemble: the factor k in
// E[min_j Q_j] ~ m - k * sigma for i.i.d. Gaussian critics,
//   k(N) = Phi^-1((N - pi/8) / (N - pi/4 + 1)).
// The denominator is evaluated as (N - pi/8) + (1 - pi/8) so N = 1 hits the
// ratio 0.5 exactly in floating point and the coefficient is exactly 0.
double lcb_coefficient(int ensemble_size);

// Monte-Carlo estimate of E[min of N i.i.d. standard normals], the oracle
// the coefficient is validated against. Samples the minimum directly via the
// inverse CDF: min_j Phi^-1(u_j) = Phi^-1(min_j u_j), so each sample costs N
// uniform draws and a single quantile evaluation. Counter-based draws make
// the result independent of the number of worker threads.
double expected_min_mc(int ensemble_size, std::int64_t samples, std::uint64_t seed);

// Worker-thread budget: hardware concurrency capped by LBSAC_THREADS.
int diagnostics_threads();

struct EnsembleStats {
  double mean = 0.0;
  double stddev = 0.0;  // population (1/N)
  int n = 0;
};

EnsembleStats ensemble_stats(const std::vector<double>& q);

// Ratio of ensemble std on uniform-random actions to ensemble std on the
// dataset actions, averaged over the probe states. Returns nullopt when the
// denominator collapses (e.g. N = 1).
std::optional<double> std_ratio(const CriticEnsemble& ensemble,
                                const Tensor& probe_states,
                                const Tensor& dataset_actions, RngStream& rng);

// Mean squared distance between the deterministic policy actions tanh(mu)
// and the dataset actions.
double action_mse(const PolicyNet& policy, const Tensor& probe_states,
                  const Tensor& dataset_actions);

struct DiagnosticsRecord {
  std::int64_t step = 0;
  double wall_clock_s = 0.0;
  std::optional<double> std_ratio;
  double action_mse = 0.0;
  double mean_return = 0.0;
  double normalized_score = 0.0;
  double alpha = 0.0;
  double critic_loss = 0.0;
  double actor_loss = 0.0;
};

struct ConvergenceCriterion {
  double target_score = 0.0;
  double tolerance = 2.0;
};

struct ConvergenceReport {
  bool converged = false;
  std::int64_t step = 0;
  double wall_clock_s = 0.0;
  double score_at_convergence = 0.0;
};

// First record whose normalized score is >= target - tolerance.
ConvergenceReport detect_convergence(const std::vector<DiagnosticsRecord>& records,
                                     const ConvergenceCriterion& criterion);

// Append-only per-run CSV. Column order is fixed; the first line carries the
// config hash so reports refuse to mix runs from different configs.
extern const char* const kDiagnosticsCsvHeader;
std::string diagnostics_csv_line(const DiagnosticsRecord& r);
class DiagnosticsWriter {
 public:
  DiagnosticsWriter(const std::string& path, std::uint64_t config_hash);
  void append(const DiagnosticsRecord& r);

 private:
  std::string path_;
};

struct DiagnosticsFile {
  std::uint64_t config_hash = 0;
  std::vector<DiagnosticsRecord> records;
};
DiagnosticsFile read_diagnostics_csv(const std::string& path);

}  // namespace lbsac
