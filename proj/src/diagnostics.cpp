#include "diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "mathfn.hpp"

namespace lbsac {

double lcb_coefficient(int ensemble_size) {
  if (ensemble_size < 1) {
    throw std::invalid_argument("lcb_coefficient: ensemble size must be >= 1");
  }
  const double n = static_cast<double>(ensemble_size);
  const double pi = 3.14159265358979323846;
  const double num = n - pi / 8.0;
  const double den = (n - pi / 8.0) + (1.0 - pi / 8.0);
  return inverse_normal_cdf(num / den);
}

int diagnostics_threads() {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  if (const char* cap = std::getenv("LBSAC_THREADS")) {
    const long v = std::strtol(cap, nullptr, 10);
    if (v >= 1 && static_cast<unsigned>(v) < hw) hw = static_cast<unsigned>(v);
  }
  return static_cast<int>(std::min(hw, 64u));
}

double expected_min_mc(int ensemble_size, std::int64_t samples, std::uint64_t seed) {
  if (ensemble_size < 1) {
    throw std::invalid_argument("expected_min_mc: ensemble size must be >= 1");
  }
  if (samples < 1) throw std::invalid_argument("expected_min_mc: samples must be >= 1");

  const RngStream stream(seed, 40);
  const auto worker = [&](std::int64_t lo, std::int64_t hi) {
    double acc = 0.0;
    for (std::int64_t s = lo; s < hi; s++) {
      const std::uint64_t base = static_cast<std::uint64_t>(s) *
                                 static_cast<std::uint64_t>(ensemble_size);
      double umin = stream.unit_at(base);
      for (int j = 1; j < ensemble_size; j++) {
        umin = std::min(umin, stream.unit_at(base + static_cast<std::uint64_t>(j)));
      }
      acc += inverse_normal_cdf(umin);  // min commutes with the monotone quantile
    }
    return acc;
  };

  const int n_threads = static_cast<int>(
      std::min<std::int64_t>(diagnostics_threads(), std::max<std::int64_t>(1, samples / 65536)));
  if (n_threads <= 1) return worker(0, samples) / static_cast<double>(samples);

  std::vector<double> partial(static_cast<size_t>(n_threads), 0.0);
  std::vector<std::thread> threads;
  const std::int64_t chunk = (samples + n_threads - 1) / n_threads;
  for (int t = 0; t < n_threads; t++) {
    const std::int64_t lo = t * chunk;
    const std::int64_t hi = std::min<std::int64_t>(samples, lo + chunk);
    threads.emplace_back([&, t, lo, hi] { partial[static_cast<size_t>(t)] = worker(lo, hi); });
  }
  for (auto& th : threads) th.join();
  double acc = 0.0;
  for (double p : partial) acc += p;
  return acc / static_cast<double>(samples);
}

EnsembleStats ensemble_stats(const std::vector<double>& q) {
  EnsembleStats s;
  s.n = static_cast<int>(q.size());
  if (s.n == 0) return s;
  double mean = 0.0;
  for (double v : q) mean += v;
  mean /= s.n;
  double var = 0.0;
  for (double v : q) var += (v - mean) * (v - mean);
  var /= s.n;
  s.mean = mean;
  s.stddev = std::sqrt(var);
  return s;
}

namespace {

// Mean over probe states of the per-state ensemble std.
double mean_ensemble_std(const Tensor& q_values) {
  const int n = q_values.rows;
  const int batch = q_values.cols;
  double total = 0.0;
  for (int c = 0; c < batch; c++) {
    double mean = 0.0;
    for (int r = 0; r < n; r++) mean += q_values.at(r, c);
    mean /= n;
    double var = 0.0;
    for (int r = 0; r < n; r++) {
      const double d = q_values.at(r, c) - mean;
      var += d * d;
    }
    total += std::sqrt(var / n);
  }
  return total / batch;
}

}  // namespace

std::optional<double> std_ratio(const CriticEnsemble& ensemble,
                                const Tensor& probe_states,
                                const Tensor& dataset_actions, RngStream& rng) {
  if (probe_states.rows != dataset_actions.rows) {
    throw std::invalid_argument("std_ratio: probe batch mismatch");
  }
  Tensor random_actions(dataset_actions.rows, dataset_actions.cols);
  for (auto& a : random_actions.data) {
    a = static_cast<float>(rng.next_uniform(-1.0, 1.0));
  }
  const Tensor q_rand = ensemble_forward(ensemble, probe_states, random_actions, false);
  const Tensor q_data = ensemble_forward(ensemble, probe_states, dataset_actions, false);
  const double denom = mean_ensemble_std(q_data);
  if (denom < 1e-8) return std::nullopt;
  return mean_ensemble_std(q_rand) / denom;
}

double action_mse(const PolicyNet& policy, const Tensor& probe_states,
                  const Tensor& dataset_actions) {
  if (probe_states.rows != dataset_actions.rows) {
    throw std::invalid_argument("action_mse: probe batch mismatch");
  }
  Tensor mu, log_std;
  policy_heads(policy, probe_states, &mu, &log_std);
  double acc = 0.0;
  for (size_t i = 0; i < mu.data.size(); i++) {
    const double d = std::tanh(static_cast<double>(mu.data[i])) -
                     static_cast<double>(dataset_actions.data[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(mu.data.size());
}

ConvergenceReport detect_convergence(const std::vector<DiagnosticsRecord>& records,
                                     const ConvergenceCriterion& criterion) {
  if (records.empty()) {
    throw std::invalid_argument("detect_convergence: no records");
  }
  if (criterion.tolerance < 0.0) {
    throw std::invalid_argument("detect_convergence: tolerance must be >= 0");
  }
  const double threshold = criterion.target_score - criterion.tolerance;
  ConvergenceReport out;
  for (const auto& r : records) {
    if (r.normalized_score >= threshold) {
      out.converged = true;
      out.step = r.step;
      out.wall_clock_s = r.wall_clock_s;
      out.score_at_convergence = r.normalized_score;
      return out;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV

const char* const kDiagnosticsCsvHeader =
    "step,wall_clock_s,std_ratio,action_mse,mean_return,normalized_score,alpha,"
    "critic_loss,actor_loss";

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

std::string diagnostics_csv_line(const DiagnosticsRecord& r) {
  std::string line = std::to_string(r.step);
  line += "," + fmt(r.wall_clock_s);
  line += ",";
  if (r.std_ratio) line += fmt(*r.std_ratio);  // empty field = missing value
  line += "," + fmt(r.action_mse);
  line += "," + fmt(r.mean_return);
  line += "," + fmt(r.normalized_score);
  line += "," + fmt(r.alpha);
  line += "," + fmt(r.critic_loss);
  line += "," + fmt(r.actor_loss);
  return line;
}

DiagnosticsWriter::DiagnosticsWriter(const std::string& path, std::uint64_t config_hash)
    : path_(path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open diagnostics CSV: " + path);
  out << "# config_hash=" << config_hash << "\n" << kDiagnosticsCsvHeader << "\n";
}

void DiagnosticsWriter::append(const DiagnosticsRecord& r) {
  std::ofstream out(path_, std::ios::app);
  if (!out) throw std::runtime_error("cannot append diagnostics CSV: " + path_);
  out << diagnostics_csv_line(r) << "\n";
}

DiagnosticsFile read_diagnostics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open diagnostics CSV: " + path);
  DiagnosticsFile file;
  std::string line;
  if (!std::getline(in, line) || line.rfind("# config_hash=", 0) != 0) {
    throw std::runtime_error(path + ": missing config hash line");
  }
  file.config_hash = std::strtoull(line.c_str() + 14, nullptr, 10);
  if (!std::getline(in, line) || line != kDiagnosticsCsvHeader) {
    throw std::runtime_error(path + ": unexpected CSV header");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    while (fields.size() < 9) fields.emplace_back();
    DiagnosticsRecord r;
    r.step = std::strtoll(fields[0].c_str(), nullptr, 10);
    r.wall_clock_s = std::strtod(fields[1].c_str(), nullptr);
    if (!fields[2].empty()) r.std_ratio = std::strtod(fields[2].c_str(), nullptr);
    r.action_mse = std::strtod(fields[3].c_str(), nullptr);
    r.mean_return = std::strtod(fields[4].c_str(), nullptr);
    r.normalized_score = std::strtod(fields[5].c_str(), nullptr);
    r.alpha = std::strtod(fields[6].c_str(), nullptr);
    r.critic_loss = std::strtod(fields[7].c_str(), nullptr);
    r.actor_loss = std::strtod(fields[8].c_str(), nullptr);
    file.records.push_back(r);
  }
  return file;
}

}  // namespace lbsac
