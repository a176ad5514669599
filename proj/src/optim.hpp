#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace lbsac {

// Eq. for large-batch runs: lr = base_lr * sqrt(batch / base_batch).
// No warm-up stage is applied anywhere in this project.
double scale_learning_rate(double base_learning_rate, long long base_batch_size,
                           long long batch_size);

enum class OptimizerKind { kAdamW, kLars, kLamb };

OptimizerKind optimizer_kind_from_string(const std::string& s);
const char* optimizer_kind_name(OptimizerKind k);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdamW;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double momentum = 0.9;    // LARS
  double trust_eps = 1e-8;  // LARS/LAMB denominator guard; tests zero it
};

// Parameter-update rules over a fixed list of parameter tensors. Each
// tensor (every weight matrix and every bias vector) is its own "layer"
// for the LARS/LAMB trust ratios.
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(OptimizerConfig cfg, const std::vector<const Tensor*>& params);

  // One update. grads must align with the params the optimizer was built
  // from; params are updated in place. Throws on non-finite gradients.
  void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads);

  std::uint64_t step_count() const { return step_count_; }
  const OptimizerConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  // Trust ratios from the most recent LARS/LAMB step, one per tensor.
  const std::vector<double>& last_trust_ratios() const { return last_trust_ratios_; }

  // LBO1 serialization.
  void save(const std::string& path) const;
  void load(const std::string& path);

 private:
  std::vector<double> last_trust_ratios_;
  OptimizerConfig cfg_;
  std::uint64_t step_count_ = 0;
  std::vector<Tensor> m_;         // first moment / momentum buffer
  std::vector<Tensor> v_;         // second moment (AdamW, LAMB)
  std::vector<int> shape_rows_, shape_cols_;

  void step_adamw(const std::vector<Tensor*>& params,
                  const std::vector<const Tensor*>& grads);
  void step_lars(const std::vector<Tensor*>& params,
                 const std::vector<const Tensor*>& grads);
  void step_lamb(const std::vector<Tensor*>& params,
                 const std::vector<const Tensor*>& grads);
};

}  // namespace lbsac
