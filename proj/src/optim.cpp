#include "optim.hpp"

#include <cmath>
#include <stdexcept>

#include "bin_io.hpp"

namespace lbsac {

double scale_learning_rate(double base_learning_rate, long long base_batch_size,
                           long long batch_size) {
  if (!(base_learning_rate > 0.0) || base_batch_size < 1 || batch_size < 1) {
    throw std::invalid_argument("scale_learning_rate: inputs must be positive");
  }
  return base_learning_rate *
         std::sqrt(static_cast<double>(batch_size) / static_cast<double>(base_batch_size));
}

OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "adamw") return OptimizerKind::kAdamW;
  if (s == "lars") return OptimizerKind::kLars;
  if (s == "lamb") return OptimizerKind::kLamb;
  throw std::invalid_argument("unknown optimizer: " + s);
}

const char* optimizer_kind_name(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::kAdamW: return "adamw";
    case OptimizerKind::kLars: return "lars";
    case OptimizerKind::kLamb: return "lamb";
  }
  return "?";
}

Optimizer::Optimizer(OptimizerConfig cfg, const std::vector<const Tensor*>& params)
    : cfg_(cfg) {
  for (const Tensor* p : params) {
    m_.push_back(Tensor::zeros(p->rows, p->cols));
    v_.push_back(Tensor::zeros(p->rows, p->cols));
    shape_rows_.push_back(p->rows);
    shape_cols_.push_back(p->cols);
  }
}

namespace {

void check_aligned(const std::vector<Tensor*>& params,
                   const std::vector<const Tensor*>& grads, size_t slots) {
  if (params.size() != slots || grads.size() != slots) {
    throw std::invalid_argument("optimizer step: parameter list does not match state");
  }
  for (size_t t = 0; t < slots; t++) {
    if (!params[t]->same_shape(*grads[t])) {
      throw std::invalid_argument("optimizer step: gradient shape mismatch at tensor " +
                                  std::to_string(t));
    }
    for (size_t i = 0; i < grads[t]->data.size(); i++) {
      if (!std::isfinite(grads[t]->data[i])) {
        throw std::runtime_error("optimizer step: non-finite gradient in tensor " +
                                 std::to_string(t) + " at element " + std::to_string(i));
      }
    }
  }
}

double l2_norm(const Tensor& t) {
  double acc = 0.0;
  for (float x : t.data) acc += static_cast<double>(x) * x;
  return std::sqrt(acc);
}

}  // namespace

void Optimizer::step(const std::vector<Tensor*>& params,
                     const std::vector<const Tensor*>& grads) {
  check_aligned(params, grads, m_.size());
  step_count_++;
  switch (cfg_.kind) {
    case OptimizerKind::kAdamW: step_adamw(params, grads); break;
    case OptimizerKind::kLars: step_lars(params, grads); break;
    case OptimizerKind::kLamb: step_lamb(params, grads); break;
  }
}

void Optimizer::step_adamw(const std::vector<Tensor*>& params,
                           const std::vector<const Tensor*>& grads) {
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
  for (size_t t = 0; t < m_.size(); t++) {
    float* p = params[t]->data.data();
    const float* g = grads[t]->data.data();
    float* m = m_[t].data.data();
    float* v = v_[t].data.data();
    const size_t n = params[t]->data.size();
    for (size_t i = 0; i < n; i++) {
      const double gi = g[i];
      const double mi = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      const double vi = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      const double update = mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[i];
      p[i] = static_cast<float>(p[i] - cfg_.lr * update);
    }
  }
}

void Optimizer::step_lars(const std::vector<Tensor*>& params,
                          const std::vector<const Tensor*>& grads) {
  last_trust_ratios_.clear();
  for (size_t t = 0; t < m_.size(); t++) {
    const double pn = l2_norm(*params[t]);
    const double gn = l2_norm(*grads[t]);
    const double denom = gn + cfg_.weight_decay * pn + cfg_.trust_eps;
    const double trust = (pn == 0.0 || denom == 0.0) ? 1.0 : pn / denom;
    last_trust_ratios_.push_back(trust);
    float* p = params[t]->data.data();
    const float* g = grads[t]->data.data();
    float* mom = m_[t].data.data();
    const size_t n = params[t]->data.size();
    for (size_t i = 0; i < n; i++) {
      const double d = static_cast<double>(g[i]) + cfg_.weight_decay * p[i];
      const double mi = cfg_.momentum * mom[i] + d;
      mom[i] = static_cast<float>(mi);
      p[i] = static_cast<float>(p[i] - cfg_.lr * trust * mi);
    }
  }
}

void Optimizer::step_lamb(const std::vector<Tensor*>& params,
                          const std::vector<const Tensor*>& grads) {
  last_trust_ratios_.clear();
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
  std::vector<double> direction;
  for (size_t t = 0; t < m_.size(); t++) {
    float* p = params[t]->data.data();
    const float* g = grads[t]->data.data();
    float* m = m_[t].data.data();
    float* v = v_[t].data.data();
    const size_t n = params[t]->data.size();
    direction.assign(n, 0.0);
    double rn_acc = 0.0;
    double pn_acc = 0.0;
    for (size_t i = 0; i < n; i++) {
      const double gi = g[i];
      const double mi = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      const double vi = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double r = (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps) +
                       cfg_.weight_decay * p[i];
      direction[i] = r;
      rn_acc += r * r;
      pn_acc += static_cast<double>(p[i]) * p[i];
    }
    const double rn = std::sqrt(rn_acc);
    const double pn = std::sqrt(pn_acc);
    const double trust = (pn == 0.0 || rn == 0.0) ? 1.0 : pn / (rn + cfg_.trust_eps);
    last_trust_ratios_.push_back(trust);
    for (size_t i = 0; i < n; i++) {
      p[i] = static_cast<float>(p[i] - cfg_.lr * trust * direction[i]);
    }
  }
}

// ---------------------------------------------------------------------------
// LBO1 serialization

namespace {
constexpr char kOptMagic[4] = {'L', 'B', 'O', '1'};
constexpr std::uint32_t kOptVersion = 1;
}  // namespace

void Optimizer::save(const std::string& path) const {
  BinWriter w(path);
  w.magic(kOptMagic);
  w.u32(kOptVersion);
  w.u32(static_cast<std::uint32_t>(cfg_.kind));
  w.u64(step_count_);
  w.f64(cfg_.lr);
  w.f64(cfg_.beta1);
  w.f64(cfg_.beta2);
  w.f64(cfg_.eps);
  w.f64(cfg_.weight_decay);
  w.f64(cfg_.momentum);
  w.f64(cfg_.trust_eps);
  w.u32(static_cast<std::uint32_t>(m_.size()));
  for (size_t t = 0; t < m_.size(); t++) {
    w.u32(static_cast<std::uint32_t>(shape_rows_[t]));
    w.u32(static_cast<std::uint32_t>(shape_cols_[t]));
  }
  for (const auto& t : m_) w.f32_blob(t.data);
  for (const auto& t : v_) w.f32_blob(t.data);
  w.close();
}

void Optimizer::load(const std::string& path) {
  BinReader r(path);
  r.expect_magic(kOptMagic);
  if (r.u32("version") != kOptVersion) throw IoError(path + ": unsupported LBO version");
  const std::uint32_t kind = r.u32("kind");
  if (kind > 2) throw IoError(path + ": bad optimizer kind");
  cfg_.kind = static_cast<OptimizerKind>(kind);
  step_count_ = r.u64("step count");
  cfg_.lr = r.f64("lr");
  cfg_.beta1 = r.f64("beta1");
  cfg_.beta2 = r.f64("beta2");
  cfg_.eps = r.f64("eps");
  cfg_.weight_decay = r.f64("weight decay");
  cfg_.momentum = r.f64("momentum");
  cfg_.trust_eps = r.f64("trust eps");
  const std::uint32_t count = r.u32("tensor count");
  if (count != m_.size()) {
    throw IoError(path + ": optimizer state has " + std::to_string(count) +
                  " tensors, expected " + std::to_string(m_.size()));
  }
  for (size_t t = 0; t < m_.size(); t++) {
    const int rows = static_cast<int>(r.u32("rows"));
    const int cols = static_cast<int>(r.u32("cols"));
    if (rows != shape_rows_[t] || cols != shape_cols_[t]) {
      throw IoError(path + ": optimizer state shape mismatch at tensor " +
                    std::to_string(t));
    }
  }
  for (auto& t : m_) t.data = r.f32_blob(t.data.size(), "first moment");
  for (auto& t : v_) t.data = r.f32_blob(t.data.size(), "second moment");
  if (!r.at_eof()) throw IoError(path + ": trailing bytes");
}

}  // namespace lbsac
