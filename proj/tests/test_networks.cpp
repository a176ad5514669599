#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "bin_io.hpp"
#include "net.hpp"
#include "rng.hpp"

using namespace lbsac;

namespace {

Tensor random_states(int batch, int dim, RngStream& rng) {
  Tensor t(batch, dim);
  for (auto& v : t.data) v = static_cast<float>(rng.next_uniform(-1.0, 1.0));
  return t;
}

// Trunk zeroed out so the heads are constant: mu = mu_bias, log_std = ls_bias.
PolicyNet constant_head_policy(int obs_dim, int act_dim, float mu_bias, float ls_bias) {
  RngStream rng(0, 0);
  PolicyNet p = make_policy(obs_dim, act_dim, rng);
  for (auto* t : p.trunk.param_tensors()) {
    for (auto& v : t->data) v = 0.0f;
  }
  for (auto& v : p.mu_head.w.data) v = 0.0f;
  for (auto& v : p.mu_head.b.data) v = mu_bias;
  for (auto& v : p.log_std_head.w.data) v = 0.0f;
  for (auto& v : p.log_std_head.b.data) v = ls_bias;
  return p;
}

}  // namespace

TEST_CASE("policy: actions strictly inside (-1,1), deterministic mode repeatable") {
  RngStream init(3, 0);
  PolicyNet p = make_policy(2, 1, init);
  RngStream srng(4, 0);
  Tensor states = random_states(64, 2, srng);

  RngStream noise(5, 0);
  PolicySample s = policy_sample(p, states, SampleMode::kStochastic, noise);
  for (float a : s.actions.data) {
    CHECK(a > -1.0f);
    CHECK(a < 1.0f);
  }
  RngStream unused1(6, 0), unused2(6, 0);
  PolicySample d1 = policy_sample(p, states, SampleMode::kDeterministic, unused1);
  PolicySample d2 = policy_sample(p, states, SampleMode::kDeterministic, unused2);
  CHECK(d1.actions.data == d2.actions.data);
  CHECK(d1.log_probs.data.empty());
}

TEST_CASE("policy: mu=0 with sigma at the clamp floor gives near-zero actions") {
  PolicyNet p = constant_head_policy(2, 1, 0.0f, -20.0f);  // log-std clamps to -5
  Tensor states = Tensor::zeros(8, 2);
  RngStream noise(1, 0);
  PolicySample s = policy_sample(p, states, SampleMode::kStochastic, noise);
  for (int r = 0; r < 8; r++) {
    CHECK(std::abs(s.actions.data[r]) < 0.05f);
    // tanh correction is -log(1 - a^2 + 1e-6) ~ 0 for tiny a: log-prob should
    // match the pure Gaussian term
    const double eps = std::atanh(static_cast<double>(s.actions.data[r])) / std::exp(-5.0);
    const double gaussian_lp = -0.5 * eps * eps + 5.0 - 0.9189385332046727;
    CHECK(s.log_probs.data[r] == doctest::Approx(gaussian_lp).epsilon(1e-3));
  }
  RngStream u(2, 0);
  PolicySample det = policy_sample(p, states, SampleMode::kDeterministic, u);
  for (float a : det.actions.data) CHECK(a == 0.0f);
}

TEST_CASE("policy: empirical density of sampled actions matches log_prob (KL)") {
  const float mu_b = 0.3f, ls_b = -0.7f;
  PolicyNet p = constant_head_policy(2, 1, mu_b, ls_b);
  Tensor state = Tensor::zeros(1, 1 + 1);
  RngStream noise(99, 0);

  const int n_samples = 1000000;
  const int n_bins = 40;
  std::vector<double> counts(n_bins, 0.0);
  Tensor big_state = Tensor::zeros(1, 2);
  // sample in one pass via the same head constants (cheap manual loop that
  // still goes through policy_sample batch by batch)
  const int chunk = 10000;
  for (int done = 0; done < n_samples; done += chunk) {
    Tensor states = Tensor::zeros(chunk, 2);
    PolicySample s = policy_sample(p, states, SampleMode::kStochastic, noise);
    for (float a : s.actions.data) {
      int bin = static_cast<int>((static_cast<double>(a) + 1.0) / 2.0 * n_bins);
      bin = std::min(std::max(bin, 0), n_bins - 1);
      counts[static_cast<size_t>(bin)] += 1.0;
    }
  }

  // model probability mass per bin from the computed log-density
  const double width = 2.0 / n_bins;
  std::vector<double> model(n_bins, 0.0);
  double model_total = 0.0;
  for (int b = 0; b < n_bins; b++) {
    const double a = -1.0 + (b + 0.5) * width;
    const double u = std::atanh(a);
    const double sigma = std::exp(static_cast<double>(ls_b));
    const double z = (u - mu_b) / sigma;
    const double lp = -0.5 * z * z - ls_b - 0.9189385332046727 -
                      std::log(1.0 - a * a + 1e-6);
    model[static_cast<size_t>(b)] = std::exp(lp) * width;
    model_total += model[static_cast<size_t>(b)];
  }
  double kl = 0.0;
  for (int b = 0; b < n_bins; b++) {
    const double pe = counts[static_cast<size_t>(b)] / n_samples;
    const double pm = model[static_cast<size_t>(b)] / model_total;
    if (pe > 0.0) kl += pe * std::log(pe / pm);
  }
  CHECK(kl < 0.01);
  (void)state;
  (void)big_state;
}

TEST_CASE("policy: non-finite output raises with a layer index") {
  RngStream init(3, 0);
  PolicyNet p = make_policy(2, 1, init);
  p.trunk.layers[1].b.data[0] = std::numeric_limits<float>::infinity();
  Tensor states = Tensor::full(4, 2, 0.5f);
  RngStream noise(1, 0);
  CHECK_THROWS_WITH_AS(policy_sample(p, states, SampleMode::kStochastic, noise),
                       doctest::Contains("layer 1"), std::runtime_error);
}

TEST_CASE("ensemble: N=1 equals plain MLP forward") {
  RngStream init(7, 0);
  CriticEnsemble e = make_ensemble(1, 2, 1, false, init);
  RngStream srng(8, 0);
  Tensor states = random_states(16, 2, srng);
  Tensor actions = random_states(16, 1, srng);
  Tensor q = ensemble_forward(e, states, actions, false);
  REQUIRE(q.rows == 1);
  Tensor joined(16, 3);
  for (int r = 0; r < 16; r++) {
    joined.at(r, 0) = states.at(r, 0);
    joined.at(r, 1) = states.at(r, 1);
    joined.at(r, 2) = actions.at(r, 0);
  }
  Tensor direct = mlp_eval(e.online[0], joined);
  for (int r = 0; r < 16; r++) CHECK(q.at(0, r) == direct.data[r]);
}

TEST_CASE("ensemble: zero final layer makes every Q the final bias") {
  RngStream init(9, 0);
  CriticEnsemble e = make_ensemble(3, 2, 1, false, init);
  for (auto& net : e.online) {
    auto& head = net.layers.back();
    for (auto& v : head.w.data) v = 0.0f;
    head.b.data[0] = 2.5f;
  }
  RngStream srng(10, 0);
  Tensor states = random_states(5, 2, srng);
  Tensor actions = random_states(5, 1, srng);
  Tensor q = ensemble_forward(e, states, actions, false);
  for (float v : q.data) CHECK(v == 2.5f);
}

TEST_CASE("layernorm: input scaling leaves normalized output unchanged") {
  RngStream rng(11, 0);
  Graph g;
  Tensor z(4, 16);
  for (auto& v : z.data) v = static_cast<float>(rng.next_uniform(-2.0, 2.0));
  Tensor z10 = z;
  for (auto& v : z10.data) v *= 10.0f;
  Value a = g.leaf(z);
  Value b = g.leaf(z10);
  const Tensor na = g.eval(g.layernorm(a));
  const Tensor nb = g.eval(g.layernorm(b));
  for (size_t i = 0; i < na.data.size(); i++) {
    CHECK(na.data[i] == doctest::Approx(nb.data[i]).epsilon(1e-5));
  }
}

TEST_CASE("layernorm critics evaluate and differ from plain critics") {
  RngStream init(12, 0);
  CriticEnsemble plain = make_ensemble(2, 2, 1, false, init);
  RngStream init2(12, 0);
  CriticEnsemble normed = make_ensemble(2, 2, 1, true, init2);
  RngStream srng(13, 0);
  Tensor states = random_states(8, 2, srng);
  Tensor actions = random_states(8, 1, srng);
  Tensor qp = ensemble_forward(plain, states, actions, false);
  Tensor qn = ensemble_forward(normed, states, actions, false);
  REQUIRE(qp.size() == qn.size());
  bool any_diff = false;
  for (size_t i = 0; i < qp.data.size(); i++) {
    if (qp.data[i] != qn.data[i]) any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("polyak: tau endpoints and the 5e-3 example") {
  RngStream init(14, 0);
  CriticEnsemble e = make_ensemble(2, 2, 1, false, init);
  CHECK_THROWS_AS(polyak_update(e, -0.1), std::invalid_argument);
  CHECK_THROWS_AS(polyak_update(e, 1.5), std::invalid_argument);

  // tau = 0: unchanged
  for (auto& net : e.online) {
    for (auto* t : net.param_tensors()) {
      for (auto& v : t->data) v = 1.0f;
    }
  }
  for (auto& net : e.target) {
    for (auto* t : net.param_tensors()) {
      for (auto& v : t->data) v = 0.0f;
    }
  }
  polyak_update(e, 0.0);
  CHECK(e.target[0].layers[0].w.data[0] == 0.0f);
  // tau = 0.005 on (target 0, online 1)
  polyak_update(e, 0.005);
  CHECK(e.target[0].layers[0].w.data[0] == doctest::Approx(0.005).epsilon(1e-7));
  // tau = 1: exact copy
  polyak_update(e, 1.0);
  for (int j = 0; j < e.size(); j++) {
    auto on = e.online[static_cast<size_t>(j)].param_tensors();
    auto tg = e.target[static_cast<size_t>(j)].param_tensors();
    for (size_t t = 0; t < on.size(); t++) CHECK(on[t]->data == tg[t]->data);
  }
}

TEST_CASE("polyak: contraction toward the online parameters") {
  RngStream init(15, 0);
  CriticEnsemble e = make_ensemble(1, 2, 1, false, init);
  RngStream perturb(16, 0);
  for (auto* t : e.target[0].param_tensors()) {
    for (auto& v : t->data) v += static_cast<float>(perturb.next_uniform(-0.5, 0.5));
  }
  const auto dist = [&]() {
    double acc = 0.0;
    auto on = e.online[0].param_tensors();
    auto tg = e.target[0].param_tensors();
    for (size_t t = 0; t < on.size(); t++) {
      for (size_t i = 0; i < on[t]->data.size(); i++) {
        const double d = tg[t]->data[i] - on[t]->data[i];
        acc += d * d;
      }
    }
    return std::sqrt(acc);
  };
  const double before = dist();
  const double tau = 0.12;
  polyak_update(e, tau);
  CHECK(dist() == doctest::Approx((1.0 - tau) * before).epsilon(1e-5));
}

TEST_CASE("min_over_ensemble: examples and the Monte-Carlo oracle") {
  Tensor q(2, 2);
  q.at(0, 0) = 1.0f;
  q.at(0, 1) = 2.0f;
  q.at(1, 0) = 0.0f;
  q.at(1, 1) = 3.0f;
  Tensor m = min_over_ensemble(q);
  CHECK(m.data[0] == 0.0f);
  CHECK(m.data[1] == 2.0f);

  Tensor single(1, 3);
  single.data = {3.0f, -1.0f, 0.5f};
  CHECK(min_over_ensemble(single).data == single.data);

  // nested prefix minima of shared draws: strictly monotone in N, and the
  // N=10 mean matches E[min of 10 N(0,1)] = -1.5388
  RngStream rng(17, 0);
  const int n_samples = 1000000;
  const int sizes[] = {1, 2, 5, 10, 50};
  double sums[5] = {0, 0, 0, 0, 0};
  for (int s = 0; s < n_samples; s++) {
    double running = 1e30;
    int next = 0;
    for (int j = 1; j <= 50; j++) {
      running = std::min(running, rng.next_normal());
      if (next < 5 && j == sizes[next]) {
        sums[next] += running;
        next++;
      }
    }
  }
  double means[5];
  for (int i = 0; i < 5; i++) means[i] = sums[i] / n_samples;
  for (int i = 1; i < 5; i++) CHECK(means[i] < means[i - 1]);
  CHECK(means[0] == doctest::Approx(0.0).epsilon(0.01));
  CHECK(means[3] == doctest::Approx(-1.5388).epsilon(0.01));
}

TEST_CASE("min_over_ensemble <= mean over ensemble") {
  RngStream rng(18, 0);
  Tensor q(7, 33);
  for (auto& v : q.data) v = static_cast<float>(rng.next_uniform(-5.0, 5.0));
  Tensor m = min_over_ensemble(q);
  for (int c = 0; c < q.cols; c++) {
    double mean = 0.0;
    for (int r = 0; r < q.rows; r++) mean += q.at(r, c);
    mean /= q.rows;
    CHECK(m.data[c] <= mean);
  }
}

TEST_CASE("checkpoint: LBN1 round trip for policy and layernorm critic") {
  namespace fs = std::filesystem;
  const std::string dir = (fs::temp_directory_path() / "lbsac_net_test").string();
  fs::create_directories(dir);

  RngStream init(19, 0);
  PolicyNet p = make_policy(4, 2, init);
  save_policy(dir + "/p.lbn", p);
  RngStream init2(20, 0);
  PolicyNet q = make_policy(4, 2, init2);
  load_policy(dir + "/p.lbn", q);
  CHECK(q.mu_head.w.data == p.mu_head.w.data);
  CHECK(q.trunk.layers[2].b.data == p.trunk.layers[2].b.data);

  Mlp critic = make_mlp(5, 1, true, init);
  save_mlp(dir + "/c.lbn", critic);
  Mlp critic2 = make_mlp(5, 1, true, init2);
  load_mlp(dir + "/c.lbn", critic2);
  CHECK(critic2.norms[1].gain.data == critic.norms[1].gain.data);
  CHECK(critic2.layers[3].w.data == critic.layers[3].w.data);

  Mlp wrong_flag = make_mlp(5, 1, false, init2);
  CHECK_THROWS_AS(load_mlp(dir + "/c.lbn", wrong_flag), IoError);

  // truncated file
  {
    std::ifstream in(dir + "/c.lbn", std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(in)), {});
    std::ofstream out(dir + "/c_trunc.lbn", std::ios::binary);
    out.write(all.data(), static_cast<std::streamsize>(all.size() / 2));
  }
  Mlp critic3 = make_mlp(5, 1, true, init2);
  CHECK_THROWS_AS(load_mlp(dir + "/c_trunc.lbn", critic3), IoError);

  // wrong magic
  {
    std::ofstream out(dir + "/bad.lbn", std::ios::binary);
    out << "NOPE then some bytes";
  }
  CHECK_THROWS_AS(load_mlp(dir + "/bad.lbn", critic3), IoError);
}
