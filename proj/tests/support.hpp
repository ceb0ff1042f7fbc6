#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dhmd/training.hpp"

namespace dhmd::test {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(shape);
  std::normal_distribution<double> n(0.0, scale);
  for (double& v : t.data) v = n(rng);
  return t;
}

inline Mask ragged_mask(std::size_t B, std::size_t T, std::mt19937_64& rng) {
  Mask m(B, T, false);
  std::uniform_int_distribution<std::size_t> len(1, T);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t L = b == 0 ? T : len(rng);
    for (std::size_t t = 0; t < L; ++t) m.valid[b * T + t] = 1;
  }
  return m;
}

inline MultimodalSample random_sample(const std::array<std::size_t, kNumModalities>& dims,
                                      const std::array<std::size_t, kNumModalities>& steps, double label,
                                      const std::string& id, std::mt19937_64& rng) {
  MultimodalSample s;
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    std::vector<float> data(steps[m] * dims[m]);
    for (float& v : data) v = n(rng);
    s.streams[m] = make_sequence(static_cast<Modality>(m), steps[m], dims[m], std::move(data));
  }
  s.label = label;
  s.class_id = class_id_for_label(label, TaskType::Regression);
  s.sample_id = id;
  return s;
}

// Ragged toy batch with two classes present in every modality.
inline std::vector<MultimodalSample> toy_samples(std::size_t B, const std::array<std::size_t, kNumModalities>& dims,
                                                 std::uint64_t seed, std::size_t max_steps = 6) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> len(2, max_steps);
  std::vector<MultimodalSample> out;
  for (std::size_t b = 0; b < B; ++b) {
    const double label = b % 2 == 0 ? -2.0 + 0.1 * static_cast<double>(b) : 1.5 + 0.1 * static_cast<double>(b);
    out.push_back(random_sample(dims, {len(rng), len(rng), len(rng)}, label, "toy" + std::to_string(b), rng));
  }
  return out;
}

inline ModelConfig small_model(Switches sw = Switches::all()) {
  ModelConfig mc;
  mc.input_dims = {5, 4, 3};
  mc.kernels = {3, 3, 1};
  mc.channels = 6;
  mc.d_model = 4;
  mc.heads = 2;
  mc.ca_layers = 1;
  mc.ffn_dim = 8;
  mc.max_len = 8;
  mc.dict_elements = 5;
  mc.switches = sw;
  mc.unimodal_weight = sw.gd ? 0.5 : 0.0;
  return mc;
}

struct GradCheckResult {
  std::size_t checked = 0;
  std::size_t failed = 0;
  double worst = 0;
  std::string worst_where;
};

// Central differences on `coords` random coordinates of the given parameters.
// A coordinate passes when |analytic - numeric| <= rtol * max(|analytic|, |numeric|) + atol.
inline GradCheckResult grad_check(ParameterStore& store, const std::vector<Parameter*>& params,
                                  const std::function<Var(Graph&)>& loss, std::size_t coords, std::mt19937_64& rng,
                                  double h = 1e-4, double rtol = 1e-3, double atol = 1e-7) {
  store.zero_grad();
  {
    Graph g;
    Var l = loss(g);
    g.backward(l);
    g.accumulate_param_grads();
  }
  auto eval = [&] {
    Graph g(false);
    return loss(g).item();
  };
  GradCheckResult res;
  std::size_t total = 0;
  for (auto* p : params) total += p->value.size();
  if (total == 0) return res;
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  for (std::size_t c = 0; c < coords; ++c) {
    std::size_t k = pick(rng);
    Parameter* p = nullptr;
    for (auto* q : params) {
      if (k < q->value.size()) {
        p = q;
        break;
      }
      k -= q->value.size();
    }
    const double orig = p->value.data[k];
    p->value.data[k] = orig + h;
    const double up = eval();
    p->value.data[k] = orig - h;
    const double down = eval();
    p->value.data[k] = orig;
    const double numeric = (up - down) / (2 * h);
    const double analytic = p->grad.data[k];
    const double err = std::fabs(analytic - numeric);
    const double tol = rtol * std::max(std::fabs(analytic), std::fabs(numeric)) + atol;
    ++res.checked;
    if (err > tol) ++res.failed;
    const double rel = err / (std::max(std::fabs(analytic), std::fabs(numeric)) + atol);
    if (rel > res.worst) {
      res.worst = rel;
      res.worst_where = p->name + "[" + std::to_string(k) + "] analytic " + std::to_string(analytic) + " numeric " +
                        std::to_string(numeric);
    }
  }
  return res;
}

inline std::vector<Parameter*> all_params(ParameterStore& s) {
  std::vector<Parameter*> out;
  for (const auto& p : s.all()) out.push_back(p.get());
  return out;
}

inline std::vector<Parameter*> params_with_prefix(ParameterStore& s, const std::string& prefix) {
  std::vector<Parameter*> out;
  for (const auto& p : s.all())
    if (p->name.rfind(prefix, 0) == 0) out.push_back(p.get());
  return out;
}

}  // namespace dhmd::test
