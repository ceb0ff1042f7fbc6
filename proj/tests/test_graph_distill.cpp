#include "doctest.h"
#include "support.hpp"

using namespace dhmd;
using namespace dhmd::test;

namespace {

ModalityVars scalars(Graph& g, std::array<double, 3> v) {
  return {g.constant(Tensor({1, 1}, {v[0]})), g.constant(Tensor({1, 1}, {v[1]})), g.constant(Tensor({1, 1}, {v[2]}))};
}

Tensor uniform_W(std::size_t B) {
  Tensor W({B, 3, 3});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) W.at(b, i, j) = i == j ? 0.0 : 0.5;
  return W;
}

// Independent recomputation of the edge scores: per pair, g . [f_i, x_i, f_j, x_j] + b,
// then a softmax over incoming edges of each target.
Tensor edge_oracle(const GDUnit& unit, const std::array<Tensor, 3>& pooled) {
  const Tensor& fw = unit.f_weight().value;
  const Tensor& fb = unit.f_bias().value;
  const Tensor& gw = unit.g_weight().value;
  const double gb = unit.g_bias().value.data[0];
  const std::size_t B = pooled[0].rows(), C = pooled[0].cols(), O = fb.size();
  Tensor W({B, 3, 3});
  for (std::size_t b = 0; b < B; ++b) {
    std::array<std::vector<double>, 3> desc;
    for (std::size_t m = 0; m < 3; ++m) {
      for (std::size_t o = 0; o < O; ++o) {
        double s = fb.data[o];
        for (std::size_t c = 0; c < C; ++c) s += fw.data[o * C + c] * pooled[m].at(b, c);
        desc[m].push_back(s);
      }
      for (std::size_t c = 0; c < C; ++c) desc[m].push_back(pooled[m].at(b, c));
    }
    double raw[3][3] = {};
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        if (i == j) continue;
        double s = gb;
        for (std::size_t k = 0; k < desc[i].size(); ++k) s += gw.data[k] * desc[i][k];
        for (std::size_t k = 0; k < desc[j].size(); ++k) s += gw.data[desc[i].size() + k] * desc[j][k];
        raw[i][j] = s;
      }
    for (std::size_t j = 0; j < 3; ++j) {
      double z = 0;
      for (std::size_t i = 0; i < 3; ++i)
        if (i != j) z += std::exp(raw[i][j]);
      for (std::size_t i = 0; i < 3; ++i) W.at(b, i, j) = i == j ? 0.0 : std::exp(raw[i][j]) / z;
    }
  }
  return W;
}

}  // namespace

TEST_CASE("modality logits") {
  std::mt19937_64 rng(1);
  ParameterStore store;
  GDUnit unit(store, "gd", {2, 1}, rng);
  Graph g(false);
  ModalityVars pooled{g.constant(Tensor({1, 2}, {1, 2})), g.constant(Tensor({1, 2}, {0, 0})),
                      g.constant(Tensor({1, 2}, {-1, 5}))};
  std::fill(unit.f_weight().value.data.begin(), unit.f_weight().value.data.end(), 0.0);
  for (const auto& l : unit.modality_logits(g, pooled)) CHECK(l.item() == 0.0);
  unit.f_weight().value = Tensor({1, 2}, {3, 4});
  unit.f_bias().value = Tensor({1}, {1});
  Graph g2(false);  // parameters are bound once per graph
  ModalityVars p2{g2.constant(Tensor({1, 2}, {1, 2})), g2.constant(Tensor({1, 2})), g2.constant(Tensor({1, 2}))};
  CHECK(unit.modality_logits(g2, p2)[0].item() == doctest::Approx(12.0));
  ModalityVars wrong{g2.constant(Tensor({1, 3})), p2[1], p2[2]};
  CHECK_THROWS_AS(unit.modality_logits(g2, wrong), std::invalid_argument);
}

TEST_CASE("pooled GD input is the masked mean on a ragged batch") {
  std::mt19937_64 rng(2);
  ParameterStore store;
  GDUnit unit(store, "gd", {3, 1}, rng);
  Mask mask = ragged_mask(3, 4, rng);
  Tensor x = random_tensor({3, 4, 3}, rng);
  Graph g(false);
  ModalityVars feats{g.constant(x), g.constant(x), g.constant(x)};
  auto logits = unit.modality_logits(g, feats, {mask, mask, mask});
  for (std::size_t b = 0; b < 3; ++b) {
    double s = unit.f_bias().value.data[0];
    for (std::size_t c = 0; c < 3; ++c) {
      double mean = 0;
      for (std::size_t t = 0; t < 4; ++t)
        if (mask(b, t)) mean += x.at(b, t, c);
      mean /= static_cast<double>(mask.count(b));
      s += unit.f_weight().value.data[c] * mean;
    }
    CHECK(logits[0].value().data[b] == doctest::Approx(s).epsilon(1e-12));
  }
}

TEST_CASE("zero g gives uniform incoming weights") {
  std::mt19937_64 rng(3);
  ParameterStore store;
  GDUnit unit(store, "gd", {2, 1}, rng);
  std::fill(unit.g_weight().value.data.begin(), unit.g_weight().value.data.end(), 0.0);
  Graph g(false);
  ModalityVars pooled{g.constant(random_tensor({2, 2}, rng)), g.constant(random_tensor({2, 2}, rng)),
                      g.constant(random_tensor({2, 2}, rng))};
  const Tensor& W = unit.edge_weights(g, pooled, unit.modality_logits(g, pooled)).value();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) CHECK(W.at(b, i, j) == doctest::Approx(i == j ? 0.0 : 0.5));
}

TEST_CASE("edge weights match an independent recomputation and are column-stochastic") {
  std::mt19937_64 rng(4);
  ParameterStore store;
  GDUnit unit(store, "gd", {3, 2}, rng);
  for (auto& v : unit.g_weight().value.data) v *= 3.0;
  std::array<Tensor, 3> x{random_tensor({4, 3}, rng), random_tensor({4, 3}, rng), random_tensor({4, 3}, rng)};
  Graph g(false);
  ModalityVars pooled{g.constant(x[0]), g.constant(x[1]), g.constant(x[2])};
  const Tensor& W = unit.edge_weights(g, pooled, unit.modality_logits(g, pooled)).value();
  Tensor ref = edge_oracle(unit, x);
  for (std::size_t k = 0; k < W.size(); ++k) CHECK(std::fabs(W.data[k] - ref.data[k]) <= 1e-9);
  for (std::size_t b = 0; b < 4; ++b)
    for (std::size_t j = 0; j < 3; ++j) CHECK(W.at(b, 0, j) + W.at(b, 1, j) + W.at(b, 2, j) == doctest::Approx(1.0));
}

TEST_CASE("permuting modalities permutes W") {
  std::mt19937_64 rng(5);
  ParameterStore store;
  GDUnit unit(store, "gd", {3, 1}, rng);
  std::array<Tensor, 3> x{random_tensor({2, 3}, rng), random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)};
  const std::array<std::size_t, 3> perm{2, 0, 1};
  Graph g(false);
  ModalityVars a{g.constant(x[0]), g.constant(x[1]), g.constant(x[2])};
  ModalityVars b{g.constant(x[perm[0]]), g.constant(x[perm[1]]), g.constant(x[perm[2]])};
  const Tensor& Wa = unit.edge_weights(g, a, unit.modality_logits(g, a)).value();
  const Tensor& Wb = unit.edge_weights(g, b, unit.modality_logits(g, b)).value();
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) CHECK(Wb.at(s, i, j) == doctest::Approx(Wa.at(s, perm[i], perm[j])));
}

TEST_CASE("discrepancy matrix on scalar logits") {
  Graph g(false);
  CHECK(discrepancy_matrix(scalars(g, {0.4, 0.4, 0.4})).value().data == std::vector<double>(9, 0.0));
  const Tensor& E = discrepancy_matrix(scalars(g, {0.8, 0.2, 0.5})).value();
  CHECK(E.at(0, 0, 1) == doctest::Approx(0.6));
  CHECK(E.at(0, 0, 2) == doctest::Approx(0.3));
  CHECK(E.at(0, 1, 2) == doctest::Approx(0.3));
  CHECK(E.at(0, 1, 0) == doctest::Approx(0.6));
  CHECK(E.at(0, 2, 0) == doctest::Approx(0.3));
  CHECK(E.at(0, 2, 1) == doctest::Approx(0.3));
  for (std::size_t i = 0; i < 3; ++i) CHECK(E.at(0, i, i) == 0.0);
  auto bad = scalars(g, {0.1, std::nan(""), 0.2});
  CHECK_THROWS_AS(discrepancy_matrix(bad), std::invalid_argument);
}

TEST_CASE("teacher side of a discrepancy carries no gradient") {
  ParameterStore store;
  std::array<Parameter*, 3> p{&store.add("l", Tensor({1, 1}, {0.8})), &store.add("v", Tensor({1, 1}, {0.2})),
                              &store.add("a", Tensor({1, 1}, {0.5}))};
  Graph g;
  ModalityVars logits{g.param(*p[0]), g.param(*p[1]), g.param(*p[2])};
  Var E = discrepancy_matrix(logits);
  Tensor pick({1, 3, 3});
  pick.at(0, 0, 1) = 1.0;  // eps_{L->V}
  g.backward(ag::sum(ag::mul(E, g.constant(pick))));
  g.accumulate_param_grads();
  CHECK(p[0]->grad.data[0] == 0.0);
  CHECK(p[1]->grad.data[0] == doctest::Approx(-1.0));
  CHECK(p[2]->grad.data[0] == 0.0);
}

TEST_CASE("distillation loss examples") {
  Graph g(false);
  Var W = g.constant(uniform_W(1));
  CHECK(distillation_loss(W, g.constant(Tensor({1, 3, 3}))).item() == 0.0);
  Var E = discrepancy_matrix(scalars(g, {0.8, 0.2, 0.5}));
  CHECK(distillation_loss(W, E).item() == doctest::Approx(1.2));
  CHECK(distillation_loss_by_target(W.value(), E.value()) == doctest::Approx(1.2));
  CHECK_THROWS_AS(distillation_loss(W, g.constant(Tensor({2, 3, 3}))), std::invalid_argument);
}

TEST_CASE("pairwise and per-target forms of the distillation loss agree") {
  std::mt19937_64 rng(6);
  for (int rep = 0; rep < 20; ++rep) {
    ParameterStore store;
    GDUnit unit(store, "gd", {4, 2}, rng);
    Graph g(false);
    Mask mask = ragged_mask(5, 3, rng);
    ModalityVars feats{g.constant(random_tensor({5, 3, 4}, rng)), g.constant(random_tensor({5, 3, 4}, rng)),
                       g.constant(random_tensor({5, 3, 4}, rng))};
    auto dg = unit.run(g, feats, {mask, mask, mask});
    CHECK(std::fabs(dg.loss.item() - distillation_loss_by_target(dg.W.value(), dg.E.value())) <= 1e-9);
  }
}

TEST_CASE("GD-Unit parameters pass finite-difference checks") {
  std::mt19937_64 rng(7);
  ParameterStore store;
  GDUnit unit(store, "gd", {3, 1}, rng);
  Mask mask = ragged_mask(4, 3, rng);
  std::array<Tensor, 3> x{random_tensor({4, 3, 3}, rng), random_tensor({4, 3, 3}, rng), random_tensor({4, 3, 3}, rng)};
  ModalityMasks masks{mask, mask, mask};
  std::array<Tensor, 3> teachers;
  {
    Graph g(false);
    ModalityVars f{g.constant(x[0]), g.constant(x[1]), g.constant(x[2])};
    auto l = unit.modality_logits(g, f, masks);
    for (std::size_t m = 0; m < 3; ++m) teachers[m] = l[m].value();
  }
  // Teachers are stop-gradient, so the numeric side holds them at their current value.
  auto frozen = [&](Graph& g) {
    ModalityVars f{g.constant(x[0]), g.constant(x[1]), g.constant(x[2])};
    auto pooled = pool_all(f, masks);
    auto logits = unit.modality_logits(g, pooled);
    Var W = unit.edge_weights(g, pooled, logits);
    std::vector<Var> e(9);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j)
        if (i != j) e[i * 3 + j] = ag::mean_last(ag::abs(ag::sub(g.constant(teachers[i]), logits[j])));
    if (g.grad_enabled()) return unit.run(g, f, masks).loss;
    return distillation_loss(W, ag::pair_matrix(e, 3));
  };
  auto res = grad_check(store, all_params(store), frozen, 20, rng);
  INFO(res.worst_where);
  CHECK(res.failed == 0);
}

TEST_CASE("edge logger keeps an EMA and round-trips through JSON lines") {
  EdgeLogger log(0.5);
  Tensor a = uniform_W(1), b({3, 3});
  a.shape = {3, 3};
  b.at(1, 0) = 1.0;
  b.at(0, 1) = 1.0;
  b.at(0, 2) = 1.0;
  log.update("HoGD", a);
  log.update("HoGD", b);
  log.update("HeGD", b);
  log.end_epoch(0);
  REQUIRE(log.current("HoGD"));
  CHECK(log.current("HoGD")->at(1, 0) == doctest::Approx(0.75));
  CHECK(log.current("HoGD")->at(2, 0) == doctest::Approx(0.25));
  CHECK_FALSE(log.current("nope"));
  log.end_epoch(1);
  auto back = EdgeLogger::parse_jsonl(log.jsonl());
  REQUIRE(back.size() == 4);
  CHECK(back[3].epoch == 1);
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].unit == log.history()[i].unit);
    for (std::size_t k = 0; k < 9; ++k) CHECK(back[i].W.data[k] == doctest::Approx(log.history()[i].W.data[k]).epsilon(1e-6));
  }
  auto mass = outgoing_mass(*log.current("HoGD"));
  CHECK(mass[0] == doctest::Approx(1.5));
  CHECK(mass[2] == doctest::Approx(0.5));
}
