#include "dhmd/graph_distill.hpp"

#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace dhmd {

GDUnit::GDUnit(ParameterStore& store, const std::string& name, const GDUnitConfig& cfg, std::mt19937_64& rng)
    : name_(name), cfg_(cfg) {
  if (cfg_.feature_dim == 0 || cfg_.num_outputs == 0) throw std::invalid_argument("GD-Unit: empty dimensions");
  const std::size_t O = cfg_.num_outputs, C = cfg_.feature_dim;
  f_w_ = &store.add(name + ".f.weight", fan_in_gaussian({O, C}, rng));
  f_b_ = &store.add(name + ".f.bias", Tensor({O}));
  g_w_ = &store.add(name + ".g.weight", fan_in_gaussian({1, 2 * (O + C)}, rng));
  g_b_ = &store.add(name + ".g.bias", Tensor({1}));
}

ModalityVars GDUnit::modality_logits(Graph& g, const ModalityVars& pooled) const {
  ModalityVars out;
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    if (pooled[m].value().cols() != cfg_.feature_dim)
      throw std::invalid_argument(name_ + ": feature width " + std::to_string(pooled[m].value().cols()) +
                                  ", expected " + std::to_string(cfg_.feature_dim));
    out[m] = ag::linear(pooled[m], g.param(*f_w_), g.param(*f_b_));
  }
  return out;
}

ModalityVars GDUnit::modality_logits(Graph& g, const ModalityVars& features, const ModalityMasks& masks) const {
  return modality_logits(g, pool_all(features, masks));
}

Var GDUnit::edge_weights(Graph& g, const ModalityVars& pooled, const ModalityVars& logits) const {
  constexpr std::size_t M = kNumModalities;
  std::vector<Var> raw(M * M);
  std::array<Var, M> desc;
  for (std::size_t m = 0; m < M; ++m) desc[m] = ag::concat_last({logits[m], pooled[m]});
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < M; ++j) {
      if (i == j) continue;
      raw[i * M + j] = ag::linear(ag::concat_last({desc[i], desc[j]}), g.param(*g_w_), g.param(*g_b_));
    }
  return ag::column_softmax_offdiag(ag::pair_matrix(raw, M));
}

DistillGraph GDUnit::run(Graph& g, const ModalityVars& features, const ModalityMasks& masks) const {
  DistillGraph out;
  auto pooled = pool_all(features, masks);
  out.logits = modality_logits(g, pooled);
  out.W = edge_weights(g, pooled, out.logits);
  out.E = discrepancy_matrix(out.logits);
  out.loss = distillation_loss(out.W, out.E);
  const Tensor& W = out.W.value();
  const std::size_t B = W.dim(0), M = W.dim(1);
  out.mean_W = Tensor({M, M});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < M * M; ++k) out.mean_W.data[k] += W.data[b * M * M + k] / static_cast<double>(B);
  return out;
}

Var discrepancy_matrix(const ModalityVars& logits) {
  constexpr std::size_t M = kNumModalities;
  for (const auto& l : logits)
    if (!l.value().all_finite()) throw std::invalid_argument("discrepancy_matrix: non-finite logits");
  std::vector<Var> entries(M * M);
  for (std::size_t i = 0; i < M; ++i) {
    Var teacher = ag::detach(logits[i]);
    for (std::size_t j = 0; j < M; ++j) {
      if (i == j) continue;
      entries[i * M + j] = ag::mean_last(ag::abs(ag::sub(teacher, logits[j])));
    }
  }
  return ag::pair_matrix(entries, M);
}

Var distillation_loss(const Var& W, const Var& E) {
  if (W.shape() != E.shape())
    throw std::invalid_argument("distillation_loss: W " + shape_str(W.shape()) + " vs E " + shape_str(E.shape()));
  return ag::scale(ag::sum(ag::mul(W, E)), 1.0 / static_cast<double>(W.shape()[0]));
}

double distillation_loss_by_target(const Tensor& W, const Tensor& E) {
  if (W.shape != E.shape || W.rank() != 3) throw std::invalid_argument("distillation_loss_by_target: shape mismatch");
  const std::size_t B = W.dim(0), M = W.dim(1);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < M; ++j) {
      double zeta = 0.0;
      for (std::size_t i = 0; i < M; ++i)
        if (i != j) zeta += W.at(b, i, j) * E.at(b, i, j);
      total += zeta;
    }
  return total / static_cast<double>(B);
}

void EdgeLogger::update(const std::string& unit, const Tensor& mean_W) {
  auto it = ema_.find(unit);
  if (it == ema_.end()) {
    ema_[unit] = mean_W;
    return;
  }
  for (std::size_t k = 0; k < mean_W.size(); ++k)
    it->second.data[k] = decay_ * it->second.data[k] + (1.0 - decay_) * mean_W.data[k];
}

void EdgeLogger::end_epoch(int epoch) {
  for (const auto& [unit, W] : ema_) history_.push_back({epoch, unit, W});
}

std::optional<Tensor> EdgeLogger::current(const std::string& unit) const {
  auto it = ema_.find(unit);
  if (it == ema_.end()) return std::nullopt;
  return it->second;
}

std::string EdgeLogger::jsonl() const {
  std::ostringstream os;
  for (const auto& e : history_) {
    nlohmann::json j;
    j["epoch"] = e.epoch;
    j["unit"] = e.unit;
    const std::size_t M = e.W.dim(0);
    j["W"] = nlohmann::json::array();
    for (std::size_t i = 0; i < M; ++i) {
      nlohmann::json row = nlohmann::json::array();
      for (std::size_t k = 0; k < M; ++k) row.push_back(static_cast<float>(e.W.at(i, k)));
      j["W"].push_back(row);
    }
    os << j.dump() << '\n';
  }
  return os.str();
}

std::vector<EdgeLogger::Entry> EdgeLogger::parse_jsonl(const std::string& text) {
  std::vector<Entry> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    Entry e;
    e.epoch = j.at("epoch").get<int>();
    e.unit = j.at("unit").get<std::string>();
    const auto& rows = j.at("W");
    e.W = Tensor({rows.size(), rows.size()});
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t k = 0; k < rows.size(); ++k) e.W.at(i, k) = rows[i].at(k).get<double>();
    out.push_back(std::move(e));
  }
  return out;
}

std::array<double, kNumModalities> outgoing_mass(const Tensor& W) {
  std::array<double, kNumModalities> out{};
  for (std::size_t i = 0; i < kNumModalities; ++i)
    for (std::size_t j = 0; j < kNumModalities; ++j)
      if (i != j) out[i] += W.at(i, j);
  return out;
}

}  // namespace dhmd
