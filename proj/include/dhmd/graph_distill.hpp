#pragma once

#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dhmd/decoupler.hpp"

namespace dhmd {

struct GDUnitConfig {
  std::size_t feature_dim = 32;   // width of the pooled representation fed to f and g
  std::size_t num_outputs = 1;
};

struct DistillGraph {
  Var W;                 // [B x M x M], W[b,i,j] = w_{i->j}
  Var E;                 // [B x M x M], E[b,i,j] = eps_{i->j}
  ModalityVars logits;   // [B x num_outputs] per modality
  Var loss;              // ||W . E||_1, batch mean
  Tensor mean_W;         // [M x M] batch mean, for logging
};

// Graph distillation unit. f maps a pooled representation to logits; g scores
// the ordered pair descriptor [[f(X_i), X_i], [f(X_j), X_j]]. Edge weights are
// normalised per target over its incoming edges.
class GDUnit {
 public:
  GDUnit(ParameterStore& store, const std::string& name, const GDUnitConfig& cfg, std::mt19937_64& rng);

  ModalityVars modality_logits(Graph& g, const ModalityVars& pooled) const;
  ModalityVars modality_logits(Graph& g, const ModalityVars& features, const ModalityMasks& masks) const;
  Var edge_weights(Graph& g, const ModalityVars& pooled, const ModalityVars& logits) const;
  DistillGraph run(Graph& g, const ModalityVars& features, const ModalityMasks& masks) const;

  const std::string& name() const { return name_; }
  const GDUnitConfig& config() const { return cfg_; }
  Parameter& f_weight() const { return *f_w_; }
  Parameter& f_bias() const { return *f_b_; }
  Parameter& g_weight() const { return *g_w_; }
  Parameter& g_bias() const { return *g_b_; }

 private:
  std::string name_;
  GDUnitConfig cfg_;
  Parameter* f_w_ = nullptr;
  Parameter* f_b_ = nullptr;
  Parameter* g_w_ = nullptr;
  Parameter* g_b_ = nullptr;
};

// E[b,i,j] = mean_o |stopgrad(logit_i) - logit_j|, zero diagonal.
Var discrepancy_matrix(const ModalityVars& logits);
// sum_{i != j} W_ij E_ij averaged over the batch.
Var distillation_loss(const Var& W, const Var& E);
// Per-target form: sum over targets j of zeta_{:j} = sum_{i in N(j)} w_{i->j} eps_{i->j}, batch mean.
double distillation_loss_by_target(const Tensor& W, const Tensor& E);

// Exponential moving average of batch-mean edge matrices, exported once per
// epoch per unit. Single writer.
class EdgeLogger {
 public:
  explicit EdgeLogger(double decay = 0.9) : decay_(decay) {}

  void update(const std::string& unit, const Tensor& mean_W);
  void end_epoch(int epoch);

  struct Entry {
    int epoch;
    std::string unit;
    Tensor W;
  };
  const std::vector<Entry>& history() const { return history_; }
  std::optional<Tensor> current(const std::string& unit) const;
  std::string jsonl() const;
  static std::vector<Entry> parse_jsonl(const std::string& text);

 private:
  double decay_;
  std::map<std::string, Tensor> ema_;
  std::vector<Entry> history_;
};

// Sum of outgoing edge mass per source modality, row sums excluding the diagonal.
std::array<double, kNumModalities> outgoing_mass(const Tensor& W);

}  // namespace dhmd
