#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dhmd/crossmodal.hpp"
#include "dhmd/datamodel.hpp"
#include "dhmd/decoupler.hpp"
#include "dhmd/dictionary.hpp"
#include "dhmd/graph_distill.hpp"

namespace dhmd {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Switches {
  bool fd = true;
  bool ca = true;
  bool gd = true;
  bool dm = true;

  // "FD,CA,GD,DM" subsets; "none" or "" turns everything off, "all" on.
  static Switches parse(const std::string& text);
  static Switches all() { return {}; }
  static Switches none() { return {false, false, false, false}; }
  std::string str() const;
  bool operator==(const Switches&) const = default;
};

struct ModelConfig {
  std::array<std::size_t, kNumModalities> input_dims{};
  TaskType task = TaskType::Regression;
  std::array<std::size_t, kNumModalities> kernels{5, 3, 3};
  std::size_t channels = 32;
  std::size_t d_model = 32;
  std::size_t heads = 8;
  std::size_t ca_layers = 4;
  std::size_t ffn_dim = 64;
  std::size_t max_len = 64;
  std::size_t dict_elements = 512;
  double margin = 0.1;
  double gamma = 0.1;
  double lambda1 = 0.1;
  double lambda2 = 0.05;
  double lambda3 = 0.1;
  // Weight of the task loss applied to each GD-Unit logit head, folded into L_task.
  double unimodal_weight = 0.0;
  Switches switches;

  std::size_t num_outputs() const { return task == TaskType::Binary ? 2 : 1; }
  std::size_t hetero_width() const { return switches.ca ? 2 * d_model : channels; }
  std::size_t fused_width() const;
  void validate() const;
};

struct LossComponents {
  double task = 0, unimodal = 0;
  double rec = 0, cyc = 0, mar = 0, ort = 0, dec = 0;
  double dtl_ho = 0, dtl_he = 0, dtl = 0;
  double ctr_ho = 0, ctr_he = 0, dic = 0;
  double total = 0;
  bool no_triplet = false;

  static const std::vector<std::string>& names();
  std::vector<double> values() const;
  LossComponents& operator+=(const LossComponents& o);
  LossComponents scaled(double s) const;
  std::string describe() const;
};

double total_loss(double task, double dec, double dtl, double dic, double lambda1, double lambda2, double lambda3);
double total_loss(const LossComponents& c, const ModelConfig& cfg);

struct ForwardResult {
  Var prediction;  // [B x num_outputs]
  Var task, dec, dtl, dic, total;
  LossComponents losses;
  ModalityVars shallow;
  std::optional<DecoupledFeatures> decoupled;
  ModalityVars homo;    // X^com or shallow features
  ModalityVars hetero;  // Z_{->m}, X^prt or shallow features
  std::optional<ReinforcedFeatures> reinforced;
  std::optional<DistillGraph> hogd, hegd;
  std::array<std::optional<DictionaryMatch>, kNumModalities> ho_match, he_match;
  Var fused;
};

class DhmdModel {
 public:
  DhmdModel(const ModelConfig& cfg, std::uint64_t seed);

  ForwardResult forward(Graph& g, const Batch& batch) const;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }
  const Decoupler& decoupler() const { return *decoupler_; }
  const CrossModalTransformer* crossmodal() const { return crossmodal_.get(); }
  const GDUnit* hogd() const { return hogd_.get(); }
  const GDUnit* hegd() const { return hegd_.get(); }
  const Dictionary* dict_ho() const { return dict_ho_.get(); }
  const Dictionary* dict_he() const { return dict_he_.get(); }

 private:
  ModelConfig cfg_;
  ParameterStore store_;
  std::unique_ptr<Decoupler> decoupler_;
  std::unique_ptr<CrossModalTransformer> crossmodal_;
  std::unique_ptr<GDUnit> hogd_, hegd_;
  std::unique_ptr<Dictionary> dict_ho_, dict_he_;
  Parameter* head_w_ = nullptr;
  Parameter* head_b_ = nullptr;
};

// Parameter groups (name minus its last component) whose gradient is exactly
// zero after one backward pass of the total loss on the batch.
std::vector<std::string> dead_parameter_groups(DhmdModel& model, const Batch& batch);

}  // namespace dhmd
