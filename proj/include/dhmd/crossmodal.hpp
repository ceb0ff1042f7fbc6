#pragma once

#include <array>
#include <random>
#include <string>
#include <vector>

#include "dhmd/decoupler.hpp"

namespace dhmd {

struct CrossModalConfig {
  std::size_t input_dim = 32;
  std::size_t d_model = 32;
  std::size_t heads = 8;
  std::size_t layers = 4;
  std::size_t ffn_dim = 64;
  std::size_t max_len = 64;  // positional table rows

  void validate() const;
};

struct CALayerParams {
  Parameter *ln_q_g, *ln_q_b, *ln_kv_g, *ln_kv_b;
  Parameter *q_w, *q_b, *k_w, *k_b, *v_w, *v_b, *o_w, *o_b;
  Parameter *ln_ff_g, *ln_ff_b, *ff1_w, *ff1_b, *ff2_w, *ff2_b;
};

// Ordered pairs in export order: L->V, L->A, V->L, V->A, A->L, A->V.
struct ModalityPair {
  std::size_t source;
  std::size_t target;
};
const std::array<ModalityPair, 6>& modality_pairs();
std::string pair_name(std::size_t source, std::size_t target);
std::size_t pair_index(std::size_t source, std::size_t target);

struct ReinforcedFeatures {
  std::array<Var, 6> pair;                 // Z_{s->t}, [B x T_t x d_model], indexed like modality_pairs()
  ModalityVars reinforced;                 // Z_{->m}, [B x T_m x 2 d_model]
  std::array<Tensor, 6> attention;         // last layer, head-averaged [B x T_t x T_s]
  const Var& of(std::size_t source, std::size_t target) const { return pair[pair_index(source, target)]; }
};

class CrossModalTransformer {
 public:
  CrossModalTransformer(ParameterStore& store, const CrossModalConfig& cfg, std::mt19937_64& rng);

  // Projects a modality into the model width and adds its positional table.
  Var embed(Graph& g, std::size_t m, const Var& x) const;
  // Runs the CA stack for one ordered pair on already embedded inputs.
  Var cross_attention(Graph& g, std::size_t source, std::size_t target, const Var& target_emb, const Var& source_emb,
                      const Mask& source_mask, Tensor* last_attention = nullptr) const;
  ReinforcedFeatures reinforce_all(Graph& g, const ModalityVars& prt, const ModalityMasks& masks) const;

  const CrossModalConfig& config() const { return cfg_; }
  const CALayerParams& layer(std::size_t source, std::size_t target, std::size_t l) const {
    return layers_[pair_index(source, target)][l];
  }
  Parameter& projection_weight(std::size_t m) const { return *proj_w_[m]; }
  Parameter& projection_bias(std::size_t m) const { return *proj_b_[m]; }
  Parameter& positional(std::size_t m) const { return *pos_[m]; }

 private:
  CrossModalConfig cfg_;
  std::array<Parameter*, kNumModalities> proj_w_{}, proj_b_{}, pos_{};
  std::array<std::vector<CALayerParams>, 6> layers_;
};

// {"pair": "L->V", "weights": [[...]]} for one sample of a ReinforcedFeatures.
std::string attention_json(const ReinforcedFeatures& rf, std::size_t pair, std::size_t sample, const Mask& target_mask,
                           const Mask& source_mask);

}  // namespace dhmd
