#pragma once

#include <array>
#include <random>
#include <string>
#include <vector>

#include "dhmd/autograd.hpp"
#include "dhmd/datamodel.hpp"

namespace dhmd {

using ModalityVars = std::array<Var, kNumModalities>;
using ModalityMasks = std::array<Mask, kNumModalities>;

struct DecouplerConfig {
  std::array<std::size_t, kNumModalities> input_dims{};
  std::array<std::size_t, kNumModalities> kernels{5, 3, 3};
  std::size_t channels = 32;
  double margin = 0.1;   // alpha
  double gamma = 0.1;    // balance of margin + orthogonality terms
  bool encoders = true;  // false keeps only the conv embedders

  void validate() const;
};

struct DecoupledFeatures {
  ModalityVars shallow;          // conv-embedded input, [B x T_m x C]
  ModalityVars homogeneous;      // shared encoder output
  ModalityVars heterogeneous;    // private encoder output
  ModalityVars reconstruction;   // private decoder on [com, prt]
  ModalityVars recoded_prt;      // private encoder on the reconstruction
};

// Temporal conv embedders plus the shared/private encoders and private
// decoders. Encoders and decoders are per-timestep affine maps; encoders end
// in a GELU, decoders are linear.
class Decoupler {
 public:
  Decoupler(ParameterStore& store, const DecouplerConfig& cfg, std::mt19937_64& rng);

  // Conv weights are [C x k x C_m] (tap-major), so output t reads input
  // steps t - k/2 .. t + k/2. Masked input steps are read as zero and masked
  // output steps are zeroed.
  ModalityVars embed_shallow(Graph& g, const std::array<Tensor, kNumModalities>& inputs,
                             const ModalityMasks& masks) const;
  DecoupledFeatures decouple(Graph& g, const ModalityVars& shallow, const ModalityMasks& masks) const;

  const DecouplerConfig& config() const { return cfg_; }
  Parameter& conv_weight(Modality m) const { return *conv_w_[static_cast<std::size_t>(m)]; }
  Parameter& conv_bias(Modality m) const { return *conv_b_[static_cast<std::size_t>(m)]; }
  Parameter& shared_weight() const { return *com_w_; }
  Parameter& shared_bias() const { return *com_b_; }
  Parameter& private_weight(Modality m) const { return *prt_w_[static_cast<std::size_t>(m)]; }
  Parameter& private_bias(Modality m) const { return *prt_b_[static_cast<std::size_t>(m)]; }
  Parameter& decoder_weight(Modality m) const { return *dec_w_[static_cast<std::size_t>(m)]; }
  Parameter& decoder_bias(Modality m) const { return *dec_b_[static_cast<std::size_t>(m)]; }

 private:
  Var encode_private(Graph& g, std::size_t m, const Var& x) const;

  DecouplerConfig cfg_;
  std::array<Parameter*, kNumModalities> conv_w_{}, conv_b_{};
  Parameter* com_w_ = nullptr;
  Parameter* com_b_ = nullptr;
  std::array<Parameter*, kNumModalities> prt_w_{}, prt_b_{};
  std::array<Parameter*, kNumModalities> dec_w_{}, dec_b_{};
};

// Triplets (anchor, positive, negative) over items tagged with a modality and
// a class: positive has a different modality and the same class, negative has
// the anchor's modality and a different class.
std::vector<Triplet> mine_triplets(const std::vector<int>& modality, const std::vector<int>& cls);

struct TripletLoss {
  Var loss;
  bool no_triplet = false;
  std::size_t triplets = 0;
};

// Margin loss over per-(sample, modality) vectors. pooled[m] is [B x C]; rows
// are stacked modality-major before mining.
TripletLoss cross_modal_triplet_loss(const ModalityVars& pooled, const std::vector<int>& class_ids, double margin);

ModalityVars pool_all(const ModalityVars& x, const ModalityMasks& masks);

Var loss_rec(const DecoupledFeatures& df, const ModalityMasks& masks);
Var loss_cyc(const DecoupledFeatures& df, const ModalityMasks& masks);
TripletLoss loss_margin(const DecoupledFeatures& df, const ModalityMasks& masks, const std::vector<int>& class_ids,
                        double margin);
Var loss_ort(const DecoupledFeatures& df, const ModalityMasks& masks);
// L_rec + L_cyc + gamma * (L_mar + L_ort)
Var loss_dec(const Var& rec, const Var& cyc, const Var& mar, const Var& ort, double gamma);
double loss_dec(double rec, double cyc, double mar, double ort, double gamma);

}  // namespace dhmd
