#include "dhmd/decoupler.hpp"

#include <stdexcept>

namespace dhmd {

void DecouplerConfig::validate() const {
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    if (input_dims[m] == 0) throw std::invalid_argument("decoupler: input dims must be positive");
    if (kernels[m] % 2 == 0) throw std::invalid_argument("decoupler: conv kernel sizes must be odd");
  }
  if (channels == 0) throw std::invalid_argument("decoupler: channel width must be positive");
  if (!(margin > 0.0)) throw std::invalid_argument("decoupler: margin must be > 0");
  if (!(gamma >= 0.0)) throw std::invalid_argument("decoupler: gamma must be >= 0");
}

Decoupler::Decoupler(ParameterStore& store, const DecouplerConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t C = cfg_.channels;
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    const std::string n = std::string("decoupler.conv.") + modality_name(m);
    conv_w_[m] = &store.add(n + ".weight", fan_in_gaussian({C, cfg_.kernels[m], cfg_.input_dims[m]}, rng));
    conv_b_[m] = &store.add(n + ".bias", Tensor({C}));
  }
  if (!cfg_.encoders) return;
  com_w_ = &store.add("decoupler.shared.weight", fan_in_gaussian({C, C}, rng));
  com_b_ = &store.add("decoupler.shared.bias", Tensor({C}));
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    const std::string p = std::string("decoupler.private.") + modality_name(m);
    prt_w_[m] = &store.add(p + ".weight", fan_in_gaussian({C, C}, rng));
    prt_b_[m] = &store.add(p + ".bias", Tensor({C}));
    const std::string d = std::string("decoupler.decoder.") + modality_name(m);
    dec_w_[m] = &store.add(d + ".weight", fan_in_gaussian({C, 2 * C}, rng));
    dec_b_[m] = &store.add(d + ".bias", Tensor({C}));
  }
}

ModalityVars Decoupler::embed_shallow(Graph& g, const std::array<Tensor, kNumModalities>& inputs,
                                      const ModalityMasks& masks) const {
  ModalityVars out;
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    const Tensor& x = inputs[m];
    if (x.rank() != 3 || x.dim(2) != cfg_.input_dims[m])
      throw std::invalid_argument(std::string("embed_shallow: modality ") + modality_name(m) + " expects width " +
                                  std::to_string(cfg_.input_dims[m]) + ", got " + shape_str(x.shape));
    const std::size_t T = x.dim(1);
    if (cfg_.kernels[m] > 2 * T + 1)
      throw std::invalid_argument(std::string("embed_shallow: kernel ") + std::to_string(cfg_.kernels[m]) +
                                  " too large for sequence length " + std::to_string(T) + " in modality " +
                                  modality_name(m));
    Var in = ag::mask_time(g.constant(x), masks[m]);
    Var cols = ag::im2col_time(in, cfg_.kernels[m]);
    Var y = ag::linear(cols, g.param(*conv_w_[m]), g.param(*conv_b_[m]));
    out[m] = ag::mask_time(y, masks[m]);
  }
  return out;
}

Var Decoupler::encode_private(Graph& g, std::size_t m, const Var& x) const {
  return ag::gelu(ag::linear(x, g.param(*prt_w_[m]), g.param(*prt_b_[m])));
}

DecoupledFeatures Decoupler::decouple(Graph& g, const ModalityVars& shallow, const ModalityMasks& masks) const {
  if (!cfg_.encoders) throw std::logic_error("decouple: decoupler built without encoders");
  DecoupledFeatures df;
  df.shallow = shallow;
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    const Var& x = shallow[m];
    if (!x.value().all_finite()) throw std::invalid_argument("decouple: non-finite shallow features");
    df.homogeneous[m] = ag::mask_time(ag::gelu(ag::linear(x, g.param(*com_w_), g.param(*com_b_))), masks[m]);
    df.heterogeneous[m] = ag::mask_time(encode_private(g, m, x), masks[m]);
    Var joint = ag::concat_last({df.homogeneous[m], df.heterogeneous[m]});
    df.reconstruction[m] = ag::linear(joint, g.param(*dec_w_[m]), g.param(*dec_b_[m]));
    df.recoded_prt[m] = encode_private(g, m, df.reconstruction[m]);
  }
  return df;
}

std::vector<Triplet> mine_triplets(const std::vector<int>& modality, const std::vector<int>& cls) {
  if (modality.size() != cls.size()) throw std::invalid_argument("mine_triplets: tag size mismatch");
  const int n = static_cast<int>(modality.size());
  std::vector<Triplet> out;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (modality[j] == modality[i] || cls[j] != cls[i]) continue;
      for (int k = 0; k < n; ++k)
        if (modality[k] == modality[i] && cls[k] != cls[i]) out.push_back({i, j, k});
    }
  return out;
}

TripletLoss cross_modal_triplet_loss(const ModalityVars& pooled, const std::vector<int>& class_ids, double margin) {
  const std::size_t B = class_ids.size();
  std::vector<int> mods, cls;
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    if (pooled[m].value().rows() != B) throw std::invalid_argument("triplet loss: batch size mismatch");
    for (std::size_t b = 0; b < B; ++b) {
      mods.push_back(static_cast<int>(m));
      cls.push_back(class_ids[b]);
    }
  }
  auto triplets = mine_triplets(mods, cls);
  Var stacked = ag::concat_rows({pooled[0], pooled[1], pooled[2]});
  TripletLoss out;
  out.triplets = triplets.size();
  out.no_triplet = triplets.empty();
  out.loss = ag::triplet_hinge(ag::cosine_matrix(stacked), triplets, margin);
  return out;
}

ModalityVars pool_all(const ModalityVars& x, const ModalityMasks& masks) {
  ModalityVars out;
  for (std::size_t m = 0; m < kNumModalities; ++m) out[m] = ag::masked_mean_time(x[m], masks[m]);
  return out;
}

Var loss_rec(const DecoupledFeatures& df, const ModalityMasks& masks) {
  std::vector<Var> terms;
  for (std::size_t m = 0; m < kNumModalities; ++m)
    terms.push_back(ag::masked_sq_err(df.shallow[m], df.reconstruction[m], masks[m]));
  return ag::weighted_sum(terms, {1.0, 1.0, 1.0});
}

Var loss_cyc(const DecoupledFeatures& df, const ModalityMasks& masks) {
  std::vector<Var> terms;
  for (std::size_t m = 0; m < kNumModalities; ++m)
    terms.push_back(ag::masked_sq_err(df.heterogeneous[m], df.recoded_prt[m], masks[m]));
  return ag::weighted_sum(terms, {1.0, 1.0, 1.0});
}

TripletLoss loss_margin(const DecoupledFeatures& df, const ModalityMasks& masks, const std::vector<int>& class_ids,
                        double margin) {
  return cross_modal_triplet_loss(pool_all(df.homogeneous, masks), class_ids, margin);
}

Var loss_ort(const DecoupledFeatures& df, const ModalityMasks& masks) {
  auto com = pool_all(df.homogeneous, masks);
  auto prt = pool_all(df.heterogeneous, masks);
  std::vector<Var> terms;
  for (std::size_t m = 0; m < kNumModalities; ++m) terms.push_back(ag::mean(ag::cosine_rows(com[m], prt[m])));
  return ag::weighted_sum(terms, {1.0, 1.0, 1.0});
}

Var loss_dec(const Var& rec, const Var& cyc, const Var& mar, const Var& ort, double gamma) {
  return ag::weighted_sum({rec, cyc, mar, ort}, {1.0, 1.0, gamma, gamma});
}

double loss_dec(double rec, double cyc, double mar, double ort, double gamma) {
  return rec + cyc + gamma * (mar + ort);
}

}  // namespace dhmd
