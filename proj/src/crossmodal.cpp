#include "dhmd/crossmodal.hpp"

#include <stdexcept>

#include "json.hpp"

namespace dhmd {

void CrossModalConfig::validate() const {
  if (input_dim == 0 || d_model == 0 || ffn_dim == 0 || max_len == 0)
    throw std::invalid_argument("crossmodal: dimensions must be positive");
  if (heads == 0 || d_model % heads != 0)
    throw std::invalid_argument("crossmodal: d_model " + std::to_string(d_model) + " not divisible by " +
                                std::to_string(heads) + " heads");
  if (layers == 0) throw std::invalid_argument("crossmodal: at least one layer required");
}

const std::array<ModalityPair, 6>& modality_pairs() {
  static const std::array<ModalityPair, 6> pairs{{{0, 1}, {0, 2}, {1, 0}, {1, 2}, {2, 0}, {2, 1}}};
  return pairs;
}

std::string pair_name(std::size_t source, std::size_t target) {
  return std::string(modality_name(source)) + "->" + modality_name(target);
}

std::size_t pair_index(std::size_t source, std::size_t target) {
  if (source >= kNumModalities || target >= kNumModalities || source == target)
    throw std::invalid_argument("pair_index: invalid pair");
  return source * 2 + (target > source ? target - 1 : target);
}

namespace {

Parameter* ones(ParameterStore& store, const std::string& name, std::size_t n) {
  return &store.add(name, Tensor({n}, 1.0));
}
Parameter* zeros(ParameterStore& store, const std::string& name, std::size_t n) {
  return &store.add(name, Tensor({n}));
}

}  // namespace

CrossModalTransformer::CrossModalTransformer(ParameterStore& store, const CrossModalConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg) {
  cfg_.validate();
  const std::size_t D = cfg_.d_model, F = cfg_.ffn_dim;
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    const std::string n = std::string("crossmodal.proj.") + modality_name(m);
    proj_w_[m] = &store.add(n + ".weight", fan_in_gaussian({D, cfg_.input_dim}, rng));
    proj_b_[m] = zeros(store, n + ".bias", D);
    pos_[m] = &store.add(std::string("crossmodal.pos.") + modality_name(m), gaussian({cfg_.max_len, D}, 0.1, rng));
  }
  for (const auto& pr : modality_pairs()) {
    auto& stack = layers_[pair_index(pr.source, pr.target)];
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string p = "crossmodal." + pair_name(pr.source, pr.target) + ".layer" + std::to_string(l) + ".";
      CALayerParams lp{};
      lp.ln_q_g = ones(store, p + "ln_q.gamma", D);
      lp.ln_q_b = zeros(store, p + "ln_q.beta", D);
      lp.ln_kv_g = ones(store, p + "ln_kv.gamma", D);
      lp.ln_kv_b = zeros(store, p + "ln_kv.beta", D);
      lp.q_w = &store.add(p + "q.weight", fan_in_gaussian({D, D}, rng));
      lp.q_b = zeros(store, p + "q.bias", D);
      lp.k_w = &store.add(p + "k.weight", fan_in_gaussian({D, D}, rng));
      lp.k_b = zeros(store, p + "k.bias", D);
      lp.v_w = &store.add(p + "v.weight", fan_in_gaussian({D, D}, rng));
      lp.v_b = zeros(store, p + "v.bias", D);
      lp.o_w = &store.add(p + "o.weight", fan_in_gaussian({D, D}, rng));
      lp.o_b = zeros(store, p + "o.bias", D);
      lp.ln_ff_g = ones(store, p + "ln_ff.gamma", D);
      lp.ln_ff_b = zeros(store, p + "ln_ff.beta", D);
      lp.ff1_w = &store.add(p + "ff1.weight", fan_in_gaussian({F, D}, rng));
      lp.ff1_b = zeros(store, p + "ff1.bias", F);
      lp.ff2_w = &store.add(p + "ff2.weight", fan_in_gaussian({D, F}, rng));
      lp.ff2_b = zeros(store, p + "ff2.bias", D);
      stack.push_back(lp);
    }
  }
}

Var CrossModalTransformer::embed(Graph& g, std::size_t m, const Var& x) const {
  if (x.value().rank() != 3 || x.shape()[2] != cfg_.input_dim)
    throw std::invalid_argument(std::string("crossmodal: modality ") + modality_name(m) + " expects width " +
                                std::to_string(cfg_.input_dim) + ", got " + shape_str(x.shape()));
  Var h = ag::linear(x, g.param(*proj_w_[m]), g.param(*proj_b_[m]));
  return ag::add_positional(h, g.param(*pos_[m]));
}

Var CrossModalTransformer::cross_attention(Graph& g, std::size_t source, std::size_t target, const Var& target_emb,
                                           const Var& source_emb, const Mask& source_mask,
                                           Tensor* last_attention) const {
  const auto& stack = layers_[pair_index(source, target)];
  Var x = target_emb;
  for (std::size_t l = 0; l < stack.size(); ++l) {
    const CALayerParams& p = stack[l];
    Var qn = ag::layer_norm(x, g.param(*p.ln_q_g), g.param(*p.ln_q_b));
    Var kvn = ag::layer_norm(source_emb, g.param(*p.ln_kv_g), g.param(*p.ln_kv_b));
    Var q = ag::linear(qn, g.param(*p.q_w), g.param(*p.q_b));
    Var k = ag::linear(kvn, g.param(*p.k_w), g.param(*p.k_b));
    Var v = ag::linear(kvn, g.param(*p.v_w), g.param(*p.v_b));
    Var att;
    try {
      att = ag::attention(q, k, v, cfg_.heads, source_mask, l + 1 == stack.size() ? last_attention : nullptr);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("cross attention " + pair_name(source, target) + ": " + e.what());
    }
    x = ag::add(x, ag::linear(att, g.param(*p.o_w), g.param(*p.o_b)));
    Var fn = ag::layer_norm(x, g.param(*p.ln_ff_g), g.param(*p.ln_ff_b));
    Var hidden = ag::gelu(ag::linear(fn, g.param(*p.ff1_w), g.param(*p.ff1_b)));
    x = ag::add(x, ag::linear(hidden, g.param(*p.ff2_w), g.param(*p.ff2_b)));
  }
  return x;
}

ReinforcedFeatures CrossModalTransformer::reinforce_all(Graph& g, const ModalityVars& prt,
                                                        const ModalityMasks& masks) const {
  ReinforcedFeatures rf;
  ModalityVars emb;
  for (std::size_t m = 0; m < kNumModalities; ++m) emb[m] = embed(g, m, prt[m]);
  for (const auto& pr : modality_pairs()) {
    const std::size_t i = pair_index(pr.source, pr.target);
    Var z = cross_attention(g, pr.source, pr.target, emb[pr.target], emb[pr.source], masks[pr.source],
                            &rf.attention[i]);
    rf.pair[i] = ag::mask_time(z, masks[pr.target]);
  }
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    std::vector<Var> parts;
    for (std::size_t s = 0; s < kNumModalities; ++s)
      if (s != m) parts.push_back(rf.of(s, m));
    rf.reinforced[m] = ag::concat_last(parts);
  }
  return rf;
}

std::string attention_json(const ReinforcedFeatures& rf, std::size_t pair, std::size_t sample, const Mask& target_mask,
                           const Mask& source_mask) {
  const Tensor& A = rf.attention.at(pair);
  const auto& pr = modality_pairs()[pair];
  const std::size_t Tt = A.dim(1), Ts = A.dim(2);
  nlohmann::json j;
  j["pair"] = pair_name(pr.source, pr.target);
  j["weights"] = nlohmann::json::array();
  for (std::size_t t = 0; t < Tt; ++t) {
    if (!target_mask(sample, t)) continue;
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t s = 0; s < Ts; ++s)
      if (source_mask(sample, s)) row.push_back(static_cast<float>(A.at(sample, t, s)));
    j["weights"].push_back(row);
  }
  return j.dump();
}

}  // namespace dhmd
