#include "dhmd/pipeline.hpp"

#include <cmath>
#include <set>
#include <sstream>

namespace dhmd {

Switches Switches::parse(const std::string& text) {
  std::string t;
  for (char c : text)
    if (!std::isspace(static_cast<unsigned char>(c))) t += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  if (t.empty() || t == "NONE" || t == "BASELINE") return none();
  if (t == "ALL" || t == "FULL") return all();
  Switches s = none();
  std::stringstream ss(t);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok == "FD") s.fd = true;
    else if (tok == "CA") s.ca = true;
    else if (tok == "GD") s.gd = true;
    else if (tok == "DM") s.dm = true;
    else throw ConfigError("unknown ablation switch '" + tok + "' (expected FD, CA, GD, DM)");
  }
  return s;
}

std::string Switches::str() const {
  std::string out;
  auto put = [&](bool on, const char* n) {
    if (!on) return;
    if (!out.empty()) out += ',';
    out += n;
  };
  put(fd, "FD");
  put(ca, "CA");
  put(gd, "GD");
  put(dm, "DM");
  return out.empty() ? "none" : out;
}

std::size_t ModelConfig::fused_width() const {
  const std::size_t homo = channels * (switches.dm ? 2 : 1);
  const std::size_t het = hetero_width() * (switches.dm ? 2 : 1);
  return kNumModalities * (homo + het);
}

void ModelConfig::validate() const {
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    if (input_dims[m] == 0) throw ConfigError(std::string("input dim of ") + modality_name(m) + " is zero");
    if (kernels[m] % 2 == 0) throw ConfigError("conv kernels must be odd");
  }
  if (channels == 0) throw ConfigError("channels must be positive");
  if (!(margin > 0)) throw ConfigError("margin must be > 0");
  for (double v : {gamma, lambda1, lambda2, lambda3, unimodal_weight})
    if (!(v >= 0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and >= 0");
  if (switches.ca) {
    if (ca_layers == 0) throw ConfigError("CA is on but ca_layers = 0");
    if (heads == 0 || d_model == 0 || d_model % heads != 0)
      throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by heads " + std::to_string(heads));
    if (ffn_dim == 0 || max_len == 0) throw ConfigError("ffn_dim and max_len must be positive");
  }
  if (switches.dm && dict_elements == 0) throw ConfigError("DM is on but dict_elements = 0");
  if (!switches.gd && unimodal_weight > 0)
    throw ConfigError("unimodal_weight supervises GD-Unit heads but GD is off");
}

const std::vector<std::string>& LossComponents::names() {
  static const std::vector<std::string> n{"task", "unimodal", "rec",    "cyc",    "mar",    "ort", "dec",
                                          "dtl_ho", "dtl_he", "dtl", "ctr_ho", "ctr_he", "dic", "total"};
  return n;
}

std::vector<double> LossComponents::values() const {
  return {task, unimodal, rec, cyc, mar, ort, dec, dtl_ho, dtl_he, dtl, ctr_ho, ctr_he, dic, total};
}

LossComponents& LossComponents::operator+=(const LossComponents& o) {
  task += o.task;
  unimodal += o.unimodal;
  rec += o.rec;
  cyc += o.cyc;
  mar += o.mar;
  ort += o.ort;
  dec += o.dec;
  dtl_ho += o.dtl_ho;
  dtl_he += o.dtl_he;
  dtl += o.dtl;
  ctr_ho += o.ctr_ho;
  ctr_he += o.ctr_he;
  dic += o.dic;
  total += o.total;
  no_triplet = no_triplet || o.no_triplet;
  return *this;
}

LossComponents LossComponents::scaled(double s) const {
  LossComponents c = *this;
  for (double* p : {&c.task, &c.unimodal, &c.rec, &c.cyc, &c.mar, &c.ort, &c.dec, &c.dtl_ho, &c.dtl_he, &c.dtl,
                    &c.ctr_ho, &c.ctr_he, &c.dic, &c.total})
    *p *= s;
  return c;
}

std::string LossComponents::describe() const {
  std::ostringstream os;
  const auto& n = names();
  auto v = values();
  for (std::size_t i = 0; i < n.size(); ++i) os << (i ? " " : "") << n[i] << '=' << v[i];
  return os.str();
}

double total_loss(double task, double dec, double dtl, double dic, double lambda1, double lambda2, double lambda3) {
  return task + lambda1 * dec + lambda2 * dtl + lambda3 * dic;
}

double total_loss(const LossComponents& c, const ModelConfig& cfg) {
  return total_loss(c.task, c.dec, c.dtl, c.dic, cfg.lambda1, cfg.lambda2, cfg.lambda3);
}

DhmdModel::DhmdModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const Switches& sw = cfg_.switches;
  DecouplerConfig dc;
  dc.input_dims = cfg_.input_dims;
  dc.kernels = cfg_.kernels;
  dc.channels = cfg_.channels;
  dc.margin = cfg_.margin;
  dc.gamma = cfg_.gamma;
  dc.encoders = sw.fd;
  decoupler_ = std::make_unique<Decoupler>(store_, dc, rng);
  if (sw.ca) {
    CrossModalConfig cc;
    cc.input_dim = cfg_.channels;
    cc.d_model = cfg_.d_model;
    cc.heads = cfg_.heads;
    cc.layers = cfg_.ca_layers;
    cc.ffn_dim = cfg_.ffn_dim;
    cc.max_len = cfg_.max_len;
    crossmodal_ = std::make_unique<CrossModalTransformer>(store_, cc, rng);
  }
  if (sw.gd) {
    hogd_ = std::make_unique<GDUnit>(store_, "hogd", GDUnitConfig{cfg_.channels, cfg_.num_outputs()}, rng);
    hegd_ = std::make_unique<GDUnit>(store_, "hegd", GDUnitConfig{cfg_.hetero_width(), cfg_.num_outputs()}, rng);
  }
  if (sw.dm) {
    dict_ho_ = std::make_unique<Dictionary>(store_, Space::Homogeneous, cfg_.dict_elements, cfg_.channels, rng);
    dict_he_ = std::make_unique<Dictionary>(store_, Space::Heterogeneous, cfg_.dict_elements, cfg_.hetero_width(), rng);
  }
  head_w_ = &store_.add("head.weight", fan_in_gaussian({cfg_.num_outputs(), cfg_.fused_width()}, rng));
  head_b_ = &store_.add("head.bias", Tensor({cfg_.num_outputs()}));
}

namespace {

Var task_loss(const Var& pred, const Batch& batch, TaskType task) {
  if (task == TaskType::Binary) return ag::cross_entropy(pred, batch.class_ids);
  return ag::l1_loss(pred, batch.labels);
}

}  // namespace

ForwardResult DhmdModel::forward(Graph& g, const Batch& batch) const {
  const Switches& sw = cfg_.switches;
  const ModalityMasks& masks = batch.masks;
  ForwardResult r;
  LossComponents& lc = r.losses;

  r.shallow = decoupler_->embed_shallow(g, batch.data, masks);
  ModalityVars prt = r.shallow;
  r.homo = r.shallow;
  if (sw.fd) {
    r.decoupled = decoupler_->decouple(g, r.shallow, masks);
    const auto& df = *r.decoupled;
    r.homo = df.homogeneous;
    prt = df.heterogeneous;
    Var rec = loss_rec(df, masks);
    Var cyc = loss_cyc(df, masks);
    TripletLoss mar = loss_margin(df, masks, batch.class_ids, cfg_.margin);
    Var ort = loss_ort(df, masks);
    r.dec = loss_dec(rec, cyc, mar.loss, ort, cfg_.gamma);
    lc.rec = rec.item();
    lc.cyc = cyc.item();
    lc.mar = mar.loss.item();
    lc.ort = ort.item();
    lc.dec = r.dec.item();
    lc.no_triplet = lc.no_triplet || mar.no_triplet;
  }
  r.hetero = prt;
  if (sw.ca) {
    r.reinforced = crossmodal_->reinforce_all(g, prt, masks);
    r.hetero = r.reinforced->reinforced;
  }

  Var unimodal;
  if (sw.gd) {
    r.hogd = hogd_->run(g, r.homo, masks);
    r.hegd = hegd_->run(g, r.hetero, masks);
    r.dtl = ag::add(r.hogd->loss, r.hegd->loss);
    lc.dtl_ho = r.hogd->loss.item();
    lc.dtl_he = r.hegd->loss.item();
    lc.dtl = r.dtl.item();
    if (cfg_.unimodal_weight > 0) {
      std::vector<Var> terms;
      for (const auto* unit : {&*r.hogd, &*r.hegd})
        for (const auto& l : unit->logits) terms.push_back(task_loss(l, batch, cfg_.task));
      unimodal = ag::weighted_sum(terms, std::vector<double>(terms.size(), 1.0 / static_cast<double>(terms.size())));
      lc.unimodal = unimodal.item();
    }
  }

  auto pooled_homo = pool_all(r.homo, masks);
  auto pooled_het = pool_all(r.hetero, masks);
  std::vector<Var> parts;
  if (sw.dm) {
    ModalityVars z_ho, z_he;
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      r.ho_match[m] = dict_ho_->match(g, r.homo[m], masks[m]);
      r.he_match[m] = dict_he_->match(g, r.hetero[m], masks[m]);
      z_ho[m] = r.ho_match[m]->z;
      z_he[m] = r.he_match[m]->z;
    }
    TripletLoss ho = contrastive_loss(z_ho, batch.class_ids, cfg_.margin);
    TripletLoss he = contrastive_loss(z_he, batch.class_ids, cfg_.margin);
    r.dic = dic_loss(ho.loss, he.loss);
    lc.ctr_ho = ho.loss.item();
    lc.ctr_he = he.loss.item();
    lc.dic = r.dic.item();
    lc.no_triplet = lc.no_triplet || ho.no_triplet || he.no_triplet;
    for (std::size_t m = 0; m < kNumModalities; ++m) parts.push_back(ag::concat_last({pooled_homo[m], z_ho[m]}));
    for (std::size_t m = 0; m < kNumModalities; ++m) parts.push_back(ag::concat_last({pooled_het[m], z_he[m]}));
  } else {
    for (std::size_t m = 0; m < kNumModalities; ++m) parts.push_back(pooled_homo[m]);
    for (std::size_t m = 0; m < kNumModalities; ++m) parts.push_back(pooled_het[m]);
  }
  r.fused = ag::concat_last(parts);
  r.prediction = ag::linear(r.fused, g.param(*head_w_), g.param(*head_b_));

  Var task = task_loss(r.prediction, batch, cfg_.task);
  if (unimodal.valid()) task = ag::weighted_sum({task, unimodal}, {1.0, cfg_.unimodal_weight});
  r.task = task;
  lc.task = task.item();

  std::vector<Var> terms{task};
  std::vector<double> weights{1.0};
  if (r.dec.valid()) {
    terms.push_back(r.dec);
    weights.push_back(cfg_.lambda1);
  }
  if (r.dtl.valid()) {
    terms.push_back(r.dtl);
    weights.push_back(cfg_.lambda2);
  }
  if (r.dic.valid()) {
    terms.push_back(r.dic);
    weights.push_back(cfg_.lambda3);
  }
  r.total = ag::weighted_sum(terms, weights);
  lc.total = r.total.item();
  return r;
}

std::vector<std::string> dead_parameter_groups(DhmdModel& model, const Batch& batch) {
  auto& store = model.params();
  store.zero_grad();
  {
    Graph g;
    auto r = model.forward(g, batch);
    g.backward(r.total);
    g.accumulate_param_grads();
  }
  std::map<std::string, bool> alive;
  for (const auto& p : store.all()) {
    const std::string group = p->name.substr(0, p->name.rfind('.'));
    bool nz = false;
    for (double v : p->grad.data) nz = nz || v != 0.0;
    alive[group] = alive[group] || nz;
  }
  store.zero_grad();
  std::vector<std::string> dead;
  for (const auto& [group, ok] : alive)
    if (!ok) dead.push_back(group);
  return dead;
}

}  // namespace dhmd
