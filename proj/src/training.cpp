#include "dhmd/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

namespace dhmd {

namespace fs = std::filesystem;
using nlohmann::json;

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) throw std::invalid_argument("pearson: size mismatch or empty input");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0 || sbb == 0) return 0.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

Metrics compute_metrics(const std::vector<double>& scores, const std::vector<double>& labels, TaskType task) {
  if (scores.empty()) throw std::invalid_argument("compute_metrics: empty split");
  if (scores.size() != labels.size()) throw std::invalid_argument("compute_metrics: size mismatch");
  Metrics m;
  m.count = scores.size();
  std::size_t hit7 = 0, hit2 = 0, tp = 0, fp = 0, fn = 0;
  double abs_err = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    bool pp, lp;
    if (task == TaskType::Binary) {
      pp = scores[i] >= 0.5;
      lp = labels[i] >= 0.5;
    } else {
      pp = scores[i] >= 0;
      lp = labels[i] >= 0;
      hit7 += std::round(std::clamp(scores[i], -3.0, 3.0)) == std::round(std::clamp(labels[i], -3.0, 3.0));
    }
    hit2 += pp == lp;
    tp += pp && lp;
    fp += pp && !lp;
    fn += !pp && lp;
    abs_err += std::fabs(scores[i] - labels[i]);
  }
  const double n = static_cast<double>(m.count);
  m.acc7 = task == TaskType::Binary ? 0.0 : static_cast<double>(hit7) / n;
  m.acc2 = static_cast<double>(hit2) / n;
  m.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  m.recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  m.f1 = m.precision + m.recall > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  m.mae = abs_err / n;
  m.corr = pearson(scores, labels);
  return m;
}

// ---------------------------------------------------------------- config

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(trim(tok));
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(d)) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

long long to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    long long d = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
  }
}

std::size_t to_size(const std::string& key, const std::string& v) {
  long long d = to_int(key, v);
  if (d < 0) throw ConfigError("config key '" + key + "' must be >= 0");
  return static_cast<std::size_t>(d);
}

template <typename T, typename F>
std::array<T, kNumModalities> triple(const std::string& key, const std::string& v, F conv) {
  auto parts = split_csv(v);
  if (parts.size() != kNumModalities) throw ConfigError("config key '" + key + "' expects three comma-separated values");
  std::array<T, kNumModalities> out{};
  for (std::size_t i = 0; i < kNumModalities; ++i) out[i] = static_cast<T>(conv(key, parts[i]));
  return out;
}

template <typename T>
std::string join3(const std::array<T, kNumModalities>& a) {
  std::ostringstream os;
  os.precision(17);
  os << a[0] << ',' << a[1] << ',' << a[2];
  return os.str();
}

std::string num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void RunConfig::set(const std::string& key_in, const std::string& value_in) {
  const std::string key = trim(key_in), v = trim(value_in);
  auto& mc = model;
  auto& sy = synth;
  if (key == "seed") seed = static_cast<std::uint64_t>(to_size(key, v));
  else if (key == "epochs") epochs = static_cast<int>(to_int(key, v));
  else if (key == "batch_size") batch_size = to_size(key, v);
  else if (key == "eval_batch_size") eval_batch_size = to_size(key, v);
  else if (key == "lr") learning_rate = to_double(key, v);
  else if (key == "dataset") dataset = v;
  else if (key == "out") out = v;
  else if (key == "ablation") mc.switches = Switches::parse(v);
  else if (key == "task") mc.task = sy.task = parse_task(v);
  else if (key == "channels") mc.channels = to_size(key, v);
  else if (key == "kernels") mc.kernels = triple<std::size_t>(key, v, to_size);
  else if (key == "d_model") mc.d_model = to_size(key, v);
  else if (key == "heads") mc.heads = to_size(key, v);
  else if (key == "ca_layers") mc.ca_layers = to_size(key, v);
  else if (key == "ffn_dim") mc.ffn_dim = to_size(key, v);
  else if (key == "max_len") mc.max_len = to_size(key, v);
  else if (key == "dict_elements") mc.dict_elements = to_size(key, v);
  else if (key == "margin") mc.margin = to_double(key, v);
  else if (key == "gamma") mc.gamma = to_double(key, v);
  else if (key == "lambda1") mc.lambda1 = to_double(key, v);
  else if (key == "lambda2") mc.lambda2 = to_double(key, v);
  else if (key == "lambda3") mc.lambda3 = to_double(key, v);
  else if (key == "unimodal_weight") mc.unimodal_weight = to_double(key, v);
  else if (key == "probe_iterations") probe_iterations = to_size(key, v);
  else if (key == "probe_l2") probe_l2 = to_double(key, v);
  else if (key == "attention_samples") attention_samples = to_size(key, v);
  else if (key == "synth.num_classes") sy.num_classes = static_cast<int>(to_int(key, v));
  else if (key == "synth.samples_per_class") sy.samples_per_class = static_cast<int>(to_int(key, v));
  else if (key == "synth.strengths") sy.signal_strength = triple<double>(key, v, to_double);
  else if (key == "synth.dims") sy.feature_dims = triple<int>(key, v, to_int);
  else if (key == "synth.noise") sy.noise_sigma = to_double(key, v);
  else if (key == "synth.cue_sparsity") sy.cue_sparsity = to_double(key, v);
  else if (key == "synth.nuisance") sy.nuisance_templates = static_cast<int>(to_int(key, v));
  else if (key == "synth.seed") {
    sy.seed = static_cast<std::uint64_t>(to_size(key, v));
    synth_seed_follows_run = false;
  } else if (key.rfind("synth.len_", 0) == 0 && key.size() == 11) {
    const auto m = static_cast<std::size_t>(parse_modality(key.substr(10)));
    auto parts = split_csv(v);
    if (parts.size() != 2) throw ConfigError("config key '" + key + "' expects min,max");
    sy.seq_len_range[m] = {static_cast<int>(to_int(key, parts[0])), static_cast<int>(to_int(key, parts[1]))};
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

void RunConfig::load_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    set(line.substr(0, eq), line.substr(eq + 1));
  }
}

std::string RunConfig::to_text() const {
  const auto& mc = model;
  const auto& sy = synth;
  std::ostringstream os;
  auto kv = [&](const std::string& k, const std::string& v) { os << k << " = " << v << '\n'; };
  kv("seed", std::to_string(seed));
  kv("epochs", std::to_string(epochs));
  kv("batch_size", std::to_string(batch_size));
  kv("eval_batch_size", std::to_string(eval_batch_size));
  kv("lr", num(learning_rate));
  if (!dataset.empty()) kv("dataset", dataset);
  if (!out.empty()) kv("out", out);
  kv("ablation", mc.switches.str());
  kv("task", task_name(mc.task));
  kv("channels", std::to_string(mc.channels));
  kv("kernels", join3(mc.kernels));
  kv("d_model", std::to_string(mc.d_model));
  kv("heads", std::to_string(mc.heads));
  kv("ca_layers", std::to_string(mc.ca_layers));
  kv("ffn_dim", std::to_string(mc.ffn_dim));
  kv("max_len", std::to_string(mc.max_len));
  kv("dict_elements", std::to_string(mc.dict_elements));
  kv("margin", num(mc.margin));
  kv("gamma", num(mc.gamma));
  kv("lambda1", num(mc.lambda1));
  kv("lambda2", num(mc.lambda2));
  kv("lambda3", num(mc.lambda3));
  kv("unimodal_weight", num(mc.unimodal_weight));
  kv("probe_iterations", std::to_string(probe_iterations));
  kv("probe_l2", num(probe_l2));
  kv("attention_samples", std::to_string(attention_samples));
  kv("synth.num_classes", std::to_string(sy.num_classes));
  kv("synth.samples_per_class", std::to_string(sy.samples_per_class));
  kv("synth.strengths", join3(sy.signal_strength));
  kv("synth.dims", join3(sy.feature_dims));
  for (std::size_t m = 0; m < kNumModalities; ++m)
    kv(std::string("synth.len_") + modality_name(m),
       std::to_string(sy.seq_len_range[m].first) + "," + std::to_string(sy.seq_len_range[m].second));
  kv("synth.noise", num(sy.noise_sigma));
  kv("synth.cue_sparsity", num(sy.cue_sparsity));
  kv("synth.nuisance", std::to_string(sy.nuisance_templates));
  if (!synth_seed_follows_run) kv("synth.seed", std::to_string(sy.seed));
  return os.str();
}

std::string RunConfig::to_json() const {
  json j = json::object();
  std::istringstream is(to_text());
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    j[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
  RunConfig cfg;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config JSON must be an object");
  for (const auto& [k, v] : j.items()) cfg.set(k, v.is_string() ? v.get<std::string>() : v.dump());
  return cfg;
}

void RunConfig::validate() const {
  if (batch_size == 0 || eval_batch_size == 0) throw ConfigError("batch sizes must be positive");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(learning_rate > 0)) throw ConfigError("lr must be > 0");
  if (dataset.empty()) {
    try {
      synth.validate();
    } catch (const std::exception& e) {
      throw ConfigError(std::string("synthetic task: ") + e.what());
    }
  }
}

// ---------------------------------------------------------------- evaluation

std::vector<std::size_t> batch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x5eedu};
  std::mt19937_64 rng(seq);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

namespace {

template <typename F>
void for_each_batch(const std::vector<MultimodalSample>& samples, std::size_t batch_size, F&& fn) {
  for (std::size_t i = 0; i < samples.size(); i += batch_size) {
    const std::size_t n = std::min(batch_size, samples.size() - i);
    fn(collate(std::span<const MultimodalSample>(samples.data() + i, n)), i);
  }
}

std::vector<double> scores_of(const ForwardResult& r, TaskType task) {
  const Tensor& p = r.prediction.value();
  std::vector<double> out(p.rows());
  for (std::size_t b = 0; b < p.rows(); ++b) {
    if (task == TaskType::Binary) {
      const double z0 = p.at(b, 0), z1 = p.at(b, 1);
      out[b] = 1.0 / (1.0 + std::exp(z0 - z1));
    } else {
      out[b] = p.at(b, 0);
    }
  }
  return out;
}

}  // namespace

EvalReport evaluate(const DhmdModel& model, const std::vector<MultimodalSample>& samples, std::size_t batch_size) {
  if (samples.empty()) throw std::invalid_argument("evaluate: split is empty");
  EvalReport rep;
  std::vector<double> labels;
  for_each_batch(samples, batch_size, [&](const Batch& b, std::size_t) {
    Graph g(false);
    auto r = model.forward(g, b);
    auto s = scores_of(r, model.config().task);
    rep.predictions.insert(rep.predictions.end(), s.begin(), s.end());
    labels.insert(labels.end(), b.labels.begin(), b.labels.end());
    rep.losses += r.losses.scaled(static_cast<double>(b.size()));
  });
  rep.losses = rep.losses.scaled(1.0 / static_cast<double>(samples.size()));
  rep.metrics = compute_metrics(rep.predictions, labels, model.config().task);
  return rep;
}

std::array<std::vector<std::vector<double>>, kNumModalities> probe_features(const DhmdModel& model,
                                                                          const std::vector<MultimodalSample>& samples,
                                                                          std::size_t batch_size) {
  std::array<std::vector<std::vector<double>>, kNumModalities> out;
  for_each_batch(samples, batch_size, [&](const Batch& b, std::size_t) {
    Graph g(false);
    ModalityVars shallow = model.decoupler().embed_shallow(g, b.data, b.masks);
    std::array<std::vector<Var>, kNumModalities> parts;
    if (model.config().switches.fd) {
      auto df = model.decoupler().decouple(g, shallow, b.masks);
      auto com = pool_all(df.homogeneous, b.masks);
      auto prt = pool_all(df.heterogeneous, b.masks);
      for (std::size_t m = 0; m < kNumModalities; ++m) parts[m] = {com[m], prt[m]};
    } else {
      auto sh = pool_all(shallow, b.masks);
      for (std::size_t m = 0; m < kNumModalities; ++m) parts[m] = {sh[m]};
    }
    for (std::size_t m = 0; m < kNumModalities; ++m)
      for (std::size_t i = 0; i < b.size(); ++i) {
        std::vector<double> row;
        for (const auto& p : parts[m]) {
          const std::size_t w = p.value().cols();
          row.insert(row.end(), p.value().data.begin() + static_cast<long>(i * w),
                     p.value().data.begin() + static_cast<long>((i + 1) * w));
        }
        out[m].push_back(std::move(row));
      }
  });
  return out;
}

double LinearProbe::fit_and_score(const std::vector<std::vector<double>>& train_x, const std::vector<int>& train_y,
                                  const std::vector<std::vector<double>>& test_x, const std::vector<int>& test_y,
                                  int num_classes) const {
  if (train_x.empty() || test_x.empty()) throw std::invalid_argument("linear probe: empty split");
  const std::size_t D = train_x[0].size(), K = static_cast<std::size_t>(num_classes), N = train_x.size();
  std::vector<double> mu(D, 0.0), sd(D, 0.0);
  for (const auto& x : train_x)
    for (std::size_t d = 0; d < D; ++d) mu[d] += x[d] / static_cast<double>(N);
  for (const auto& x : train_x)
    for (std::size_t d = 0; d < D; ++d) sd[d] += (x[d] - mu[d]) * (x[d] - mu[d]) / static_cast<double>(N);
  for (auto& s : sd) s = s > 1e-12 ? std::sqrt(s) : 1.0;
  auto standardize = [&](const std::vector<std::vector<double>>& xs) {
    std::vector<double> out(xs.size() * D);
    for (std::size_t i = 0; i < xs.size(); ++i)
      for (std::size_t d = 0; d < D; ++d) out[i * D + d] = (xs[i][d] - mu[d]) / sd[d];
    return out;
  };
  const auto X = standardize(train_x);
  const auto Xt = standardize(test_x);

  const std::size_t P = K * (D + 1);
  std::vector<double> w(P, 0.0), gw(P), m1(P, 0.0), m2(P, 0.0), logits(K);
  const double b1 = 0.9, b2 = 0.999;
  for (std::size_t it = 1; it <= iterations; ++it) {
    std::fill(gw.begin(), gw.end(), 0.0);
    for (std::size_t i = 0; i < N; ++i) {
      const double* x = &X[i * D];
      double mx = -1e300;
      for (std::size_t k = 0; k < K; ++k) {
        double z = w[k * (D + 1) + D];
        for (std::size_t d = 0; d < D; ++d) z += w[k * (D + 1) + d] * x[d];
        logits[k] = z;
        mx = std::max(mx, z);
      }
      double s = 0;
      for (auto& z : logits) s += (z = std::exp(z - mx));
      for (std::size_t k = 0; k < K; ++k) {
        const double g = (logits[k] / s - (static_cast<int>(k) == train_y[i] ? 1.0 : 0.0)) / static_cast<double>(N);
        for (std::size_t d = 0; d < D; ++d) gw[k * (D + 1) + d] += g * x[d];
        gw[k * (D + 1) + D] += g;
      }
    }
    const double c1 = 1 - std::pow(b1, static_cast<double>(it)), c2 = 1 - std::pow(b2, static_cast<double>(it));
    for (std::size_t p = 0; p < P; ++p) {
      const double g = gw[p] + (p % (D + 1) == D ? 0.0 : l2 * w[p]);
      m1[p] = b1 * m1[p] + (1 - b1) * g;
      m2[p] = b2 * m2[p] + (1 - b2) * g * g;
      w[p] -= learning_rate * (m1[p] / c1) / (std::sqrt(m2[p] / c2) + 1e-8);
    }
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < test_x.size(); ++i) {
    std::size_t best = 0;
    double bz = -1e300;
    for (std::size_t k = 0; k < K; ++k) {
      double z = w[k * (D + 1) + D];
      for (std::size_t d = 0; d < D; ++d) z += w[k * (D + 1) + d] * Xt[i * D + d];
      if (z > bz) {
        bz = z;
        best = k;
      }
    }
    hits += static_cast<int>(best) == test_y[i];
  }
  return static_cast<double>(hits) / static_cast<double>(test_x.size());
}

std::array<double, kNumModalities> probe_accuracies(const DhmdModel& model, const Dataset& data,
                                                    std::size_t batch_size, const LinearProbe& probe) {
  auto ftr = probe_features(model, data.train, batch_size);
  auto fte = probe_features(model, data.test, batch_size);
  std::vector<int> ytr, yte;
  for (const auto& s : data.train) ytr.push_back(s.class_id);
  for (const auto& s : data.test) yte.push_back(s.class_id);
  int K = 0;
  for (int y : ytr) K = std::max(K, y + 1);
  for (int y : yte) K = std::max(K, y + 1);
  std::array<double, kNumModalities> acc{};
  for (std::size_t m = 0; m < kNumModalities; ++m) acc[m] = probe.fit_and_score(ftr[m], ytr, fte[m], yte, K);
  return acc;
}

double population_std(const std::array<double, kNumModalities>& v) {
  const double mu = (v[0] + v[1] + v[2]) / 3.0;
  double s = 0;
  for (double x : v) s += (x - mu) * (x - mu);
  return std::sqrt(s / 3.0);
}

// ---------------------------------------------------------------- training

NonFiniteLoss::NonFiniteLoss(int e, long s, const LossComponents& c)
    : std::runtime_error("non-finite loss at epoch " + std::to_string(e) + " step " + std::to_string(s) + ": " +
                         c.describe()),
      epoch(e),
      step(s),
      components(c) {}

Trainer::Trainer(DhmdModel& model, const RunConfig& cfg)
    : model_(model), cfg_(cfg), adam_(model.params(), AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8}) {}

LossComponents Trainer::step(const Batch& batch) {
  auto& store = model_.params();
  Graph g;
  auto r = model_.forward(g, batch);
  for (double v : r.losses.values())
    if (!std::isfinite(v)) throw NonFiniteLoss(epoch_, step_in_epoch_, r.losses);
  g.backward(r.total);
  store.zero_grad();
  g.accumulate_param_grads();
  adam_.step();
  ++step_in_epoch_;
  if (r.hogd) edges_.update("HoGD", r.hogd->mean_W);
  if (r.hegd) edges_.update("HeGD", r.hegd->mean_W);
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    if (r.ho_match[m]) activations_.add(Space::Homogeneous, m, r.ho_match[m]->alpha.value(), batch.class_ids);
    if (r.he_match[m]) activations_.add(Space::Heterogeneous, m, r.he_match[m]->alpha.value(), batch.class_ids);
  }
  if (r.hogd && step_in_epoch_ % 50 == 1) {
    for (const auto* unit : {&*r.hogd, &*r.hegd}) {
      const Tensor& W = unit->W.value();
      for (std::size_t b = 0; b < W.dim(0); ++b)
        for (std::size_t j = 0; j < kNumModalities; ++j) {
          double s = 0;
          for (std::size_t i = 0; i < kNumModalities; ++i) s += W.at(b, i, j);
          if (std::fabs(s - 1.0) > 1e-6) throw std::logic_error("edge weights lost column-stochasticity");
        }
    }
  }
  return r.losses;
}

void Trainer::run_epoch(const std::vector<MultimodalSample>& train) {
  if (train.empty()) throw std::invalid_argument("training split is empty");
  auto order = batch_order(train.size(), cfg_.seed, epoch_);
  activations_.clear();
  step_in_epoch_ = 0;
  LossComponents sum;
  std::vector<const MultimodalSample*> ptrs;
  for (std::size_t i = 0; i < order.size(); i += cfg_.batch_size) {
    ptrs.clear();
    for (std::size_t k = i; k < std::min(order.size(), i + cfg_.batch_size); ++k) ptrs.push_back(&train[order[k]]);
    Batch b = collate(ptrs);
    sum += step(b).scaled(static_cast<double>(b.size()));
  }
  EpochRecord rec;
  rec.epoch = epoch_;
  rec.train = sum.scaled(1.0 / static_cast<double>(train.size()));
  history_.push_back(rec);
  edges_.end_epoch(epoch_);
  ++epoch_;
}

namespace {

double selection_score(const Metrics& m, TaskType task) {
  const double acc = task == TaskType::Binary ? m.acc2 : m.acc7;
  return acc - 1e-6 * m.mae;
}

}  // namespace

void Trainer::fit(const Dataset& data, const std::function<void(const EpochRecord&)>& on_epoch) {
  std::vector<Tensor> best;
  while (epoch_ < cfg_.epochs) {
    run_epoch(data.train);
    EpochRecord& rec = history_.back();
    if (!data.valid.empty()) {
      auto rep = evaluate(model_, data.valid, cfg_.eval_batch_size);
      rec.valid = rep.metrics;
      rec.valid_loss = rep.losses.total;
      const double score = selection_score(rep.metrics, model_.config().task);
      if (best_epoch_ < 0 || score > best_valid_) {
        best_valid_ = score;
        best_epoch_ = rec.epoch;
        best = model_.params().snapshot();
      }
    }
    if (on_epoch) on_epoch(rec);
  }
  if (!best.empty()) model_.params().restore(best);
}

// ---------------------------------------------------------------- checkpoint

namespace {

constexpr char kCkptMagic[8] = {'D', 'H', 'M', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw LoadError("truncated checkpoint while reading " + what);
  return v;
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is, const std::string& what) {
  auto n = get<std::uint32_t>(is, what);
  if (n > (1u << 28)) throw LoadError("implausible string length in checkpoint (" + what + ")");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw LoadError("truncated checkpoint while reading " + what);
  return s;
}

void round_to_float(Tensor& t) {
  for (double& v : t.data) v = static_cast<double>(static_cast<float>(v));
}

void put_blob(std::ostream& os, const std::string& name, const Tensor& t) {
  put_string(os, name);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  for (double v : t.data) put<float>(os, static_cast<float>(v));
}

}  // namespace

void save_checkpoint(const fs::path& path, DhmdModel& model, Adam* adam, const RunConfig& cfg, int epoch) {
  auto& params = model.params().all();
  std::size_t blobs = params.size();
  for (auto& p : params) round_to_float(p->value);
  if (adam) {
    for (auto& t : adam->first_moments()) round_to_float(t);
    for (auto& t : adam->second_moments()) round_to_float(t);
    blobs += 2 * params.size();
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kCkptMagic, sizeof(kCkptMagic));
  put<std::uint32_t>(os, kCkptVersion);
  put_string(os, cfg.to_json());
  put<std::uint32_t>(os, static_cast<std::uint32_t>(epoch));
  put<std::uint64_t>(os, adam ? static_cast<std::uint64_t>(adam->steps_taken()) : 0);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(blobs));
  for (auto& p : params) put_blob(os, "param/" + p->name, p->value);
  if (adam)
    for (std::size_t i = 0; i < params.size(); ++i) {
      put_blob(os, "adam.m/" + params[i]->name, adam->first_moments()[i]);
      put_blob(os, "adam.v/" + params[i]->name, adam->second_moments()[i]);
    }
  os.flush();
  if (!os) throw std::runtime_error("write failed for checkpoint " + path.string());
}

LoadedCheckpoint read_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kCkptMagic))
    throw LoadError(path.string() + " is not a checkpoint (bad magic)");
  const auto version = get<std::uint32_t>(is, "version");
  if (version != kCkptVersion) throw LoadError("unsupported checkpoint version " + std::to_string(version));
  LoadedCheckpoint ck;
  ck.config = RunConfig::from_json(get_string(is, "config"));
  ck.epoch = static_cast<int>(get<std::uint32_t>(is, "epoch"));
  ck.adam_steps = static_cast<long>(get<std::uint64_t>(is, "adam steps"));
  const auto n = get<std::uint32_t>(is, "blob count");
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = get_string(is, "blob name");
    const auto rank = get<std::uint32_t>(is, name + " rank");
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(get<std::uint32_t>(is, name + " shape"));
    Tensor t(shape);
    for (double& v : t.data) v = get<float>(is, name + " data");
    ck.blobs.emplace(std::move(name), std::move(t));
  }
  return ck;
}

void apply_checkpoint(const LoadedCheckpoint& ck, DhmdModel& model, Adam* adam) {
  auto& params = model.params().all();
  auto fetch = [&](const std::string& key, const Tensor& like) -> const Tensor& {
    auto it = ck.blobs.find(key);
    if (it == ck.blobs.end()) throw LoadError("checkpoint is missing " + key);
    if (it->second.shape != like.shape)
      throw LoadError("checkpoint blob " + key + " has shape " + shape_str(it->second.shape) + ", model expects " +
                      shape_str(like.shape));
    return it->second;
  };
  for (auto& p : params) p->value = fetch("param/" + p->name, p->value);
  if (adam) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      adam->first_moments()[i] = fetch("adam.m/" + params[i]->name, params[i]->value);
      adam->second_moments()[i] = fetch("adam.v/" + params[i]->name, params[i]->value);
    }
    adam->set_steps_taken(ck.adam_steps);
  }
}

// ---------------------------------------------------------------- run directory

std::string metrics_csv_header() {
  std::string h = "epoch";
  for (const auto& n : LossComponents::names()) h += ",train_" + n;
  h += ",valid_loss,valid_acc7,valid_acc2,valid_f1,valid_mae,valid_corr";
  return h;
}

std::string metrics_csv_row(const EpochRecord& r) {
  std::ostringstream os;
  os.precision(9);
  os << r.epoch;
  for (double v : r.train.values()) os << ',' << v;
  os << ',' << r.valid_loss << ',' << r.valid.acc7 << ',' << r.valid.acc2 << ',' << r.valid.f1 << ',' << r.valid.mae
     << ',' << r.valid.corr;
  return os.str();
}

std::string svg_line_plot(const std::string& title, const std::vector<std::string>& names,
                          const std::vector<std::vector<double>>& series) {
  const double W = 480, H = 300, L = 50, R = 110, T = 30, B = 35;
  double lo = 1e300, hi = -1e300;
  std::size_t n = 0;
  for (const auto& s : series) {
    n = std::max(n, s.size());
    for (double v : s)
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
  }
  if (lo > hi) lo = 0, hi = 1;
  if (hi - lo < 1e-12) hi = lo + 1;
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << L << "\" y=\"18\" font-size=\"13\" font-family=\"sans-serif\">" << title << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<text x=\"4\" y=\"" << T + 4 << "\" font-size=\"10\">" << hi << "</text>\n";
  os << "<text x=\"4\" y=\"" << H - B << "\" font-size=\"10\">" << lo << "</text>\n";
  auto px = [&](std::size_t i) { return L + (n > 1 ? (W - L - R) * static_cast<double>(i) / static_cast<double>(n - 1) : 0); };
  auto py = [&](double v) { return H - B - (H - T - B) * (v - lo) / (hi - lo); };
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* c = colors[k % 6];
    os << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < series[k].size(); ++i) os << px(i) << ',' << py(series[k][i]) << ' ';
    os << "\"/>\n";
    os << "<text x=\"" << W - R + 8 << "\" y=\"" << T + 14 * (k + 1) << "\" font-size=\"11\" fill=\"" << c << "\">"
       << (k < names.size() ? names[k] : "") << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

Dataset materialize_dataset(const RunConfig& cfg) {
  if (!cfg.dataset.empty()) return load_all(cfg.dataset);
  SyntheticTaskSpec spec = cfg.synth;
  if (cfg.synth_seed_follows_run) spec.seed = cfg.seed;
  spec.task = cfg.model.task;
  return generate_synthetic(spec).data;
}

ModelConfig model_config_for(const RunConfig& cfg, const Dataset& data) {
  ModelConfig mc = cfg.model;
  mc.input_dims = data.manifest.dims;
  mc.task = data.manifest.task;
  if (mc.max_len == 0) {
    for (Modality m : kModalities) mc.max_len = std::max(mc.max_len, data.max_steps(m));
    mc.max_len = std::max<std::size_t>(mc.max_len, 1);
  }
  return mc;
}

namespace {

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << s;
  os.flush();
  if (!os) throw std::runtime_error("write failed for " + p.string());
}

std::string report_json(const EvalReport& rep, int best_epoch) {
  json j;
  const auto& m = rep.metrics;
  j["best_epoch"] = best_epoch;
  j["test"] = {{"acc7", m.acc7 * 100}, {"acc2", m.acc2 * 100}, {"f1", m.f1 * 100},         {"precision", m.precision * 100},
               {"recall", m.recall * 100}, {"mae", m.mae},   {"corr", m.corr},          {"count", m.count}};
  json losses = json::object();
  const auto& names = LossComponents::names();
  auto vals = rep.losses.values();
  for (std::size_t i = 0; i < names.size(); ++i) losses[names[i]] = vals[i];
  j["test_losses"] = losses;
  return j.dump(2);
}

}  // namespace

void write_attention_exports(const DhmdModel& model, const std::vector<MultimodalSample>& samples, std::size_t count,
                             const fs::path& dir) {
  if (!model.crossmodal() || samples.empty() || count == 0) return;
  fs::create_directories(dir);
  const std::size_t n = std::min(count, samples.size());
  Batch b = collate(std::span<const MultimodalSample>(samples.data(), n));
  Graph g(false);
  auto r = model.forward(g, b);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < modality_pairs().size(); ++p) {
      const auto& pr = modality_pairs()[p];
      std::string pname = std::string(modality_name(pr.source)) + "_to_" + modality_name(pr.target);
      write_text(dir / (b.sample_ids[i] + "." + pname + ".json"),
                 attention_json(*r.reinforced, p, i, b.masks[pr.target], b.masks[pr.source]) + "\n");
    }
}

ActivationAccumulator collect_activations(const DhmdModel& model, const std::vector<MultimodalSample>& samples,
                                          std::size_t batch_size) {
  ActivationAccumulator acc;
  if (!model.dict_ho()) return acc;
  for_each_batch(samples, batch_size, [&](const Batch& b, std::size_t) {
    Graph g(false);
    auto r = model.forward(g, b);
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      acc.add(Space::Homogeneous, m, r.ho_match[m]->alpha.value(), b.class_ids);
      acc.add(Space::Heterogeneous, m, r.he_match[m]->alpha.value(), b.class_ids);
    }
  });
  return acc;
}

RunSummary run_training(const RunConfig& cfg_in) {
  RunConfig cfg = cfg_in;
  cfg.validate();
  if (cfg.out.empty()) throw ConfigError("an output directory is required");
  const fs::path out = fs::absolute(cfg.out);
  if (fs::exists(out) && !(fs::is_directory(out) && fs::is_empty(out)))
    throw ConfigError("output directory " + out.string() + " already exists and is not empty");

  Dataset data = materialize_dataset(cfg);
  ModelConfig mc = model_config_for(cfg, data);
  cfg.model = mc;
  cfg.synth.seed = cfg.synth_seed_follows_run ? cfg.seed : cfg.synth.seed;
  DhmdModel model(mc, cfg.seed);

  if (!data.train.empty()) {
    const std::size_t n = std::min<std::size_t>(data.train.size(), std::max<std::size_t>(cfg.batch_size, 2));
    auto dead = dead_parameter_groups(model, collate(std::span<const MultimodalSample>(data.train.data(), n)));
    for (const auto& d : dead) std::cerr << "warning: parameter group " << d << " received no gradient\n";
  }

  const fs::path stage = out.parent_path() / (out.filename().string() + ".partial");
  fs::remove_all(stage);
  fs::create_directories(stage);
  RunSummary summary;
  try {
    write_text(stage / "config.json", cfg.to_json() + "\n");
    Trainer trainer(model, cfg);
    std::ofstream csv(stage / "metrics.csv");
    csv << metrics_csv_header() << '\n';
    trainer.fit(data, [&](const EpochRecord& r) {
      csv << metrics_csv_row(r) << '\n';
      csv.flush();
      if (!csv) throw std::runtime_error("write failed for metrics.csv");
      write_text(stage / "edges.jsonl", trainer.edges().jsonl());
    });
    csv.close();
    write_text(stage / "edges.jsonl", trainer.edges().jsonl());
    save_checkpoint(stage / "checkpoint.bin", model, &trainer.optimizer(), cfg, trainer.epoch());

    const auto& test = data.test.empty() ? data.valid : data.test;
    if (!test.empty()) {
      summary.test = evaluate(model, test, cfg.eval_batch_size);
      write_text(stage / "activations.jsonl", collect_activations(model, test, cfg.eval_batch_size).jsonl());
      write_attention_exports(model, test, cfg.attention_samples, stage / "attention");
    }
    summary.best_epoch = trainer.best_epoch();
    write_text(stage / "report.json", report_json(summary.test, summary.best_epoch) + "\n");

    const auto& h = trainer.history();
    std::vector<double> total, task, vacc;
    for (const auto& r : h) {
      total.push_back(r.train.total);
      task.push_back(r.train.task);
      vacc.push_back(mc.task == TaskType::Binary ? r.valid.acc2 : r.valid.acc7);
    }
    write_text(stage / "loss.svg", svg_line_plot("training loss", {"total", "task"}, {total, task}));
    write_text(stage / "valid_accuracy.svg", svg_line_plot("validation accuracy", {"valid"}, {vacc}));
    for (const std::string unit : {"HoGD", "HeGD"}) {
      std::array<std::vector<double>, kNumModalities> mass;
      for (const auto& e : trainer.edges().history())
        if (e.unit == unit) {
          auto o = outgoing_mass(e.W);
          for (std::size_t m = 0; m < kNumModalities; ++m) mass[m].push_back(o[m]);
        }
      if (!mass[0].empty())
        write_text(stage / ("edges_" + unit + ".svg"),
                   svg_line_plot(unit + " outgoing edge mass", {"L", "V", "A"}, {mass[0], mass[1], mass[2]}));
    }
  } catch (...) {
    std::error_code ec;
    fs::remove_all(stage, ec);
    throw;
  }
  if (fs::exists(out)) fs::remove(out);
  fs::rename(stage, out);
  summary.dir = out;
  return summary;
}

}  // namespace dhmd
