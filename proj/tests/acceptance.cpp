#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "support.hpp"

using namespace dhmd;
using namespace dhmd::test;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;
using Rows = std::vector<std::vector<double>>;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = true;
  std::string detail;
};

int failures = 0;

void report(const std::string& name, const Verdict& v, double secs) {
  std::printf("%s  %-22s %s (%.1fs)\n", v.pass ? "PASS" : "FAIL", name.c_str(), v.detail.c_str(), secs);
  std::fflush(stdout);
  if (!v.pass) ++failures;
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("dhmd_acceptance_" + name);
  fs::remove_all(p);
  return p;
}

// ---------------------------------------------------------------- loop oracles

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// rows x W^T + b for W [out x in]
Rows affine(const Rows& x, const Tensor& W, const Tensor* b) {
  const std::size_t out = W.dim(0), in = W.dim(1);
  Rows y(x.size(), std::vector<double>(out, 0.0));
  for (std::size_t r = 0; r < x.size(); ++r)
    for (std::size_t o = 0; o < out; ++o) {
      double s = b ? b->data[o] : 0.0;
      for (std::size_t i = 0; i < in; ++i) s += W.data[o * in + i] * x[r][i];
      y[r][o] = s;
    }
  return y;
}

Rows layer_norm_ref(const Rows& x, const Tensor& g, const Tensor& b) {
  Rows y = x;
  for (auto& row : y) {
    double mu = 0, var = 0;
    for (double v : row) mu += v / static_cast<double>(row.size());
    for (double v : row) var += (v - mu) * (v - mu) / static_cast<double>(row.size());
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = g.data[c] * (row[c] - mu) / std::sqrt(var + 1e-5) + b.data[c];
  }
  return y;
}

Rows add_rows(const Rows& a, const Rows& b) {
  Rows y = a;
  for (std::size_t r = 0; r < a.size(); ++r)
    for (std::size_t c = 0; c < a[r].size(); ++c) y[r][c] += b[r][c];
  return y;
}

Rows sample_rows(const Tensor& x, std::size_t b) {
  Rows r(x.dim(1), std::vector<double>(x.dim(2)));
  for (std::size_t t = 0; t < x.dim(1); ++t)
    for (std::size_t c = 0; c < x.dim(2); ++c) r[t][c] = x.at(b, t, c);
  return r;
}

// Multi-head softmax(Q K^T / sqrt(d_h)) V restricted to valid keys.
Rows attention_ref(const Rows& Q, const Rows& K, const Rows& V, std::size_t heads, const std::vector<bool>& valid) {
  const std::size_t D = Q[0].size(), dh = D / heads;
  Rows out(Q.size(), std::vector<double>(D, 0.0));
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t t = 0; t < Q.size(); ++t) {
      std::vector<double> s(K.size(), 0.0);
      double mx = -1e300, z = 0;
      for (std::size_t j = 0; j < K.size(); ++j) {
        if (!valid[j]) continue;
        double d = 0;
        for (std::size_t c = 0; c < dh; ++c) d += Q[t][h * dh + c] * K[j][h * dh + c];
        s[j] = d / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      for (std::size_t j = 0; j < K.size(); ++j)
        if (valid[j]) z += std::exp(s[j] - mx);
      for (std::size_t j = 0; j < K.size(); ++j)
        if (valid[j])
          for (std::size_t c = 0; c < dh; ++c) out[t][h * dh + c] += std::exp(s[j] - mx) / z * V[j][h * dh + c];
    }
  return out;
}

std::vector<double> masked_mean_ref(const Tensor& x, std::size_t b, const Mask& m) {
  std::vector<double> out(x.dim(2), 0.0);
  const double n = static_cast<double>(m.count(b));
  for (std::size_t t = 0; t < x.dim(1); ++t)
    if (m(b, t))
      for (std::size_t c = 0; c < x.dim(2); ++c) out[c] += x.at(b, t, c) / n;
  return out;
}

double cosine_ref(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt((aa + 1e-12) * (bb + 1e-12));
}

// Exhaustive triplet enumeration over per-(modality, sample) vectors.
double triplet_ref(const std::array<Rows, 3>& v, const std::vector<int>& cls, double margin) {
  double sum = 0;
  std::size_t n = 0;
  const std::size_t B = cls.size();
  for (std::size_t mi = 0; mi < 3; ++mi)
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t mj = 0; mj < 3; ++mj)
        for (std::size_t j = 0; j < B; ++j) {
          if (mj == mi || cls[j] != cls[i]) continue;
          for (std::size_t k = 0; k < B; ++k) {
            if (cls[k] == cls[i]) continue;
            sum += std::max(0.0, margin - cosine_ref(v[mi][i], v[mj][j]) + cosine_ref(v[mi][i], v[mi][k]));
            ++n;
          }
        }
  return n ? sum / static_cast<double>(n) : 0.0;
}

Rows pooled_rows(const Tensor& x, const Mask& m) {
  Rows r;
  for (std::size_t b = 0; b < x.dim(0); ++b) r.push_back(masked_mean_ref(x, b, m));
  return r;
}

// ---------------------------------------------------------------- criteria

struct ErrorTracker {
  double worst = 0;
  std::string where;
  void add(double a, double b, const std::string& w) {
    const double e = std::fabs(a - b);
    if (!(e <= worst)) {
      worst = e;
      where = w;
    }
  }
};

Verdict oracle_equivalence() {
  ErrorTracker err;
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t B = 4, C = 5;
    std::mt19937_64 mrng(100 + trial);
    ModalityMasks masks{ragged_mask(B, 5, mrng), ragged_mask(B, 4, mrng), ragged_mask(B, 5, mrng)};
    std::vector<int> cls{0, 1, 1, 0};

    // convolution and decoupler features
    ParameterStore store;
    DecouplerConfig dc;
    dc.input_dims = {4, 3, 5};
    dc.kernels = {3, 5, 1};
    dc.channels = C;
    Decoupler dec(store, dc, rng);
    for (std::size_t m = 0; m < 3; ++m)
      for (auto& v : dec.conv_bias(static_cast<Modality>(m)).value.data) v = std::normal_distribution<double>(0, 0.5)(rng);
    std::array<Tensor, 3> x{random_tensor({B, 5, 4}, rng), random_tensor({B, 4, 3}, rng), random_tensor({B, 5, 5}, rng)};
    Graph g(false);
    auto shallow = dec.embed_shallow(g, x, masks);
    for (std::size_t m = 0; m < 3; ++m) {
      const Tensor& W = dec.conv_weight(static_cast<Modality>(m)).value;
      const Tensor& bias = dec.conv_bias(static_cast<Modality>(m)).value;
      const std::size_t T = x[m].dim(1), Cin = x[m].dim(2), k = dc.kernels[m];
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t o = 0; o < C; ++o) {
            double s = 0;
            if (masks[m](b, t)) {
              s = bias.data[o];
              for (std::size_t j = 0; j < k; ++j) {
                const long src = static_cast<long>(t + j) - static_cast<long>(k / 2);
                if (src < 0 || src >= static_cast<long>(T) || !masks[m](b, static_cast<std::size_t>(src))) continue;
                for (std::size_t c = 0; c < Cin; ++c)
                  s += W.data[(o * k + j) * Cin + c] * x[m].at(b, static_cast<std::size_t>(src), c);
              }
            }
            err.add(shallow[m].value().at(b, t, o), s, "conv");
          }
    }
    auto df = dec.decouple(g, shallow, masks);

    // margin loss over pooled homogeneous features
    std::array<Rows, 3> com;
    for (std::size_t m = 0; m < 3; ++m) com[m] = pooled_rows(df.homogeneous[m].value(), masks[m]);
    err.add(loss_margin(df, masks, cls, 0.1).loss.item(), triplet_ref(com, cls, 0.1), "margin triplets");

    // cross-modal attention layer
    CrossModalConfig cc;
    cc.input_dim = C;
    cc.d_model = 4;
    cc.heads = 2;
    cc.layers = 1;
    cc.ffn_dim = 5;
    cc.max_len = 5;
    CrossModalTransformer ca(store, cc, rng);
    for (const auto& p : store.all())
      if (p->name.rfind("crossmodal.", 0) == 0 && p->name.find("bias") != std::string::npos)
        for (auto& v : p->value.data) v = std::normal_distribution<double>(0, 0.3)(rng);
    auto rf = ca.reinforce_all(g, df.heterogeneous, masks);
    for (const auto& pr : modality_pairs()) {
      const auto& L = ca.layer(pr.source, pr.target, 0);
      for (std::size_t b = 0; b < B; ++b) {
        auto embed = [&](std::size_t m) {
          Rows e = affine(sample_rows(df.heterogeneous[m].value(), b), ca.projection_weight(m).value,
                          &ca.projection_bias(m).value);
          for (std::size_t t = 0; t < e.size(); ++t)
            for (std::size_t c = 0; c < cc.d_model; ++c) e[t][c] += ca.positional(m).value.at(t, c);
          return e;
        };
        Rows tgt = embed(pr.target), src = embed(pr.source);
        Rows qn = layer_norm_ref(tgt, L.ln_q_g->value, L.ln_q_b->value);
        Rows kvn = layer_norm_ref(src, L.ln_kv_g->value, L.ln_kv_b->value);
        std::vector<bool> valid;
        for (std::size_t s = 0; s < src.size(); ++s) valid.push_back(masks[pr.source](b, s));
        Rows att = attention_ref(affine(qn, L.q_w->value, &L.q_b->value), affine(kvn, L.k_w->value, &L.k_b->value),
                                 affine(kvn, L.v_w->value, &L.v_b->value), cc.heads, valid);
        Rows h = add_rows(tgt, affine(att, L.o_w->value, &L.o_b->value));
        Rows ff = affine(layer_norm_ref(h, L.ln_ff_g->value, L.ln_ff_b->value), L.ff1_w->value, &L.ff1_b->value);
        for (auto& row : ff)
          for (auto& v : row) v = gelu_ref(v);
        h = add_rows(h, affine(ff, L.ff2_w->value, &L.ff2_b->value));
        const Tensor& got = rf.of(pr.source, pr.target).value();
        for (std::size_t t = 0; t < h.size(); ++t)
          for (std::size_t c = 0; c < cc.d_model; ++c)
            err.add(got.at(b, t, c), masks[pr.target](b, t) ? h[t][c] : 0.0, "cross attention " + pair_name(pr.source, pr.target));
      }
    }

    // dictionary matching and the contrastive loss on reconstructions
    Dictionary dict(store, Space::Heterogeneous, 5, 2 * cc.d_model, rng);
    const Tensor& D = dict.elements_param().value;
    std::array<Rows, 3> zs;
    ModalityVars zv;
    for (std::size_t m = 0; m < 3; ++m) {
      auto mt = dict.match(g, rf.reinforced[m], masks[m]);
      zv[m] = mt.z;
      const Tensor& feat = rf.reinforced[m].value();
      for (std::size_t b = 0; b < B; ++b) {
        std::vector<double> a(5, -1e300);
        for (std::size_t t = 0; t < feat.dim(1); ++t) {
          if (!masks[m](b, t)) continue;
          for (std::size_t k = 0; k < 5; ++k) {
            double s = 0;
            for (std::size_t c = 0; c < D.dim(1); ++c) s += feat.at(b, t, c) * D.at(k, c);
            err.add(mt.A.value().at(b, t, k), s, "dictionary scores");
            a[k] = std::max(a[k], s);
          }
        }
        double z = 0;
        for (double v : a) z += std::exp(v);
        std::vector<double> rec(D.dim(1), 0.0);
        for (std::size_t k = 0; k < 5; ++k) {
          err.add(mt.a.value().at(b, k), a[k], "dictionary max-pool");
          err.add(mt.alpha.value().at(b, k), std::exp(a[k]) / z, "dictionary softmax");
          for (std::size_t c = 0; c < D.dim(1); ++c) rec[c] += std::exp(a[k]) / z * D.at(k, c);
        }
        for (std::size_t c = 0; c < D.dim(1); ++c) err.add(mt.z.value().at(b, c), rec[c], "dictionary reconstruction");
        zs[m].push_back(rec);
      }
    }
    err.add(contrastive_loss(zv, cls, 0.1).loss.item(), triplet_ref(zs, cls, 0.1), "contrastive triplets");

    // graph distillation: pairwise form, per-target form, loop oracle
    GDUnitConfig gc;
    gc.feature_dim = C;
    gc.num_outputs = 2;
    GDUnit unit(store, "acc_gd_" + std::to_string(trial), gc, rng);
    for (auto& v : unit.g_weight().value.data) v *= 3.0;
    auto graph = unit.run(g, df.homogeneous, masks);
    const double pairwise = graph.loss.item();
    err.add(pairwise, distillation_loss_by_target(graph.W.value(), graph.E.value()), "distillation per-target form");
    double direct = 0;
    for (std::size_t b = 0; b < B; ++b) {
      std::array<std::vector<double>, 3> logit;
      for (std::size_t m = 0; m < 3; ++m)
        logit[m] = affine({com[m][b]}, unit.f_weight().value, &unit.f_bias().value)[0];
      for (std::size_t j = 0; j < 3; ++j) {
        std::array<double, 3> raw{};
        double mx = -1e300, z = 0;
        for (std::size_t i = 0; i < 3; ++i) {
          if (i == j) continue;
          std::vector<double> desc;
          for (std::size_t m : {i, j}) {
            desc.insert(desc.end(), logit[m].begin(), logit[m].end());
            desc.insert(desc.end(), com[m][b].begin(), com[m][b].end());
          }
          raw[i] = affine({desc}, unit.g_weight().value, &unit.g_bias().value)[0][0];
          mx = std::max(mx, raw[i]);
        }
        for (std::size_t i = 0; i < 3; ++i)
          if (i != j) z += std::exp(raw[i] - mx);
        for (std::size_t i = 0; i < 3; ++i) {
          if (i == j) continue;
          double e = 0;
          for (std::size_t o = 0; o < 2; ++o) e += std::fabs(logit[i][o] - logit[j][o]) / 2.0;
          const double w = std::exp(raw[i] - mx) / z;
          err.add(graph.W.value().at(b, i, j), w, "edge weights");
          err.add(graph.E.value().at(b, i, j), e, "discrepancies");
          direct += w * e / static_cast<double>(B);
        }
      }
    }
    err.add(pairwise, direct, "distillation loss");
  }
  Verdict v;
  v.pass = err.worst <= 1e-6;
  v.detail = "max abs error " + fmt("%.2e", err.worst) + " at " + err.where;
  return v;
}

// Teachers in the distillation loss are stop-gradient, so finite differences
// hold them at the values of the unperturbed forward pass.
Var frozen_distillation(Graph& g, const GDUnit& unit, const ModalityVars& features, const ModalityMasks& masks,
                        const std::array<Tensor, 3>& teachers) {
  auto pooled = pool_all(features, masks);
  auto logits = unit.modality_logits(g, pooled);
  Var W = unit.edge_weights(g, pooled, logits);
  std::vector<Var> e(9);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      if (i != j) e[i * 3 + j] = ag::mean_last(ag::abs(ag::sub(g.constant(teachers[i]), logits[j])));
  return distillation_loss(W, ag::pair_matrix(e, 3));
}

Verdict gradient_suite() {
  const std::vector<std::string> components{"task", "rec", "cyc", "mar", "ort", "dec", "dtl_ho",
                                            "dtl_he", "ctr_ho", "ctr_he", "dic", "total"};
  auto mc = small_model();
  mc.lambda1 = 0.3;
  mc.lambda2 = 0.7;
  mc.lambda3 = 0.5;
  mc.margin = 0.9;
  DhmdModel model(mc, 77);
  Batch batch = collate(toy_samples(6, {5, 4, 3}, 78));
  auto& store = model.params();

  std::array<Tensor, 3> teach_ho, teach_he;
  {
    Graph g(false);
    auto r = model.forward(g, batch);
    for (std::size_t m = 0; m < 3; ++m) {
      teach_ho[m] = r.hogd->logits[m].value();
      teach_he[m] = r.hegd->logits[m].value();
    }
  }

  auto component = [&](Graph& g, const std::string& name, bool numeric) -> Var {
    auto r = model.forward(g, batch);
    const auto& masks = batch.masks;
    auto dtl_ho = [&] { return numeric ? frozen_distillation(g, *model.hogd(), r.homo, masks, teach_ho) : r.hogd->loss; };
    auto dtl_he = [&] { return numeric ? frozen_distillation(g, *model.hegd(), r.hetero, masks, teach_he) : r.hegd->loss; };
    auto ctr = [&](bool ho) {
      ModalityVars z;
      for (std::size_t m = 0; m < 3; ++m) z[m] = ho ? r.ho_match[m]->z : r.he_match[m]->z;
      return contrastive_loss(z, batch.class_ids, mc.margin).loss;
    };
    if (name == "task") return r.task;
    if (name == "rec") return loss_rec(*r.decoupled, masks);
    if (name == "cyc") return loss_cyc(*r.decoupled, masks);
    if (name == "mar") return loss_margin(*r.decoupled, masks, batch.class_ids, mc.margin).loss;
    if (name == "ort") return loss_ort(*r.decoupled, masks);
    if (name == "dec") return r.dec;
    if (name == "dtl_ho") return dtl_ho();
    if (name == "dtl_he") return dtl_he();
    if (name == "ctr_ho") return ctr(true);
    if (name == "ctr_he") return ctr(false);
    if (name == "dic") return r.dic;
    Var dtl = ag::add(dtl_ho(), dtl_he());
    return ag::weighted_sum({r.task, r.dec, dtl, r.dic}, {1.0, mc.lambda1, mc.lambda2, mc.lambda3});
  };

  std::mt19937_64 rng(5);
  std::size_t checked = 0, failed = 0;
  double worst = 0;
  std::string worst_where;
  for (const auto& name : components) {
    store.zero_grad();
    {
      Graph g;
      Var l = component(g, name, false);
      g.backward(l);
      g.accumulate_param_grads();
    }
    std::vector<std::pair<Parameter*, std::size_t>> coords;
    for (const auto& p : store.all())
      for (std::size_t k = 0; k < p->grad.size(); ++k)
        if (p->grad.data[k] != 0.0) coords.emplace_back(p.get(), k);
    if (coords.empty()) {
      ++failed;
      worst_where = name + ": no parameter receives gradient";
      continue;
    }
    std::uniform_int_distribution<std::size_t> pick(0, coords.size() - 1);
    for (int c = 0; c < 20; ++c) {
      auto [p, k] = coords[pick(rng)];
      const double orig = p->value.data[k], h = 1e-4;
      auto eval = [&](double v) {
        p->value.data[k] = v;
        Graph g(false);
        return component(g, name, true).item();
      };
      const double numeric = (eval(orig + h) - eval(orig - h)) / (2 * h);
      p->value.data[k] = orig;
      const double analytic = p->grad.data[k];
      const double scale = std::max(std::fabs(analytic), std::fabs(numeric));
      const double rel = std::fabs(analytic - numeric) / (scale + 1e-12);
      ++checked;
      if (std::fabs(analytic - numeric) > 1e-3 * scale + 1e-8) ++failed;
      if (rel > worst) {
        worst = rel;
        worst_where = name + " " + p->name + "[" + std::to_string(k) + "]";
      }
    }
  }
  store.zero_grad();
  Verdict v;
  v.pass = failed == 0;
  v.detail = std::to_string(components.size()) + " components, " + std::to_string(checked) + " coordinates, " +
             std::to_string(failed) + " failed, worst rel " + fmt("%.1e", worst) + " (" + worst_where + ")";
  return v;
}

Verdict invariant_suite() {
  std::mt19937_64 rng(31337);
  std::size_t failed = 0;
  std::string first;
  auto fail = [&](int c, const std::string& what) {
    if (failed++ == 0) first = "case " + std::to_string(c) + ": " + what;
  };
  for (int c = 0; c < 200; ++c) {
    auto mc = small_model();
    mc.heads = 1 + c % 2;
    mc.dict_elements = 1 + c % 6;
    mc.channels = 4 + c % 3;
    const std::size_t B = 2 + c % 5;
    auto samples = toy_samples(B, {5, 4, 3}, 1000 + c, 3 + c % 5);
    DhmdModel model(mc, 2000 + c);
    Batch batch = collate(samples);
    Batch noisy = batch;
    std::normal_distribution<double> big(0.0, 50.0);
    for (std::size_t m = 0; m < 3; ++m)
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < noisy.masks[m].steps; ++t)
          if (!noisy.masks[m](b, t))
            for (std::size_t k = 0; k < noisy.data[m].dim(2); ++k) noisy.data[m].at(b, t, k) = big(rng);

    Graph g(false), g2(false);
    auto r = model.forward(g, batch);
    auto r2 = model.forward(g2, noisy);

    for (const auto* unit : {&*r.hogd, &*r.hegd}) {
      const Tensor& W = unit->W.value();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < 3; ++j) {
          double s = 0;
          for (std::size_t i = 0; i < 3; ++i) {
            if (W.at(b, i, j) < 0) fail(c, "negative edge weight");
            s += W.at(b, i, j);
          }
          if (std::fabs(s - 1.0) > 1e-9 || W.at(b, j, j) != 0.0) fail(c, "W column not stochastic");
        }
    }
    for (std::size_t m = 0; m < 3; ++m)
      for (const auto* mt : {&*r.ho_match[m], &*r.he_match[m]}) {
        const Tensor& a = mt->alpha.value();
        const Tensor& D = (mt == &*r.ho_match[m] ? model.dict_ho() : model.dict_he())->elements_param().value;
        for (std::size_t b = 0; b < B; ++b) {
          double s = 0;
          for (std::size_t k = 0; k < a.dim(1); ++k) {
            if (a.at(b, k) < 0) fail(c, "negative alpha");
            s += a.at(b, k);
          }
          if (std::fabs(s - 1.0) > 1e-6) fail(c, "alpha not on the simplex");
          for (std::size_t ch = 0; ch < D.dim(1); ++ch) {
            double lo = 1e300, hi = -1e300;
            for (std::size_t k = 0; k < D.dim(0); ++k) {
              lo = std::min(lo, D.at(k, ch));
              hi = std::max(hi, D.at(k, ch));
            }
            const double z = mt->z.value().at(b, ch);
            if (z < lo - 1e-12 || z > hi + 1e-12) fail(c, "z outside the dictionary hull");
          }
        }
      }
    for (const auto& pr : modality_pairs()) {
      const Tensor& A = r.reinforced->attention[pair_index(pr.source, pr.target)];
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < A.dim(1); ++t) {
          if (!batch.masks[pr.target](b, t)) continue;
          double s = 0;
          for (std::size_t k = 0; k < A.dim(2); ++k) {
            if (!batch.masks[pr.source](b, k) && A.at(b, t, k) != 0.0) fail(c, "attention on a padded key");
            s += A.at(b, t, k);
          }
          if (std::fabs(s - 1.0) > 1e-9) fail(c, "attention row not stochastic");
        }
    }
    // padding: temporal conv + mean pooling, dictionary max-pool, attention key masks
    auto same = [](const Tensor& a, const Tensor& b) { return a.data == b.data; };
    for (std::size_t m = 0; m < 3; ++m) {
      if (!same(pool_all(r.shallow, batch.masks)[m].value(), pool_all(r2.shallow, batch.masks)[m].value()))
        fail(c, "padding changed pooled conv features");
      if (!same(r.ho_match[m]->z.value(), r2.ho_match[m]->z.value()) ||
          !same(r.he_match[m]->alpha.value(), r2.he_match[m]->alpha.value()))
        fail(c, "padding changed dictionary matching");
    }
    for (std::size_t p = 0; p < 6; ++p)
      if (!same(r.reinforced->pair[p].value(), r2.reinforced->pair[p].value()))
        fail(c, "padding changed cross attention");
    if (!same(r.prediction.value(), r2.prediction.value()) || r.losses.total != r2.losses.total)
      fail(c, "padding changed the prediction or loss");
  }
  Verdict v;
  v.pass = failed == 0;
  v.detail = "200 cases, " + std::to_string(failed) + " violations" + (failed ? " (" + first + ")" : "");
  return v;
}

// ---------------------------------------------------------------- training based criteria

struct RunResult {
  double acc7 = 0;
  std::array<double, 3> probe{};
  double probe_std = 0;
  std::array<double, 3> ho_out{};
};

RunConfig synthetic_run(const std::string& ablation, std::uint64_t seed, double noise) {
  RunConfig rc;
  const std::vector<std::pair<std::string, std::string>> kv{
      {"ablation", ablation}, {"epochs", "8"}, {"synth.noise", fmt("%g", noise)}, {"synth.cue_sparsity", "0.15"},
      {"synth.strengths", "0.9,0.4,0.2"}, {"synth.samples_per_class", "1000"}, {"synth.num_classes", "7"},
      {"channels", "16"}, {"d_model", "16"}, {"heads", "2"}, {"ca_layers", "1"}, {"ffn_dim", "32"},
      {"dict_elements", "64"}, {"lr", "0.003"}};
  for (const auto& [k, v] : kv) rc.set(k, v);
  rc.seed = seed;
  rc.model.unimodal_weight = rc.model.switches.gd ? 1.0 : 0.0;
  return rc;
}

RunResult train_and_measure(RunConfig rc, bool with_probe) {
  rc.out = scratch(rc.model.switches.str() + "_" + std::to_string(rc.seed)).string();
  auto summary = run_training(rc);
  RunResult res;
  res.acc7 = 100.0 * summary.test.metrics.acc7;
  std::ifstream ef(fs::path(rc.out) / "edges.jsonl");
  std::stringstream ss;
  ss << ef.rdbuf();
  std::optional<Tensor> last;
  for (const auto& e : EdgeLogger::parse_jsonl(ss.str()))
    if (e.unit == "HoGD") last = e.W;
  if (last) res.ho_out = outgoing_mass(*last);
  if (with_probe) {
    auto ckpt = read_checkpoint(fs::path(rc.out) / "checkpoint.bin");
    Dataset data = materialize_dataset(ckpt.config);
    DhmdModel model(model_config_for(ckpt.config, data), ckpt.config.seed);
    apply_checkpoint(ckpt, model, nullptr);
    LinearProbe probe;
    probe.iterations = ckpt.config.probe_iterations;
    probe.l2 = ckpt.config.probe_l2;
    auto acc = probe_accuracies(model, data, ckpt.config.eval_batch_size, probe);
    for (std::size_t m = 0; m < 3; ++m) res.probe[m] = 100.0 * acc[m];
    res.probe_std = population_std(res.probe);
  }
  fs::remove_all(rc.out);
  return res;
}

constexpr int kSeeds = 5;
constexpr double kAblationNoise = 0.6;
constexpr double kLiftNoise = 0.2;

std::map<std::string, std::vector<RunResult>> ablation_runs;

Verdict ablation_ordering(double& secs) {
  const auto t0 = Clock::now();
  const std::vector<std::string> configs{"none", "FD", "FD,CA", "FD,CA,GD", "FD,CA,GD,DM"};
  std::map<std::string, double> mean;
  for (const auto& c : configs) {
    for (int s = 1; s <= kSeeds; ++s) {
      auto r = train_and_measure(synthetic_run(c, static_cast<std::uint64_t>(s), kAblationNoise), false);
      ablation_runs[c].push_back(r);
      mean[c] += r.acc7 / kSeeds;
      std::printf("      ablation %-12s seed %d  acc7 %.1f\n", c.c_str(), s, r.acc7);
      std::fflush(stdout);
    }
  }
  secs = seconds_since(t0);
  Verdict v;
  std::ostringstream os;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    os << (i ? " <= " : "") << configs[i] << " " << fmt("%.1f", mean[configs[i]]);
    if (i > 0 && mean[configs[i]] < mean[configs[i - 1]] - 0.5) v.pass = false;
  }
  const double gap = mean["FD,CA,GD,DM"] - mean["none"];
  if (gap < 3.0) v.pass = false;
  if (secs > 30 * 60) v.pass = false;
  v.detail = "acc7 means: " + os.str() + "; gap " + fmt("%.1f", gap);
  return v;
}

Verdict edge_dominance() {
  std::array<double, 3> mass{};
  for (const auto& r : ablation_runs["FD,CA,GD,DM"])
    for (std::size_t m = 0; m < 3; ++m) mass[m] += r.ho_out[m] / kSeeds;
  Verdict v;
  v.pass = mass[0] >= 1.5 * mass[1] && mass[0] >= 1.5 * mass[2];
  v.detail = "HoGD outgoing mass L " + fmt("%.3f", mass[0]) + ", V " + fmt("%.3f", mass[1]) + ", A " +
             fmt("%.3f", mass[2]) + " (needs L >= 1.5x each)";
  return v;
}

Verdict unimodal_lift() {
  std::array<double, 3> base{}, fd{};
  double base_std = 0, fd_std = 0;
  for (int s = 1; s <= kSeeds; ++s) {
    auto a = train_and_measure(synthetic_run("none", static_cast<std::uint64_t>(s), kLiftNoise), true);
    auto b = train_and_measure(synthetic_run("FD,GD", static_cast<std::uint64_t>(s), kLiftNoise), true);
    for (std::size_t m = 0; m < 3; ++m) {
      base[m] += a.probe[m] / kSeeds;
      fd[m] += b.probe[m] / kSeeds;
    }
    base_std += a.probe_std / kSeeds;
    fd_std += b.probe_std / kSeeds;
    std::printf("      probe seed %d  none [%.1f %.1f %.1f] std %.1f   FD,GD [%.1f %.1f %.1f] std %.1f\n", s,
                a.probe[0], a.probe[1], a.probe[2], a.probe_std, b.probe[0], b.probe[1], b.probe[2], b.probe_std);
    std::fflush(stdout);
  }
  Verdict v;
  const double lift = fd[2] - base[2];
  v.pass = lift >= 2.0 && fd_std < base_std;
  v.detail = "weakest (A) probe " + fmt("%.1f", base[2]) + " -> " + fmt("%.1f", fd[2]) + " (" + fmt("%+.1f", lift) +
             "), probe std " + fmt("%.1f", base_std) + " -> " + fmt("%.1f", fd_std);
  return v;
}

Verdict round_trips() {
  Verdict v;
  SyntheticTaskSpec spec;
  spec.samples_per_class = 20;
  spec.seed = 4;
  auto ds = generate_synthetic(spec).data;
  auto a = scratch("jsonl"), b = scratch("packed");
  write_dataset(a, ds, DatasetFormat::JsonLines);
  write_dataset(b, ds, DatasetFormat::Packed);
  Dataset x = load_all(a), y = load_all(b);
  std::size_t compared = 0;
  for (Split s : {Split::Train, Split::Valid, Split::Test}) {
    if (x.split(s).size() != ds.split(s).size() || y.split(s).size() != ds.split(s).size()) v.pass = false;
    for (std::size_t i = 0; v.pass && i < x.split(s).size(); ++i, ++compared)
      if (!(x.split(s)[i] == y.split(s)[i]) || !(x.split(s)[i] == ds.split(s)[i])) v.pass = false;
  }
  fs::remove_all(a);
  fs::remove_all(b);

  RunConfig rc;
  rc.model = small_model();
  rc.batch_size = 4;
  rc.learning_rate = 0.01;
  DhmdModel model(rc.model, 8);
  Trainer trainer(model, rc);
  std::vector<Batch> batches;
  for (int i = 0; i < 4; ++i) batches.push_back(collate(toy_samples(4, {5, 4, 3}, 40 + i)));
  for (int i = 0; i < 3; ++i) trainer.step(batches[i]);
  auto path = scratch("resume.ckpt");
  save_checkpoint(path, model, &trainer.optimizer(), rc, 0);
  const double expected = trainer.step(batches[3]).total;
  auto ckpt = read_checkpoint(path);
  ckpt.config.model.input_dims = rc.model.input_dims;
  DhmdModel resumed(ckpt.config.model, 1234);
  Trainer t2(resumed, ckpt.config);
  apply_checkpoint(ckpt, resumed, &t2.optimizer());
  const double got = t2.step(batches[3]).total;
  fs::remove(path);
  if (got != expected) v.pass = false;
  v.detail = std::to_string(compared) + " samples identical across formats; resumed next-step loss " +
             fmt("%.12g", got) + " vs " + fmt("%.12g", expected);
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> only(argv + 1, argv + argc);
  auto timed = [&](const std::string& name, double limit, const std::function<Verdict()>& fn) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) return;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    if (limit > 0 && secs > limit) {
      v.pass = false;
      v.detail += "; over the time limit";
    }
    report(name, v, secs);
  };
  timed("oracle-equivalence", 60, oracle_equivalence);
  timed("gradient-suite", 300, gradient_suite);
  timed("invariant-suite", 120, invariant_suite);
  double ablation_secs = 0;
  timed("ablation-ordering", 30 * 60, [&] { return ablation_ordering(ablation_secs); });
  timed("edge-dominance", 0, edge_dominance);
  timed("unimodal-lift", 0, unimodal_lift);
  timed("format-round-trips", 0, round_trips);
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
