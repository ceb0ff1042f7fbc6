#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "dhmd/training.hpp"

namespace fs = std::filesystem;
using namespace dhmd;
using nlohmann::json;

namespace {

struct CommonOptions {
  std::string config_file;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string ablation;
  std::string strengths;
  std::string dataset;
  std::optional<int> epochs;
};

void add_common(CLI::App* app, CommonOptions& o, bool with_training) {
  app->add_option("--config", o.config_file, "flat key = value config file")->check(CLI::ExistingFile);
  app->add_option("--set", o.overrides, "override a config key, KEY=VALUE (repeatable)");
  app->add_option("--seed", o.seed, "run seed");
  app->add_option("--out", o.out, "output path");
  app->add_option("--ablation", o.ablation, "enabled components, e.g. FD,CA,GD,DM or none");
  app->add_option("--synth-strengths", o.strengths, "synthetic signal strengths L,V,A");
  app->add_option("--dataset", o.dataset, "dataset directory (default: synthetic task)");
  if (with_training) app->add_option("--epochs", o.epochs, "training epochs");
}

RunConfig build_config(const CommonOptions& o, RunConfig cfg = {}) {
  if (!o.config_file.empty()) cfg.load_file(o.config_file);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) cfg.seed = *o.seed;
  if (!o.out.empty()) cfg.out = o.out;
  if (!o.ablation.empty()) cfg.set("ablation", o.ablation);
  if (!o.strengths.empty()) cfg.set("synth.strengths", o.strengths);
  if (!o.dataset.empty()) cfg.dataset = o.dataset;
  if (o.epochs) cfg.epochs = *o.epochs;
  return cfg;
}

struct Restored {
  RunConfig cfg;
  Dataset data;
  std::unique_ptr<DhmdModel> model;
};

fs::path checkpoint_path(const std::string& checkpoint, const std::string& run) {
  if (!checkpoint.empty()) return checkpoint;
  if (!run.empty()) return fs::path(run) / "checkpoint.bin";
  throw ConfigError("either --checkpoint or --run is required");
}

Restored restore(const fs::path& ckpt_path, const std::string& dataset_override) {
  if (!fs::exists(ckpt_path)) throw LoadError("checkpoint not found: " + ckpt_path.string());
  auto ck = read_checkpoint(ckpt_path);
  Restored r;
  r.cfg = ck.config;
  if (!dataset_override.empty()) r.cfg.dataset = dataset_override;
  r.data = materialize_dataset(r.cfg);
  ModelConfig mc = model_config_for(r.cfg, r.data);
  r.model = std::make_unique<DhmdModel>(mc, r.cfg.seed);
  apply_checkpoint(ck, *r.model, nullptr);
  return r;
}

json metrics_json(const Metrics& m) {
  return {{"acc7", m.acc7 * 100}, {"acc2", m.acc2 * 100}, {"f1", m.f1 * 100},   {"precision", m.precision * 100},
          {"recall", m.recall * 100}, {"mae", m.mae},     {"corr", m.corr},     {"count", m.count}};
}

void emit(const std::string& text, const std::string& out) {
  if (out.empty()) {
    std::cout << text;
    return;
  }
  const fs::path tmp = out + ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + out);
    os << text;
    os.flush();
    if (!os) throw std::runtime_error("write failed for " + out);
  }
  fs::rename(tmp, out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decoupled hierarchical multimodal distillation: training and analysis"};
  app.require_subcommand(1);

  CommonOptions train_o;
  auto* train = app.add_subcommand("train", "train a model and write a run directory");
  add_common(train, train_o, true);

  CommonOptions eval_o;
  std::string eval_ckpt, eval_run, eval_split = "test";
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file");
  eval->add_option("--run", eval_run, "run directory");
  eval->add_option("--split", eval_split, "train, valid or test");
  add_common(eval, eval_o, false);

  CommonOptions synth_o;
  std::string synth_format = "jsonl";
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset directory");
  synth->add_option("--format", synth_format, "jsonl or packed")->check(CLI::IsMember({"jsonl", "packed"}));
  add_common(synth, synth_o, false);

  std::string edges_run, edges_out;
  auto* edges = app.add_subcommand("export-edges", "print the per-epoch edge-weight EMA of a run");
  edges->add_option("--run", edges_run, "run directory")->required();
  edges->add_option("--out", edges_out, "output file (default stdout)");

  CommonOptions act_o;
  std::string act_ckpt, act_run, act_split = "test";
  std::size_t act_top = 5;
  auto* acts = app.add_subcommand("export-activations", "mean dictionary activations per modality and class");
  acts->add_option("--checkpoint", act_ckpt, "checkpoint file");
  acts->add_option("--run", act_run, "run directory");
  acts->add_option("--split", act_split, "train, valid or test");
  acts->add_option("--top", act_top, "top-k elements listed per row");
  add_common(acts, act_o, false);

  CommonOptions att_o;
  std::string att_ckpt, att_run, att_split = "test";
  std::size_t att_samples = 2;
  auto* att = app.add_subcommand("export-attention", "write cross-modal attention maps");
  att->add_option("--checkpoint", att_ckpt, "checkpoint file");
  att->add_option("--run", att_run, "run directory");
  att->add_option("--split", att_split, "train, valid or test");
  att->add_option("--samples", att_samples, "number of samples");
  add_common(att, att_o, false);

  CommonOptions probe_o;
  std::string probe_ckpt, probe_run;
  auto* probe = app.add_subcommand("probe", "per-modality linear-probe accuracy of a checkpoint's features");
  probe->add_option("--checkpoint", probe_ckpt, "checkpoint file");
  probe->add_option("--run", probe_run, "run directory");
  add_common(probe, probe_o, false);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      RunConfig cfg = build_config(train_o);
      if (cfg.out.empty()) cfg.out = "run_seed" + std::to_string(cfg.seed);
      auto summary = run_training(cfg);
      json j = {{"run", summary.dir.string()}, {"best_epoch", summary.best_epoch},
                {"test", metrics_json(summary.test.metrics)}};
      std::cout << j.dump(2) << '\n';
    } else if (*eval) {
      auto r = restore(checkpoint_path(eval_ckpt, eval_run), eval_o.dataset);
      const auto& samples = r.data.split(parse_split(eval_split));
      auto rep = evaluate(*r.model, samples, r.cfg.eval_batch_size);
      json j = {{"split", eval_split}, {"metrics", metrics_json(rep.metrics)}};
      emit(j.dump(2) + "\n", eval_o.out);
    } else if (*synth) {
      RunConfig cfg = build_config(synth_o);
      if (cfg.out.empty()) throw ConfigError("synth requires --out");
      cfg.validate();
      SyntheticTaskSpec spec = cfg.synth;
      if (cfg.synth_seed_follows_run) spec.seed = cfg.seed;
      spec.task = cfg.model.task;
      auto ds = generate_synthetic(spec);
      const fs::path out = cfg.out, stage = fs::path(cfg.out + ".partial");
      if (fs::exists(out)) throw ConfigError("output directory " + out.string() + " already exists");
      fs::remove_all(stage);
      try {
        write_dataset(stage, ds.data, synth_format == "packed" ? DatasetFormat::Packed : DatasetFormat::JsonLines);
      } catch (...) {
        fs::remove_all(stage);
        throw;
      }
      fs::rename(stage, out);
      json oracle = json::object();
      for (std::size_t m = 0; m < kNumModalities; ++m) oracle[modality_name(m)] = ds.oracle.accuracy[2][m];
      std::cout << json{{"dataset", out.string()}, {"nearest_template_test_accuracy", oracle}}.dump(2) << '\n';
    } else if (*edges) {
      std::ifstream in(fs::path(edges_run) / "edges.jsonl");
      if (!in) throw LoadError("no edges.jsonl in " + edges_run);
      std::stringstream ss;
      ss << in.rdbuf();
      auto entries = EdgeLogger::parse_jsonl(ss.str());
      std::ostringstream os;
      for (const auto& e : entries) {
        auto mass = outgoing_mass(e.W);
        json W = json::array();
        for (std::size_t i = 0; i < kNumModalities; ++i) {
          json row = json::array();
          for (std::size_t j = 0; j < kNumModalities; ++j) row.push_back(e.W.at(i, j));
          W.push_back(row);
        }
        os << json{{"epoch", e.epoch}, {"unit", e.unit}, {"W", W}, {"outgoing", mass}}.dump() << '\n';
      }
      emit(os.str(), edges_out);
    } else if (*acts) {
      auto r = restore(checkpoint_path(act_ckpt, act_run), act_o.dataset);
      if (!r.model->dict_ho()) throw ConfigError("the checkpoint was trained without DM; no activations to export");
      auto acc = collect_activations(*r.model, r.data.split(parse_split(act_split)), r.cfg.eval_batch_size);
      emit(acc.jsonl(act_top), act_o.out);
    } else if (*att) {
      auto r = restore(checkpoint_path(att_ckpt, att_run), att_o.dataset);
      if (!r.model->crossmodal()) throw ConfigError("the checkpoint was trained without CA; no attention to export");
      if (att_o.out.empty()) throw ConfigError("export-attention requires --out");
      const fs::path out = att_o.out, stage = fs::path(att_o.out + ".partial");
      fs::remove_all(stage);
      try {
        write_attention_exports(*r.model, r.data.split(parse_split(att_split)), att_samples, stage);
      } catch (...) {
        fs::remove_all(stage);
        throw;
      }
      fs::remove_all(out);
      fs::rename(stage, out);
    } else if (*probe) {
      auto r = restore(checkpoint_path(probe_ckpt, probe_run), probe_o.dataset);
      LinearProbe lp;
      lp.iterations = r.cfg.probe_iterations;
      lp.l2 = r.cfg.probe_l2;
      auto acc = probe_accuracies(*r.model, r.data, r.cfg.eval_batch_size, lp);
      json j = json::object();
      for (std::size_t m = 0; m < kNumModalities; ++m) j[modality_name(m)] = acc[m] * 100;
      j["std"] = population_std(acc) * 100;
      emit(j.dump(2) + "\n", probe_o.out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
