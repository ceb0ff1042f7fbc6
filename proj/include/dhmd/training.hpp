#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dhmd/pipeline.hpp"

namespace dhmd {

struct Metrics {
  double acc7 = 0, acc2 = 0, f1 = 0, precision = 0, recall = 0;  // fractions in [0, 1]
  double mae = 0, corr = 0;
  std::size_t count = 0;
};

// Regression scores: ACC7 on clamped rounded scores, binary metrics with
// positive = non-negative. Binary tasks pass p(class 1) as the score and
// {0, 1} labels; positive = 1 and ACC7 is left at 0.
Metrics compute_metrics(const std::vector<double>& scores, const std::vector<double>& labels, TaskType task);
double pearson(const std::vector<double>& a, const std::vector<double>& b);

struct RunConfig {
  ModelConfig model;
  std::string dataset;  // empty: synthetic task from `synth`
  SyntheticTaskSpec synth;
  bool synth_seed_follows_run = true;
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  std::size_t eval_batch_size = 32;
  int epochs = 30;
  std::uint64_t seed = 0;
  std::string out;
  std::size_t probe_iterations = 300;
  double probe_l2 = 1e-4;
  std::size_t attention_samples = 2;

  // Flat key=value text; unknown keys are errors.
  void set(const std::string& key, const std::string& value);
  void load_file(const std::filesystem::path& path);
  std::string to_text() const;
  std::string to_json() const;
  static RunConfig from_json(const std::string& text);
  void validate() const;
};

struct EvalReport {
  Metrics metrics;
  LossComponents losses;  // mean over batches
  std::array<double, kNumModalities> probe{};
  double probe_std = 0;
  std::vector<double> predictions;
};

// Permutation of [0, n) for one epoch, a pure function of (seed, epoch).
std::vector<std::size_t> batch_order(std::size_t n, std::uint64_t seed, int epoch);

// Mean-pooled per-modality features used by the linear probe: [X^com, X^prt]
// when FD is on, the shallow embedding otherwise.
std::array<std::vector<std::vector<double>>, kNumModalities> probe_features(const DhmdModel& model,
                                                                          const std::vector<MultimodalSample>& samples,
                                                                          std::size_t batch_size);
// Multinomial logistic regression on standardised features, full-batch Adam.
struct LinearProbe {
  std::size_t iterations = 300;
  double l2 = 1e-4;
  double learning_rate = 0.05;
  double fit_and_score(const std::vector<std::vector<double>>& train_x, const std::vector<int>& train_y,
                       const std::vector<std::vector<double>>& test_x, const std::vector<int>& test_y,
                       int num_classes) const;
};
std::array<double, kNumModalities> probe_accuracies(const DhmdModel& model, const Dataset& data,
                                                    std::size_t batch_size, const LinearProbe& probe);
double population_std(const std::array<double, kNumModalities>& v);

EvalReport evaluate(const DhmdModel& model, const std::vector<MultimodalSample>& samples, std::size_t batch_size);

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(int epoch, long step, const LossComponents& c);
  int epoch;
  long step;
  LossComponents components;
};

struct EpochRecord {
  int epoch = 0;
  LossComponents train;
  Metrics valid;
  double valid_loss = 0;
};

// Optimisation loop. Batches are drawn in a per-epoch permutation derived from
// (seed, epoch), so a resumed run sees the same order.
class Trainer {
 public:
  Trainer(DhmdModel& model, const RunConfig& cfg);

  LossComponents step(const Batch& batch);
  void run_epoch(const std::vector<MultimodalSample>& train);
  // Trains for cfg.epochs, keeping the parameters of the best validation epoch.
  void fit(const Dataset& data, const std::function<void(const EpochRecord&)>& on_epoch = {});

  int epoch() const { return epoch_; }
  long global_step() const { return adam_.steps_taken(); }
  Adam& optimizer() { return adam_; }
  EdgeLogger& edges() { return edges_; }
  ActivationAccumulator& activations() { return activations_; }
  const std::vector<EpochRecord>& history() const { return history_; }
  int best_epoch() const { return best_epoch_; }
  void set_epoch(int e) { epoch_ = e; }

 private:
  DhmdModel& model_;
  RunConfig cfg_;
  Adam adam_;
  EdgeLogger edges_;
  ActivationAccumulator activations_;
  std::vector<EpochRecord> history_;
  int epoch_ = 0;
  int best_epoch_ = -1;
  double best_valid_ = -1;
  long step_in_epoch_ = 0;
};

// Checkpoint: magic "DHMDCKPT", u32 version, u32 + config JSON, u32 epoch,
// u64 Adam step, u32 blob count, then per blob u32 name length, name, u32
// rank, u32 dims, f32 data. Little-endian. Saving rounds the live parameters
// and optimizer moments to float32 so a resumed run continues bit-identically.
void save_checkpoint(const std::filesystem::path& path, DhmdModel& model, Adam* adam, const RunConfig& cfg, int epoch);
struct LoadedCheckpoint {
  RunConfig config;
  int epoch = 0;
  long adam_steps = 0;
  std::map<std::string, Tensor> blobs;
};
LoadedCheckpoint read_checkpoint(const std::filesystem::path& path);
// Copies parameters (and optimizer state when adam is non-null) into place.
void apply_checkpoint(const LoadedCheckpoint& ckpt, DhmdModel& model, Adam* adam);

std::string metrics_csv_header();
std::string metrics_csv_row(const EpochRecord& r);
std::string svg_line_plot(const std::string& title, const std::vector<std::string>& series_names,
                          const std::vector<std::vector<double>>& series);

struct RunSummary {
  std::filesystem::path dir;
  EvalReport test;
  int best_epoch = -1;
};

// Builds the dataset, trains, evaluates and writes the run directory. Output
// is staged in a sibling temp directory and renamed at the end.
Dataset materialize_dataset(const RunConfig& cfg);
ModelConfig model_config_for(const RunConfig& cfg, const Dataset& data);
RunSummary run_training(const RunConfig& cfg);

// One JSON file per (sample, pair) for the first `count` samples; no-op without CA.
void write_attention_exports(const DhmdModel& model, const std::vector<MultimodalSample>& samples, std::size_t count,
                             const std::filesystem::path& dir);
ActivationAccumulator collect_activations(const DhmdModel& model, const std::vector<MultimodalSample>& samples,
                                          std::size_t batch_size);

}  // namespace dhmd
