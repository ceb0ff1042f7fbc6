#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dhmd/tensor.hpp"

namespace dhmd {

enum class Modality : std::size_t { L = 0, V = 1, A = 2 };
inline constexpr std::size_t kNumModalities = 3;
inline constexpr std::array<Modality, kNumModalities> kModalities{Modality::L, Modality::V, Modality::A};

const char* modality_name(Modality m);
inline const char* modality_name(std::size_t m) { return modality_name(static_cast<Modality>(m)); }
Modality parse_modality(const std::string& s);

enum class TaskType { Regression, Binary };
const char* task_name(TaskType t);
TaskType parse_task(const std::string& s);

enum class Split { Train, Valid, Test };
const char* split_name(Split s);
Split parse_split(const std::string& s);

// Raised when a dataset file is missing or unreadable.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a record violates the data model (dims, finiteness, labels).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModalitySequence {
  Modality modality = Modality::L;
  std::size_t steps = 0;
  std::size_t dims = 0;
  std::vector<float> data;          // steps x dims, row-major
  std::vector<std::uint8_t> mask;   // steps; 1 = valid

  float at(std::size_t t, std::size_t c) const { return data[t * dims + c]; }
  void validate(const std::string& sample_id) const;
};

ModalitySequence make_sequence(Modality m, std::size_t steps, std::size_t dims, std::vector<float> data);

struct MultimodalSample {
  std::array<ModalitySequence, kNumModalities> streams;
  double label = 0.0;
  int class_id = 0;
  std::string sample_id;

  const ModalitySequence& language() const { return streams[0]; }
  const ModalitySequence& visual() const { return streams[1]; }
  const ModalitySequence& acoustic() const { return streams[2]; }
  const ModalitySequence& operator[](Modality m) const { return streams[static_cast<std::size_t>(m)]; }

  void validate(TaskType task) const;
};

bool operator==(const ModalitySequence& a, const ModalitySequence& b);
bool operator==(const MultimodalSample& a, const MultimodalSample& b);

// 7-class bucketing for sentiment scores, identity for binary labels.
int class_id_for_label(double label, TaskType task);

struct Batch {
  std::vector<std::string> sample_ids;
  std::vector<double> labels;
  std::vector<int> class_ids;
  std::array<Tensor, kNumModalities> data;   // [B x T_max,m x C_m], zero padded
  std::array<Mask, kNumModalities> masks;
  std::array<std::vector<std::size_t>, kNumModalities> lengths;

  std::size_t size() const { return labels.size(); }
};

Batch collate(std::span<const MultimodalSample> samples);
Batch collate(const std::vector<const MultimodalSample*>& samples);
std::vector<MultimodalSample> unpad(const Batch& batch);

struct Manifest {
  std::array<std::size_t, kNumModalities> dims{};
  std::size_t train = 0;
  std::size_t valid = 0;
  std::size_t test = 0;
  TaskType task = TaskType::Regression;
  double label_min = -3.0;
  double label_max = 3.0;
  int num_classes = 7;

  std::size_t count(Split s) const;
};

Manifest read_manifest(const std::filesystem::path& dir);
void write_manifest(const std::filesystem::path& dir, const Manifest& m);

struct Dataset {
  Manifest manifest;
  std::vector<MultimodalSample> train;
  std::vector<MultimodalSample> valid;
  std::vector<MultimodalSample> test;

  const std::vector<MultimodalSample>& split(Split s) const;
  std::size_t max_steps(Modality m) const;
};

enum class DatasetFormat { JsonLines, Packed };

// Reads <dir>/<split>.jsonl, falling back to <dir>/<split>.bin.
std::vector<MultimodalSample> load_dataset(const std::filesystem::path& dir, Split split);
std::vector<MultimodalSample> load_jsonl_split(const std::filesystem::path& file, const Manifest& m);
std::vector<MultimodalSample> load_packed_split(const std::filesystem::path& file, const Manifest& m);
Dataset load_all(const std::filesystem::path& dir);

void write_jsonl_split(const std::filesystem::path& file, std::span<const MultimodalSample> samples);
void write_packed_split(const std::filesystem::path& file, std::span<const MultimodalSample> samples,
                        const std::array<std::size_t, kNumModalities>& dims);
void write_dataset(const std::filesystem::path& dir, const Dataset& ds, DatasetFormat format);

struct SyntheticTaskSpec {
  int num_classes = 7;
  int samples_per_class = 1000;
  std::array<std::pair<int, int>, kNumModalities> seq_len_range{{{8, 12}, {10, 16}, {10, 16}}};
  std::array<int, kNumModalities> feature_dims{16, 12, 12};
  std::array<double, kNumModalities> signal_strength{0.9, 0.4, 0.2};
  double noise_sigma = 1.0;
  double cue_sparsity = 0.25;
  int nuisance_templates = 8;
  double valid_fraction = 1.0 / 7.0;
  double test_fraction = 1.0 / 7.0;
  TaskType task = TaskType::Regression;
  std::uint64_t seed = 0;

  void validate() const;
};

// Nearest-template accuracy per modality and split, computed from the true
// class templates on time-averaged features.
struct OracleReport {
  std::array<std::array<double, kNumModalities>, 3> accuracy{};  // [split][modality]
  double test(Modality m) const { return accuracy[2][static_cast<std::size_t>(m)]; }
};

struct SyntheticDataset {
  Dataset data;
  // [modality][class] -> template of length feature_dims[m]
  std::array<std::vector<std::vector<double>>, kNumModalities> templates;
  OracleReport oracle;
};

SyntheticDataset generate_synthetic(const SyntheticTaskSpec& spec);
int nearest_template(const ModalitySequence& seq, const std::vector<std::vector<double>>& templates);

}  // namespace dhmd
