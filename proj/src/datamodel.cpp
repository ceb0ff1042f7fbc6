#include "dhmd/datamodel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

namespace dhmd {

using nlohmann::json;
namespace fs = std::filesystem;

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::L: return "L";
    case Modality::V: return "V";
    case Modality::A: return "A";
  }
  return "?";
}

Modality parse_modality(const std::string& s) {
  if (s == "L") return Modality::L;
  if (s == "V") return Modality::V;
  if (s == "A") return Modality::A;
  throw std::invalid_argument("unknown modality: " + s);
}

const char* task_name(TaskType t) { return t == TaskType::Binary ? "binary" : "regression"; }

TaskType parse_task(const std::string& s) {
  if (s == "regression") return TaskType::Regression;
  if (s == "binary") return TaskType::Binary;
  throw std::invalid_argument("unknown task type: " + s);
}

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "valid") return Split::Valid;
  if (s == "test") return Split::Test;
  throw std::invalid_argument("unknown split: " + s);
}

void ModalitySequence::validate(const std::string& sample_id) const {
  const char* m = modality_name(modality);
  if (steps < 1 || dims < 1)
    throw ValidationError("sample " + sample_id + ": modality " + m + " has empty shape");
  if (data.size() != steps * dims || mask.size() != steps)
    throw ValidationError("sample " + sample_id + ": modality " + m + " buffer size mismatch");
  if (std::none_of(mask.begin(), mask.end(), [](std::uint8_t v) { return v != 0; }))
    throw ValidationError("sample " + sample_id + ": modality " + m + " has no valid step");
  for (std::size_t i = 0; i < data.size(); ++i)
    if (!std::isfinite(data[i]))
      throw ValidationError("sample " + sample_id + ": non-finite value in modality " + m + " at step " +
                            std::to_string(i / dims));
}

ModalitySequence make_sequence(Modality m, std::size_t steps, std::size_t dims, std::vector<float> data) {
  ModalitySequence s;
  s.modality = m;
  s.steps = steps;
  s.dims = dims;
  s.data = std::move(data);
  s.mask.assign(steps, 1);
  return s;
}

void MultimodalSample::validate(TaskType task) const {
  for (const auto& s : streams) s.validate(sample_id);
  if (!std::isfinite(label)) throw ValidationError("sample " + sample_id + ": non-finite label");
  if (task == TaskType::Binary && label != 0.0 && label != 1.0)
    throw ValidationError("sample " + sample_id + ": binary label must be 0 or 1");
}

bool operator==(const ModalitySequence& a, const ModalitySequence& b) {
  return a.modality == b.modality && a.steps == b.steps && a.dims == b.dims && a.mask == b.mask &&
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0 &&
         a.data.size() == b.data.size();
}

bool operator==(const MultimodalSample& a, const MultimodalSample& b) {
  return a.streams == b.streams && a.label == b.label && a.class_id == b.class_id && a.sample_id == b.sample_id;
}

int class_id_for_label(double label, TaskType task) {
  if (task == TaskType::Binary) return label >= 0.5 ? 1 : 0;
  const double r = std::round(label) + 3.0;
  return static_cast<int>(std::clamp(r, 0.0, 6.0));
}

Batch collate(std::span<const MultimodalSample> samples) {
  std::vector<const MultimodalSample*> ptrs;
  ptrs.reserve(samples.size());
  for (const auto& s : samples) ptrs.push_back(&s);
  return collate(ptrs);
}

Batch collate(const std::vector<const MultimodalSample*>& samples) {
  if (samples.empty()) throw std::invalid_argument("collate: empty sample list");
  Batch b;
  const std::size_t B = samples.size();
  for (const auto* s : samples) {
    b.sample_ids.push_back(s->sample_id);
    b.labels.push_back(s->label);
    b.class_ids.push_back(s->class_id);
  }
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    const std::size_t C = samples[0]->streams[m].dims;
    std::size_t T = 0;
    for (const auto* s : samples) {
      if (s->streams[m].dims != C)
        throw std::invalid_argument(std::string("collate: mixed feature dims in modality ") + modality_name(m) +
                                    " (" + std::to_string(C) + " vs " + std::to_string(s->streams[m].dims) +
                                    " in sample " + s->sample_id + ")");
      T = std::max(T, s->streams[m].steps);
    }
    b.data[m] = Tensor({B, T, C});
    b.masks[m] = Mask(B, T, false);
    for (std::size_t i = 0; i < B; ++i) {
      const auto& seq = samples[i]->streams[m];
      b.lengths[m].push_back(seq.steps);
      for (std::size_t t = 0; t < seq.steps; ++t) {
        b.masks[m].valid[i * T + t] = seq.mask[t];
        for (std::size_t c = 0; c < C; ++c) b.data[m].data[(i * T + t) * C + c] = seq.data[t * C + c];
      }
    }
  }
  return b;
}

std::vector<MultimodalSample> unpad(const Batch& batch) {
  std::vector<MultimodalSample> out(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    out[i].sample_id = batch.sample_ids[i];
    out[i].label = batch.labels[i];
    out[i].class_id = batch.class_ids[i];
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      const std::size_t T = batch.masks[m].steps, C = batch.data[m].dim(2), len = batch.lengths[m][i];
      auto& seq = out[i].streams[m];
      seq.modality = static_cast<Modality>(m);
      seq.steps = len;
      seq.dims = C;
      seq.data.resize(len * C);
      seq.mask.resize(len);
      for (std::size_t t = 0; t < len; ++t) {
        seq.mask[t] = batch.masks[m].valid[i * T + t];
        for (std::size_t c = 0; c < C; ++c)
          seq.data[t * C + c] = static_cast<float>(batch.data[m].data[(i * T + t) * C + c]);
      }
    }
  }
  return out;
}

std::size_t Manifest::count(Split s) const {
  switch (s) {
    case Split::Train: return train;
    case Split::Valid: return valid;
    case Split::Test: return test;
  }
  return 0;
}

Manifest read_manifest(const fs::path& dir) {
  const fs::path p = dir / "manifest.json";
  std::ifstream in(p);
  if (!in) throw LoadError("cannot open " + p.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw LoadError("malformed manifest " + p.string() + ": " + e.what());
  }
  Manifest m;
  try {
    for (auto mod : kModalities) m.dims[static_cast<std::size_t>(mod)] = j.at("dims").at(modality_name(mod)).get<std::size_t>();
    m.train = j.at("splits").value("train", std::size_t{0});
    m.valid = j.at("splits").value("valid", std::size_t{0});
    m.test = j.at("splits").value("test", std::size_t{0});
    m.task = parse_task(j.value("task", std::string("regression")));
    if (j.contains("label_range")) {
      m.label_min = j["label_range"].at(0).get<double>();
      m.label_max = j["label_range"].at(1).get<double>();
    } else if (m.task == TaskType::Binary) {
      m.label_min = 0.0;
      m.label_max = 1.0;
    }
    m.num_classes = j.value("num_classes", m.task == TaskType::Binary ? 2 : 7);
  } catch (const json::exception& e) {
    throw LoadError("invalid manifest " + p.string() + ": " + e.what());
  }
  return m;
}

void write_manifest(const fs::path& dir, const Manifest& m) {
  json j;
  for (auto mod : kModalities) j["dims"][modality_name(mod)] = m.dims[static_cast<std::size_t>(mod)];
  j["splits"] = {{"train", m.train}, {"valid", m.valid}, {"test", m.test}};
  j["task"] = task_name(m.task);
  j["label_range"] = {m.label_min, m.label_max};
  j["num_classes"] = m.num_classes;
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  out << j.dump(2) << '\n';
}

const std::vector<MultimodalSample>& Dataset::split(Split s) const {
  switch (s) {
    case Split::Train: return train;
    case Split::Valid: return valid;
    case Split::Test: return test;
  }
  return train;
}

std::size_t Dataset::max_steps(Modality m) const {
  std::size_t t = 1;
  for (const auto* split : {&train, &valid, &test})
    for (const auto& s : *split) t = std::max(t, s[m].steps);
  return t;
}

namespace {

void check_against_manifest(const MultimodalSample& s, const Manifest& m) {
  for (auto mod : kModalities) {
    const std::size_t i = static_cast<std::size_t>(mod);
    if (s.streams[i].dims != m.dims[i])
      throw ValidationError("sample " + s.sample_id + ": modality " + modality_name(mod) + " has dim " +
                            std::to_string(s.streams[i].dims) + ", manifest declares " + std::to_string(m.dims[i]));
  }
  s.validate(m.task);
}

ModalitySequence parse_stream(const json& rows, Modality mod, const std::string& id) {
  if (!rows.is_array() || rows.empty())
    throw ValidationError("sample " + id + ": modality " + modality_name(mod) + " must be a non-empty array of rows");
  const std::size_t T = rows.size();
  const std::size_t C = rows[0].is_array() ? rows[0].size() : 0;
  std::vector<float> data;
  data.reserve(T * C);
  for (const auto& row : rows) {
    if (!row.is_array() || row.size() != C)
      throw ValidationError("sample " + id + ": ragged rows in modality " + modality_name(mod));
    for (const auto& v : row) {
      if (!v.is_number())
        throw ValidationError("sample " + id + ": non-finite value in modality " + modality_name(mod));
      data.push_back(static_cast<float>(v.get<double>()));
    }
  }
  return make_sequence(mod, T, C, std::move(data));
}

template <typename T>
void put(std::ostream& out, T v) {
  static_assert(std::endian::native == std::endian::little, "packed format assumes a little-endian host");
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& what) {
  T v;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw LoadError("truncated packed file while reading " + what);
  return v;
}

constexpr char kPackedMagic[5] = {'D', 'H', 'M', 'D', '1'};

}  // namespace

std::vector<MultimodalSample> load_jsonl_split(const fs::path& file, const Manifest& m) {
  std::ifstream in(file);
  if (!in) throw LoadError("cannot open " + file.string());
  std::vector<MultimodalSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ValidationError(file.string() + ":" + std::to_string(lineno) + ": malformed record: " + e.what());
    }
    MultimodalSample s;
    s.sample_id = j.value("id", std::string("line") + std::to_string(lineno));
    if (!j.contains("label") || !j["label"].is_number())
      throw ValidationError("sample " + s.sample_id + ": missing or non-finite label");
    s.label = j["label"].get<double>();
    for (auto mod : kModalities) {
      if (!j.contains(modality_name(mod)))
        throw ValidationError("sample " + s.sample_id + ": missing modality " + modality_name(mod));
      s.streams[static_cast<std::size_t>(mod)] = parse_stream(j[modality_name(mod)], mod, s.sample_id);
    }
    s.class_id = class_id_for_label(s.label, m.task);
    check_against_manifest(s, m);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<MultimodalSample> load_packed_split(const fs::path& file, const Manifest& m) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw LoadError("cannot open " + file.string());
  char magic[5];
  if (!in.read(magic, 5) || std::memcmp(magic, kPackedMagic, 5) != 0)
    throw LoadError(file.string() + ": bad magic, expected DHMD1");
  const auto count = get<std::uint32_t>(in, "record count");
  std::array<std::size_t, kNumModalities> dims{};
  for (auto& d : dims) d = get<std::uint32_t>(in, "header dims");
  if (dims != m.dims) throw ValidationError(file.string() + ": header dims disagree with manifest");
  std::vector<MultimodalSample> out;
  out.reserve(count);
  for (std::uint32_t r = 0; r < count; ++r) {
    MultimodalSample s;
    const auto id_len = get<std::uint32_t>(in, "id length");
    s.sample_id.resize(id_len);
    if (!in.read(s.sample_id.data(), id_len)) throw LoadError("truncated packed file while reading id");
    s.label = get<float>(in, "label");
    for (auto mod : kModalities) {
      const auto T = get<std::uint32_t>(in, "steps");
      const auto C = get<std::uint32_t>(in, "dims");
      std::vector<float> data(static_cast<std::size_t>(T) * C);
      if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float))))
        throw LoadError("truncated packed file in sample " + s.sample_id);
      s.streams[static_cast<std::size_t>(mod)] = make_sequence(mod, T, C, std::move(data));
    }
    s.class_id = class_id_for_label(s.label, m.task);
    check_against_manifest(s, m);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<MultimodalSample> load_dataset(const fs::path& dir, Split split) {
  const Manifest m = read_manifest(dir);
  const fs::path jl = dir / (std::string(split_name(split)) + ".jsonl");
  const fs::path bin = dir / (std::string(split_name(split)) + ".bin");
  std::vector<MultimodalSample> out;
  if (fs::exists(jl))
    out = load_jsonl_split(jl, m);
  else if (fs::exists(bin))
    out = load_packed_split(bin, m);
  else
    throw LoadError("missing split file " + jl.string() + " (or .bin)");
  if (out.size() != m.count(split))
    throw ValidationError(std::string("split ") + split_name(split) + " has " + std::to_string(out.size()) +
                          " records, manifest declares " + std::to_string(m.count(split)));
  return out;
}

Dataset load_all(const fs::path& dir) {
  Dataset ds;
  ds.manifest = read_manifest(dir);
  ds.train = load_dataset(dir, Split::Train);
  ds.valid = load_dataset(dir, Split::Valid);
  ds.test = load_dataset(dir, Split::Test);
  return ds;
}

void write_jsonl_split(const fs::path& file, std::span<const MultimodalSample> samples) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  for (const auto& s : samples) {
    json j;
    j["id"] = s.sample_id;
    j["label"] = s.label;
    for (auto mod : kModalities) {
      const auto& seq = s[mod];
      json rows = json::array();
      for (std::size_t t = 0; t < seq.steps; ++t) {
        json row = json::array();
        for (std::size_t c = 0; c < seq.dims; ++c) row.push_back(static_cast<double>(seq.at(t, c)));
        rows.push_back(std::move(row));
      }
      j[modality_name(mod)] = std::move(rows);
    }
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + file.string());
}

void write_packed_split(const fs::path& file, std::span<const MultimodalSample> samples,
                        const std::array<std::size_t, kNumModalities>& dims) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out.write(kPackedMagic, 5);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(samples.size()));
  for (auto d : dims) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  for (const auto& s : samples) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.sample_id.size()));
    out.write(s.sample_id.data(), static_cast<std::streamsize>(s.sample_id.size()));
    put<float>(out, static_cast<float>(s.label));
    for (auto mod : kModalities) {
      const auto& seq = s[mod];
      put<std::uint32_t>(out, static_cast<std::uint32_t>(seq.steps));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(seq.dims));
      out.write(reinterpret_cast<const char*>(seq.data.data()), static_cast<std::streamsize>(seq.data.size() * sizeof(float)));
    }
  }
  if (!out) throw std::runtime_error("write failed: " + file.string());
}

void write_dataset(const fs::path& dir, const Dataset& ds, DatasetFormat format) {
  fs::create_directories(dir);
  Manifest m = ds.manifest;
  m.train = ds.train.size();
  m.valid = ds.valid.size();
  m.test = ds.test.size();
  write_manifest(dir, m);
  for (auto split : {Split::Train, Split::Valid, Split::Test}) {
    const auto& samples = ds.split(split);
    if (format == DatasetFormat::JsonLines)
      write_jsonl_split(dir / (std::string(split_name(split)) + ".jsonl"), samples);
    else
      write_packed_split(dir / (std::string(split_name(split)) + ".bin"), samples, m.dims);
  }
}

void SyntheticTaskSpec::validate() const {
  if (num_classes < 2) throw std::invalid_argument("synthetic spec: num_classes must be >= 2");
  if (task == TaskType::Binary && num_classes != 2)
    throw std::invalid_argument("synthetic spec: binary task requires exactly 2 classes");
  if (task == TaskType::Regression && num_classes > 7)
    throw std::invalid_argument("synthetic spec: regression labels span [-3, 3], at most 7 classes");
  if (samples_per_class < 1) throw std::invalid_argument("synthetic spec: samples_per_class must be >= 1");
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    const auto [lo, hi] = seq_len_range[m];
    if (lo < 1 || hi < lo) throw std::invalid_argument("synthetic spec: bad sequence length range");
    if (feature_dims[m] < 1) throw std::invalid_argument("synthetic spec: feature dims must be >= 1");
    if (!(signal_strength[m] >= 0.0 && signal_strength[m] <= 1.0))
      throw std::invalid_argument("synthetic spec: signal_strength must lie in [0, 1]");
  }
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("synthetic spec: noise_sigma must be >= 0");
  if (!(cue_sparsity > 0.0 && cue_sparsity <= 1.0)) throw std::invalid_argument("synthetic spec: cue_sparsity must lie in (0, 1]");
  if (nuisance_templates < 1) throw std::invalid_argument("synthetic spec: need at least one nuisance template");
  if (valid_fraction < 0 || test_fraction < 0 || valid_fraction + test_fraction >= 1.0)
    throw std::invalid_argument("synthetic spec: split fractions must leave a non-empty train split");
}

namespace {

std::vector<double> random_template(std::size_t dims, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(dims);
  double n2 = 0.0;
  for (auto& x : v) {
    x = nd(rng);
    n2 += x * x;
  }
  // Norm sqrt(dims): unit variance per channel on average.
  const double s = std::sqrt(static_cast<double>(dims) / std::max(n2, 1e-12));
  for (auto& x : v) x *= s;
  return v;
}

}  // namespace

int nearest_template(const ModalitySequence& seq, const std::vector<std::vector<double>>& templates) {
  std::vector<double> mean(seq.dims, 0.0);
  std::size_t n = 0;
  for (std::size_t t = 0; t < seq.steps; ++t) {
    if (!seq.mask[t]) continue;
    ++n;
    for (std::size_t c = 0; c < seq.dims; ++c) mean[c] += seq.at(t, c);
  }
  for (auto& v : mean) v /= static_cast<double>(std::max<std::size_t>(n, 1));
  int best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < templates.size(); ++k) {
    double s = 0.0;
    for (std::size_t c = 0; c < seq.dims; ++c) s += mean[c] * templates[k][c];
    if (s > best_score) {
      best_score = s;
      best = static_cast<int>(k);
    }
  }
  return best;
}

SyntheticDataset generate_synthetic(const SyntheticTaskSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  SyntheticDataset out;
  std::array<std::vector<std::vector<double>>, kNumModalities> nuisance;
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    for (int c = 0; c < spec.num_classes; ++c) out.templates[m].push_back(random_template(spec.feature_dims[m], rng));
    for (int k = 0; k < spec.nuisance_templates; ++k) nuisance[m].push_back(random_template(spec.feature_dims[m], rng));
  }

  const std::size_t total = static_cast<std::size_t>(spec.num_classes) * spec.samples_per_class;
  std::vector<int> classes(total);
  for (std::size_t i = 0; i < total; ++i) classes[i] = static_cast<int>(i / spec.samples_per_class);
  std::shuffle(classes.begin(), classes.end(), rng);

  const auto n_valid = static_cast<std::size_t>(std::llround(spec.valid_fraction * static_cast<double>(total)));
  const auto n_test = static_cast<std::size_t>(std::llround(spec.test_fraction * static_cast<double>(total)));
  std::normal_distribution<double> nd(0.0, 1.0);

  auto& ds = out.data;
  for (std::size_t i = 0; i < total; ++i) {
    MultimodalSample s;
    s.class_id = classes[i];
    s.label = spec.task == TaskType::Binary ? static_cast<double>(classes[i]) : static_cast<double>(classes[i] - 3);
    char id[32];
    std::snprintf(id, sizeof(id), "syn%06zu", i);
    s.sample_id = id;
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      const auto [lo, hi] = spec.seq_len_range[m];
      const std::size_t T = static_cast<std::size_t>(std::uniform_int_distribution<int>(lo, hi)(rng));
      const std::size_t C = static_cast<std::size_t>(spec.feature_dims[m]);
      const std::size_t cues = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(spec.cue_sparsity * static_cast<double>(T))));
      std::vector<std::size_t> order(T);
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      std::vector<std::uint8_t> is_cue(T, 0);
      for (std::size_t k = 0; k < cues; ++k) is_cue[order[k]] = 1;
      const double a = std::sqrt(spec.signal_strength[m]);
      const double b = std::sqrt(1.0 - spec.signal_strength[m]);
      const auto& u = out.templates[m][static_cast<std::size_t>(s.class_id)];
      std::uniform_int_distribution<int> pick(0, spec.nuisance_templates - 1);
      std::vector<float> data(T * C);
      for (std::size_t t = 0; t < T; ++t) {
        const auto& v = nuisance[m][static_cast<std::size_t>(pick(rng))];
        for (std::size_t c = 0; c < C; ++c) {
          double x = is_cue[t] ? a * u[c] + b * v[c] : v[c];
          x += spec.noise_sigma * nd(rng);
          data[t * C + c] = static_cast<float>(x);
        }
      }
      s.streams[m] = make_sequence(static_cast<Modality>(m), T, C, std::move(data));
    }
    if (i < n_test)
      ds.test.push_back(std::move(s));
    else if (i < n_test + n_valid)
      ds.valid.push_back(std::move(s));
    else
      ds.train.push_back(std::move(s));
  }

  auto& mf = ds.manifest;
  for (std::size_t m = 0; m < kNumModalities; ++m) mf.dims[m] = static_cast<std::size_t>(spec.feature_dims[m]);
  mf.train = ds.train.size();
  mf.valid = ds.valid.size();
  mf.test = ds.test.size();
  mf.task = spec.task;
  mf.num_classes = spec.num_classes;
  if (spec.task == TaskType::Binary) {
    mf.label_min = 0.0;
    mf.label_max = 1.0;
  }

  const std::array<Split, 3> splits{Split::Train, Split::Valid, Split::Test};
  for (std::size_t si = 0; si < 3; ++si) {
    const auto& samples = ds.split(splits[si]);
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      std::size_t hits = 0;
      for (const auto& s : samples) hits += nearest_template(s.streams[m], out.templates[m]) == s.class_id;
      out.oracle.accuracy[si][m] = samples.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(samples.size());
    }
  }
  return out;
}

}  // namespace dhmd
