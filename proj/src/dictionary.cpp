#include "dhmd/dictionary.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace dhmd {

const char* space_name(Space s) { return s == Space::Homogeneous ? "ho" : "he"; }

Space parse_space(const std::string& s) {
  if (s == "ho") return Space::Homogeneous;
  if (s == "he") return Space::Heterogeneous;
  throw std::invalid_argument("unknown dictionary space '" + s + "'");
}

Dictionary::Dictionary(ParameterStore& store, Space space, std::size_t elements, std::size_t width,
                       std::mt19937_64& rng)
    : space_(space), K_(elements), C_(width) {
  if (K_ == 0 || C_ == 0) throw std::invalid_argument("dictionary: K and width must be positive");
  D_ = &store.add(std::string("dictionary.") + space_name(space) + ".elements",
                  gaussian({K_, C_}, 1.0 / std::sqrt(static_cast<double>(C_)), rng));
}

DictionaryMatch Dictionary::match(Graph& g, const Var& features, const Mask& mask) const {
  if (features.value().rank() != 3 || features.shape()[2] != C_)
    throw std::invalid_argument(std::string("dictionary ") + space_name(space_) + ": feature width " +
                                shape_str(features.shape()) + " vs dictionary width " + std::to_string(C_));
  DictionaryMatch out;
  Var D = g.param(*D_);
  out.A = ag::linear(features, D, Var());
  out.a = ag::masked_max_time(out.A, mask);
  out.alpha = ag::softmax_last(out.a);
  out.z = ag::matmul(out.alpha, D);
  return out;
}

TripletLoss contrastive_loss(const ModalityVars& z, const std::vector<int>& class_ids, double margin) {
  return cross_modal_triplet_loss(z, class_ids, margin);
}

Var dic_loss(const Var& ctr_ho, const Var& ctr_he) { return ag::add(ctr_ho, ctr_he); }

std::vector<std::size_t> top_k(const std::vector<double>& v, std::size_t k) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

void ActivationAccumulator::add(Space space, std::size_t modality, const Tensor& alpha,
                                const std::vector<int>& class_ids) {
  const std::size_t B = alpha.rows(), K = alpha.cols();
  if (class_ids.size() != B) throw std::invalid_argument("activation accumulator: class id count mismatch");
  for (std::size_t b = 0; b < B; ++b) {
    auto& [sum, n] = sums_[{static_cast<int>(space), modality, class_ids[b]}];
    if (sum.empty()) sum.assign(K, 0.0);
    for (std::size_t k = 0; k < K; ++k) sum[k] += alpha.data[b * K + k];
    ++n;
  }
}

std::vector<ActivationAccumulator::Row> ActivationAccumulator::rows() const {
  std::vector<Row> out;
  for (const auto& [key, val] : sums_) {
    Row r{static_cast<Space>(std::get<0>(key)), std::get<1>(key), std::get<2>(key), val.first, val.second};
    for (double& x : r.alpha) x /= static_cast<double>(r.count);
    out.push_back(std::move(r));
  }
  return out;
}

std::string ActivationAccumulator::jsonl(std::size_t k) const {
  std::ostringstream os;
  for (const auto& r : rows()) {
    nlohmann::json j;
    j["space"] = space_name(r.space);
    j["modality"] = modality_name(r.modality);
    j["class"] = r.cls;
    std::vector<float> a(r.alpha.begin(), r.alpha.end());
    j["alpha"] = a;
    j["top"] = top_k(r.alpha, k);
    j["count"] = r.count;
    os << j.dump() << '\n';
  }
  return os.str();
}

std::vector<ActivationAccumulator::Row> ActivationAccumulator::parse_jsonl(const std::string& text) {
  std::vector<Row> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    Row r;
    r.space = parse_space(j.at("space").get<std::string>());
    r.modality = static_cast<std::size_t>(parse_modality(j.at("modality").get<std::string>()));
    r.cls = j.at("class").get<int>();
    r.alpha = j.at("alpha").get<std::vector<double>>();
    r.count = j.value("count", std::size_t{0});
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace dhmd
