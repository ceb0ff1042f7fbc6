#pragma once

#include <map>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "dhmd/decoupler.hpp"

namespace dhmd {

enum class Space { Homogeneous = 0, Heterogeneous = 1 };
const char* space_name(Space s);  // "ho" / "he"
Space parse_space(const std::string& s);

struct DictionaryMatch {
  Var A;      // [B x T x K]
  Var a;      // [B x K], column max over valid steps
  Var alpha;  // [B x K], softmax(a)
  Var z;      // [B x C'], alpha D
};

class Dictionary {
 public:
  Dictionary(ParameterStore& store, Space space, std::size_t elements, std::size_t width, std::mt19937_64& rng);

  DictionaryMatch match(Graph& g, const Var& features, const Mask& mask) const;

  Space space() const { return space_; }
  std::size_t elements() const { return K_; }
  std::size_t width() const { return C_; }
  Parameter& elements_param() const { return *D_; }

 private:
  Space space_;
  std::size_t K_, C_;
  Parameter* D_ = nullptr;
};

TripletLoss contrastive_loss(const ModalityVars& z, const std::vector<int>& class_ids, double margin);
Var dic_loss(const Var& ctr_ho, const Var& ctr_he);

// Indices of the k largest entries, ties by ascending index.
std::vector<std::size_t> top_k(const std::vector<double>& v, std::size_t k);

// Running mean of alpha per (space, modality, class).
class ActivationAccumulator {
 public:
  void add(Space space, std::size_t modality, const Tensor& alpha, const std::vector<int>& class_ids);
  void clear() { sums_.clear(); }

  struct Row {
    Space space;
    std::size_t modality;
    int cls;
    std::vector<double> alpha;  // mean over samples
    std::size_t count;
  };
  // Ordered by space (ho, he), modality (L, V, A), class ascending.
  std::vector<Row> rows() const;
  std::string jsonl(std::size_t k = 5) const;
  static std::vector<Row> parse_jsonl(const std::string& text);

 private:
  std::map<std::tuple<int, std::size_t, int>, std::pair<std::vector<double>, std::size_t>> sums_;
};

}  // namespace dhmd
