#pragma once

#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "dhmd/tensor.hpp"

namespace dhmd {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

// Owns every trainable tensor of a model. Parameter addresses are stable for
// the store's lifetime, so modules keep raw pointers into it.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  Parameter& add(const std::string& name, Tensor init);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<std::unique_ptr<Parameter>>& all() const { return params_; }
  std::size_t scalar_count() const;
  void zero_grad();

  std::vector<Tensor> snapshot() const;
  void restore(const std::vector<Tensor>& values);

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, Parameter*> index_;
};

// Initializers. All draws go through the caller's engine so model
// construction is a pure function of the seed.
Tensor gaussian(Shape shape, double stddev, std::mt19937_64& rng);
Tensor fan_in_gaussian(Shape shape, std::mt19937_64& rng);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam(ParameterStore& store, AdamConfig cfg);

  void step();
  long steps_taken() const { return t_; }

  // Optimizer state in parameter order (first moments, then second moments).
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  void set_steps_taken(long t) { t_ = t; }

 private:
  ParameterStore& store_;
  AdamConfig cfg_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  long t_ = 0;
};

}  // namespace dhmd
