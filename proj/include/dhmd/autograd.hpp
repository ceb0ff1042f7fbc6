#pragma once

#include <array>
#include <deque>
#include <functional>
#include <unordered_map>
#include <vector>

#include "dhmd/parameters.hpp"
#include "dhmd/tensor.hpp"

namespace dhmd {

class Graph;

// Handle to a node on a Graph tape. Cheap to copy; only valid while the
// owning Graph is alive.
class Var {
 public:
  Var() = default;

  bool valid() const { return g_ != nullptr; }
  Graph& graph() const { return *g_; }
  int id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  double item() const { return value().item(); }

 private:
  friend class Graph;
  Var(Graph* g, int id) : g_(g), id_(id) {}
  Graph* g_ = nullptr;
  int id_ = -1;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so reverse
// creation order is a valid topological order for backward().
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int self)>;

  Graph() = default;
  // With gradients disabled, param() yields constants and no backward
  // closures are kept.
  explicit Graph(bool grad_enabled) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor t);
  Var leaf(Tensor t);
  // The same Parameter always maps to the same node within one graph, so a
  // module applied several times shares one gradient accumulator.
  Var param(Parameter& p);

  void backward(const Var& root);
  // Adds the gradient of every param() node into Parameter::grad.
  void accumulate_param_grads();

  const Tensor& value(int id) const { return nodes_[id].value; }
  const Tensor& grad(const Var& v);
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  Tensor& grad_buffer(int id);
  std::size_t size() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }

  Var make(Tensor value, std::initializer_list<Var> parents, BackwardFn fn);
  Var make(Tensor value, const std::vector<Var>& parents, BackwardFn fn);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };
  std::deque<Node> nodes_;
  std::unordered_map<Parameter*, int> param_nodes_;
  bool grad_enabled_ = true;
};

using Triplet = std::array<int, 3>;

// Differentiable ops. Shapes follow the row convention of Tensor: the last
// axis is features, leading axes are flattened into rows unless stated.
namespace ag {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var sum(const Var& a);
Var mean(const Var& a);
Var weighted_sum(const std::vector<Var>& scalars, const std::vector<double>& weights);
Var reshape(const Var& a, Shape shape);
Var detach(const Var& a);

Var gelu(const Var& a);
Var abs(const Var& a);

// y = x W^T + b with W viewed as [out x in]; b may be invalid (no bias).
Var linear(const Var& x, const Var& w, const Var& b);
// Plain [n x k] * [k x m].
Var matmul(const Var& a, const Var& b);

Var concat_last(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_last(const Var& a, std::size_t begin, std::size_t len);
Var mean_last(const Var& a);

// [B x T x C] -> [B x T x k*C], zero outside [0, T). Column layout is
// tap-major: column (j*C + c) holds x[t + j - k/2, c].
Var im2col_time(const Var& x, std::size_t kernel);
Var mask_time(const Var& x, const Mask& mask);
Var masked_mean_time(const Var& x, const Mask& mask);
Var masked_max_time(const Var& x, const Mask& mask);
Var add_positional(const Var& x, const Var& table);

Var softmax_last(const Var& a);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// Multi-head scaled dot-product attention. q: [B x Tq x D], k, v: [B x Tk x D].
// Keys where key_mask is false get zero weight. When probs_out is non-null it
// receives head-averaged weights [B x Tq x Tk].
Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads, const Mask& key_mask,
              Tensor* probs_out = nullptr);

double cosine_eps();
Var cosine_matrix(const Var& x);
Var cosine_rows(const Var& a, const Var& b);
// mean over triplets of max(0, margin - cos[i,j] + cos[i,k]); 0 if empty.
Var triplet_hinge(const Var& cos, const std::vector<Triplet>& triplets, double margin);

// entries[i*M + j] is a [B x 1] node for i != j; diagonal entries are ignored.
Var pair_matrix(const std::vector<Var>& entries, std::size_t m);
// Softmax over the incoming edges i != j of each target column j; diagonal 0.
Var column_softmax_offdiag(const Var& raw);

Var l1_loss(const Var& pred, const std::vector<double>& target);
Var cross_entropy(const Var& logits, const std::vector<int>& labels);
// Sum of squared row differences over valid (b, t), divided by the valid count.
Var masked_sq_err(const Var& a, const Var& b, const Mask& mask);

}  // namespace ag

}  // namespace dhmd
