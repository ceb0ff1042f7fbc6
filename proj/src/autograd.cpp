#include "dhmd/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace dhmd {

const Tensor& Var::value() const {
  if (!g_) throw std::logic_error("value() on empty Var");
  return g_->value(id_);
}

Var Graph::constant(Tensor t) {
  nodes_.push_back(Node{std::move(t), {}, false, {}, nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::leaf(Tensor t) {
  nodes_.push_back(Node{std::move(t), {}, true, {}, nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::param(Parameter& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return Var(this, it->second);
  nodes_.push_back(Node{p.value, {}, grad_enabled_, {}, &p});
  int id = static_cast<int>(nodes_.size() - 1);
  param_nodes_[&p] = id;
  return Var(this, id);
}

Tensor& Graph::grad_buffer(int id) {
  auto& n = nodes_[id];
  if (n.grad.shape != n.value.shape || n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape);
  return n.grad;
}

const Tensor& Graph::grad(const Var& v) { return grad_buffer(v.id()); }

Var Graph::make(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
  bool rg = false;
  for (const auto& p : parents) rg = rg || (p.valid() && nodes_[p.id()].requires_grad);
  nodes_.push_back(Node{std::move(value), {}, rg, rg ? std::move(fn) : BackwardFn{}, nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::make(Tensor value, const std::vector<Var>& parents, BackwardFn fn) {
  bool rg = false;
  for (const auto& p : parents) rg = rg || (p.valid() && nodes_[p.id()].requires_grad);
  nodes_.push_back(Node{std::move(value), {}, rg, rg ? std::move(fn) : BackwardFn{}, nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Graph::backward(const Var& root) {
  if (root.value().size() != 1) throw std::invalid_argument("backward() needs a scalar root");
  grad_buffer(root.id()).data[0] += 1.0;
  for (int i = root.id(); i >= 0; --i) {
    auto& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
    n.backward(*this, i);
  }
}

void Graph::accumulate_param_grads() {
  for (auto& [p, id] : param_nodes_) {
    auto& n = nodes_[id];
    if (n.grad.size() == 0) continue;
    for (std::size_t k = 0; k < n.grad.size(); ++k) p->grad.data[k] += n.grad.data[k];
  }
}

namespace ag {
namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

void require_rank(const Var& a, std::size_t r, const char* op) {
  if (a.value().rank() != r)
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                                shape_str(a.shape()));
}

void check_mask(const Var& x, const Mask& mask, const char* op) {
  if (x.value().rank() != 3 || x.shape()[0] != mask.batch || x.shape()[1] != mask.steps)
    throw std::invalid_argument(std::string(op) + ": mask " + std::to_string(mask.batch) + "x" +
                                std::to_string(mask.steps) + " does not match " + shape_str(x.shape()));
}

Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  int ia = a.id(), ib = b.id();
  return a.graph().make(std::move(out), {a, b}, [ia, ib](Graph& g, int self) {
    const Tensor& gy = g.grad_buffer(self);
    for (int id : {ia, ib}) {
      if (!g.requires_grad(id)) continue;
      Tensor& gx = g.grad_buffer(id);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  int ia = a.id(), ib = b.id();
  return a.graph().make(std::move(out), {a, b}, [ia, ib](Graph& g, int self) {
    const Tensor& gy = g.grad_buffer(self);
    if (g.requires_grad(ia)) {
      Tensor& gx = g.grad_buffer(ia);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    }
    if (g.requires_grad(ib)) {
      Tensor& gx = g.grad_buffer(ib);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] -= gy[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  int ia = a.id(), ib = b.id();
  return a.graph().make(std::move(out), {a, b}, [ia, ib](Graph& g, int self) {
    const Tensor& gy = g.grad_buffer(self);
    if (g.requires_grad(ia)) {
      Tensor& gx = g.grad_buffer(ia);
      const Tensor& vb = g.value(ib);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * vb[i];
    }
    if (g.requires_grad(ib)) {
      Tensor& gx = g.grad_buffer(ib);
      const Tensor& va = g.value(ia);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * va[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data) v *= s;
  int ia = a.id();
  return a.graph().make(std::move(out), {a}, [ia, s](Graph& g, int self) {
    const Tensor& gy = g.grad_buffer(self);
    Tensor& gx = g.grad_buffer(ia);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += s * gy[i];
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  int ia = a.id();
  return a.graph().make(scalar(s), {a}, [ia](Graph& g, int self) {
    const double gy = g.grad_buffer(self)[0];
    Tensor& gx = g.grad_buffer(ia);
    for (auto& v : gx.data) v += gy;
  });
}

Var mean(const Var& a) {
  if (a.value().size() == 0) throw std::invalid_argument("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var weighted_sum(const std::vector<Var>& scalars, const std::vector<double>& weights) {
  if (scalars.empty() || scalars.size() != weights.size())
    throw std::invalid_argument("weighted_sum: need matching non-empty inputs");
  double s = 0.0;
  std::vector<int> ids;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    s += weights[i] * scalars[i].item();
    ids.push_back(scalars[i].id());
  }
  return scalars[0].graph().make(scalar(s), scalars, [ids, weights](Graph& g, int self) {
    const double gy = g.grad_buffer(self)[0];
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (g.requires_grad(ids[i])) g.grad_buffer(ids[i])[0] += weights[i] * gy;
  });
}

Var reshape(const Var& a, Shape shape) {
  if (shape_size(shape) != a.value().size())
    throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Tensor out(std::move(shape), a.value().data);
  int ia = a.id();
  return a.graph().make(std::move(out), {a}, [ia](Graph& g, int self) {
    const Tensor& gy = g.grad_buffer(self);
    Tensor& gx = g.grad_buffer(ia);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
  });
}

Var detach(const Var& a) { return a.graph().constant(a.value()); }

Var gelu(const Var& a) {
  static const double kInvSqrt2 = 1.0 / std::sqrt(2.0);
  static const double kInvSqrt2Pi = 1.0 / std::sqrt(2.0 * M_PI);
  Tensor out = a.value();
  for (auto& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  int ia = a.id();
  return a.graph().make(std::move(out), {a}, [ia](Graph& g, int self) {
    const Tensor& gy = g.grad_buffer(self);
    const Tensor& x = g.value(ia);
    Tensor& gx = g.grad_buffer(ia);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(x[i] * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x[i] * x[i]);
      gx[i] += gy[i] * (cdf + x[i] * pdf);
    }
  });
}

Var abs(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.data) v = std::fabs(v);
  int ia = a.id();
  return a.graph().make(std::move(out), {a}, [ia](Graph& g, int self) {
    const Tensor& gy = g.grad_buffer(self);
    const Tensor& x = g.value(ia);
    Tensor& gx = g.grad_buffer(ia);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * (x[i] > 0 ? 1.0 : (x[i] < 0 ? -1.0 : 0.0));
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const Tensor& X = x.value();
  const Tensor& W = w.value();
  const std::size_t out_dim = W.shape.at(0);
  const std::size_t in_dim = W.size() / out_dim;
  if (X.cols() != in_dim)
    throw std::invalid_argument("linear: input width " + std::to_string(X.cols()) + " vs weight " +
                                shape_str(W.shape));
  if (b.valid() && b.value().size() != out_dim) throw std::invalid_argument("linear: bias size mismatch");
  const std::size_t n = X.rows();
  Shape os = X.shape;
  os.back() = out_dim;
  Tensor Y(os);
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = &X.data[r * in_dim];
    double* yr = &Y.data[r * out_dim];
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double* wr = &W.data[o * in_dim];
      double acc = b.valid() ? b.value()[o] : 0.0;
      for (std::size_t i = 0; i < in_dim; ++i) acc += xr[i] * wr[i];
      yr[o] = acc;
    }
  }
  int ix = x.id(), iw = w.id(), ib = b.valid() ? b.id() : -1;
  std::vector<Var> parents{x, w};
  if (b.valid()) parents.push_back(b);
  return x.graph().make(std::move(Y), parents, [ix, iw, ib, n, in_dim, out_dim](Graph& g, int self) {
    const Tensor& gy = g.grad_buffer(self);
    const Tensor& X = g.value(ix);
    const Tensor& W = g.value(iw);
    if (g.requires_grad(ix)) {
      Tensor& gx = g.grad_buffer(ix);
      for (std::size_t r = 0; r < n; ++r) {
        double* gxr = &gx.data[r * in_dim];
        const double* gyr = &gy.data[r * out_dim];
        for (std::size_t o = 0; o < out_dim; ++o) {
          const double go = gyr[o];
          if (go == 0.0) continue;
          const double* wr = &W.data[o * in_dim];
          for (std::size_t i = 0; i < in_dim; ++i) gxr[i] += go * wr[i];
        }
      }
    }
    if (g.requires_grad(iw)) {
      Tensor& gw = g.grad_buffer(iw);
      for (std::size_t r = 0; r < n; ++r) {
        const double* xr = &X.data[r * in_dim];
        const double* gyr = &gy.data[r * out_dim];
        for (std::size_t o = 0; o < out_dim; ++o) {
          const double go = gyr[o];
          if (go == 0.0) continue;
          double* gwr = &gw.data[o * in_dim];
          for (std::size_t i = 0; i < in_dim; ++i) gwr[i] += go * xr[i];
        }
      }
    }
    if (ib >= 0 && g.requires_grad(ib)) {
      Tensor& gb = g.grad_buffer(ib);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t o = 0; o < out_dim; ++o) gb[o] += gy.data[r * out_dim + o];
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  if (b.shape()[0] != k) throw std::invalid_argument("matmul: inner dimension mismatch");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  Tensor Y({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A.data[i * k + p];
      for (std::size_t j = 0; j < m; ++j) Y.data[i * m + j] += av * B.data[p * m + j];
    }
  int ia = a.id(), ibb = b.id();
  return a.graph().make(std::move(Y), {a, b}, [ia, ibb, n, k, m](Graph& g, int self) {
    const Tensor& gy = g.grad_buffer(self);
    const Tensor& A = g.value(ia);
    const Tensor& B = g.value(ibb);
    if (g.requires_grad(ia)) {
      Tensor& ga = g.grad_buffer(ia);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j) acc += gy.data[i * m + j] * B.data[p * m + j];
          ga.data[i * k + p] += acc;
        }
    }
    if (g.requires_grad(ibb)) {
      Tensor& gb = g.grad_buffer(ibb);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A.data[i * k + p];
          for (std::size_t j = 0; j < m; ++j) gb.data[p * m + j] += av * gy.data[i * m + j];
        }
    }
  });
}

Var concat_last(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_last: no inputs");
  const std::size_t rows = parts[0].value().rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.value().rows() != rows) throw std::invalid_argument("concat_last: row count mismatch");
    Shape lead(p.shape().begin(), p.shape().end() - 1), lead0(parts[0].shape().begin(), parts[0].shape().end() - 1);
    if (lead != lead0) throw std::invalid_argument("concat_last: leading shape mismatch");
    widths.push_back(p.value().cols());
    total += p.value().cols();
  }
  Shape os = parts[0].shape();
  os.back() = total;
  Tensor Y(os);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(&P.data[r * widths[k]], widths[k], &Y.data[r * total + off]);
    off += widths[k];
  }
  std::vector<int> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  return parts[0].graph().make(std::move(Y), parts, [ids, widths, rows, total](Graph& g, int self) {
    const Tensor& gy = g.grad_buffer(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (g.requires_grad(ids[k])) {
        Tensor& gx = g.grad_buffer(ids[k]);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < widths[k]; ++c) gx.data[r * widths[k] + c] += gy.data[r * total + off + c];
      }
      off += widths[k];
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t cols = parts[0].value().cols();
  std::vector<std::size_t> counts;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.value().rank() != 2 || p.value().cols() != cols)
      throw std::invalid_argument("concat_rows: expects [n x C] inputs with equal C");
    counts.push_back(p.value().rows());
    total += p.value().rows();
  }
  Tensor Y({total, cols});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data.begin(), p.value().data.end(), Y.data.begin() + off * cols);
    off += p.value().rows();
  }
  std::vector<int> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  return parts[0].graph().make(std::move(Y), parts, [ids, counts, cols](Graph& g, int self) {
    const Tensor& gy = g.grad_buffer(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (g.requires_grad(ids[k])) {
        Tensor& gx = g.grad_buffer(ids[k]);
        for (std::size_t i = 0; i < counts[k] * cols; ++i) gx.data[i] += gy.data[off * cols + i];
      }
      off += counts[k];
    }
  });
}

Var slice_last(const Var& a, std::size_t begin, std::size_t len) {
  const std::size_t w = a.value().cols(), rows = a.value().rows();
  if (begin + len > w) throw std::invalid_argument("slice_last: out of range");
  Shape os = a.shape();
  os.back() = len;
  Tensor Y(os);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(&a.value().data[r * w + begin], len, &Y.data[r * len]);
  int ia = a.id();
  return a.graph().make(std::move(Y), {a}, [ia, rows, w, begin, len](Graph& g, int self) {
    const Tensor& gy = g.grad_buffer(self);
    Tensor& gx = g.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < len; ++c) gx.data[r * w + begin + c] += gy.data[r * len + c];
  });
}

Var mean_last(const Var& a) {
  const std::size_t w = a.value().cols(), rows = a.value().rows();
  Shape os = a.shape();
  os.back() = 1;
  Tensor Y(os);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < w; ++c) s += a.value().data[r * w + c];
    Y.data[r] = s / static_cast<double>(w);
  }
  int ia = a.id();
  return a.graph().make(std::move(Y), {a}, [ia, rows, w](Graph& g, int self) {
    const Tensor& gy = g.grad_buffer(self);
    Tensor& gx = g.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) gx.data[r * w + c] += gy.data[r] / static_cast<double>(w);
  });
}

Var im2col_time(const Var& x, std::size_t kernel) {
  require_rank(x, 3, "im2col_time");
  if (kernel % 2 == 0) throw std::invalid_argument("im2col_time: kernel size must be odd");
  const std::size_t B = x.shape()[0], T = x.shape()[1], C = x.shape()[2];
  const long half = static_cast<long>(kernel / 2);
  Tensor Y({B, T, kernel * C});
  const Tensor& X = x.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < kernel; ++j) {
        const long src = static_cast<long>(t) + static_cast<long>(j) - half;
        if (src < 0 || src >= static_cast<long>(T)) continue;
        std::copy_n(&X.data[(b * T + src) * C], C, &Y.data[(b * T + t) * kernel * C + j * C]);
      }
  int ix = x.id();
  return x.graph().make(std::move(Y), {x}, [ix, B, T, C, kernel, half](Graph& g, int self) {
    const Tensor& gy = g.grad_buffer(self);
    Tensor& gx = g.grad_buffer(ix);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < kernel; ++j) {
          const long src = static_cast<long>(t) + static_cast<long>(j) - half;
          if (src < 0 || src >= static_cast<long>(T)) continue;
          const double* gr = &gy.data[(b * T + t) * kernel * C + j * C];
          double* xr = &gx.data[(b * T + src) * C];
          for (std::size_t c = 0; c < C; ++c) xr[c] += gr[c];
        }
  });
}

Var mask_time(const Var& x, const Mask& mask) {
  check_mask(x, mask, "mask_time");
  const std::size_t C = x.shape()[2];
  Tensor Y = x.value();
  for (std::size_t r = 0; r < mask.valid.size(); ++r)
    if (!mask.valid[r]) std::fill_n(&Y.data[r * C], C, 0.0);
  int ix = x.id();
  auto valid = mask.valid;
  return x.graph().make(std::move(Y), {x}, [ix, valid, C](Graph& g, int self) {
    const Tensor& gy = g.grad_buffer(self);
    Tensor& gx = g.grad_buffer(ix);
    for (std::size_t r = 0; r < valid.size(); ++r)
      if (valid[r])
        for (std::size_t c = 0; c < C; ++c) gx.data[r * C + c] += gy.data[r * C + c];
  });
}

Var masked_mean_time(const Var& x, const Mask& mask) {
  check_mask(x, mask, "masked_mean_time");
  const std::size_t B = mask.batch, T = mask.steps, C = x.shape()[2];
  Tensor Y({B, C});
  std::vector<double> inv(B);
  const Tensor& X = x.value();
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t n = mask.count(b);
    if (n == 0) throw std::invalid_argument("masked_mean_time: sample " + std::to_string(b) + " is fully masked");
    inv[b] = 1.0 / static_cast<double>(n);
    for (std::size_t t = 0; t < T; ++t) {
      if (!mask(b, t)) continue;
      for (std::size_t c = 0; c < C; ++c) Y.data[b * C + c] += X.data[(b * T + t) * C + c];
    }
    for (std::size_t c = 0; c < C; ++c) Y.data[b * C + c] *= inv[b];
  }
  int ix = x.id();
  auto valid = mask.valid;
  return x.graph().make(std::move(Y), {x}, [ix, valid, inv, B, T, C](Graph& g, int self) {
    const Tensor& gy = g.grad_buffer(self);
    Tensor& gx = g.grad_buffer(ix);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < T; ++t) {
        if (!valid[b * T + t]) continue;
        for (std::size_t c = 0; c < C; ++c) gx.data[(b * T + t) * C + c] += gy.data[b * C + c] * inv[b];
      }
  });
}

Var masked_max_time(const Var& x, const Mask& mask) {
  check_mask(x, mask, "masked_max_time");
  const std::size_t B = mask.batch, T = mask.steps, C = x.shape()[2];
  Tensor Y({B, C}, -std::numeric_limits<double>::infinity());
  std::vector<std::size_t> arg(B * C, 0);
  const Tensor& X = x.value();
  for (std::size_t b = 0; b < B; ++b) {
    if (mask.count(b) == 0)
      throw std::invalid_argument("masked_max_time: sample " + std::to_string(b) + " is fully masked");
    for (std::size_t t = 0; t < T; ++t) {
      if (!mask(b, t)) continue;
      for (std::size_t c = 0; c < C; ++c) {
        const double v = X.data[(b * T + t) * C + c];
        if (v > Y.data[b * C + c]) {
          Y.data[b * C + c] = v;
          arg[b * C + c] = t;
        }
      }
    }
  }
  int ix = x.id();
  return x.graph().make(std::move(Y), {x}, [ix, arg, B, T, C](Graph& g, int self) {
    const Tensor& gy = g.grad_buffer(self);
    Tensor& gx = g.grad_buffer(ix);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) gx.data[(b * T + arg[b * C + c]) * C + c] += gy.data[b * C + c];
  });
}

Var add_positional(const Var& x, const Var& table) {
  require_rank(x, 3, "add_positional");
  const std::size_t B = x.shape()[0], T = x.shape()[1], C = x.shape()[2];
  if (table.value().rank() != 2 || table.shape()[1] != C)
    throw std::invalid_argument("add_positional: table width mismatch");
  if (T > table.shape()[0])
    throw std::invalid_argument("add_positional: sequence length " + std::to_string(T) +
                                " exceeds positional capacity " + std::to_string(table.shape()[0]));
  Tensor Y = x.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < T * C; ++i) Y.data[b * T * C + i] += table.value().data[i];
  int ix = x.id(), it = table.id();
  return x.graph().make(std::move(Y), {x, table}, [ix, it, B, T, C](Graph& g, int self) {
    const Tensor& gy = g.grad_buffer(self);
    if (g.requires_grad(ix)) {
      Tensor& gx = g.grad_buffer(ix);
      for (std::size_t i = 0; i < gy.size(); ++i) gx.data[i] += gy.data[i];
    }
    if (g.requires_grad(it)) {
      Tensor& gt = g.grad_buffer(it);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < T * C; ++i) gt.data[i] += gy.data[b * T * C + i];
    }
  });
}

Var softmax_last(const Var& a) {
  const std::size_t w = a.value().cols(), rows = a.value().rows();
  Tensor Y = a.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double* y = &Y.data[r * w];
    const double mx = *std::max_element(y, y + w);
    double s = 0.0;
    for (std::size_t c = 0; c < w; ++c) s += (y[c] = std::exp(y[c] - mx));
    for (std::size_t c = 0; c < w; ++c) y[c] /= s;
  }
  int ia = a.id();
  return a.graph().make(std::move(Y), {a}, [ia, rows, w](Graph& g, int self) {
    const Tensor& gy = g.grad_buffer(self);
    const Tensor& y = g.value(self);
    Tensor& gx = g.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < w; ++c) dot += gy.data[r * w + c] * y.data[r * w + c];
      for (std::size_t c = 0; c < w; ++c) gx.data[r * w + c] += y.data[r * w + c] * (gy.data[r * w + c] - dot);
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const std::size_t w = x.value().cols(), rows = x.value().rows();
  if (gamma.value().size() != w || beta.value().size() != w)
    throw std::invalid_argument("layer_norm: affine parameter width mismatch");
  Tensor Y(x.shape());
  std::vector<double> xhat(x.value().size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = &x.value().data[r * w];
    double mu = 0.0;
    for (std::size_t c = 0; c < w; ++c) mu += xr[c];
    mu /= static_cast<double>(w);
    double var = 0.0;
    for (std::size_t c = 0; c < w; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(w);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < w; ++c) {
      xhat[r * w + c] = (xr[c] - mu) * inv_std[r];
      Y.data[r * w + c] = gamma.value()[c] * xhat[r * w + c] + beta.value()[c];
    }
  }
  int ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.graph().make(std::move(Y), {x, gamma, beta},
                        [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, w](Graph& g, int self) {
    const Tensor& gy = g.grad_buffer(self);
    const Tensor& gam = g.value(ig);
    if (g.requires_grad(ig) || g.requires_grad(ib)) {
      Tensor* gg = g.requires_grad(ig) ? &g.grad_buffer(ig) : nullptr;
      Tensor* gb = g.requires_grad(ib) ? &g.grad_buffer(ib) : nullptr;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < w; ++c) {
          if (gg) gg->data[c] += gy.data[r * w + c] * xhat[r * w + c];
          if (gb) gb->data[c] += gy.data[r * w + c];
        }
    }
    if (g.requires_grad(ix)) {
      Tensor& gx = g.grad_buffer(ix);
      const double inv_w = 1.0 / static_cast<double>(w);
      for (std::size_t r = 0; r < rows; ++r) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t c = 0; c < w; ++c) {
          const double d = gy.data[r * w + c] * gam.data[c];
          m1 += d;
          m2 += d * xhat[r * w + c];
        }
        m1 *= inv_w;
        m2 *= inv_w;
        for (std::size_t c = 0; c < w; ++c) {
          const double d = gy.data[r * w + c] * gam.data[c];
          gx.data[r * w + c] += inv_std[r] * (d - m1 - xhat[r * w + c] * m2);
        }
      }
    }
  });
}

Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads, const Mask& key_mask, Tensor* probs_out) {
  require_rank(q, 3, "attention");
  require_rank(k, 3, "attention");
  require_same_shape(k, v, "attention");
  const std::size_t B = q.shape()[0], Tq = q.shape()[1], D = q.shape()[2];
  const std::size_t Tk = k.shape()[1];
  if (k.shape()[0] != B || k.shape()[2] != D) throw std::invalid_argument("attention: q/k shape mismatch");
  if (heads == 0 || D % heads != 0) throw std::invalid_argument("attention: width not divisible by head count");
  if (key_mask.batch != B || key_mask.steps != Tk) throw std::invalid_argument("attention: key mask shape mismatch");
  const std::size_t dh = D / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();

  std::vector<double> probs(B * heads * Tq * Tk, 0.0);
  Tensor Y({B, Tq, D});
  if (probs_out) *probs_out = Tensor({B, Tq, Tk});
  for (std::size_t b = 0; b < B; ++b) {
    if (key_mask.count(b) == 0)
      throw std::invalid_argument("attention: sample " + std::to_string(b) + " has no valid keys");
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < Tq; ++t) {
        double* p = &probs[((b * heads + h) * Tq + t) * Tk];
        const double* qr = &Q.data[(b * Tq + t) * D + h * dh];
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s < Tk; ++s) {
          if (!key_mask(b, s)) continue;
          const double* kr = &K.data[(b * Tk + s) * D + h * dh];
          double acc = 0.0;
          for (std::size_t c = 0; c < dh; ++c) acc += qr[c] * kr[c];
          p[s] = acc * inv_sqrt;
          mx = std::max(mx, p[s]);
        }
        double z = 0.0;
        for (std::size_t s = 0; s < Tk; ++s) {
          if (!key_mask(b, s)) {
            p[s] = 0.0;
            continue;
          }
          z += (p[s] = std::exp(p[s] - mx));
        }
        double* yr = &Y.data[(b * Tq + t) * D + h * dh];
        for (std::size_t s = 0; s < Tk; ++s) {
          if (p[s] == 0.0) continue;
          p[s] /= z;
          const double* vr = &V.data[(b * Tk + s) * D + h * dh];
          for (std::size_t c = 0; c < dh; ++c) yr[c] += p[s] * vr[c];
        }
        if (probs_out)
          for (std::size_t s = 0; s < Tk; ++s) probs_out->data[(b * Tq + t) * Tk + s] += p[s] / static_cast<double>(heads);
      }
  }
  int iq = q.id(), ik = k.id(), iv = v.id();
  return q.graph().make(std::move(Y), {q, k, v},
                        [iq, ik, iv, probs = std::move(probs), B, Tq, Tk, D, heads, dh, inv_sqrt](Graph& g, int self) {
    const Tensor& gy = g.grad_buffer(self);
    const Tensor& Q = g.value(iq);
    const Tensor& K = g.value(ik);
    const Tensor& V = g.value(iv);
    Tensor* gq = g.requires_grad(iq) ? &g.grad_buffer(iq) : nullptr;
    Tensor* gk = g.requires_grad(ik) ? &g.grad_buffer(ik) : nullptr;
    Tensor* gv = g.requires_grad(iv) ? &g.grad_buffer(iv) : nullptr;
    std::vector<double> dp(Tk);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t t = 0; t < Tq; ++t) {
          const double* p = &probs[((b * heads + h) * Tq + t) * Tk];
          const double* gyr = &gy.data[(b * Tq + t) * D + h * dh];
          double dot = 0.0;
          for (std::size_t s = 0; s < Tk; ++s) {
            dp[s] = 0.0;
            if (p[s] == 0.0) continue;
            const double* vr = &V.data[(b * Tk + s) * D + h * dh];
            for (std::size_t c = 0; c < dh; ++c) dp[s] += gyr[c] * vr[c];
            dot += p[s] * dp[s];
            if (gv) {
              double* gvr = &gv->data[(b * Tk + s) * D + h * dh];
              for (std::size_t c = 0; c < dh; ++c) gvr[c] += p[s] * gyr[c];
            }
          }
          const double* qr = &Q.data[(b * Tq + t) * D + h * dh];
          for (std::size_t s = 0; s < Tk; ++s) {
            if (p[s] == 0.0) continue;
            const double ds = p[s] * (dp[s] - dot) * inv_sqrt;
            const double* kr = &K.data[(b * Tk + s) * D + h * dh];
            if (gq) {
              double* gqr = &gq->data[(b * Tq + t) * D + h * dh];
              for (std::size_t c = 0; c < dh; ++c) gqr[c] += ds * kr[c];
            }
            if (gk) {
              double* gkr = &gk->data[(b * Tk + s) * D + h * dh];
              for (std::size_t c = 0; c < dh; ++c) gkr[c] += ds * qr[c];
            }
          }
        }
  });
}

double cosine_eps() { return 1e-12; }

Var cosine_matrix(const Var& x) {
  require_rank(x, 2, "cosine_matrix");
  const std::size_t N = x.shape()[0], C = x.shape()[1];
  const Tensor& X = x.value();
  std::vector<double> norm(N);
  for (std::size_t i = 0; i < N; ++i) {
    double s = cosine_eps();
    for (std::size_t c = 0; c < C; ++c) s += X.data[i * C + c] * X.data[i * C + c];
    norm[i] = std::sqrt(s);
  }
  Tensor Y({N, N});
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = i; j < N; ++j) {
      double d = 0.0;
      for (std::size_t c = 0; c < C; ++c) d += X.data[i * C + c] * X.data[j * C + c];
      Y.data[i * N + j] = Y.data[j * N + i] = d / (norm[i] * norm[j]);
    }
  int ix = x.id();
  return x.graph().make(std::move(Y), {x}, [ix, norm = std::move(norm), N, C](Graph& g, int self) {
    const Tensor& gy = g.grad_buffer(self);
    const Tensor& X = g.value(ix);
    const Tensor& Y = g.value(self);
    Tensor& gx = g.grad_buffer(ix);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j) {
        // cos[i,j] depends on x_i and x_j; the (i,j) entry contributes to both.
        const double w = gy.data[i * N + j];
        if (w == 0.0) continue;
        const double cij = Y.data[i * N + j];
        const double inv = 1.0 / (norm[i] * norm[j]);
        for (std::size_t c = 0; c < C; ++c) {
          gx.data[i * C + c] += w * (X.data[j * C + c] * inv - cij * X.data[i * C + c] / (norm[i] * norm[i]));
          gx.data[j * C + c] += w * (X.data[i * C + c] * inv - cij * X.data[j * C + c] / (norm[j] * norm[j]));
        }
      }
  });
}

Var cosine_rows(const Var& a, const Var& b) {
  require_same_shape(a, b, "cosine_rows");
  const std::size_t N = a.value().rows(), C = a.value().cols();
  const Tensor& A = a.value();
  const Tensor& Bv = b.value();
  std::vector<double> na(N), nb(N);
  Tensor Y({N});
  for (std::size_t i = 0; i < N; ++i) {
    double sa = cosine_eps(), sb = cosine_eps(), d = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      sa += A.data[i * C + c] * A.data[i * C + c];
      sb += Bv.data[i * C + c] * Bv.data[i * C + c];
      d += A.data[i * C + c] * Bv.data[i * C + c];
    }
    na[i] = std::sqrt(sa);
    nb[i] = std::sqrt(sb);
    Y.data[i] = d / (na[i] * nb[i]);
  }
  int ia = a.id(), ib = b.id();
  return a.graph().make(std::move(Y), {a, b}, [ia, ib, na = std::move(na), nb = std::move(nb), N, C](Graph& g, int self) {
    const Tensor& gy = g.grad_buffer(self);
    const Tensor& A = g.value(ia);
    const Tensor& Bv = g.value(ib);
    const Tensor& Y = g.value(self);
    Tensor* ga = g.requires_grad(ia) ? &g.grad_buffer(ia) : nullptr;
    Tensor* gb = g.requires_grad(ib) ? &g.grad_buffer(ib) : nullptr;
    for (std::size_t i = 0; i < N; ++i) {
      const double w = gy.data[i], cs = Y.data[i], inv = 1.0 / (na[i] * nb[i]);
      for (std::size_t c = 0; c < C; ++c) {
        if (ga) ga->data[i * C + c] += w * (Bv.data[i * C + c] * inv - cs * A.data[i * C + c] / (na[i] * na[i]));
        if (gb) gb->data[i * C + c] += w * (A.data[i * C + c] * inv - cs * Bv.data[i * C + c] / (nb[i] * nb[i]));
      }
    }
  });
}

Var triplet_hinge(const Var& cos, const std::vector<Triplet>& triplets, double margin) {
  require_rank(cos, 2, "triplet_hinge");
  const std::size_t N = cos.shape()[0];
  double total = 0.0;
  std::vector<std::uint8_t> active(triplets.size(), 0);
  for (std::size_t n = 0; n < triplets.size(); ++n) {
    const auto [i, j, k] = triplets[n];
    const double term = margin - cos.value().data[i * N + j] + cos.value().data[i * N + k];
    if (term > 0.0) {
      total += term;
      active[n] = 1;
    }
  }
  const double denom = triplets.empty() ? 1.0 : static_cast<double>(triplets.size());
  int ic = cos.id();
  return cos.graph().make(scalar(total / denom), {cos}, [ic, triplets, active, denom, N](Graph& g, int self) {
    const double gy = g.grad_buffer(self)[0] / denom;
    Tensor& gc = g.grad_buffer(ic);
    for (std::size_t n = 0; n < triplets.size(); ++n) {
      if (!active[n]) continue;
      const auto [i, j, k] = triplets[n];
      gc.data[i * N + j] -= gy;
      gc.data[i * N + k] += gy;
    }
  });
}

Var pair_matrix(const std::vector<Var>& entries, std::size_t m) {
  if (entries.size() != m * m) throw std::invalid_argument("pair_matrix: need m*m entries");
  std::size_t B = 0;
  std::vector<Var> parents;
  std::vector<int> ids(m * m, -1);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      if (i == j) continue;
      const Var& e = entries[i * m + j];
      if (!e.valid()) throw std::invalid_argument("pair_matrix: missing off-diagonal entry");
      if (B == 0) B = e.value().size();
      if (e.value().size() != B) throw std::invalid_argument("pair_matrix: entry batch mismatch");
      ids[i * m + j] = e.id();
      parents.push_back(e);
    }
  Tensor Y({B, m, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      if (i == j) continue;
      const Tensor& e = entries[i * m + j].value();
      for (std::size_t b = 0; b < B; ++b) Y.data[(b * m + i) * m + j] = e.data[b];
    }
  return parents[0].graph().make(std::move(Y), parents, [ids, B, m](Graph& g, int self) {
    const Tensor& gy = g.grad_buffer(self);
    for (std::size_t p = 0; p < m * m; ++p) {
      if (ids[p] < 0 || !g.requires_grad(ids[p])) continue;
      Tensor& ge = g.grad_buffer(ids[p]);
      for (std::size_t b = 0; b < B; ++b) ge.data[b] += gy.data[b * m * m + p];
    }
  });
}

Var column_softmax_offdiag(const Var& raw) {
  require_rank(raw, 3, "column_softmax_offdiag");
  const std::size_t B = raw.shape()[0], M = raw.shape()[1];
  if (raw.shape()[2] != M || M < 2) throw std::invalid_argument("column_softmax_offdiag: expects [B x M x M], M >= 2");
  Tensor Y({B, M, M});
  const Tensor& R = raw.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < M; ++j) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < M; ++i)
        if (i != j) mx = std::max(mx, R.data[(b * M + i) * M + j]);
      double z = 0.0;
      for (std::size_t i = 0; i < M; ++i)
        if (i != j) z += (Y.data[(b * M + i) * M + j] = std::exp(R.data[(b * M + i) * M + j] - mx));
      for (std::size_t i = 0; i < M; ++i)
        if (i != j) Y.data[(b * M + i) * M + j] /= z;
    }
  int ir = raw.id();
  return raw.graph().make(std::move(Y), {raw}, [ir, B, M](Graph& g, int self) {
    const Tensor& gy = g.grad_buffer(self);
    const Tensor& Y = g.value(self);
    Tensor& gr = g.grad_buffer(ir);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < M; ++j) {
        double dot = 0.0;
        for (std::size_t i = 0; i < M; ++i)
          if (i != j) dot += Y.data[(b * M + i) * M + j] * gy.data[(b * M + i) * M + j];
        for (std::size_t i = 0; i < M; ++i)
          if (i != j) {
            const std::size_t p = (b * M + i) * M + j;
            gr.data[p] += Y.data[p] * (gy.data[p] - dot);
          }
      }
  });
}

Var l1_loss(const Var& pred, const std::vector<double>& target) {
  if (pred.value().size() != target.size()) throw std::invalid_argument("l1_loss: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) s += std::fabs(pred.value()[i] - target[i]);
  const double n = static_cast<double>(target.size());
  int ip = pred.id();
  return pred.graph().make(scalar(s / n), {pred}, [ip, target, n](Graph& g, int self) {
    const double gy = g.grad_buffer(self)[0] / n;
    const Tensor& p = g.value(ip);
    Tensor& gp = g.grad_buffer(ip);
    for (std::size_t i = 0; i < target.size(); ++i) {
      const double d = p[i] - target[i];
      gp[i] += gy * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0));
    }
  });
}

Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t N = logits.shape()[0], K = logits.shape()[1];
  if (labels.size() != N) throw std::invalid_argument("cross_entropy: label count mismatch");
  std::vector<double> probs(N * K);
  double loss = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= K)
      throw std::invalid_argument("cross_entropy: label out of range");
    const double* l = &logits.value().data[i * K];
    const double mx = *std::max_element(l, l + K);
    double z = 0.0;
    for (std::size_t c = 0; c < K; ++c) z += (probs[i * K + c] = std::exp(l[c] - mx));
    for (std::size_t c = 0; c < K; ++c) probs[i * K + c] /= z;
    loss -= std::log(probs[i * K + labels[i]]);
  }
  int il = logits.id();
  return logits.graph().make(scalar(loss / static_cast<double>(N)), {logits},
                             [il, probs = std::move(probs), labels, N, K](Graph& g, int self) {
    const double gy = g.grad_buffer(self)[0] / static_cast<double>(N);
    Tensor& gl = g.grad_buffer(il);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t c = 0; c < K; ++c)
        gl.data[i * K + c] += gy * (probs[i * K + c] - (static_cast<int>(c) == labels[i] ? 1.0 : 0.0));
  });
}

Var masked_sq_err(const Var& a, const Var& b, const Mask& mask) {
  require_same_shape(a, b, "masked_sq_err");
  check_mask(a, mask, "masked_sq_err");
  const std::size_t C = a.shape()[2];
  const double n = static_cast<double>(mask.count());
  if (n == 0) throw std::invalid_argument("masked_sq_err: no valid steps");
  double s = 0.0;
  for (std::size_t r = 0; r < mask.valid.size(); ++r) {
    if (!mask.valid[r]) continue;
    for (std::size_t c = 0; c < C; ++c) {
      const double d = a.value().data[r * C + c] - b.value().data[r * C + c];
      s += d * d;
    }
  }
  int ia = a.id(), ib = b.id();
  auto valid = mask.valid;
  return a.graph().make(scalar(s / n), {a, b}, [ia, ib, valid, C, n](Graph& g, int self) {
    const double gy = g.grad_buffer(self)[0];
    const Tensor& A = g.value(ia);
    const Tensor& Bv = g.value(ib);
    Tensor* ga = g.requires_grad(ia) ? &g.grad_buffer(ia) : nullptr;
    Tensor* gb = g.requires_grad(ib) ? &g.grad_buffer(ib) : nullptr;
    for (std::size_t r = 0; r < valid.size(); ++r) {
      if (!valid[r]) continue;
      for (std::size_t c = 0; c < C; ++c) {
        const double d = 2.0 * gy * (A.data[r * C + c] - Bv.data[r * C + c]) / n;
        if (ga) ga->data[r * C + c] += d;
        if (gb) gb->data[r * C + c] -= d;
      }
    }
  });
}

}  // namespace ag
}  // namespace dhmd
