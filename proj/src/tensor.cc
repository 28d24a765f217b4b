#include "vlmkit/tensor.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include "vlmkit/rng.h"

namespace vlmkit {

namespace {

thread_local bool g_grad_enabled = true;

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

NodePtr new_node(Shape shape, std::vector<double> data) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  return n;
}

// Wraps a computed value; records the backward rule when any input needs it.
Tensor record(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs,
              std::function<void(Node&)> backward_rule) {
  auto out = new_node(std::move(shape), std::move(data));
  if (!g_grad_enabled) return Tensor(out);
  bool needs = false;
  for (const Tensor* t : inputs) needs = needs || t->requires_grad();
  if (needs) {
    out->requires_grad = true;
    for (const Tensor* t : inputs) out->parents.push_back(t->node_ptr());
    out->backward = std::move(backward_rule);
  }
  return Tensor(out);
}

Tensor record_many(Shape shape, std::vector<double> data, std::span<const Tensor> inputs,
                   std::function<void(Node&)> backward_rule) {
  auto out = new_node(std::move(shape), std::move(data));
  if (!g_grad_enabled) return Tensor(out);
  bool needs = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.requires_grad(); });
  if (needs) {
    out->requires_grad = true;
    for (const Tensor& t : inputs) out->parents.push_back(t.node_ptr());
    out->backward = std::move(backward_rule);
  }
  return Tensor(out);
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor");
}

void require_rank2(const Tensor& t, const char* op) {
  require_defined(t, op);
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x k] += a[m x n] * b[k x n]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      c[i * k + p] += acc;
    }
  }
}

// c[k x n] += a[m x k]^T * b[m x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

std::size_t last_extent(const Tensor& x) { return x.shape().back(); }

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one extent");
  for (auto e : shape) {
    if (e < 1) throw ShapeError("tensor extents must be >= 1, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  auto n = new_node(std::move(shape), std::move(data));
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->data.size(); }
std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw AxisError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return node_->shape[axis];
}
std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  return node_->data[row * node_->shape.back() + col];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool value) { node_->requires_grad = value; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
std::span<double> Tensor::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}
void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return from(shape(), node_->data, false); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return record({m, n}, std::move(out), {&a, &b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      gemm_nt(self.grad.data(), pb.data.data(), pa.grad.data(), m, n, k);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      gemm_tn(pa.data.data(), self.grad.data(), pb.grad.data(), m, k, n);
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  const auto src = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = src[i * n + j];
  return record({n, m}, std::move(out), {&a}, [m, n](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) p.grad[i * n + j] += self.grad[j * m + i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return record(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return record(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return record(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.data[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  require_defined(a, "scale");
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return record(a.shape(), std::move(out), {&a}, [factor](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * factor;
  });
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
  require_defined(x, "scale_by");
  require_defined(s, "scale_by");
  if (s.numel() != 1) throw DimensionError("scale_by: scale must hold one element, got " + shape_str(s.shape()));
  const double f = s.data()[0];
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= f;
  return record(x.shape(), std::move(out), {&x, &s}, [](Node& self) {
    Node& px = *self.parents[0];
    Node& ps = *self.parents[1];
    const double f = ps.data[0];
    if (px.requires_grad) {
      px.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i] * f;
    }
    if (ps.requires_grad) {
      ps.ensure_grad();
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * px.data[i];
      ps.grad[0] += acc;
    }
  });
}

Tensor add_trailing(const Tensor& x, const Tensor& v) {
  require_defined(x, "add_trailing");
  require_defined(v, "add_trailing");
  const std::size_t n = last_extent(x);
  if (v.numel() != n) {
    throw DimensionError("add_trailing: vector " + shape_str(v.shape()) + " does not match last axis of " +
                         shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto vv = v.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += vv[i % n];
  return record(x.shape(), std::move(out), {&x, &v}, [n](Node& self) {
    Node& px = *self.parents[0];
    Node& pv = *self.parents[1];
    if (px.requires_grad) {
      px.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
    }
    if (pv.requires_grad) {
      pv.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pv.grad[i % n] += self.grad[i];
    }
  });
}

Tensor mul_trailing(const Tensor& x, const Tensor& v) {
  require_defined(x, "mul_trailing");
  require_defined(v, "mul_trailing");
  const std::size_t n = last_extent(x);
  if (v.numel() != n) {
    throw DimensionError("mul_trailing: vector " + shape_str(v.shape()) + " does not match last axis of " +
                         shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto vv = v.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vv[i % n];
  return record(x.shape(), std::move(out), {&x, &v}, [n](Node& self) {
    Node& px = *self.parents[0];
    Node& pv = *self.parents[1];
    if (px.requires_grad) {
      px.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i] * pv.data[i % n];
    }
    if (pv.requires_grad) {
      pv.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pv.grad[i % n] += self.grad[i] * px.data[i];
    }
  });
}

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return record({1}, {acc}, {&x}, [](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (auto& g : p.grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor tanh(const Tensor& x) {
  require_defined(x, "tanh");
  std::vector<double> out(x.numel());
  const auto src = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(src[i]);
  return record(x.shape(), std::move(out), {&x}, [](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double y = self.data[i];
      p.grad[i] += self.grad[i] * (1.0 - y * y);
    }
  });
}

Tensor gelu(const Tensor& x) {
  require_defined(x, "gelu");
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  std::vector<double> out(x.numel());
  const auto src = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = src[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(c * (v + k * v * v * v)));
  }
  return record(x.shape(), std::move(out), {&x}, [](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double v = p.data[i];
      const double t = std::tanh(c * (v + k * v * v * v));
      const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * k * v * v);
      p.grad[i] += self.grad[i] * d;
    }
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  require_defined(x, "softmax");
  if (axis >= x.rank()) {
    throw AxisError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  }
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  std::vector<double> out(x.numel());
  const auto src = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, src[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(src[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  }
  return record(s, std::move(out), {&x}, [outer, inner, len](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j) dot += self.grad[base + j * inner] * self.data[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t idx = base + j * inner;
          p.grad[idx] += self.data[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_defined(x, "layer_norm");
  if (!(eps > 0.0)) throw ParameterError("layer_norm: eps must be > 0");
  const std::size_t n = last_extent(x);
  if (!gain.defined() || !bias.defined() || gain.numel() != n || bias.numel() != n) {
    throw ParameterError("layer_norm: gain/bias must have " + std::to_string(n) + " elements");
  }
  const std::size_t rows = x.numel() / n;
  const auto src = x.data(), g = gain.data(), b = bias.data();
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = src.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * rstd[r];
      xhat[r * n + j] = h;
      out[r * n + j] = h * g[j] + b[j];
    }
  }
  return record(x.shape(), std::move(out), {&x, &gain, &bias},
                [n, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                  Node& px = *self.parents[0];
                  Node& pg = *self.parents[1];
                  Node& pb = *self.parents[2];
                  if (pg.requires_grad) pg.ensure_grad();
                  if (pb.requires_grad) pb.ensure_grad();
                  if (px.requires_grad) px.ensure_grad();
                  std::vector<double> dxhat(n);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* dy = self.grad.data() + r * n;
                    const double* h = xhat.data() + r * n;
                    double mean_d = 0.0, mean_dh = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                      if (pg.requires_grad) pg.grad[j] += dy[j] * h[j];
                      if (pb.requires_grad) pb.grad[j] += dy[j];
                      dxhat[j] = dy[j] * pg.data[j];
                      mean_d += dxhat[j];
                      mean_dh += dxhat[j] * h[j];
                    }
                    if (!px.requires_grad) continue;
                    mean_d /= static_cast<double>(n);
                    mean_dh /= static_cast<double>(n);
                    for (std::size_t j = 0; j < n; ++j) {
                      px.grad[r * n + j] += rstd[r] * (dxhat[j] - mean_d - h[j] * mean_dh);
                    }
                  }
                });
}

Tensor normalize_columns(const Tensor& x) {
  require_rank2(x, "normalize_columns");
  const std::size_t m = x.dim(0), n = x.dim(1);
  const auto src = x.data();
  std::vector<double> norms(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) norms[j] += src[i * n + j] * src[i * n + j];
  for (auto& v : norms) {
    v = std::sqrt(v);
    if (v == 0.0) throw ParameterError("normalize_columns: zero-norm column");
  }
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = src[i * n + j] / norms[j];
  return record({m, n}, std::move(out), {&x}, [m, n, norms = std::move(norms)](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    std::vector<double> dot(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) dot[j] += self.grad[i * n + j] * self.data[i * n + j];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t k = i * n + j;
        p.grad[k] += (self.grad[k] - self.data[k] * dot[j]) / norms[j];
      }
  });
}

Tensor column_norms(const Tensor& x) {
  require_rank2(x, "column_norms");
  const std::size_t m = x.dim(0), n = x.dim(1);
  const auto src = x.data();
  std::vector<double> norms(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) norms[j] += src[i * n + j] * src[i * n + j];
  for (auto& v : norms) v = std::sqrt(v);
  return record({n}, std::move(norms), {&x}, [m, n](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (self.data[j] == 0.0) continue;
        p.grad[i * n + j] += self.grad[j] * p.data[i * n + j] / self.data[j];
      }
  });
}

Tensor reindex(const Tensor& x, std::span<const std::size_t> index, Shape out_shape) {
  require_defined(x, "reindex");
  if (shape_numel(out_shape) != index.size()) {
    throw DimensionError("reindex: index length " + std::to_string(index.size()) + " does not match " +
                         shape_str(out_shape));
  }
  const auto src = x.data();
  std::vector<double> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= src.size()) throw DimensionError("reindex: index out of range");
    out[i] = src[index[i]];
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return record(std::move(out_shape), std::move(out), {&x}, [idx = std::move(idx)](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) p.grad[idx[i]] += self.grad[i];
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows) {
  require_rank2(table, "gather_rows");
  if (rows.empty()) throw DimensionError("gather_rows: empty row list");
  const std::size_t r = table.dim(0), c = table.dim(1);
  std::vector<double> out(rows.size() * c);
  const auto src = table.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= r) {
      throw DimensionError("gather_rows: row " + std::to_string(rows[i]) + " out of range for " +
                           shape_str(table.shape()));
    }
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(rows[i] * c), c, out.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return record({rows.size(), c}, std::move(out), {&table}, [c, idx = std::move(idx)](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) p.grad[idx[i] * c + j] += self.grad[i * c + j];
  });
}

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
  require_rank2(x, "slice_rows");
  const std::size_t c = x.dim(1);
  if (count == 0 || start + count > x.dim(0)) {
    throw DimensionError("slice_rows: [" + std::to_string(start) + ", +" + std::to_string(count) +
                         ") out of range for " + shape_str(x.shape()));
  }
  const auto src = x.data();
  std::vector<double> out(src.begin() + static_cast<std::ptrdiff_t>(start * c),
                          src.begin() + static_cast<std::ptrdiff_t>((start + count) * c));
  return record({count, c}, std::move(out), {&x}, [start, c](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[start * c + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  require_rank2(x, "slice_cols");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (count == 0 || start + count > c) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(count) +
                         ") out of range for " + shape_str(x.shape()));
  }
  const auto src = x.data();
  std::vector<double> out(r * count);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = src[i * c + start + j];
  return record({r, count}, std::move(out), {&x}, [r, c, start, count](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < count; ++j) p.grad[i * c + start + j] += self.grad[i * count + j];
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  for (const auto& t : parts) require_rank2(t, "concat_rows");
  const std::size_t c = parts[0].dim(1);
  std::size_t rows = 0;
  for (const auto& t : parts) {
    if (t.dim(1) != c) {
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(t.shape()));
    }
    rows += t.dim(0);
  }
  std::vector<double> out;
  out.reserve(rows * c);
  for (const auto& t : parts) out.insert(out.end(), t.data().begin(), t.data().end());
  return record_many({rows, c}, std::move(out), parts, [](Node& self) {
    std::size_t offset = 0;
    for (auto& p : self.parents) {
      const std::size_t len = p->data.size();
      if (p->requires_grad) {
        p->ensure_grad();
        for (std::size_t i = 0; i < len; ++i) p->grad[i] += self.grad[offset + i];
      }
      offset += len;
    }
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  for (const auto& t : parts) require_rank2(t, "concat_cols");
  const std::size_t r = parts[0].dim(0);
  std::size_t cols = 0;
  for (const auto& t : parts) {
    if (t.dim(0) != r) {
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(t.shape()));
    }
    cols += t.dim(1);
  }
  std::vector<double> out(r * cols);
  std::size_t offset = 0;
  for (const auto& t : parts) {
    const std::size_t w = t.dim(1);
    const auto src = t.data();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * cols + offset + j] = src[i * w + j];
    offset += w;
  }
  return record_many({r, cols}, std::move(out), parts, [r, cols](Node& self) {
    std::size_t offset = 0;
    for (auto& p : self.parents) {
      const std::size_t w = p->shape[1];
      if (p->requires_grad) {
        p->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < w; ++j) p->grad[i * w + j] += self.grad[i * cols + offset + j];
      }
      offset += w;
    }
  });
}

Tensor cross_entropy_masked(const Tensor& logits, std::span<const std::size_t> targets,
                            std::span<const uint8_t> mask) {
  require_rank2(logits, "cross_entropy_masked");
  const std::size_t t_len = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != t_len || mask.size() != t_len) {
    throw DimensionError("cross_entropy_masked: logits " + shape_str(logits.shape()) + " with " +
                         std::to_string(targets.size()) + " targets and " + std::to_string(mask.size()) +
                         " mask entries");
  }
  std::size_t count = 0;
  for (std::size_t t = 0; t < t_len; ++t) {
    if (!mask[t]) continue;
    ++count;
    if (targets[t] >= vocab) {
      throw VocabularyError("cross_entropy_masked: target " + std::to_string(targets[t]) + " at position " +
                            std::to_string(t) + " is outside vocabulary of " + std::to_string(vocab));
    }
  }
  if (count == 0) throw EmptyLossError("cross_entropy_masked: mask selects no positions");

  const auto src = logits.data();
  std::vector<double> probs(t_len * vocab, 0.0);
  double total = 0.0;
  for (std::size_t t = 0; t < t_len; ++t) {
    if (!mask[t]) continue;
    const double* row = src.data() + t * vocab;
    double mx = -INFINITY;
    for (std::size_t v = 0; v < vocab; ++v) mx = std::max(mx, row[v]);
    double z = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) z += std::exp(row[v] - mx);
    const double lse = mx + std::log(z);
    total += lse - row[targets[t]];
    for (std::size_t v = 0; v < vocab; ++v) probs[t * vocab + v] = std::exp(row[v] - lse);
  }
  const double inv = 1.0 / static_cast<double>(count);
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  std::vector<uint8_t> mk(mask.begin(), mask.end());
  return record({1}, {total * inv}, {&logits},
                [vocab, inv, tg = std::move(tg), mk = std::move(mk), probs = std::move(probs)](Node& self) {
                  Node& p = *self.parents[0];
                  p.ensure_grad();
                  const double g = self.grad[0] * inv;
                  for (std::size_t t = 0; t < tg.size(); ++t) {
                    if (!mk[t]) continue;
                    for (std::size_t v = 0; v < vocab; ++v) p.grad[t * vocab + v] += g * probs[t * vocab + v];
                    p.grad[t * vocab + tg[t]] -= g;
                  }
                });
}

void backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (n->backward) n->grad.clear();
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

namespace {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw ParameterError("finite_diff_check: h must be > 0");
  Tensor probe = Tensor::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  Tensor y = f(probe);
  backward(y);
  std::vector<double> analytic(x.numel(), 0.0);
  if (probe.has_grad()) analytic.assign(probe.grad().begin(), probe.grad().end());

  NoGradGuard guard;
  double worst = 0.0;
  std::vector<double> buf(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const double orig = buf[i];
    buf[i] = orig + h;
    const double fp = f(Tensor::from(x.shape(), buf)).item();
    buf[i] = orig - h;
    const double fm = f(Tensor::from(x.shape(), buf)).item();
    buf[i] = orig;
    worst = std::max(worst, relative_error(analytic[i], (fp - fm) / (2.0 * h)));
  }
  return worst;
}

double finite_diff_check_params(const std::function<Tensor()>& loss_fn, std::span<const Tensor> params,
                                double h, std::size_t coords_per_param, uint64_t seed) {
  if (!(h > 0.0)) throw ParameterError("finite_diff_check_params: h must be > 0");
  std::vector<Tensor> ps(params.begin(), params.end());
  for (auto& p : ps) p.zero_grad();
  backward(loss_fn());

  Rng rng(seed);
  NoGradGuard guard;
  double worst = 0.0;
  for (auto& p : ps) {
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) analytic.assign(p.grad().begin(), p.grad().end());
    std::vector<std::size_t> coords;
    if (coords_per_param == 0 || coords_per_param >= p.numel()) {
      for (std::size_t i = 0; i < p.numel(); ++i) coords.push_back(i);
    } else {
      for (std::size_t k = 0; k < coords_per_param; ++k) coords.push_back(rng.below(p.numel()));
    }
    auto data = p.mutable_data();
    for (std::size_t i : coords) {
      const double orig = data[i];
      data[i] = orig + h;
      const double fp = loss_fn().item();
      data[i] = orig - h;
      const double fm = loss_fn().item();
      data[i] = orig;
      worst = std::max(worst, relative_error(analytic[i], (fp - fm) / (2.0 * h)));
    }
  }
  return worst;
}

}  // namespace vlmkit
