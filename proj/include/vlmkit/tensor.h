#pragma once

// Dense row-major float64 tensors with reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared node. Operations whose inputs
// require gradients record their parents and a backward rule on the output
// node; backward() walks the recorded graph in reverse topological order.
// Leaf gradients accumulate until zero_grad() is called explicitly.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "vlmkit/error.h"

namespace vlmkit {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t dim(std::size_t axis) const;

  std::span<const double> data() const;
  // In-place parameter updates (optimizer steps, initialisation, loading).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Deep copy of the values as a new leaf.
  Tensor detach() const;

  // Identity of the underlying node (two handles onto the same tensor).
  bool same(const Tensor& other) const { return node_ == other.node_; }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until first accumulation
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---- operations ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// x * s where s holds a single element (gates, learned scalars).
Tensor scale_by(const Tensor& x, const Tensor& s);
// Trailing-axis broadcast: v has as many elements as x's last extent.
Tensor add_trailing(const Tensor& x, const Tensor& v);
Tensor mul_trailing(const Tensor& x, const Tensor& v);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
// Divides each column of a 2-D tensor by its Euclidean norm.
Tensor normalize_columns(const Tensor& x);
// Euclidean norm of each column of a 2-D tensor, shape [cols].
Tensor column_norms(const Tensor& x);

// out.flat[i] = x.flat[index[i]]; gradients scatter-add back.
Tensor reindex(const Tensor& x, std::span<const std::size_t> index, Shape out_shape);
// Row lookup into a 2-D table (embeddings).
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows);
Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);

// Mean negative log-likelihood of targets under row-wise softmax(logits),
// restricted to positions where mask == 1.
Tensor cross_entropy_masked(const Tensor& logits, std::span<const std::size_t> targets,
                            std::span<const uint8_t> mask);

// Populates grads of every requires_grad tensor reachable from loss.
void backward(const Tensor& loss);

// Max coordinate-wise relative error between analytic and central-difference
// gradients of f at x. Denominator is max(|analytic|, |numeric|, 1e-8).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double h = 1e-5);

// Same check over coordinates of parameters that a closure reads in place.
// `coords_per_param` == 0 checks every coordinate; otherwise a seeded subset.
double finite_diff_check_params(const std::function<Tensor()>& loss_fn,
                                std::span<const Tensor> params, double h = 1e-5,
                                std::size_t coords_per_param = 0, uint64_t seed = 0);

}  // namespace vlmkit
