#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "geoformer/tensor.hpp"

namespace geoformer::diff {

class Tape;

/// One node of the computation graph. Immutable after forward; gradients are
/// accumulated during the reverse sweep.
struct Node {
  Tensor value;
  Tensor grad;  // allocated on demand, same shape as value
  bool requires_grad = false;
  std::function<void(Node&)> backward;  // accumulates into parents
  std::string op_name;

  void ensure_grad() {
    if (grad.numel() == 0) grad = Tensor(value.shape());
  }
};

/// Lightweight handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, Node* node) : tape_(tape), node_(node) {}

  const Tensor& value() const { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  const std::vector<size_t>& shape() const { return node_->value.shape(); }
  size_t numel() const { return node_->value.numel(); }
  Node* node() const { return node_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return node_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  Node* node_ = nullptr;
};

/// Owns the nodes of one computation graph, in creation order. The reverse
/// sweep walks creation order backwards, so the graph must be built
/// topologically (which any forward evaluation does by construction).
class Tape {
 public:
  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Node* new_node(Tensor value, bool requires_grad, std::string op_name);

  /// Reverse sweep seeded with d(root)/d(root) = 1. Root must be scalar.
  void backward(const Var& root);

  size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::unique_ptr<Node>> nodes_;
};

// Number of worker threads used by the heavy kernels (matmul, conv). Every
// output element is written by exactly one thread, so results are
// bit-identical for any thread count.
void set_num_threads(int n);
int num_threads();

// ----- operator set -----------------------------------------------------

// b's shape must equal a's shape or be a suffix of it (bias broadcast over
// leading batch axes).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);          // elementwise, same shape
Var scalar_mul(Var a, double c);
Var add_const(Var a, const Tensor& c);  // non-learnable additive bias, suffix broadcast

// [M,K]x[K,N], [B,M,K]x[K,N] or [B,M,K]x[B,K,N]
Var matmul(Var a, Var b);
Var transpose_last2(Var a);     // swap the last two axes (rank 2 or 3)
Var reshape(Var a, std::vector<size_t> shape);

Var softmax_last(Var a);
Var layernorm_last(Var x, Var gamma, Var beta, double eps = 1e-5);
Var relu(Var a);
Var sigmoid(Var a);
Var gelu(Var a);                // tanh approximation
Var log_op(Var a);
Var exp_op(Var a);
Var square(Var a);

Var mean_all(Var a);            // -> shape [1]
Var mean_last(Var a);           // mean over the last axis
Var gather_rows(Var a, std::vector<size_t> indices);  // a: [N, D] -> [M, D]
Var slice_last(Var a, size_t start, size_t len);
Var concat_last(const std::vector<Var>& parts);
Var cyclic_shift2d(Var a, long dy, long dx);  // a: [H, W, C], toroidal roll

// Elementwise Huber with fixed transition delta; |e|<delta -> e^2/(2 delta),
// else |e| - delta/2. Gradient magnitude is clipped to 1.
Var huber(Var pred, Var target, double delta);

// x: [B,C,H,W], w: [O,C,kh,kw], b: [O]; zero padding.
Var conv2d(Var x, Var w, Var b, size_t stride, size_t pad);

// ----- gradient verification ---------------------------------------------

struct GradCheckLeafReport {
  size_t leaf_index = 0;
  double max_rel_err = 0.0;
  size_t worst_element = 0;
  bool finite = true;
};

struct GradCheckReport {
  std::vector<GradCheckLeafReport> leaves;
  double max_rel_err = 0.0;
  bool all_finite = true;
  bool pass(double tol) const { return all_finite && max_rel_err < tol; }
};

/// Central finite differences against the analytic gradient. `f` must build a
/// scalar-valued graph from the supplied leaves (which carry requires_grad).
GradCheckReport grad_check(
    const std::function<Var(Tape&, std::vector<Var>&)>& f,
    const std::vector<Tensor>& leaf_values, double eps = 1e-5, double tol = 1e-3);

}  // namespace geoformer::diff
