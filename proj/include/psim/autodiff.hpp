#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace psim::autodiff {

class Tensor;
struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

/// Produces the gradients of a node's inputs given the gradient of its
/// output. `self` is the node being differentiated; backward rules are
/// themselves written in terms of the registered ops, so gradients stay
/// differentiable and second-order quantities come out of the same engine.
using BackwardFn =
    std::function<std::vector<Tensor>(const Tensor& upstream, const NodePtr& self)>;

/// One value in the computation graph: dense row-major 64-bit storage plus
/// the provenance needed for reverse traversal. Nodes are immutable once
/// created; graphs are rebuilt per step.
struct TensorNode {
  std::vector<int> shape;            // {} scalar, {n} vector, {r,c} matrix
  std::vector<double> values;        // row-major
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<NodePtr> inputs;
  BackwardFn backward;
};

/// Shared-ownership handle to a TensorNode. Cheap to copy; ops are free
/// functions returning new handles.
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor leaf(std::vector<int> shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  const std::vector<double>& values() const { return node_->values; }
  /// Mutable access for exclusively-owned leaves (optimizer state, crafted
  /// batches). Never call on a node that is part of a live graph.
  std::vector<double>& mutable_values() { return node_->values; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  size_t numel() const { return node_->values.size(); }
  /// Value of a 0-d tensor.
  double item() const;
  TensorNode* node() const { return node_.get(); }
  const NodePtr& ptr() const { return node_; }

private:
  NodePtr node_;
};

/// Scoped control of graph recording; ops executed while recording is off
/// produce constants. Used internally by grad(create_graph=false).
class GradMode {
public:
  explicit GradMode(bool enable);
  ~GradMode();
  GradMode(const GradMode&) = delete;
  GradMode& operator=(const GradMode&) = delete;

private:
  bool pushed_;
};

bool grad_enabled();

// Registered ops. Shapes are validated; mismatches throw std::invalid_argument
// naming the op and both shapes. All ops have backward rules expressed in
// registered ops, so any scalar built from them supports repeated backward.
Tensor add(const Tensor& a, const Tensor& b);   // same shape
Tensor sub(const Tensor& a, const Tensor& b);   // same shape
Tensor neg(const Tensor& a);
Tensor mul(const Tensor& a, const Tensor& b);   // elementwise, same shape
Tensor cmul(const Tensor& a, double c);         // scale by constant
Tensor matmul(const Tensor& a, const Tensor& b);  // {m,k} x {k,n}
Tensor transpose(const Tensor& a);
Tensor relu(const Tensor& a);  // d2/dx2 == 0 everywhere; subgradient 0 at 0
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);    // domain: positive values
Tensor recip(const Tensor& a);  // domain: nonzero values
Tensor row_sum(const Tensor& a);               // {r,c} -> {r}
Tensor col_sum(const Tensor& a);               // {r,c} -> {c}
Tensor tile_cols(const Tensor& v, int cols);   // {r} -> {r,cols}
Tensor tile_rows(const Tensor& v, int rows);   // {c} -> {rows,c}
Tensor sum(const Tensor& a);                   // any shape -> {}
Tensor broadcast_scalar(const Tensor& s, std::vector<int> shape);
Tensor dot(const Tensor& a, const Tensor& b);  // sum(mul(a, b))

/// Gradient with respect to an ordered parameter list: one segment per
/// parameter, in list order. Segments are Tensors so that gradients produced
/// under create_graph stay differentiable; value helpers below always read
/// the stored numbers and return detached results.
struct FlatGrad {
  std::vector<Tensor> segments;

  size_t total_dim() const;
  double dot(const FlatGrad& other) const;
  double norm_l2() const;
  double norm_linf() const;

  FlatGrad clone() const;  // deep value copy, constant leaves
  FlatGrad scaled(double c) const;
  FlatGrad plus(const FlatGrad& other) const;
  FlatGrad minus(const FlatGrad& other) const;
  void add_scaled_inplace(const FlatGrad& other, double c);  // owned leaves only
  void scale_inplace(double c);

  std::vector<double> flat() const;
  static FlatGrad zeros_like(const std::vector<Tensor>& params);
  static FlatGrad from_segments_values(const FlatGrad& like,
                                       const std::vector<std::vector<double>>& vals);
};

/// Reverse-mode gradient of a 0-d tensor with respect to `wrt`. Leaves not
/// reachable from `scalar` get zero segments. With create_graph the returned
/// segments carry provenance and can be differentiated again.
FlatGrad grad(const Tensor& scalar, const std::vector<Tensor>& wrt, bool create_graph);

/// Gradients of a 0-d tensor with respect to input leaves (e.g. pixels).
/// The scalar may contain parameter gradients built with create_graph, which
/// is how mixed terms like d/dx of dL/dtheta-dot-products are obtained.
std::vector<Tensor> input_grad(const Tensor& scalar, const std::vector<Tensor>& wrt_inputs);

/// grad_theta( grad_theta(loss_a) . grad_theta(loss_b) ), i.e. Ha*gb + Hb*ga.
FlatGrad grad_of_grad_dot(const Tensor& loss_a, const Tensor& loss_b,
                          const std::vector<Tensor>& params);

/// Hessian-vector product H*v of `loss` at the current parameter values,
/// with v held constant.
FlatGrad hvp(const Tensor& loss, const std::vector<Tensor>& params, const FlatGrad& v);

/// Differentiable scalar sum_i dot(a.seg[i], b.seg[i]).
Tensor dot_graph(const FlatGrad& a, const FlatGrad& b);

std::string shape_str(const std::vector<int>& s);

}  // namespace psim::autodiff
