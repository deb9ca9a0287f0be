#include "psim/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace psim::autodiff {

namespace {

thread_local int g_nograd_depth = 0;

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

size_t numel_of(const std::vector<int>& shape) {
  size_t n = 1;
  for (const int d : shape) n *= static_cast<size_t>(d);
  return n;
}

[[noreturn]] void shape_error(const char* op, const std::vector<int>& a,
                              const std::vector<int>& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                              shape_str(a) + " vs " + shape_str(b));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
}

void require_matrix(const char* op, const Tensor& a) {
  if (a.shape().size() != 2)
    throw std::invalid_argument(std::string(op) + ": expected a matrix, got " +
                                shape_str(a.shape()));
}

void require_vector(const char* op, const Tensor& a) {
  if (a.shape().size() != 1)
    throw std::invalid_argument(std::string(op) + ": expected a vector, got " +
                                shape_str(a.shape()));
}

/// Builds an op node. Provenance is recorded only while grad recording is on
/// and at least one input participates in differentiation; otherwise the
/// result is a plain constant.
Tensor make_op(const char* op, std::vector<int> shape, std::vector<double> values,
               std::vector<Tensor> inputs, BackwardFn backward) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->op = op;
  bool needs_grad = false;
  if (grad_enabled()) {
    for (const Tensor& t : inputs) needs_grad = needs_grad || t.requires_grad();
  }
  if (needs_grad) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (Tensor& t : inputs) node->inputs.push_back(t.ptr());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

Tensor wrap(const NodePtr& p) { return Tensor(p); }

Tensor constant_like(const std::vector<int>& shape, std::vector<double> values) {
  return Tensor::leaf(shape, std::move(values), false);
}

}  // namespace

std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << '{';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << '}';
  return os.str();
}

Tensor Tensor::leaf(std::vector<int> shape, std::vector<double> values,
                    bool requires_grad) {
  if (values.size() != numel_of(shape))
    throw std::invalid_argument("leaf: value count " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad && grad_enabled();
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return leaf({}, {v}, requires_grad);
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  const size_t n = numel_of(shape);
  return leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

double Tensor::item() const {
  if (!node_ || !node_->shape.empty())
    throw std::invalid_argument("item: tensor is not 0-d");
  return node_->values[0];
}

GradMode::GradMode(bool enable) : pushed_(!enable) {
  if (pushed_) ++g_nograd_depth;
}

GradMode::~GradMode() {
  if (pushed_) --g_nograd_depth;
}

bool grad_enabled() { return g_nograd_depth == 0; }

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_op("add", a.shape(), std::move(out), {a, b},
                 [](const Tensor& g, const NodePtr&) {
                   return std::vector<Tensor>{g, g};
                 });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_op("sub", a.shape(), std::move(out), {a, b},
                 [](const Tensor& g, const NodePtr& self) {
                   std::vector<Tensor> gs(2);
                   if (self->inputs[0]->requires_grad) gs[0] = g;
                   if (self->inputs[1]->requires_grad) gs[1] = neg(g);
                   return gs;
                 });
}

Tensor neg(const Tensor& a) {
  std::vector<double> out(a.values());
  for (double& v : out) v = -v;
  return make_op("neg", a.shape(), std::move(out), {a},
                 [](const Tensor& g, const NodePtr&) {
                   return std::vector<Tensor>{neg(g)};
                 });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return make_op("mul", a.shape(), std::move(out), {a, b},
                 [](const Tensor& g, const NodePtr& self) {
                   std::vector<Tensor> gs(2);
                   if (self->inputs[0]->requires_grad)
                     gs[0] = mul(g, wrap(self->inputs[1]));
                   if (self->inputs[1]->requires_grad)
                     gs[1] = mul(g, wrap(self->inputs[0]));
                   return gs;
                 });
}

Tensor cmul(const Tensor& a, double c) {
  std::vector<double> out(a.values());
  for (double& v : out) v *= c;
  return make_op("cmul", a.shape(), std::move(out), {a},
                 [c](const Tensor& g, const NodePtr&) {
                   return std::vector<Tensor>{cmul(g, c)};
                 });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix("matmul", a);
  require_matrix("matmul", b);
  const int m = a.shape()[0], k = a.shape()[1];
  const int k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2) shape_error("matmul", a.shape(), b.shape());
  std::vector<double> out(static_cast<size_t>(m) * n);
  CMapMat ma(a.values().data(), m, k);
  CMapMat mb(b.values().data(), k, n);
  MapMat mo(out.data(), m, n);
  mo.noalias() = ma * mb;
  return make_op("matmul", {m, n}, std::move(out), {a, b},
                 [](const Tensor& g, const NodePtr& self) {
                   std::vector<Tensor> gs(2);
                   Tensor a_in = wrap(self->inputs[0]);
                   Tensor b_in = wrap(self->inputs[1]);
                   if (self->inputs[0]->requires_grad)
                     gs[0] = matmul(g, transpose(b_in));
                   if (self->inputs[1]->requires_grad)
                     gs[1] = matmul(transpose(a_in), g);
                   return gs;
                 });
}

Tensor transpose(const Tensor& a) {
  require_matrix("transpose", a);
  const int r = a.shape()[0], c = a.shape()[1];
  std::vector<double> out(a.values().size());
  CMapMat ma(a.values().data(), r, c);
  MapMat mo(out.data(), c, r);
  mo = ma.transpose();
  return make_op("transpose", {c, r}, std::move(out), {a},
                 [](const Tensor& g, const NodePtr&) {
                   return std::vector<Tensor>{transpose(g)};
                 });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.values());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return make_op("relu", a.shape(), std::move(out), {a},
                 [](const Tensor& g, const NodePtr& self) {
                   // Mask is a constant: second derivative is zero everywhere.
                   const auto& av = self->inputs[0]->values;
                   std::vector<double> mask(av.size());
                   for (size_t i = 0; i < av.size(); ++i)
                     mask[i] = av[i] > 0.0 ? 1.0 : 0.0;
                   Tensor m = constant_like(self->inputs[0]->shape, std::move(mask));
                   return std::vector<Tensor>{mul(g, m)};
                 });
}

Tensor exp(const Tensor& a) {
  std::vector<double> out(a.values());
  for (double& v : out) v = std::exp(v);
  return make_op("exp", a.shape(), std::move(out), {a},
                 [](const Tensor& g, const NodePtr& self) {
                   return std::vector<Tensor>{mul(g, wrap(self))};
                 });
}

Tensor log(const Tensor& a) {
  std::vector<double> out(a.values());
  for (double& v : out) v = std::log(v);
  return make_op("log", a.shape(), std::move(out), {a},
                 [](const Tensor& g, const NodePtr& self) {
                   return std::vector<Tensor>{mul(g, recip(wrap(self->inputs[0])))};
                 });
}

Tensor recip(const Tensor& a) {
  std::vector<double> out(a.values());
  for (double& v : out) v = 1.0 / v;
  return make_op("recip", a.shape(), std::move(out), {a},
                 [](const Tensor& g, const NodePtr& self) {
                   Tensor r = wrap(self);
                   return std::vector<Tensor>{neg(mul(g, mul(r, r)))};
                 });
}

Tensor row_sum(const Tensor& a) {
  require_matrix("row_sum", a);
  const int r = a.shape()[0], c = a.shape()[1];
  std::vector<double> out(static_cast<size_t>(r), 0.0);
  const auto& av = a.values();
  for (int i = 0; i < r; ++i) {
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += av[static_cast<size_t>(i) * c + j];
    out[static_cast<size_t>(i)] = s;
  }
  return make_op("row_sum", {r}, std::move(out), {a},
                 [c](const Tensor& g, const NodePtr&) {
                   return std::vector<Tensor>{tile_cols(g, c)};
                 });
}

Tensor col_sum(const Tensor& a) {
  require_matrix("col_sum", a);
  const int r = a.shape()[0], c = a.shape()[1];
  std::vector<double> out(static_cast<size_t>(c), 0.0);
  const auto& av = a.values();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<size_t>(j)] += av[static_cast<size_t>(i) * c + j];
  return make_op("col_sum", {c}, std::move(out), {a},
                 [r](const Tensor& g, const NodePtr&) {
                   return std::vector<Tensor>{tile_rows(g, r)};
                 });
}

Tensor tile_cols(const Tensor& v, int cols) {
  require_vector("tile_cols", v);
  const int r = v.shape()[0];
  std::vector<double> out(static_cast<size_t>(r) * cols);
  const auto& vv = v.values();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < cols; ++j) out[static_cast<size_t>(i) * cols + j] = vv[static_cast<size_t>(i)];
  return make_op("tile_cols", {r, cols}, std::move(out), {v},
                 [](const Tensor& g, const NodePtr&) {
                   return std::vector<Tensor>{row_sum(g)};
                 });
}

Tensor tile_rows(const Tensor& v, int rows) {
  require_vector("tile_rows", v);
  const int c = v.shape()[0];
  std::vector<double> out(static_cast<size_t>(rows) * c);
  const auto& vv = v.values();
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<size_t>(i) * c + j] = vv[static_cast<size_t>(j)];
  return make_op("tile_rows", {rows, c}, std::move(out), {v},
                 [](const Tensor& g, const NodePtr&) {
                   return std::vector<Tensor>{col_sum(g)};
                 });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (const double v : a.values()) s += v;
  return make_op("sum", {}, {s}, {a},
                 [](const Tensor& g, const NodePtr& self) {
                   return std::vector<Tensor>{
                       broadcast_scalar(g, self->inputs[0]->shape)};
                 });
}

Tensor broadcast_scalar(const Tensor& s, std::vector<int> shape) {
  if (!s.shape().empty())
    throw std::invalid_argument("broadcast_scalar: source is not 0-d, got " +
                                shape_str(s.shape()));
  const size_t n = numel_of(shape);
  std::vector<double> out(n, s.values()[0]);
  return make_op("broadcast_scalar", std::move(shape), std::move(out), {s},
                 [](const Tensor& g, const NodePtr&) {
                   return std::vector<Tensor>{sum(g)};
                 });
}

Tensor dot(const Tensor& a, const Tensor& b) {
  require_same_shape("dot", a, b);
  return sum(mul(a, b));
}

// ---------------------------------------------------------------------------
// Backward traversal
// ---------------------------------------------------------------------------

namespace {

/// Post-order over the differentiable subgraph reachable from root. Each node
/// is visited exactly once; handles are owning so gradient graphs built under
/// create_graph keep the forward nodes they reference alive.
std::vector<NodePtr> topo_order(const NodePtr& root) {
  std::vector<NodePtr> order;
  std::unordered_set<TensorNode*> seen;
  // Iterative DFS; pair is (node, next input index to visit).
  std::vector<std::pair<NodePtr, size_t>> stack;
  if (root->requires_grad) {
    stack.emplace_back(root, 0);
    seen.insert(root.get());
  }
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->inputs.size()) {
      const NodePtr& child = node->inputs[idx++];
      if (child->requires_grad && !seen.count(child.get())) {
        seen.insert(child.get());
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

/// Runs one reverse pass from `scalar`, filling a node -> gradient map for
/// every differentiable node reached. Gradient arithmetic records provenance
/// only when create_graph is set.
std::unordered_map<TensorNode*, Tensor> backward_pass(const Tensor& scalar,
                                                      bool create_graph) {
  if (!scalar.defined() || !scalar.shape().empty())
    throw std::invalid_argument("grad: expected a 0-d scalar, got " +
                                (scalar.defined() ? shape_str(scalar.shape())
                                                  : std::string("undefined")));
  GradMode mode(create_graph);
  std::unordered_map<TensorNode*, Tensor> grads;
  if (!scalar.requires_grad()) return grads;

  const std::vector<NodePtr> order = topo_order(scalar.ptr());
  grads[scalar.node()] = Tensor::scalar(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const NodePtr& node = *it;
    if (!node->backward) continue;  // leaf
    const auto git = grads.find(node.get());
    if (git == grads.end()) continue;
    const Tensor upstream = git->second;
    std::vector<Tensor> input_grads = node->backward(upstream, node);
    if (input_grads.size() != node->inputs.size())
      throw std::logic_error(std::string("backward of ") + node->op +
                             " returned wrong grad count");
    for (size_t i = 0; i < node->inputs.size(); ++i) {
      TensorNode* in = node->inputs[i].get();
      if (!in->requires_grad || !input_grads[i].defined()) continue;
      auto slot = grads.find(in);
      if (slot == grads.end()) {
        grads.emplace(in, input_grads[i]);
      } else {
        slot->second = add(slot->second, input_grads[i]);
      }
    }
  }
  return grads;
}

}  // namespace

// ---------------------------------------------------------------------------
// FlatGrad
// ---------------------------------------------------------------------------

size_t FlatGrad::total_dim() const {
  size_t n = 0;
  for (const Tensor& t : segments) n += t.numel();
  return n;
}

double FlatGrad::dot(const FlatGrad& other) const {
  if (segments.size() != other.segments.size())
    throw std::invalid_argument("FlatGrad::dot: segment count mismatch");
  double s = 0.0;
  for (size_t k = 0; k < segments.size(); ++k) {
    const auto& a = segments[k].values();
    const auto& b = other.segments[k].values();
    if (a.size() != b.size())
      throw std::invalid_argument("FlatGrad::dot: segment dim mismatch");
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  }
  return s;
}

double FlatGrad::norm_l2() const { return std::sqrt(dot(*this)); }

double FlatGrad::norm_linf() const {
  double m = 0.0;
  for (const Tensor& t : segments)
    for (const double v : t.values()) m = std::max(m, std::fabs(v));
  return m;
}

FlatGrad FlatGrad::clone() const {
  FlatGrad out;
  out.segments.reserve(segments.size());
  for (const Tensor& t : segments)
    out.segments.push_back(Tensor::leaf(t.shape(), t.values(), false));
  return out;
}

FlatGrad FlatGrad::scaled(double c) const {
  FlatGrad out = clone();
  out.scale_inplace(c);
  return out;
}

FlatGrad FlatGrad::plus(const FlatGrad& other) const {
  FlatGrad out = clone();
  out.add_scaled_inplace(other, 1.0);
  return out;
}

FlatGrad FlatGrad::minus(const FlatGrad& other) const {
  FlatGrad out = clone();
  out.add_scaled_inplace(other, -1.0);
  return out;
}

void FlatGrad::add_scaled_inplace(const FlatGrad& other, double c) {
  if (segments.size() != other.segments.size())
    throw std::invalid_argument("FlatGrad::add_scaled_inplace: segment count mismatch");
  for (size_t k = 0; k < segments.size(); ++k) {
    auto& a = segments[k].mutable_values();
    const auto& b = other.segments[k].values();
    if (a.size() != b.size())
      throw std::invalid_argument("FlatGrad::add_scaled_inplace: segment dim mismatch");
    for (size_t i = 0; i < a.size(); ++i) a[i] += c * b[i];
  }
}

void FlatGrad::scale_inplace(double c) {
  for (Tensor& t : segments)
    for (double& v : t.mutable_values()) v *= c;
}

std::vector<double> FlatGrad::flat() const {
  std::vector<double> out;
  out.reserve(total_dim());
  for (const Tensor& t : segments)
    out.insert(out.end(), t.values().begin(), t.values().end());
  return out;
}

FlatGrad FlatGrad::zeros_like(const std::vector<Tensor>& params) {
  FlatGrad out;
  out.segments.reserve(params.size());
  for (const Tensor& p : params) out.segments.push_back(Tensor::zeros(p.shape()));
  return out;
}

FlatGrad FlatGrad::from_segments_values(const FlatGrad& like,
                                        const std::vector<std::vector<double>>& vals) {
  if (vals.size() != like.segments.size())
    throw std::invalid_argument("FlatGrad::from_segments_values: segment count mismatch");
  FlatGrad out;
  out.segments.reserve(vals.size());
  for (size_t k = 0; k < vals.size(); ++k)
    out.segments.push_back(Tensor::leaf(like.segments[k].shape(), vals[k], false));
  return out;
}

// ---------------------------------------------------------------------------
// Differentiation entry points
// ---------------------------------------------------------------------------

FlatGrad grad(const Tensor& scalar, const std::vector<Tensor>& wrt, bool create_graph) {
  auto grads = backward_pass(scalar, create_graph);
  FlatGrad out;
  out.segments.reserve(wrt.size());
  for (const Tensor& p : wrt) {
    const auto it = grads.find(p.node());
    if (it != grads.end()) {
      out.segments.push_back(it->second);
    } else {
      out.segments.push_back(Tensor::zeros(p.shape()));  // unreachable leaf
    }
  }
  return out;
}

std::vector<Tensor> input_grad(const Tensor& scalar, const std::vector<Tensor>& wrt_inputs) {
  FlatGrad g = grad(scalar, wrt_inputs, /*create_graph=*/false);
  return std::move(g.segments);
}

FlatGrad grad_of_grad_dot(const Tensor& loss_a, const Tensor& loss_b,
                          const std::vector<Tensor>& params) {
  if (!loss_a.requires_grad() && !loss_b.requires_grad())
    throw std::invalid_argument(
        "grad_of_grad_dot: neither loss carries differentiable provenance; "
        "build the losses from registered ops so inner gradients can use "
        "create_graph");
  FlatGrad ga = grad(loss_a, params, /*create_graph=*/true);
  FlatGrad gb = grad(loss_b, params, /*create_graph=*/true);
  const Tensor s = dot_graph(ga, gb);
  return grad(s, params, /*create_graph=*/false);
}

FlatGrad hvp(const Tensor& loss, const std::vector<Tensor>& params, const FlatGrad& v) {
  if (v.segments.size() != params.size())
    throw std::invalid_argument("hvp: vector segment count " +
                                std::to_string(v.segments.size()) +
                                " does not match param count " +
                                std::to_string(params.size()));
  for (size_t k = 0; k < params.size(); ++k)
    if (v.segments[k].numel() != params[k].numel())
      throw std::invalid_argument("hvp: vector dim mismatch in segment " +
                                  std::to_string(k));
  FlatGrad g = grad(loss, params, /*create_graph=*/true);
  const Tensor s = dot_graph(g, v.clone());
  return grad(s, params, /*create_graph=*/false);
}

Tensor dot_graph(const FlatGrad& a, const FlatGrad& b) {
  if (a.segments.size() != b.segments.size() || a.segments.empty())
    throw std::invalid_argument("dot_graph: segment count mismatch or empty");
  Tensor acc;
  for (size_t k = 0; k < a.segments.size(); ++k) {
    const Tensor term = dot(a.segments[k], b.segments[k]);
    acc = acc.defined() ? add(acc, term) : term;
  }
  return acc;
}

}  // namespace psim::autodiff
