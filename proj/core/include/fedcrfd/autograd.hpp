#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedcrfd/optim.hpp"
#include "fedcrfd/tensor.hpp"

namespace fedcrfd {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid as long as the graph lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  Graph* graph() const noexcept { return graph_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Model-building primitives addressable by id.
enum class Primitive {
  kConv2d,
  kRelu,
  kLinear,
  kAdd,
  kAvgPool2x,
  kUpsample2x,
  kGlobalAvgPoolFlatten,
};

Primitive parse_primitive(std::string_view name);
std::string_view primitive_name(Primitive p);

struct PrimitiveAttrs {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// Latent-vector distance measures: mean absolute, root-mean-square, and 1 - cosine.
enum class Distance { kL1, kL2, kCosine };

Distance parse_distance(std::string_view name);
std::string_view distance_name(Distance d);

/// Append-only computation graph. Creation order is a topological order, so backward walks
/// the node list in reverse. Not thread-safe; one graph belongs to one logical client.
class Graph {
 public:
  Graph();
  ~Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value);
  /// Leaf that receives a gradient (readable through Var::grad after backward).
  Var input(Tensor value);
  /// Leaf bound to a parameter; backward accumulates into Parameter::grad.
  Var param(Parameter& p);

  /// Populates gradients of every node reachable from `root`. `root` must hold one element.
  void backward(Var root);

  const Tensor& value(Var v) const;
  const Tensor& grad(Var v) const;
  std::size_t size() const noexcept;

  /// Hash of the sign pattern of every non-smooth site (ReLU inputs, |.| arguments, clamps).
  /// Two evaluations with equal signatures lie on the same smooth piece.
  std::uint64_t kink_signature() const;
  /// Smallest distance of any non-smooth site to its kink.
  double min_kink_margin() const;
  std::size_t kink_site_count() const;

  // Node construction used by the op library.
  struct Node;
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;
  Var make_node(std::string_view op, std::vector<Var> parents, Tensor value, BackwardFn backward);
  void add_kink_site(Var node, const Tensor* signed_distance);
  Node& node(std::size_t id);
  const Node& node(std::size_t id) const;
  bool requires_grad(Var v) const;
  /// Gradient buffer of `v`, allocated on first use.
  Tensor& grad_buffer(Var v);
  /// Stores an auxiliary tensor on the node (kept alive with the graph); returns a stable pointer.
  const Tensor* keep(Var v, Tensor t);

 private:
  std::vector<std::unique_ptr<Node>> nodes_;
  struct KinkSite {
    const Tensor* values;
  };
  std::vector<KinkSite> kinks_;
};

// ---- primitives -----------------------------------------------------------

/// Generic entry point; inputs are ordered as documented on each typed function below.
Var apply_primitive(Primitive kind, std::span<const Var> inputs, const PrimitiveAttrs& attrs = {});

/// x: N x C x H x W, weight: O x C x k x k, bias: O (optional, pass an invalid Var to omit).
Var conv2d(Var x, Var weight, Var bias, const PrimitiveAttrs& attrs = {});
Var relu(Var x);
/// x: N x in, weight: out x in, bias: out.
Var linear(Var x, Var weight, Var bias);
Var add(Var a, Var b);
Var avg_pool_2x(Var x);
/// Nearest-neighbour 2x upsampling.
Var upsample_2x(Var x);
/// N x C x H x W -> N x C channel means.
Var global_avg_pool_flatten(Var x);

// ---- elementwise / reductions ----------------------------------------------

Var sub(Var a, Var b);
Var scale(Var a, double s);
Var sum(Var a);
Var mean(Var a);
/// min(x, cap) elementwise.
Var clamp_max(Var x, double cap);
/// Scalar <x, g> with g held constant. Injects an externally computed gradient g into x.
Var dot_const(Var x, const Tensor& g);
/// Row-wise distance between two N x d matrices, giving a length-N vector.
Var row_distance(Var a, Var b, Distance measure);

// ---- losses ----------------------------------------------------------------

/// Mean absolute difference over all elements; subgradient of |.| at 0 is 0.
Var l1_loss(Var a, Var b);
/// Mean over the batch of -log softmax(logits)[true class]. `one_hot` is N x J.
Var softmax_cross_entropy(Var logits, const Tensor& one_hot);

/// Row-wise softmax of an N x J tensor (no graph).
Tensor softmax_rows(const Tensor& logits);

}  // namespace fedcrfd
