#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bbal/tensor.hpp"

namespace bbal {

/// Named tensors with gradient slots of identical shape. Frozen entries
/// keep a zero gradient forever.
class ParamSet {
 public:
  void add(std::string name, Tensor value, bool trainable);

  std::size_t size() const { return entries_.size(); }
  bool contains(std::string_view name) const;
  std::size_t index_of(std::string_view name) const;

  const std::string& name(std::size_t i) const { return entries_.at(i).name; }
  const Tensor& value(std::size_t i) const { return entries_.at(i).value; }
  Tensor& value(std::size_t i) { return entries_.at(i).value; }
  const Tensor& grad(std::size_t i) const { return entries_.at(i).grad; }
  Tensor& grad(std::size_t i) { return entries_.at(i).grad; }
  bool trainable(std::size_t i) const { return entries_.at(i).trainable; }

  const Tensor& value(std::string_view name) const { return value(index_of(name)); }
  Tensor& value(std::string_view name) { return value(index_of(name)); }
  const Tensor& grad(std::string_view name) const { return grad(index_of(name)); }

  void set_trainable(std::string_view name, bool trainable);
  void zero_grad();
  /// Replaces a value, keeping the declared shape.
  void assign(std::string_view name, Tensor value);

  std::size_t scalar_count() const;
  std::uint64_t checksum() const;

 private:
  struct Entry {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable;
  };
  std::vector<Entry> entries_;
};

using NodeId = std::size_t;

/// Source index table for `Graph::embed`: entry j >= 0 reads image column j,
/// entry j < 0 reads border element (-j - 1).
using EmbedIndex = std::shared_ptr<const std::vector<std::int64_t>>;

/// Forward record over a closed set of primitives. Nodes are appended in
/// evaluation order, which is a topological order, so `backward` replays
/// adjoints by walking the node list once in reverse.
///
/// Losses reduce by the mean over the leading (batch) axis.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  NodeId constant(Tensor value);
  /// Leaf bound to a ParamSet entry; gradients flow back only when the entry
  /// is trainable. The ParamSet must outlive the call to `backward`.
  NodeId parameter(ParamSet& params, std::string_view name);

  NodeId matmul(NodeId a, NodeId b);
  /// x[B x D] + bias[D], broadcast over rows.
  NodeId add_bias(NodeId x, NodeId bias);
  NodeId tanh(NodeId x);
  NodeId relu(NodeId x);
  NodeId reshape(NodeId x, Shape shape);
  NodeId sum(NodeId x);
  /// Elementwise product with a constant of the same shape.
  NodeId mul_constant(NodeId x, Tensor factor);
  NodeId clamp(NodeId x, double lo, double hi);
  /// out[b][j] = images[b][index[j]] or border[-index[j]-1]. `border` may be
  /// `no_node` when the index has no negative entries.
  NodeId embed(NodeId images, NodeId border, EmbedIndex index, std::size_t out_columns);

  NodeId softmax_cross_entropy(NodeId logits, std::span<const std::size_t> labels);
  /// -log of the label entry of normalize(map * softmax(logits)).
  NodeId mapped_nll(NodeId logits, std::span<const std::size_t> labels, const Tensor& map);
  /// -sum_j t_j log softmax(z)_j with the probability floored at 1e-12.
  NodeId soft_cross_entropy(NodeId logits, const Tensor& targets);
  /// sum_j |softmax(z)_j - t_j|^order, order 1 or 2.
  NodeId probability_distance(NodeId logits, const Tensor& targets, int order);
  /// sum_j |z_j - t_j|^order, order 1 or 2.
  NodeId logit_distance(NodeId logits, const Tensor& targets, int order);

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  /// Gradient of the last backward pass with respect to a node.
  const Tensor& grad(NodeId id) const;
  std::size_t node_count() const { return nodes_.size(); }

  /// Reverse pass from a scalar node. Accumulates into trainable ParamSet
  /// gradients. A graph supports exactly one backward pass.
  void backward(NodeId loss);

  static constexpr NodeId no_node = static_cast<NodeId>(-1);

 private:
  using Backward = std::function<void(Graph&, NodeId)>;

  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
    ParamSet* params = nullptr;
    std::size_t param_index = 0;
  };

  NodeId push(Tensor value, bool requires_grad, Backward backward);
  Node& node(NodeId id) { return nodes_.at(id); }
  /// Gradient slot of `id`, allocated on first use.
  Tensor& grad_slot(NodeId id);
  bool needs(NodeId id) const { return nodes_.at(id).requires_grad; }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace bbal
