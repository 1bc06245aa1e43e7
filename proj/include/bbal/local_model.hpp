#pragma once

#include <cstddef>
#include <cstdint>

#include "bbal/classifier.hpp"

namespace bbal {

/// Frozen feature encoder plus a trainable linear head.
///
/// The encoder is every hidden layer of a pretrained classifier; its
/// parameters are fixed at construction and only ever enter a graph as
/// constants. The head maps encoder features to `head_classes` logits.
class LocalModel {
 public:
  /// Fresh all-zero head of width `head_classes`.
  static LocalModel with_fresh_head(const Classifier& pretrained, std::size_t head_classes);
  /// Keeps the pretrained output layer as the head.
  static LocalModel with_pretrained_head(const Classifier& pretrained);

  LocalModel(Architecture encoder_arch, ParamSet encoder, ParamSet head);

  /// Architecture of the pretrained source network the encoder came from.
  const Architecture& encoder_architecture() const { return arch_; }
  std::size_t feature_dim() const { return arch_.feature_size(); }
  std::size_t head_classes() const { return head_.value("head.bias").size(); }
  std::size_t input_size() const { return arch_.input_size(); }

  const ParamSet& encoder() const { return encoder_; }
  const ParamSet& head() const { return head_; }
  ParamSet& head() { return head_; }
  void reset_head(std::size_t classes);
  std::uint64_t encoder_checksum() const { return encoder_.checksum(); }

  Tensor features(const Tensor& images) const;
  Tensor head_logits(const Tensor& features) const;
  Tensor logits(const Tensor& images) const { return head_logits(features(images)); }

  /// Records encoder and head on `graph` with everything frozen; gradients
  /// can still flow to whatever produced `rows` (e.g. a prompt).
  NodeId forward(Graph& graph, NodeId rows) const;
  /// Frozen encoder followed by the head as trainable leaves.
  NodeId forward_trainable_head(Graph& graph, NodeId rows);
  /// Head only, with trainable head leaves.
  NodeId head_forward(Graph& graph, NodeId features);

 private:
  NodeId encoder_forward(Graph& graph, NodeId rows) const;

  Architecture arch_;
  ParamSet encoder_;
  ParamSet head_;
};

}  // namespace bbal
