#include "bbal/local_model.hpp"

#include <cmath>

#include "bbal/error.hpp"

namespace bbal {

namespace {

ParamSet zero_head(std::size_t features, std::size_t classes) {
  ParamSet head;
  head.add("head.weight", Tensor({features, classes}), true);
  head.add("head.bias", Tensor({classes}), true);
  return head;
}

ParamSet copy_encoder(const Classifier& pretrained) {
  ParamSet enc;
  for (std::size_t l = 0; l < pretrained.architecture().hidden.size(); ++l) {
    enc.add(layer_weight_name(l), pretrained.params().value(layer_weight_name(l)), false);
    enc.add(layer_bias_name(l), pretrained.params().value(layer_bias_name(l)), false);
  }
  return enc;
}

}  // namespace

LocalModel LocalModel::with_fresh_head(const Classifier& pretrained, std::size_t head_classes) {
  if (head_classes < 2) throw Error(ErrorCode::configuration, "head needs at least 2 classes");
  return LocalModel(pretrained.architecture(), copy_encoder(pretrained),
                    zero_head(pretrained.architecture().feature_size(), head_classes));
}

LocalModel LocalModel::with_pretrained_head(const Classifier& pretrained) {
  const std::size_t last = pretrained.architecture().hidden.size();
  ParamSet head;
  head.add("head.weight", pretrained.params().value(layer_weight_name(last)), true);
  head.add("head.bias", pretrained.params().value(layer_bias_name(last)), true);
  return LocalModel(pretrained.architecture(), copy_encoder(pretrained), std::move(head));
}

LocalModel::LocalModel(Architecture encoder_arch, ParamSet encoder, ParamSet head)
    : arch_(std::move(encoder_arch)), encoder_(std::move(encoder)), head_(std::move(head)) {
  arch_.validate();
  if (encoder_.size() != 2 * arch_.hidden.size()) throw Error(ErrorCode::invalid_input, "encoder parameter count mismatch");
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    if (encoder_.trainable(i)) encoder_.set_trainable(encoder_.name(i), false);
  }
  const Tensor& w = head_.value("head.weight");
  const Tensor& b = head_.value("head.bias");
  if (w.rank() != 2 || w.dim(0) != feature_dim() || b.rank() != 1 || b.size() != w.dim(1)) {
    throw Error(ErrorCode::invalid_input, "head shape does not match encoder feature width");
  }
}

void LocalModel::reset_head(std::size_t classes) {
  if (classes < 2) throw Error(ErrorCode::configuration, "head needs at least 2 classes");
  head_ = zero_head(feature_dim(), classes);
}

Tensor LocalModel::features(const Tensor& images) const {
  Tensor h = flatten_images(images, arch_.input_size());
  for (std::size_t l = 0; l < arch_.hidden.size(); ++l) {
    h = matmul(h, encoder_.value(layer_weight_name(l)));
    const Tensor& b = encoder_.value(layer_bias_name(l));
    for (std::size_t r = 0; r < h.dim(0); ++r) {
      auto row = h.row(r);
      for (std::size_t j = 0; j < row.size(); ++j) {
        const double v = row[j] + b[j];
        row[j] = arch_.activation == Activation::tanh ? std::tanh(v) : (v > 0.0 ? v : 0.0);
      }
    }
  }
  return h;
}

Tensor LocalModel::head_logits(const Tensor& features) const {
  Tensor z = matmul(features, head_.value("head.weight"));
  const Tensor& b = head_.value("head.bias");
  for (std::size_t r = 0; r < z.dim(0); ++r) {
    auto row = z.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
  }
  return z;
}

NodeId LocalModel::encoder_forward(Graph& graph, NodeId rows) const {
  NodeId h = rows;
  for (std::size_t l = 0; l < arch_.hidden.size(); ++l) {
    h = graph.matmul(h, graph.constant(encoder_.value(layer_weight_name(l))));
    h = graph.add_bias(h, graph.constant(encoder_.value(layer_bias_name(l))));
    h = arch_.activation == Activation::tanh ? graph.tanh(h) : graph.relu(h);
  }
  return h;
}

NodeId LocalModel::forward(Graph& graph, NodeId rows) const {
  NodeId h = encoder_forward(graph, rows);
  h = graph.matmul(h, graph.constant(head_.value("head.weight")));
  return graph.add_bias(h, graph.constant(head_.value("head.bias")));
}

NodeId LocalModel::forward_trainable_head(Graph& graph, NodeId rows) {
  return head_forward(graph, encoder_forward(graph, rows));
}

NodeId LocalModel::head_forward(Graph& graph, NodeId features) {
  NodeId z = graph.matmul(features, graph.parameter(head_, "head.weight"));
  return graph.add_bias(z, graph.parameter(head_, "head.bias"));
}

}  // namespace bbal
