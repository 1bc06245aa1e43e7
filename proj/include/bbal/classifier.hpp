#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "bbal/autodiff.hpp"
#include "bbal/dataset.hpp"
#include "json.hpp"

namespace bbal {

enum class Activation { tanh, relu };

/// Multilayer perceptron over flattened H x W x C inputs.
struct Architecture {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<std::size_t> hidden;
  Activation activation = Activation::tanh;
  std::size_t classes = 0;

  std::size_t input_size() const { return height * width * channels; }
  /// Width of the last hidden layer (the input width when there are none).
  std::size_t feature_size() const { return hidden.empty() ? input_size() : hidden.back(); }
  void validate() const;

  nlohmann::json to_json() const;
  static Architecture from_json(const nlohmann::json& j);

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

std::string layer_weight_name(std::size_t layer);
std::string layer_bias_name(std::size_t layer);

/// Flattens [B, H, W, C] (or [H, W, C]) images into [B, H*W*C] rows.
Tensor flatten_images(const Tensor& images, std::size_t input_size);

class Classifier {
 public:
  /// Random initialization: weights ~ N(0, 1/fan_in), zero biases.
  Classifier(Architecture arch, std::uint64_t seed);
  Classifier(Architecture arch, ParamSet params);

  const Architecture& architecture() const { return arch_; }
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }
  std::size_t num_layers() const { return arch_.hidden.size() + 1; }

  /// [B, H, W, C] -> [B, K]
  Tensor logits(const Tensor& images) const;
  /// Last hidden activations, [B, feature_size].
  Tensor features(const Tensor& images) const;

  /// Records the full network on `graph` with parameters as trainable leaves.
  NodeId forward(Graph& graph, NodeId rows);

 private:
  Tensor run_layers(const Tensor& rows, std::size_t layers) const;

  Architecture arch_;
  ParamSet params_;
};

struct TrainConfig {
  std::size_t epochs = 20;
  double lr = 1e-3;
  std::size_t batch = 32;
};

struct TrainResult {
  Classifier model;
  double train_accuracy = 0.0;
  std::vector<double> loss_curve;
};

/// Minibatch cross-entropy training with Adam. Deterministic in `seed`;
/// throws training error naming the epoch if the loss stops being finite.
TrainResult train_classifier(const Dataset& data, const Architecture& arch, const TrainConfig& config,
                             std::uint64_t seed);

double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> labels);
std::vector<std::size_t> predict_classes(const Tensor& logits);

}  // namespace bbal
