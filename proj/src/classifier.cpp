#include "bbal/classifier.hpp"

#include <cmath>

#include "bbal/error.hpp"
#include "bbal/optim.hpp"
#include "bbal/rng.hpp"

namespace bbal {

void Architecture::validate() const {
  if (height == 0 || width == 0 || channels == 0) throw Error(ErrorCode::configuration, "architecture input dims must be positive");
  if (classes < 2) throw Error(ErrorCode::configuration, "architecture needs at least 2 classes");
  for (std::size_t w : hidden) {
    if (w == 0) throw Error(ErrorCode::configuration, "hidden widths must be positive");
  }
}

nlohmann::json Architecture::to_json() const {
  return nlohmann::json{{"height", height},
                        {"width", width},
                        {"channels", channels},
                        {"hidden", hidden},
                        {"activation", activation == Activation::tanh ? "tanh" : "relu"},
                        {"classes", classes}};
}

Architecture Architecture::from_json(const nlohmann::json& j) {
  Architecture a;
  try {
    a.height = j.at("height").get<std::size_t>();
    a.width = j.at("width").get<std::size_t>();
    a.channels = j.at("channels").get<std::size_t>();
    a.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    const std::string act = j.at("activation").get<std::string>();
    if (act == "tanh") {
      a.activation = Activation::tanh;
    } else if (act == "relu") {
      a.activation = Activation::relu;
    } else {
      throw Error(ErrorCode::configuration, "unknown activation '" + act + "'");
    }
    a.classes = j.at("classes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::configuration, std::string("bad architecture descriptor: ") + e.what());
  }
  a.validate();
  return a;
}

std::string layer_weight_name(std::size_t layer) { return "layer" + std::to_string(layer) + ".weight"; }
std::string layer_bias_name(std::size_t layer) { return "layer" + std::to_string(layer) + ".bias"; }

Tensor flatten_images(const Tensor& images, std::size_t input_size) {
  std::size_t batch = 0;
  if (images.rank() == 4) {
    batch = images.dim(0);
  } else if (images.rank() == 3) {
    batch = 1;
  } else if (images.rank() == 2) {
    batch = images.dim(0);
  } else {
    throw Error(ErrorCode::invalid_input, "expected images shaped [B,H,W,C], got " + shape_string(images.shape()));
  }
  if (batch * input_size != images.size()) {
    throw Error(ErrorCode::invalid_input, "image dims " + shape_string(images.shape()) + " do not match model input of " +
                                              std::to_string(input_size) + " values");
  }
  return images.reshaped({batch, input_size});
}

namespace {

std::vector<std::size_t> layer_widths(const Architecture& arch) {
  std::vector<std::size_t> widths{arch.input_size()};
  widths.insert(widths.end(), arch.hidden.begin(), arch.hidden.end());
  widths.push_back(arch.classes);
  return widths;
}

void apply_activation(Tensor& t, Activation act) {
  for (double& v : t.values()) v = act == Activation::tanh ? std::tanh(v) : (v > 0.0 ? v : 0.0);
}

}  // namespace

Classifier::Classifier(Architecture arch, std::uint64_t seed) : arch_(std::move(arch)) {
  arch_.validate();
  Rng rng(Rng::derive(seed, "classifier-init"));
  const auto widths = layer_widths(arch_);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    Tensor w({widths[l], widths[l + 1]});
    const double scale = 1.0 / std::sqrt(static_cast<double>(widths[l]));
    for (double& v : w.values()) v = scale * rng.normal();
    params_.add(layer_weight_name(l), std::move(w), true);
    params_.add(layer_bias_name(l), Tensor({widths[l + 1]}), true);
  }
}

Classifier::Classifier(Architecture arch, ParamSet params) : arch_(std::move(arch)), params_(std::move(params)) {
  arch_.validate();
  const auto widths = layer_widths(arch_);
  if (params_.size() != 2 * (widths.size() - 1)) throw Error(ErrorCode::invalid_input, "parameter count does not match architecture");
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    if (params_.value(layer_weight_name(l)).shape() != Shape{widths[l], widths[l + 1]} ||
        params_.value(layer_bias_name(l)).shape() != Shape{widths[l + 1]}) {
      throw Error(ErrorCode::invalid_input, "parameter shapes do not match architecture at layer " + std::to_string(l));
    }
  }
}

Tensor Classifier::run_layers(const Tensor& rows, std::size_t layers) const {
  Tensor h = rows;
  for (std::size_t l = 0; l < layers; ++l) {
    h = matmul(h, params_.value(layer_weight_name(l)));
    const Tensor& b = params_.value(layer_bias_name(l));
    for (std::size_t r = 0; r < h.dim(0); ++r) {
      auto row = h.row(r);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
    }
    if (l + 1 < num_layers()) apply_activation(h, arch_.activation);
  }
  return h;
}

Tensor Classifier::logits(const Tensor& images) const {
  return run_layers(flatten_images(images, arch_.input_size()), num_layers());
}

Tensor Classifier::features(const Tensor& images) const {
  return run_layers(flatten_images(images, arch_.input_size()), arch_.hidden.size());
}

NodeId Classifier::forward(Graph& graph, NodeId rows) {
  NodeId h = rows;
  for (std::size_t l = 0; l < num_layers(); ++l) {
    h = graph.matmul(h, graph.parameter(params_, layer_weight_name(l)));
    h = graph.add_bias(h, graph.parameter(params_, layer_bias_name(l)));
    if (l + 1 < num_layers()) h = arch_.activation == Activation::tanh ? graph.tanh(h) : graph.relu(h);
  }
  return h;
}

double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> labels) {
  if (predicted.size() != labels.size()) throw Error(ErrorCode::invalid_input, "accuracy: length mismatch");
  if (labels.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

std::vector<std::size_t> predict_classes(const Tensor& logits) {
  std::vector<std::size_t> out(logits.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = argmax(logits.row(i));
  return out;
}

TrainResult train_classifier(const Dataset& data, const Architecture& arch, const TrainConfig& config,
                             std::uint64_t seed) {
  data.validate();
  if (data.size() == 0) throw Error(ErrorCode::invalid_input, "train_classifier: empty dataset");
  if (data.classes > arch.classes) throw Error(ErrorCode::configuration, "dataset has more classes than the architecture");
  if (config.batch == 0) throw Error(ErrorCode::configuration, "batch size must be positive");

  Classifier model(arch, seed);
  const Tensor rows = flatten_images(data.images, arch.input_size());
  Adam adam(config.lr);
  Rng rng(Rng::derive(seed, "classifier-batches"));
  std::vector<double> curve;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = rng.permutation(data.size());
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch) {
      const std::size_t end = std::min(order.size(), start + config.batch);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      std::vector<std::size_t> ys;
      ys.reserve(idx.size());
      for (std::size_t i : idx) ys.push_back(data.labels[i]);
      Graph g;
      NodeId x = g.constant(rows.gather_rows(idx));
      NodeId loss = g.softmax_cross_entropy(model.forward(g, x), ys);
      const double value = g.value(loss)[0];
      if (!std::isfinite(value)) {
        throw Error(ErrorCode::training, "loss diverged at epoch " + std::to_string(epoch));
      }
      epoch_loss += value * static_cast<double>(idx.size());
      model.params().zero_grad();
      g.backward(loss);
      adam.step(model.params());
    }
    curve.push_back(epoch_loss / static_cast<double>(data.size()));
  }
  const double acc = accuracy(predict_classes(model.logits(data.images)), data.labels);
  return TrainResult{std::move(model), acc, std::move(curve)};
}

}  // namespace bbal
