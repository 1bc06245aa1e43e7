#include "bbal/service_api.hpp"

#include <algorithm>
#include <cmath>

#include "bbal/error.hpp"
#include "bbal/losses.hpp"

namespace bbal {

std::string_view to_string(OutputMode mode) {
  switch (mode) {
    case OutputMode::full: return "full";
    case OutputMode::topk_soft: return "topk_soft";
    case OutputMode::topk_hard: return "topk_hard";
  }
  return "full";
}

std::optional<OutputMode> parse_output_mode(std::string_view name) {
  for (auto m : {OutputMode::full, OutputMode::topk_soft, OutputMode::topk_hard}) {
    if (to_string(m) == name) return m;
  }
  return std::nullopt;
}

Tensor quantize(const Tensor& image, std::size_t levels) {
  if (levels < 2) throw Error(ErrorCode::configuration, "quantize needs at least 2 levels");
  const double steps = static_cast<double>(levels - 1);
  Tensor out = image;
  for (double& v : out.values()) v = std::round(std::clamp(v, 0.0, 1.0) * steps) / steps;
  return out;
}

ServiceApi::ServiceApi(Classifier model, ServiceOptions options)
    : model_(std::move(model)), options_(options) {
  const Architecture& a = model_.architecture();
  height_ = a.height;
  width_ = a.width;
  channels_ = a.channels;
  classes_ = a.classes;
  if (options_.output.mode != OutputMode::full && (options_.output.k == 0 || options_.output.k > classes_)) {
    throw Error(ErrorCode::configuration, "top-k output needs 1 <= k <= class count");
  }
  if (options_.robustness.kind == Robustness::Kind::quantize && options_.robustness.levels < 2) {
    throw Error(ErrorCode::configuration, "quantize robustness needs at least 2 levels");
  }
  if (!(options_.price_per_call >= 0.0)) throw Error(ErrorCode::configuration, "price per call must be nonnegative");
}

std::uint64_t ServiceApi::calls(Phase phase) const {
  return phase == Phase::train ? train_calls_.load() : infer_calls_.load();
}

Tensor ServiceApi::prepare(const Tensor& images) const {
  Tensor batch;
  if (images.rank() == 3 && images.dim(0) == height_ && images.dim(1) == width_ && images.dim(2) == channels_) {
    batch = images.reshaped({1, height_, width_, channels_});
  } else if (images.rank() == 4 && images.dim(1) == height_ && images.dim(2) == width_ && images.dim(3) == channels_) {
    batch = images;
  } else {
    throw Error(ErrorCode::invalid_input, "service expects images of " + shape_string({height_, width_, channels_}) +
                                              ", got " + shape_string(images.shape()));
  }
  batch.require_finite("service input");
  if (options_.robustness.kind == Robustness::Kind::quantize) batch = quantize(batch, options_.robustness.levels);
  return batch;
}

ApiResponse ServiceApi::predict(const Tensor& image, Phase phase) const {
  if (image.rank() == 4 && image.dim(0) != 1) throw Error(ErrorCode::invalid_input, "predict takes a single image");
  return std::move(predict_batch(image, phase).front());
}

std::vector<ApiResponse> ServiceApi::predict_batch(const Tensor& images, Phase phase) const {
  const Tensor batch = prepare(images);
  const Tensor z = model_.logits(batch);
  const std::size_t n = z.dim(0);
  (phase == Phase::train ? train_calls_ : infer_calls_).fetch_add(n);

  std::vector<ApiResponse> out;
  out.reserve(n);
  for (std::size_t b = 0; b < n; ++b) {
    Tensor p = softmax(Tensor({classes_}, std::vector<double>(z.row(b).begin(), z.row(b).end())));
    if (options_.output.mode == OutputMode::full) {
      out.emplace_back(FullResponse{std::move(p)});
      continue;
    }
    std::vector<std::size_t> order(classes_);
    for (std::size_t j = 0; j < classes_; ++j) order[j] = j;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t c) { return p[a] > p[c]; });
    order.resize(options_.output.k);
    if (options_.output.mode == OutputMode::topk_soft) {
      TopkSoftResponse r;
      for (std::size_t j : order) r.pairs.emplace_back(j, p[j]);
      out.emplace_back(std::move(r));
    } else {
      out.emplace_back(TopkHardResponse{std::move(order)});
    }
  }
  return out;
}

Tensor ServiceApi::debug_logits(const Tensor& images) const {
  if (!options_.debug_logits) throw Error(ErrorCode::capability, "debug logits are disabled on this service");
  const Tensor batch = prepare(images);
  debug_calls_.fetch_add(batch.dim(0));
  return model_.logits(batch);
}

}  // namespace bbal
