#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "bbal/classifier.hpp"

namespace bbal {

enum class Phase { train, infer };

enum class OutputMode { full, topk_soft, topk_hard };

std::string_view to_string(OutputMode mode);
std::optional<OutputMode> parse_output_mode(std::string_view name);

struct OutputSpec {
  OutputMode mode = OutputMode::full;
  std::size_t k = 0;  // ignored for full
};

struct Robustness {
  enum class Kind { none, quantize };
  Kind kind = Kind::none;
  std::size_t levels = 0;

  static Robustness none() { return {}; }
  static Robustness quantize(std::size_t levels) { return {Kind::quantize, levels}; }
};

struct ServiceOptions {
  OutputSpec output;
  Robustness robustness;
  double price_per_call = 1e-3;
  bool debug_logits = false;
};

struct FullResponse {
  Tensor probs;
};

struct TopkSoftResponse {
  std::vector<std::pair<std::size_t, double>> pairs;  // sorted by probability, descending
};

struct TopkHardResponse {
  std::vector<std::size_t> ranked;
};

using ApiResponse = std::variant<FullResponse, TopkSoftResponse, TopkHardResponse>;

/// Rounds each pixel to the nearest of `levels` evenly spaced values in [0, 1].
Tensor quantize(const Tensor& image, std::size_t levels);

/// Metered, probability-only facade over a frozen classifier.
///
/// The wrapped network is owned privately and never handed back out; the
/// only outputs are (possibly truncated) probabilities, plus raw logits
/// through the explicitly named debug accessor when enabled. Every predicted
/// image adds exactly one call to the meter of its phase.
class ServiceApi {
 public:
  ServiceApi(Classifier model, ServiceOptions options);
  ServiceApi(const ServiceApi&) = delete;
  ServiceApi& operator=(const ServiceApi&) = delete;

  /// One image, [H, W, C] or [1, H, W, C].
  ApiResponse predict(const Tensor& image, Phase phase) const;
  /// [B, H, W, C]; one metered call per image.
  std::vector<ApiResponse> predict_batch(const Tensor& images, Phase phase) const;

  /// Pre-softmax logits, [B, K]. Counted on the debug counter only.
  Tensor debug_logits(const Tensor& images) const;

  std::size_t num_classes() const { return classes_; }
  std::size_t input_height() const { return height_; }
  std::size_t input_width() const { return width_; }
  std::size_t input_channels() const { return channels_; }
  const ServiceOptions& options() const { return options_; }
  double price_per_call() const { return options_.price_per_call; }

  std::uint64_t calls(Phase phase) const;
  std::uint64_t total_calls() const { return calls(Phase::train) + calls(Phase::infer); }
  std::uint64_t debug_calls() const { return debug_calls_.load(); }

 private:
  Tensor prepare(const Tensor& images) const;

  Classifier model_;
  ServiceOptions options_;
  std::size_t height_, width_, channels_, classes_;
  mutable std::atomic<std::uint64_t> train_calls_{0};
  mutable std::atomic<std::uint64_t> infer_calls_{0};
  mutable std::atomic<std::uint64_t> debug_calls_{0};
};

}  // namespace bbal
