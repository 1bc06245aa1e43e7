#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "bbal/dataset.hpp"
#include "bbal/label_map.hpp"
#include "bbal/local_model.hpp"
#include "bbal/prompt.hpp"

namespace bbal {

struct VrConfig {
  double lr = 0.01;
  std::size_t epochs = 200;
  std::size_t batch = 32;
  /// Label map refit cadence E, in epochs.
  std::size_t refresh_every = 10;
  MapKind map = MapKind::blm;
  double blm_alpha = 1.0;
  PromptKind prompt = PromptKind::padding;
  /// Starting border value in [0, 1). 3/7 sits on the 8-level quantization
  /// lattice next to mid-gray.
  double prompt_init = 3.0 / 7.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Fits a label map of `kind` from source probabilities [n, K_source].
LabelMap fit_label_map(MapKind kind, const Tensor& source_probs, std::span<const std::size_t> labels,
                       std::size_t target_classes, double blm_alpha);

struct VrResult {
  LabelMap map;
  std::vector<double> loss_curve;
};

/// First-order prompt training through the local model with the head held
/// fixed. The label map is refit from current prompted predictions at
/// every epoch divisible by `refresh_every`. Never touches a service.
VrResult train_prompt_foo(const LocalModel& local, Prompt& prompt, const Dataset& data, const VrConfig& config);

/// Source-class probabilities of the local model on prompted images, [n, K_source].
Tensor prompted_probabilities(const LocalModel& local, const Prompt& prompt, const Tensor& images);

std::size_t infer(const LocalModel& local, const Prompt& prompt, const LabelMap& map, const Tensor& image);
std::vector<std::size_t> infer_batch(const LocalModel& local, const Prompt& prompt, const LabelMap& map,
                                     const Tensor& images);

/// Argmax of map_output over each row of source probabilities.
std::vector<std::size_t> mapped_predictions(const LabelMap& map, const Tensor& source_probs);

struct PromptArtifact {
  Prompt prompt;
  LabelMap map;
};

void save_prompt_artifact(const std::filesystem::path& path, const Prompt& prompt, const LabelMap& map);
PromptArtifact load_prompt_artifact(const std::filesystem::path& path);

}  // namespace bbal
