#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bbal/dataset.hpp"
#include "bbal/local_model.hpp"
#include "bbal/losses.hpp"
#include "bbal/service_api.hpp"

namespace bbal {

class Prompt;

/// Service soft labels, one full distribution per image.
struct SoftLabelSet {
  /// [n, K_source], every row on the simplex.
  Tensor probs;
  /// "full", "expanded-topk-soft(k)" or "expanded-topk-hard(k)" per image.
  std::vector<std::string> provenance;
  /// Debug logits [n, K_source] when collected with logit access.
  std::optional<Tensor> logits;

  std::size_t size() const { return provenance.size(); }
  std::size_t classes() const { return probs.dim(1); }
  void validate() const;
};

/// Revealed pairs keep their probability; the rest share 1 - s uniformly.
Tensor expand_topk_soft(std::span<const std::pair<std::size_t, double>> pairs, std::size_t classes);
/// Revealed mass k/(k+1) split over ranks proportional to 1/r; the rest
/// 1/(k+1) uniformly over unrevealed classes. Requires k < K.
Tensor expand_topk_hard(std::span<const std::size_t> ranked, std::size_t classes);

/// Full distribution for any response mode, plus its provenance string.
std::pair<Tensor, std::string> expand_response(const ApiResponse& response, std::size_t classes);

/// One train-phase call per image.
SoftLabelSet collect_soft_labels(const ServiceApi& api, const Tensor& images);

void write_soft_labels(const std::filesystem::path& path, const SoftLabelSet& labels);
SoftLabelSet read_soft_labels(const std::filesystem::path& path);

struct PrimingConfig {
  PrimingLossKind loss = PrimingLossKind::kl;
  double lr = 1e-3;
  std::size_t epochs = 100;
  std::size_t batch = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

struct PrimingResult {
  /// Mean loss per epoch, measured while training.
  std::vector<double> loss_curve;
};

/// Fits the head of `local` to the service soft labels. The encoder is
/// untouched. Logit-space losses need `labels.logits`.
PrimingResult prime(LocalModel& local, const Tensor& images, const SoftLabelSet& labels, const PrimingConfig& config);

/// Replaces the head with a fresh K_target head trained on true labels.
PrimingResult linear_probe(LocalModel& local, const Dataset& data, const PrimingConfig& config);

struct FaithfulnessReport {
  double epsilon_pre = 0.0;
  double epsilon_post = 0.0;
  std::size_t samples = 0;
  /// Checksum of the evaluated images.
  std::uint64_t dataset_fingerprint = 0;
};

/// Mean L1 gap between service debug logits and local logits, on inputs
/// embedded with a zero prompt (pre) and with the respective prompts (post).
/// Without prompts, epsilon_post equals epsilon_pre.
FaithfulnessReport measure_epsilon(const LocalModel& local, const ServiceApi& api, const Tensor& images,
                                   const Prompt* local_prompt = nullptr, const Prompt* service_prompt = nullptr);

}  // namespace bbal
