#pragma once

#include <cstddef>
#include <optional>
#include <string_view>

#include "bbal/tensor.hpp"

namespace bbal {

/// Floor applied to every probability before taking a log.
inline constexpr double kProbabilityFloor = 1e-12;

Tensor softmax(const Tensor& logits);
double cross_entropy(const Tensor& logits, std::size_t label);
/// (1 - p_label)^gamma * cross_entropy; gamma = 0 is cross_entropy exactly.
double focal_loss(const Tensor& logits, std::size_t label, double gamma);

/// Same losses on an already-normalized score vector (e.g. label-mapped
/// service probabilities).
double nll_from_probabilities(const Tensor& probs, std::size_t label);
double focal_from_probabilities(const Tensor& probs, std::size_t label, double gamma);

double entropy(const Tensor& probs);
/// -sum_j p_service_j log p_local_j = H(p_service) + KL(p_service || p_local).
double priming_loss(const Tensor& p_local, const Tensor& p_service);
double kl_divergence(const Tensor& p, const Tensor& q);

/// Throws invalid_distribution unless `p` is nonnegative and sums to one
/// within `tolerance`.
void require_simplex(const Tensor& p, double tolerance, std::string_view where);

enum class PrimingLossKind { kl, l1_prob, l2_prob, l1_logit, l2_logit };

std::string_view to_string(PrimingLossKind kind);
std::optional<PrimingLossKind> parse_priming_loss(std::string_view name);
bool uses_logits(PrimingLossKind kind);

/// What the service side of a priming pair exposes.
enum class ServiceAccess { probabilities_only, debug_logits };

/// Loss-ablation family. Probability kinds take probability vectors, logit
/// kinds take logit vectors; `kl` dispatches to priming_loss. Requesting a
/// logit kind against a probability-only service is a capability error.
double alt_priming_loss(PrimingLossKind kind, const Tensor& local, const Tensor& service, ServiceAccess access);

}  // namespace bbal
