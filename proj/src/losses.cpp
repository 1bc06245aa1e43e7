#include "bbal/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "bbal/error.hpp"

namespace bbal {

namespace {

void require_logit_vector(const Tensor& logits, const char* op) {
  if (logits.rank() != 1 || logits.size() < 2) {
    throw Error(ErrorCode::invalid_input, std::string(op) + " expects a vector of at least 2 logits");
  }
  logits.require_finite(op);
}

void require_label(std::size_t label, std::size_t classes, const char* op) {
  if (label >= classes) {
    throw Error(ErrorCode::index, std::string(op) + ": label " + std::to_string(label) + " out of range for " +
                                      std::to_string(classes) + " classes");
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::invalid_input, std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                              shape_string(b.shape()));
  }
}

}  // namespace

Tensor softmax(const Tensor& logits) {
  require_logit_vector(logits, "softmax");
  const auto z = logits.values();
  const double mx = *std::max_element(z.begin(), z.end());
  Tensor p(logits.shape());
  double total = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    p[j] = std::exp(z[j] - mx);
    total += p[j];
  }
  for (double& v : p.values()) v /= total;
  return p;
}

double cross_entropy(const Tensor& logits, std::size_t label) {
  require_logit_vector(logits, "cross_entropy");
  require_label(label, logits.size(), "cross_entropy");
  const auto z = logits.values();
  const double mx = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double v : z) total += std::exp(v - mx);
  return std::max(0.0, mx + std::log(total) - z[label]);
}

double focal_loss(const Tensor& logits, std::size_t label, double gamma) {
  if (!(gamma >= 0.0)) throw Error(ErrorCode::invalid_input, "focal_loss: gamma must be nonnegative");
  const double ce = cross_entropy(logits, label);
  const double p = softmax(logits)[label];
  return std::pow(1.0 - p, gamma) * ce;
}

double nll_from_probabilities(const Tensor& probs, std::size_t label) {
  require_label(label, probs.size(), "nll_from_probabilities");
  return -std::log(std::max(probs[label], kProbabilityFloor));
}

double focal_from_probabilities(const Tensor& probs, std::size_t label, double gamma) {
  if (!(gamma >= 0.0)) throw Error(ErrorCode::invalid_input, "focal loss: gamma must be nonnegative");
  const double nll = nll_from_probabilities(probs, label);
  return std::pow(1.0 - std::clamp(probs[label], 0.0, 1.0), gamma) * nll;
}

void require_simplex(const Tensor& p, double tolerance, std::string_view where) {
  double total = 0.0;
  for (double v : p.values()) {
    if (!std::isfinite(v) || v < -tolerance) {
      throw Error(ErrorCode::invalid_distribution, std::string(where) + ": negative or non-finite probability");
    }
    total += v;
  }
  if (std::abs(total - 1.0) > tolerance) {
    throw Error(ErrorCode::invalid_distribution, std::string(where) + ": probabilities sum to " + std::to_string(total));
  }
}

double entropy(const Tensor& probs) {
  double h = 0.0;
  for (double v : probs.values()) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

double priming_loss(const Tensor& p_local, const Tensor& p_service) {
  require_same_shape(p_local, p_service, "priming_loss");
  require_simplex(p_local, 1e-6, "priming_loss local");
  require_simplex(p_service, 1e-6, "priming_loss service");
  double loss = 0.0;
  for (std::size_t j = 0; j < p_local.size(); ++j) {
    loss -= p_service[j] * std::log(std::max(p_local[j], kProbabilityFloor));
  }
  return loss;
}

double kl_divergence(const Tensor& p, const Tensor& q) {
  require_same_shape(p, q, "kl_divergence");
  double kl = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (p[j] > 0.0) kl += p[j] * (std::log(p[j]) - std::log(std::max(q[j], kProbabilityFloor)));
  }
  return kl;
}

std::string_view to_string(PrimingLossKind kind) {
  switch (kind) {
    case PrimingLossKind::kl: return "kl";
    case PrimingLossKind::l1_prob: return "l1_prob";
    case PrimingLossKind::l2_prob: return "l2_prob";
    case PrimingLossKind::l1_logit: return "l1_logit";
    case PrimingLossKind::l2_logit: return "l2_logit";
  }
  return "kl";
}

std::optional<PrimingLossKind> parse_priming_loss(std::string_view name) {
  for (auto k : {PrimingLossKind::kl, PrimingLossKind::l1_prob, PrimingLossKind::l2_prob, PrimingLossKind::l1_logit,
                 PrimingLossKind::l2_logit}) {
    if (to_string(k) == name) return k;
  }
  return std::nullopt;
}

bool uses_logits(PrimingLossKind kind) {
  return kind == PrimingLossKind::l1_logit || kind == PrimingLossKind::l2_logit;
}

double alt_priming_loss(PrimingLossKind kind, const Tensor& local, const Tensor& service, ServiceAccess access) {
  if (uses_logits(kind) && access != ServiceAccess::debug_logits) {
    throw Error(ErrorCode::capability,
                std::string(to_string(kind)) + " needs service logits, but the service exposes probabilities only");
  }
  require_same_shape(local, service, "alt_priming_loss");
  switch (kind) {
    case PrimingLossKind::kl:
      return priming_loss(local, service);
    case PrimingLossKind::l1_prob:
    case PrimingLossKind::l1_logit:
      return l1_distance(local.values(), service.values());
    case PrimingLossKind::l2_prob:
    case PrimingLossKind::l2_logit: {
      double acc = 0.0;
      for (std::size_t j = 0; j < local.size(); ++j) {
        const double d = local[j] - service[j];
        acc += d * d;
      }
      return acc;
    }
  }
  return 0.0;
}

}  // namespace bbal
