#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "bbal/dataset.hpp"
#include "bbal/local_model.hpp"
#include "bbal/priming.hpp"
#include "bbal/prompt.hpp"
#include "bbal/rng.hpp"
#include "bbal/service_api.hpp"
#include "json.hpp"

namespace bbal {

struct LipschitzResult {
  double max_ratio = 0.0;
  /// Draws that entered the maximum (pairs with ||dz||_1 < 1e-12 are skipped).
  std::size_t evaluated = 0;
  bool passed = false;
};

/// Largest |ce(z1, y) - ce(z2, y)| / ||z1 - z2||_1 over random logit pairs
/// with K drawn uniformly from [k_min, k_max].
LipschitzResult verify_lipschitz(std::size_t samples, std::size_t k_min, std::size_t k_max, Rng& rng);

struct RiskReport {
  double local_pre = 0.0;
  double service_pre = 0.0;
  double local_post = 0.0;
  double service_post = 0.0;
  std::size_t samples = 0;
  std::uint64_t dataset_fingerprint = 0;
};

/// Mean cross-entropy of both models on raw (zero-prompt) and prompted
/// inputs. Service logits come from the debug accessor. Requires a shared
/// label space. Without prompts the post values repeat the pre values.
RiskReport compute_risks(const LocalModel& local, const ServiceApi& api, const Dataset& data,
                         const Prompt* local_prompt = nullptr, const Prompt* service_prompt = nullptr);

struct BoundInputs {
  RiskReport risks;
  FaithfulnessReport epsilon;
  std::uint64_t seed = 0;
};

/// Risks and epsilon measured over the same images in one call.
BoundInputs measure_bound_inputs(const LocalModel& local, const ServiceApi& api, const Dataset& data,
                                 const Prompt* local_prompt, const Prompt* service_prompt, std::uint64_t seed);

struct SideCheck {
  bool superiority = false;
  bool left_holds = false;
  /// Meaningful only when `superiority` is true.
  bool right_holds = false;
  bool holds = false;
};

struct BoundReport {
  double r_l_pre = 0.0, r_s_pre = 0.0, r_l_post = 0.0, r_s_post = 0.0;
  double epsilon_pre = 0.0, epsilon_post = 0.0;
  /// max(epsilon_pre, epsilon_post), the single bound used for both sides.
  double epsilon = 0.0;
  SideCheck pre, post;
  std::size_t samples = 0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
};

/// Pure function of the stored numbers; the right inequality is checked
/// only where superiority (R_S <= R_L) holds.
SideCheck check_side(double r_l, double r_s, double epsilon);

BoundReport verify_bound(const BoundInputs& inputs);

}  // namespace bbal
