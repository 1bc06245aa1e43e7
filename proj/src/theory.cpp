#include "bbal/theory.hpp"

#include <algorithm>
#include <cmath>

#include "bbal/error.hpp"
#include "bbal/losses.hpp"

namespace bbal {

LipschitzResult verify_lipschitz(std::size_t samples, std::size_t k_min, std::size_t k_max, Rng& rng) {
  if (samples < 1) throw Error(ErrorCode::invalid_input, "verify_lipschitz needs at least one sample");
  if (k_min < 2 || k_max < k_min) throw Error(ErrorCode::invalid_input, "verify_lipschitz: bad class range");
  LipschitzResult out;
  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t k = k_min + rng.below(k_max - k_min + 1);
    const double scale = 0.1 + 10.0 * rng.uniform();
    Tensor z1({k}), z2({k});
    for (std::size_t j = 0; j < k; ++j) {
      z1[j] = scale * rng.normal();
      z2[j] = scale * rng.normal();
    }
    const std::size_t y = rng.below(k);
    const double dz = l1_distance(z1.values(), z2.values());
    if (dz < 1e-12) continue;
    out.max_ratio = std::max(out.max_ratio, std::abs(cross_entropy(z1, y) - cross_entropy(z2, y)) / dz);
    ++out.evaluated;
  }
  out.passed = out.max_ratio <= 1.0 + 1e-9;
  return out;
}

namespace {

double mean_risk(const Tensor& logits, std::span<const std::size_t> labels) {
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto row = logits.row(i);
    total += cross_entropy(Tensor({row.size()}, std::vector<double>(row.begin(), row.end())), labels[i]);
  }
  return total / static_cast<double>(labels.size());
}

}  // namespace

RiskReport compute_risks(const LocalModel& local, const ServiceApi& api, const Dataset& data,
                         const Prompt* local_prompt, const Prompt* service_prompt) {
  if (!api.options().debug_logits) throw Error(ErrorCode::capability, "risk computation needs debug logits");
  data.validate();
  if (data.classes > api.num_classes() || data.classes > local.head_classes()) {
    throw Error(ErrorCode::configuration, "risks need a label space shared by both models and the data");
  }
  if ((local_prompt == nullptr) != (service_prompt == nullptr)) {
    throw Error(ErrorCode::invalid_input, "compute_risks: give both prompts or neither");
  }
  RiskReport r;
  r.samples = data.size();
  r.dataset_fingerprint = checksum(data.images.values());
  if (local_prompt == nullptr) {
    r.local_pre = mean_risk(local.logits(data.images), data.labels);
    r.service_pre = mean_risk(api.debug_logits(data.images), data.labels);
    r.local_post = r.local_pre;
    r.service_post = r.service_pre;
    return r;
  }
  const Tensor raw = Prompt::padding(local_prompt->geometry()).apply(data.images);
  r.local_pre = mean_risk(local.logits(raw), data.labels);
  r.service_pre = mean_risk(api.debug_logits(raw), data.labels);
  r.local_post = mean_risk(local.logits(local_prompt->apply(data.images)), data.labels);
  r.service_post = mean_risk(api.debug_logits(service_prompt->apply(data.images)), data.labels);
  return r;
}

BoundInputs measure_bound_inputs(const LocalModel& local, const ServiceApi& api, const Dataset& data,
                                 const Prompt* local_prompt, const Prompt* service_prompt, std::uint64_t seed) {
  BoundInputs in;
  in.risks = compute_risks(local, api, data, local_prompt, service_prompt);
  in.epsilon = measure_epsilon(local, api, data.images, local_prompt, service_prompt);
  in.seed = seed;
  return in;
}

SideCheck check_side(double r_l, double r_s, double epsilon) {
  SideCheck c;
  c.superiority = r_s <= r_l;
  c.left_holds = r_l - epsilon <= r_s;
  c.right_holds = c.superiority && r_s <= r_l;
  c.holds = c.left_holds && (!c.superiority || c.right_holds);
  return c;
}

BoundReport verify_bound(const BoundInputs& in) {
  if (in.risks.samples != in.epsilon.samples || in.risks.dataset_fingerprint != in.epsilon.dataset_fingerprint) {
    throw Error(ErrorCode::configuration, "epsilon and risks were measured on different samples");
  }
  BoundReport b;
  b.r_l_pre = in.risks.local_pre;
  b.r_s_pre = in.risks.service_pre;
  b.r_l_post = in.risks.local_post;
  b.r_s_post = in.risks.service_post;
  b.epsilon_pre = in.epsilon.epsilon_pre;
  b.epsilon_post = in.epsilon.epsilon_post;
  b.epsilon = std::max(b.epsilon_pre, b.epsilon_post);
  b.pre = check_side(b.r_l_pre, b.r_s_pre, b.epsilon);
  b.post = check_side(b.r_l_post, b.r_s_post, b.epsilon);
  b.samples = in.risks.samples;
  b.seed = in.seed;
  return b;
}

nlohmann::json BoundReport::to_json() const {
  auto right = [](const SideCheck& c) -> nlohmann::json {
    if (!c.superiority) return "assumption-unmet";
    return c.right_holds ? "holds" : "violated";
  };
  return {{"R_L_pre", r_l_pre},
          {"R_S_pre", r_s_pre},
          {"R_L_post", r_l_post},
          {"R_S_post", r_s_post},
          {"epsilon_pre", epsilon_pre},
          {"epsilon_post", epsilon_post},
          {"epsilon", epsilon},
          {"superiority_holds_pre", pre.superiority},
          {"superiority_holds_post", post.superiority},
          {"bound_holds_pre", pre.holds},
          {"bound_holds_post", post.holds},
          {"left_bound_pre", pre.left_holds},
          {"left_bound_post", post.left_holds},
          {"right_bound_pre", right(pre)},
          {"right_bound_post", right(post)},
          {"samples", samples},
          {"seed", seed}};
}

}  // namespace bbal
