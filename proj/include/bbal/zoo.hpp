#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "bbal/dataset.hpp"
#include "bbal/error.hpp"
#include "bbal/label_map.hpp"
#include "bbal/prompt.hpp"
#include "bbal/rng.hpp"
#include "bbal/service_api.hpp"

namespace bbal {

/// Scalar loss of a flat prompt vector. Estimators see nothing else.
using ZooObjective = std::function<double(std::span<const double>)>;

struct ZooEstimate {
  std::vector<double> gradient;
  /// Loss at (or averaged around) the current point.
  double loss = 0.0;
};

/// (d/q) sum_i (f(P + mu u_i) - f(P)) / mu * u_i with u_i uniform on the
/// unit sphere. Exactly q + 1 evaluations.
ZooEstimate rgf_estimate(const ZooObjective& f, std::span<const double> p, std::size_t q, double mu, Rng& rng);
ZooEstimate rgf_estimate(const ZooObjective& f, std::span<const double> p, double mu,
                         const std::vector<std::vector<double>>& directions);

/// (f(P + c D) - f(P - c D)) / 2c * D with Rademacher D. Exactly two
/// evaluations.
ZooEstimate spsa_gc_estimate(const ZooObjective& f, std::span<const double> p, double c, Rng& rng);
ZooEstimate spsa_gc_estimate(const ZooObjective& f, std::span<const double> p, double c,
                             std::span<const double> delta);

enum class Estimator { rgf, spsa_gc };
enum class ZooLoss { cross_entropy, focal };

std::string_view to_string(Estimator e);
std::optional<Estimator> parse_estimator(std::string_view name);
std::string_view to_string(ZooLoss l);
std::optional<ZooLoss> parse_zoo_loss(std::string_view name);

struct ZooConfig {
  Estimator estimator = Estimator::spsa_gc;
  std::size_t q = 5;
  double mu = 0.01;
  double c0 = 0.01;
  double a0 = 0.01;
  /// Stability offset A as a fraction of `steps`.
  double stability_fraction = 0.1;
  double beta = 0.9;
  std::size_t steps = 500;
  std::size_t batch = 16;
  ZooLoss loss = ZooLoss::cross_entropy;
  double gamma = 2.0;
  MapKind map = MapKind::blm;
  double blm_alpha = 1.0;
  /// Label map refit cadence, in epochs of ceil(n / batch) steps.
  std::size_t refresh_every = 10;
  std::optional<std::uint64_t> max_calls;
  std::uint64_t seed = 0;

  void validate() const;
  double c_at(std::size_t t) const;
  double a_at(std::size_t t) const;
  /// Train-phase calls per step for a batch of `batch_size` images.
  std::uint64_t calls_per_step(std::size_t batch_size) const;
};

struct ZooTraceRow {
  std::size_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  std::uint64_t cumulative_calls = 0;
};

struct ZooTrace {
  std::vector<ZooTraceRow> rows;
  void write_csv(std::ostream& out) const;
};

class BudgetExceeded : public Error {
 public:
  BudgetExceeded(const std::string& message, ZooTrace trace)
      : Error(ErrorCode::budget, message), trace_(std::move(trace)) {}
  const ZooTrace& trace() const { return trace_; }

 private:
  ZooTrace trace_;
};

struct ZooResult {
  LabelMap map;
  ZooTrace trace;
};

/// Trains `prompt` through the service: each objective evaluation sends the
/// prompted batch to the API (one train call per image) and scores the
/// label-mapped responses.
ZooResult train_prompt_zoo(const ServiceApi& api, Prompt& prompt, const Dataset& data, const ZooConfig& config);

/// Predictions through the service on prompted images, one call per image.
std::vector<std::size_t> service_infer(const ServiceApi& api, const Prompt& prompt, const LabelMap& map,
                                       const Tensor& images, Phase phase);

}  // namespace bbal
