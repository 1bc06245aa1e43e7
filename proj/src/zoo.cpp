#include "bbal/zoo.hpp"

#include <cmath>
#include <ostream>
#include <string>

#include "bbal/losses.hpp"
#include "bbal/priming.hpp"
#include "bbal/reprogram.hpp"

namespace bbal {

namespace {

double evaluate(const ZooObjective& f, std::span<const double> p, std::size_t direction) {
  try {
    return f(p);
  } catch (const BudgetExceeded&) {
    throw;
  } catch (const Error& e) {
    throw Error(e.code(), "direction " + std::to_string(direction) + ": " + e.what());
  }
}

}  // namespace

ZooEstimate rgf_estimate(const ZooObjective& f, std::span<const double> p, double mu,
                         const std::vector<std::vector<double>>& directions) {
  if (directions.empty()) throw Error(ErrorCode::invalid_input, "rgf needs q >= 1");
  if (!(mu > 0.0)) throw Error(ErrorCode::invalid_input, "rgf smoothing radius must be positive");
  const std::size_t d = p.size();
  const double q = static_cast<double>(directions.size());
  ZooEstimate est{std::vector<double>(d, 0.0), 0.0};
  est.loss = evaluate(f, p, 0);
  std::vector<double> probe(d);
  for (std::size_t i = 0; i < directions.size(); ++i) {
    const auto& u = directions[i];
    if (u.size() != d) throw Error(ErrorCode::invalid_input, "rgf direction has the wrong dimension");
    for (std::size_t j = 0; j < d; ++j) probe[j] = p[j] + mu * u[j];
    const double scale = static_cast<double>(d) / q * (evaluate(f, probe, i + 1) - est.loss) / mu;
    for (std::size_t j = 0; j < d; ++j) est.gradient[j] += scale * u[j];
  }
  return est;
}

ZooEstimate rgf_estimate(const ZooObjective& f, std::span<const double> p, std::size_t q, double mu, Rng& rng) {
  std::vector<std::vector<double>> dirs(q, std::vector<double>(p.size()));
  for (auto& u : dirs) {
    double norm = 0.0;
    while (norm == 0.0) {
      for (double& v : u) v = rng.normal();
      norm = l2_norm(u);
    }
    for (double& v : u) v /= norm;
  }
  return rgf_estimate(f, p, mu, dirs);
}

ZooEstimate spsa_gc_estimate(const ZooObjective& f, std::span<const double> p, double c,
                             std::span<const double> delta) {
  if (!(c > 0.0)) throw Error(ErrorCode::invalid_input, "spsa perturbation must be positive");
  const std::size_t d = p.size();
  if (delta.size() != d) throw Error(ErrorCode::invalid_input, "spsa perturbation has the wrong dimension");
  std::vector<double> plus(d), minus(d);
  for (std::size_t j = 0; j < d; ++j) {
    if (delta[j] != 1.0 && delta[j] != -1.0) throw Error(ErrorCode::invalid_input, "spsa perturbation must be +-1");
    plus[j] = p[j] + c * delta[j];
    minus[j] = p[j] - c * delta[j];
  }
  const double fp = evaluate(f, plus, 0);
  const double fm = evaluate(f, minus, 1);
  ZooEstimate est{std::vector<double>(d), 0.5 * (fp + fm)};
  const double diff = (fp - fm) / (2.0 * c);
  // delta is +-1, so its elementwise inverse is itself.
  for (std::size_t j = 0; j < d; ++j) est.gradient[j] = diff * delta[j];
  return est;
}

ZooEstimate spsa_gc_estimate(const ZooObjective& f, std::span<const double> p, double c, Rng& rng) {
  std::vector<double> delta(p.size());
  for (double& v : delta) v = rng.rademacher();
  return spsa_gc_estimate(f, p, c, delta);
}

std::string_view to_string(Estimator e) { return e == Estimator::rgf ? "rgf" : "spsa_gc"; }

std::optional<Estimator> parse_estimator(std::string_view name) {
  if (name == "rgf") return Estimator::rgf;
  if (name == "spsa_gc") return Estimator::spsa_gc;
  return std::nullopt;
}

std::string_view to_string(ZooLoss l) { return l == ZooLoss::focal ? "focal" : "cross_entropy"; }

std::optional<ZooLoss> parse_zoo_loss(std::string_view name) {
  if (name == "focal") return ZooLoss::focal;
  if (name == "cross_entropy") return ZooLoss::cross_entropy;
  return std::nullopt;
}

void ZooConfig::validate() const {
  if (q < 1) throw Error(ErrorCode::configuration, "zoo q must be >= 1");
  if (!(mu > 0.0)) throw Error(ErrorCode::configuration, "zoo mu must be positive");
  if (!(c0 > 0.0) || !(a0 > 0.0)) throw Error(ErrorCode::configuration, "zoo schedules must start positive");
  if (!(beta >= 0.0 && beta < 1.0)) throw Error(ErrorCode::configuration, "zoo beta must lie in [0, 1)");
  if (!(stability_fraction >= 0.0)) throw Error(ErrorCode::configuration, "zoo stability fraction must be >= 0");
  if (steps < 1 || batch < 1) throw Error(ErrorCode::configuration, "zoo steps and batch must be >= 1");
  if (!(gamma >= 0.0)) throw Error(ErrorCode::configuration, "focal gamma must be >= 0");
  if (!(blm_alpha > 0.0)) throw Error(ErrorCode::configuration, "blm smoothing must be positive");
  if (refresh_every < 1) throw Error(ErrorCode::configuration, "label map refresh interval must be >= 1");
}

double ZooConfig::c_at(std::size_t t) const { return c0 / std::pow(static_cast<double>(t + 1), 0.101); }

double ZooConfig::a_at(std::size_t t) const {
  const double a_offset = stability_fraction * static_cast<double>(steps);
  return a0 / std::pow(static_cast<double>(t + 1) + a_offset, 0.602);
}

std::uint64_t ZooConfig::calls_per_step(std::size_t batch_size) const {
  const std::uint64_t evals = estimator == Estimator::rgf ? q + 1 : 2;
  return evals * batch_size;
}

void ZooTrace::write_csv(std::ostream& out) const {
  out << "step,loss,grad_norm,cumulative_calls\n";
  const auto old = out.precision(17);
  for (const auto& r : rows) out << r.step << ',' << r.loss << ',' << r.grad_norm << ',' << r.cumulative_calls << '\n';
  out.precision(old);
}

namespace {

Tensor response_probs(const ApiResponse& r, std::size_t classes) { return expand_response(r, classes).first; }

}  // namespace

ZooResult train_prompt_zoo(const ServiceApi& api, Prompt& prompt, const Dataset& data, const ZooConfig& config) {
  config.validate();
  data.validate();
  const auto& g = prompt.geometry();
  if (g.canvas_height != api.input_height() || g.canvas_width != api.input_width() ||
      g.channels != api.input_channels()) {
    throw Error(ErrorCode::invalid_input, "prompt canvas does not match the service input");
  }
  const std::size_t n = data.size();
  const std::size_t ks = api.num_classes();
  const std::size_t steps_per_epoch = (n + config.batch - 1) / config.batch;
  const std::size_t refit_period = config.refresh_every * steps_per_epoch;
  Rng batch_rng(Rng::derive(config.seed, "zoo-batches"));
  Rng dir_rng(Rng::derive(config.seed, "zoo-directions"));

  // Latest service response per image, used to refit the label map.
  Tensor latest({n, ks});
  std::vector<char> seen(n, 0);
  std::vector<std::size_t> seen_index;

  ZooResult result{LabelMap::identity(2), {}};
  std::vector<double> momentum(prompt.dimension(), 0.0);
  std::vector<std::size_t> order;
  const std::uint64_t start_calls = api.calls(Phase::train);
  Prompt probe = prompt;

  for (std::size_t step = 0; step < config.steps; ++step) {
    const std::size_t pos = (step % steps_per_epoch) * config.batch;
    if (pos == 0) order = batch_rng.permutation(n);
    const std::size_t end = std::min(n, pos + config.batch);
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                 order.begin() + static_cast<std::ptrdiff_t>(end));
    const std::uint64_t used = api.calls(Phase::train) - start_calls;
    if (config.max_calls && used + config.calls_per_step(idx.size()) > *config.max_calls) {
      throw BudgetExceeded("zoo call budget of " + std::to_string(*config.max_calls) + " exhausted at step " +
                               std::to_string(step),
                           result.trace);
    }
    const Tensor images = data.images.gather_rows(idx);
    // The map is rebuilt on the first evaluation of a refit step, once that
    // batch's responses are in. During the first epoch it is rebuilt every
    // step so that it covers each image as soon as it has been queried.
    bool refit = step < steps_per_epoch || step % refit_period == 0;
    ZooObjective objective = [&](std::span<const double> values) {
      probe.set_values(values);
      const auto responses = api.predict_batch(probe.apply(images), Phase::train);
      std::vector<Tensor> probs;
      probs.reserve(responses.size());
      for (const auto& r : responses) probs.push_back(response_probs(r, ks));
      if (refit) {
        for (std::size_t b = 0; b < idx.size(); ++b) {
          std::copy(probs[b].values().begin(), probs[b].values().end(), latest.row(idx[b]).begin());
          if (!seen[idx[b]]) {
            seen[idx[b]] = 1;
            seen_index.push_back(idx[b]);
          }
        }
        std::vector<std::size_t> labels;
        for (std::size_t i : seen_index) labels.push_back(data.labels[i]);
        result.map = fit_label_map(config.map, latest.gather_rows(seen_index), labels, data.classes, config.blm_alpha);
        refit = false;
      }
      double total = 0.0;
      for (std::size_t b = 0; b < idx.size(); ++b) {
        const Tensor q = result.map.apply(probs[b]);
        const std::size_t y = data.labels[idx[b]];
        total += config.loss == ZooLoss::focal ? focal_from_probabilities(q, y, config.gamma)
                                               : nll_from_probabilities(q, y);
      }
      return total / static_cast<double>(idx.size());
    };

    const std::vector<double> p(prompt.values().begin(), prompt.values().end());
    ZooEstimate est = config.estimator == Estimator::rgf
                          ? rgf_estimate(objective, p, config.q, config.mu, dir_rng)
                          : spsa_gc_estimate(objective, p, config.c_at(step), dir_rng);
    if (!std::isfinite(est.loss)) throw Error(ErrorCode::training, "zoo loss diverged at step " + std::to_string(step));

    std::vector<double> next = p;
    const double a = config.a_at(step);
    for (std::size_t j = 0; j < next.size(); ++j) {
      if (config.estimator == Estimator::spsa_gc) {
        momentum[j] = config.beta * momentum[j] + (1.0 - config.beta) * est.gradient[j];
        next[j] -= a * momentum[j];
      } else {
        next[j] -= a * est.gradient[j];
      }
    }
    prompt.set_values(next);
    result.trace.rows.push_back({step, est.loss, l2_norm(est.gradient), api.calls(Phase::train) - start_calls});
  }
  return result;
}

std::vector<std::size_t> service_infer(const ServiceApi& api, const Prompt& prompt, const LabelMap& map,
                                       const Tensor& images, Phase phase) {
  const auto responses = api.predict_batch(prompt.apply(images), phase);
  std::vector<std::size_t> out;
  out.reserve(responses.size());
  for (const auto& r : responses) out.push_back(argmax(map.apply(response_probs(r, api.num_classes())).values()));
  return out;
}

}  // namespace bbal
