#include "bbal/priming.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "bbal/error.hpp"
#include "bbal/optim.hpp"
#include "bbal/prompt.hpp"
#include "bbal/rng.hpp"
#include "json.hpp"

namespace bbal {

void SoftLabelSet::validate() const {
  if (probs.rank() != 2 || probs.dim(0) != provenance.size()) {
    throw Error(ErrorCode::invalid_input, "soft labels: probability rows and provenance disagree");
  }
  for (std::size_t i = 0; i < size(); ++i) {
    auto row = probs.row(i);
    require_simplex(Tensor({row.size()}, std::vector<double>(row.begin(), row.end())), 1e-9,
                    "soft label " + std::to_string(i));
  }
  if (logits && (logits->rank() != 2 || logits->shape() != probs.shape())) {
    throw Error(ErrorCode::invalid_input, "soft labels: logits shape differs from probabilities");
  }
}

Tensor expand_topk_soft(std::span<const std::pair<std::size_t, double>> pairs, std::size_t classes) {
  const std::size_t k = pairs.size();
  if (k < 1 || k > classes) throw Error(ErrorCode::invalid_input, "topk soft: need 1 <= k <= K");
  std::vector<char> seen(classes, 0);
  double s = 0.0;
  for (auto [c, p] : pairs) {
    if (c >= classes) throw Error(ErrorCode::index, "topk soft: class index out of range");
    if (seen[c]) throw Error(ErrorCode::invalid_input, "topk soft: duplicate class " + std::to_string(c));
    if (!(p >= 0.0)) throw Error(ErrorCode::invalid_distribution, "topk soft: negative probability");
    seen[c] = 1;
    s += p;
  }
  if (s > 1.0 + 1e-9) throw Error(ErrorCode::invalid_distribution, "topk soft: revealed mass exceeds 1");
  Tensor out({classes});
  const double rest = k == classes ? 0.0 : std::max(0.0, 1.0 - s) / static_cast<double>(classes - k);
  for (std::size_t c = 0; c < classes; ++c) out[c] = rest;
  for (auto [c, p] : pairs) out[c] = p;
  return out;
}

Tensor expand_topk_hard(std::span<const std::size_t> ranked, std::size_t classes) {
  const std::size_t k = ranked.size();
  if (k < 1 || k >= classes) throw Error(ErrorCode::invalid_input, "topk hard: need 1 <= k < K");
  std::vector<char> seen(classes, 0);
  for (std::size_t c : ranked) {
    if (c >= classes) throw Error(ErrorCode::index, "topk hard: class index out of range");
    if (seen[c]) throw Error(ErrorCode::invalid_input, "topk hard: duplicate class " + std::to_string(c));
    seen[c] = 1;
  }
  const double kd = static_cast<double>(k);
  const double revealed = kd / (kd + 1.0);
  double harmonic = 0.0;
  for (std::size_t r = 1; r <= k; ++r) harmonic += 1.0 / static_cast<double>(r);
  Tensor out({classes}, (1.0 / (kd + 1.0)) / static_cast<double>(classes - k));
  for (std::size_t r = 1; r <= k; ++r) out[ranked[r - 1]] = revealed * (1.0 / static_cast<double>(r)) / harmonic;
  return out;
}

std::pair<Tensor, std::string> expand_response(const ApiResponse& response, std::size_t classes) {
  if (const auto* full = std::get_if<FullResponse>(&response)) return {full->probs, "full"};
  if (const auto* soft = std::get_if<TopkSoftResponse>(&response)) {
    return {expand_topk_soft(soft->pairs, classes), "expanded-topk-soft(" + std::to_string(soft->pairs.size()) + ")"};
  }
  const auto& hard = std::get<TopkHardResponse>(response);
  return {expand_topk_hard(hard.ranked, classes), "expanded-topk-hard(" + std::to_string(hard.ranked.size()) + ")"};
}

SoftLabelSet collect_soft_labels(const ServiceApi& api, const Tensor& images) {
  if (images.rank() != 4 || images.empty()) throw Error(ErrorCode::invalid_input, "collect_soft_labels: no images");
  const std::size_t n = images.dim(0);
  const std::size_t k = api.num_classes();
  SoftLabelSet out;
  out.probs = Tensor({n, k});
  out.provenance.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t idx[] = {i};
    try {
      auto [p, prov] = expand_response(api.predict(images.gather_rows(idx), Phase::train), k);
      std::copy(p.values().begin(), p.values().end(), out.probs.row(i).begin());
      out.provenance.push_back(std::move(prov));
    } catch (const Error& e) {
      throw Error(e.code(), "image " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

void write_soft_labels(const std::filesystem::path& path, const SoftLabelSet& labels) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto row = labels.probs.row(i);
    nlohmann::json rec = {{"index", i}, {"provenance", labels.provenance[i]},
                          {"probs", std::vector<double>(row.begin(), row.end())}};
    out << rec.dump() << '\n';
  }
  if (!out) throw Error(ErrorCode::io, "write failed for " + path.string());
}

SoftLabelSet read_soft_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot read " + path.string());
  std::vector<std::vector<double>> rows;
  SoftLabelSet out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::io, "soft label cache line " + std::to_string(rows.size()) + ": " + e.what());
    }
    if (rec.at("index").get<std::size_t>() != rows.size()) throw Error(ErrorCode::io, "soft label cache out of order");
    rows.push_back(rec.at("probs").get<std::vector<double>>());
    out.provenance.push_back(rec.at("provenance").get<std::string>());
    if (rows.back().size() != rows.front().size()) throw Error(ErrorCode::io, "soft label cache: ragged rows");
  }
  if (rows.empty()) throw Error(ErrorCode::io, "soft label cache is empty");
  std::vector<double> flat;
  for (auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  out.probs = Tensor({rows.size(), rows.front().size()}, std::move(flat));
  out.validate();
  return out;
}

void PrimingConfig::validate() const {
  if (epochs < 1) throw Error(ErrorCode::configuration, "priming epochs must be >= 1");
  if (!(lr > 0.0)) throw Error(ErrorCode::configuration, "priming learning rate must be positive");
  if (batch < 1) throw Error(ErrorCode::configuration, "priming batch must be >= 1");
}

namespace {

// Minibatch Adam over the head on precomputed features. `loss_fn` records
// the batch loss given the logits node and the batch row indices.
template <typename LossFn>
PrimingResult fit_head(LocalModel& local, const Tensor& features, const PrimingConfig& config, LossFn loss_fn) {
  const std::size_t n = features.dim(0);
  Rng rng(Rng::derive(config.seed, "head-batches"));
  Adam adam(config.lr);
  PrimingResult result;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = rng.permutation(n);
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += config.batch) {
      const std::size_t end = std::min(n, start + config.batch);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      Graph g;
      NodeId x = g.constant(features.gather_rows(idx));
      NodeId z = local.head_forward(g, x);
      NodeId loss = loss_fn(g, z, idx);
      const double v = g.value(loss)[0];
      if (!std::isfinite(v)) throw Error(ErrorCode::training, "head loss diverged at epoch " + std::to_string(epoch));
      total += v * static_cast<double>(idx.size());
      local.head().zero_grad();
      g.backward(loss);
      adam.step(local.head());
    }
    result.loss_curve.push_back(total / static_cast<double>(n));
  }
  return result;
}

}  // namespace

PrimingResult prime(LocalModel& local, const Tensor& images, const SoftLabelSet& labels, const PrimingConfig& config) {
  config.validate();
  if (images.dim(0) != labels.size()) throw Error(ErrorCode::invalid_input, "prime: image and soft label counts differ");
  if (local.head_classes() != labels.classes()) {
    throw Error(ErrorCode::configuration, "prime: head width " + std::to_string(local.head_classes()) +
                                              " does not match soft label width " + std::to_string(labels.classes()));
  }
  const Tensor* targets = &labels.probs;
  if (uses_logits(config.loss)) {
    if (!labels.logits) throw Error(ErrorCode::capability, "logit priming loss needs service debug logits");
    targets = &*labels.logits;
  }
  const Tensor features = local.features(images);
  return fit_head(local, features, config, [&](Graph& g, NodeId z, std::span<const std::size_t> idx) {
    const Tensor t = targets->gather_rows(idx);
    switch (config.loss) {
      case PrimingLossKind::kl: return g.soft_cross_entropy(z, t);
      case PrimingLossKind::l1_prob: return g.probability_distance(z, t, 1);
      case PrimingLossKind::l2_prob: return g.probability_distance(z, t, 2);
      case PrimingLossKind::l1_logit: return g.logit_distance(z, t, 1);
      case PrimingLossKind::l2_logit: return g.logit_distance(z, t, 2);
    }
    return g.soft_cross_entropy(z, t);
  });
}

PrimingResult linear_probe(LocalModel& local, const Dataset& data, const PrimingConfig& config) {
  config.validate();
  data.validate();
  local.reset_head(data.classes);
  const Tensor features = local.features(data.images);
  return fit_head(local, features, config, [&](Graph& g, NodeId z, std::span<const std::size_t> idx) {
    std::vector<std::size_t> y;
    for (std::size_t i : idx) y.push_back(data.labels[i]);
    return g.softmax_cross_entropy(z, y);
  });
}

namespace {

double mean_l1_gap(const Tensor& a, const Tensor& b) {
  double total = 0.0;
  for (std::size_t i = 0; i < a.dim(0); ++i) total += l1_distance(a.row(i), b.row(i));
  return total / static_cast<double>(a.dim(0));
}

}  // namespace

FaithfulnessReport measure_epsilon(const LocalModel& local, const ServiceApi& api, const Tensor& images,
                                   const Prompt* local_prompt, const Prompt* service_prompt) {
  if (!api.options().debug_logits) throw Error(ErrorCode::capability, "measure_epsilon needs debug logits");
  if ((local_prompt == nullptr) != (service_prompt == nullptr)) {
    throw Error(ErrorCode::invalid_input, "measure_epsilon: give both prompts or neither");
  }
  FaithfulnessReport report;
  report.samples = images.dim(0);
  report.dataset_fingerprint = checksum(images.values());
  if (local_prompt == nullptr) {
    report.epsilon_pre = mean_l1_gap(api.debug_logits(images), local.logits(images));
    report.epsilon_post = report.epsilon_pre;
    return report;
  }
  const Tensor raw = Prompt::padding(local_prompt->geometry()).apply(images);
  report.epsilon_pre = mean_l1_gap(api.debug_logits(raw), local.logits(raw));
  report.epsilon_post =
      mean_l1_gap(api.debug_logits(service_prompt->apply(images)), local.logits(local_prompt->apply(images)));
  return report;
}

}  // namespace bbal
