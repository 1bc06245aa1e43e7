#include "bbal/label_map.hpp"

#include <string>

#include "bbal/error.hpp"

namespace bbal {

std::string_view to_string(MapKind kind) {
  switch (kind) {
    case MapKind::identity: return "identity";
    case MapKind::flm: return "flm";
    case MapKind::blm: return "blm";
  }
  return "identity";
}

std::optional<MapKind> parse_map_kind(std::string_view name) {
  for (auto k : {MapKind::identity, MapKind::flm, MapKind::blm}) {
    if (to_string(k) == name) return k;
  }
  return std::nullopt;
}

LabelMap::LabelMap(MapKind kind, Tensor matrix, std::vector<std::size_t> assignment)
    : kind_(kind), matrix_(std::move(matrix)), assignment_(std::move(assignment)) {}

LabelMap LabelMap::identity(std::size_t classes) {
  Tensor m({classes, classes});
  for (std::size_t i = 0; i < classes; ++i) m.at(i, i) = 1.0;
  return LabelMap(MapKind::identity, std::move(m), {});
}

LabelMap LabelMap::flm(std::vector<std::size_t> assignment, std::size_t source_classes) {
  if (assignment.empty()) throw Error(ErrorCode::invalid_input, "flm map needs at least one target class");
  std::vector<char> used(source_classes, 0);
  Tensor m({assignment.size(), source_classes});
  for (std::size_t t = 0; t < assignment.size(); ++t) {
    const std::size_t s = assignment[t];
    if (s >= source_classes) throw Error(ErrorCode::index, "flm assignment out of range");
    if (used[s]) throw Error(ErrorCode::invalid_input, "flm assignments must be distinct");
    used[s] = 1;
    m.at(t, s) = 1.0;
  }
  return LabelMap(MapKind::flm, std::move(m), std::move(assignment));
}

LabelMap LabelMap::blm(Tensor matrix) {
  if (matrix.rank() != 2) throw Error(ErrorCode::invalid_input, "blm matrix must be rank 2");
  for (double v : matrix.values()) {
    if (!(v >= 0.0)) throw Error(ErrorCode::invalid_input, "blm weights must be nonnegative");
  }
  return LabelMap(MapKind::blm, std::move(matrix), {});
}

Tensor LabelMap::apply(const Tensor& source_probs) const {
  const std::size_t ks = source_classes();
  const std::size_t kt = target_classes();
  if (source_probs.size() != ks) {
    throw Error(ErrorCode::invalid_input, "label map expects " + std::to_string(ks) + " source scores, got " +
                                              std::to_string(source_probs.size()));
  }
  Tensor out({kt});
  if (kind_ == MapKind::identity) {
    out = source_probs.reshaped({kt});
  } else if (kind_ == MapKind::flm) {
    for (std::size_t t = 0; t < kt; ++t) out[t] = source_probs[assignment_[t]];
  } else {
    for (std::size_t t = 0; t < kt; ++t) {
      double acc = 0.0;
      for (std::size_t s = 0; s < ks; ++s) acc += matrix_.at(t, s) * source_probs[s];
      out[t] = acc;
    }
  }
  double total = 0.0;
  for (double v : out.values()) total += v;
  if (total > 0.0) {
    for (double& v : out.values()) v /= total;
  } else {
    out.fill(1.0 / static_cast<double>(kt));
  }
  return out;
}

LabelMap flm_fit(std::span<const std::size_t> source_predictions, std::span<const std::size_t> target_labels,
                 std::size_t source_classes, std::size_t target_classes) {
  if (target_classes > source_classes) {
    throw Error(ErrorCode::infeasible_mapping, "one-to-one mapping needs at least as many source classes (" +
                                                   std::to_string(source_classes) + ") as target classes (" +
                                                   std::to_string(target_classes) + ")");
  }
  if (source_predictions.size() != target_labels.size()) throw Error(ErrorCode::invalid_input, "flm_fit: length mismatch");
  std::vector<std::size_t> counts(source_classes * target_classes, 0);
  for (std::size_t i = 0; i < target_labels.size(); ++i) {
    if (source_predictions[i] >= source_classes || target_labels[i] >= target_classes) {
      throw Error(ErrorCode::index, "flm_fit: class index out of range");
    }
    ++counts[source_predictions[i] * target_classes + target_labels[i]];
  }
  std::vector<char> source_taken(source_classes, 0);
  std::vector<char> target_done(target_classes, 0);
  std::vector<std::size_t> assignment(target_classes, 0);
  for (std::size_t round = 0; round < target_classes; ++round) {
    bool found = false;
    std::size_t best_t = 0, best_s = 0, best_count = 0;
    for (std::size_t t = 0; t < target_classes; ++t) {
      if (target_done[t]) continue;
      for (std::size_t s = 0; s < source_classes; ++s) {
        if (source_taken[s]) continue;
        const std::size_t c = counts[s * target_classes + t];
        if (!found || c > best_count) {
          found = true;
          best_t = t;
          best_s = s;
          best_count = c;
        }
      }
    }
    target_done[best_t] = 1;
    source_taken[best_s] = 1;
    assignment[best_t] = best_s;
  }
  return LabelMap::flm(std::move(assignment), source_classes);
}

LabelMap blm_fit(const Tensor& source_probs, std::span<const std::size_t> target_labels, std::size_t target_classes,
                 double alpha) {
  if (!(alpha > 0.0)) throw Error(ErrorCode::invalid_input, "blm_fit: smoothing must be positive");
  if (source_probs.rank() != 2 || source_probs.dim(0) != target_labels.size()) {
    throw Error(ErrorCode::invalid_input, "blm_fit: expects [n x K_source] probabilities matching the labels");
  }
  const std::size_t ks = source_probs.dim(1);
  Tensor m({target_classes, ks}, alpha);
  for (std::size_t i = 0; i < target_labels.size(); ++i) {
    const std::size_t t = target_labels[i];
    if (t >= target_classes) throw Error(ErrorCode::index, "blm_fit: label out of range");
    auto p = source_probs.row(i);
    for (std::size_t s = 0; s < ks; ++s) m.at(t, s) += p[s];
  }
  for (std::size_t t = 0; t < target_classes; ++t) {
    double total = 0.0;
    for (std::size_t s = 0; s < ks; ++s) total += m.at(t, s);
    for (std::size_t s = 0; s < ks; ++s) m.at(t, s) /= total;
  }
  return LabelMap::blm(std::move(m));
}

}  // namespace bbal
