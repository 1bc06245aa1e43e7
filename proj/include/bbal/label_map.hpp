#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "bbal/tensor.hpp"

namespace bbal {

enum class MapKind { identity, flm, blm };

std::string_view to_string(MapKind kind);
std::optional<MapKind> parse_map_kind(std::string_view name);

/// Output mapping from source-class probabilities to target-class scores.
///
/// Every kind is stored as a nonnegative [K_target x K_source] matrix A and
/// applied as normalize(A p): identity is I, FLM selects one source column
/// per target row, BLM holds row-normalized conditional weights.
class LabelMap {
 public:
  static LabelMap identity(std::size_t classes);
  /// `assignment[t]` is the source class for target t; entries distinct.
  static LabelMap flm(std::vector<std::size_t> assignment, std::size_t source_classes);
  static LabelMap blm(Tensor matrix);

  MapKind kind() const { return kind_; }
  std::size_t source_classes() const { return matrix_.dim(1); }
  std::size_t target_classes() const { return matrix_.dim(0); }
  const Tensor& matrix() const { return matrix_; }
  /// FLM assignment; empty for other kinds.
  const std::vector<std::size_t>& assignment() const { return assignment_; }

  /// Target-space distribution for one source probability vector.
  Tensor apply(const Tensor& source_probs) const;

 private:
  LabelMap(MapKind kind, Tensor matrix, std::vector<std::size_t> assignment);

  MapKind kind_;
  Tensor matrix_;
  std::vector<std::size_t> assignment_;
};

inline Tensor map_output(const LabelMap& map, const Tensor& source_probs) { return map.apply(source_probs); }

/// Frequency-greedy one-to-one assignment. Repeatedly takes the
/// (source, target) pair with the highest co-occurrence count among
/// unclaimed sources and unassigned targets; ties go to the smaller target
/// index, then the smaller source index.
LabelMap flm_fit(std::span<const std::size_t> source_predictions, std::span<const std::size_t> target_labels,
                 std::size_t source_classes, std::size_t target_classes);

/// M[t][s] proportional to alpha + sum over images of class t of p(s).
/// `source_probs` is [n x K_source].
LabelMap blm_fit(const Tensor& source_probs, std::span<const std::size_t> target_labels, std::size_t target_classes,
                 double alpha);

}  // namespace bbal
