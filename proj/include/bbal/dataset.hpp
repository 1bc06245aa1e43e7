#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "bbal/error.hpp"
#include "bbal/tensor.hpp"

namespace bbal {

/// Labeled image collection; images are [n, H, W, C] with pixels in [0, 1].
struct Dataset {
  Tensor images;
  std::vector<std::size_t> labels;
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t height() const { return images.dim(1); }
  std::size_t width() const { return images.dim(2); }
  std::size_t channels() const { return images.dim(3); }

  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset out;
    out.images = images.gather_rows(indices);
    out.labels.reserve(indices.size());
    for (std::size_t i : indices) out.labels.push_back(labels.at(i));
    out.classes = classes;
    return out;
  }

  void validate() const {
    if (images.rank() != 4) throw Error(ErrorCode::invalid_input, "dataset images must be [n, H, W, C]");
    if (images.dim(0) != labels.size()) throw Error(ErrorCode::invalid_input, "dataset image/label count mismatch");
    for (std::size_t y : labels) {
      if (y >= classes) throw Error(ErrorCode::index, "dataset label out of range");
    }
  }
};

}  // namespace bbal
