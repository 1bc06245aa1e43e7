#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>

#include "bbal/autodiff.hpp"

namespace bbal {

/// Placement of an h x w target image at the center of an H' x W' canvas.
struct CanvasGeometry {
  std::size_t image_height = 16;
  std::size_t image_width = 16;
  std::size_t canvas_height = 24;
  std::size_t canvas_width = 24;
  std::size_t channels = 1;

  std::size_t top() const { return (canvas_height - image_height) / 2; }
  std::size_t left() const { return (canvas_width - image_width) / 2; }
  std::size_t image_size() const { return image_height * image_width * channels; }
  std::size_t canvas_size() const { return canvas_height * canvas_width * channels; }
  std::size_t border_size() const { return canvas_size() - image_size(); }
  bool in_window(std::size_t row, std::size_t col) const {
    return row >= top() && row < top() + image_height && col >= left() && col < left() + image_width;
  }
  void validate() const;

  friend bool operator==(const CanvasGeometry&, const CanvasGeometry&) = default;
};

enum class PromptKind { padding, watermark };

std::string_view to_string(PromptKind kind);
std::optional<PromptKind> parse_prompt_kind(std::string_view name);

/// Trainable input transformation applied to every target image.
///
/// padding:   the image sits unchanged in the canvas center; every border
///            pixel is a free parameter.
/// watermark: the image is placed in the canvas (zero border) and the
///            program tanh(W) * M is added, then clamped to [0, 1]. Pixels
///            with M = 0 pass through untouched.
class Prompt {
 public:
  static Prompt padding(CanvasGeometry geometry);
  static Prompt watermark(CanvasGeometry geometry, Tensor mask);
  /// Binary mask that is 1 on the canvas border and 0 over the image window.
  static Tensor frame_mask(const CanvasGeometry& geometry);

  PromptKind kind() const { return kind_; }
  const CanvasGeometry& geometry() const { return geometry_; }
  /// Number of trainable scalars.
  std::size_t dimension() const { return params_.value(0).size(); }
  std::span<const double> values() const { return params_.value(0).values(); }
  void set_values(std::span<const double> values);
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  /// Watermark mask; empty for padding prompts.
  const Tensor& mask() const { return mask_; }

  /// [B, h, w, C] -> [B, H', W', C]
  Tensor apply(const Tensor& images) const;

  /// Records the transformation of `rows` ([B, h*w*C]) on `graph` with the
  /// prompt as a trainable leaf; returns [B, H'*W'*C].
  NodeId record(Graph& graph, NodeId rows);
  /// Same, with the prompt held constant.
  NodeId record_frozen(Graph& graph, NodeId rows) const;

 private:
  Prompt(PromptKind kind, CanvasGeometry geometry);
  NodeId record_with(Graph& graph, NodeId rows, NodeId prompt) const;
  Tensor flatten_input(const Tensor& images) const;

  PromptKind kind_;
  CanvasGeometry geometry_;
  ParamSet params_;
  Tensor mask_;
  EmbedIndex index_;
};

/// Free-function spelling of `prompt.apply(images)`.
inline Tensor apply_prompt(const Tensor& images, const Prompt& prompt) { return prompt.apply(images); }

}  // namespace bbal
