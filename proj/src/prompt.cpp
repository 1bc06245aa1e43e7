#include "bbal/prompt.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

#include "bbal/error.hpp"

namespace bbal {

void CanvasGeometry::validate() const {
  if (image_height == 0 || image_width == 0 || channels == 0) throw Error(ErrorCode::configuration, "image dims must be positive");
  if (canvas_height < image_height || canvas_width < image_width) {
    throw Error(ErrorCode::configuration, "canvas must be at least as large as the image");
  }
}

std::string_view to_string(PromptKind kind) { return kind == PromptKind::padding ? "padding" : "watermark"; }

std::optional<PromptKind> parse_prompt_kind(std::string_view name) {
  if (name == "padding") return PromptKind::padding;
  if (name == "watermark") return PromptKind::watermark;
  return std::nullopt;
}

Prompt::Prompt(PromptKind kind, CanvasGeometry geometry) : kind_(kind), geometry_(geometry) {
  geometry_.validate();
  const CanvasGeometry& g = geometry_;
  auto index = std::make_shared<std::vector<std::int64_t>>(g.canvas_size());
  std::int64_t border = 0;
  for (std::size_t r = 0; r < g.canvas_height; ++r) {
    for (std::size_t c = 0; c < g.canvas_width; ++c) {
      for (std::size_t ch = 0; ch < g.channels; ++ch) {
        const std::size_t j = (r * g.canvas_width + c) * g.channels + ch;
        if (g.in_window(r, c)) {
          (*index)[j] = static_cast<std::int64_t>(((r - g.top()) * g.image_width + (c - g.left())) * g.channels + ch);
        } else {
          (*index)[j] = -(++border);
        }
      }
    }
  }
  index_ = std::move(index);
}

Prompt Prompt::padding(CanvasGeometry geometry) {
  if (geometry.canvas_height <= geometry.image_height || geometry.canvas_width <= geometry.image_width) {
    throw Error(ErrorCode::configuration, "padding prompt needs a canvas strictly larger than the image");
  }
  Prompt p(PromptKind::padding, geometry);
  p.params_.add("prompt", Tensor({geometry.border_size()}), true);
  return p;
}

Prompt Prompt::watermark(CanvasGeometry geometry, Tensor mask) {
  Prompt p(PromptKind::watermark, geometry);
  const Shape shape{geometry.canvas_height, geometry.canvas_width, geometry.channels};
  if (mask.shape() != shape) throw Error(ErrorCode::invalid_input, "watermark mask must be " + shape_string(shape));
  for (double v : mask.values()) {
    if (v != 0.0 && v != 1.0) throw Error(ErrorCode::invalid_input, "watermark mask must be binary");
  }
  p.params_.add("prompt", Tensor(shape), true);
  p.mask_ = std::move(mask);
  return p;
}

Tensor Prompt::frame_mask(const CanvasGeometry& g) {
  Tensor m({g.canvas_height, g.canvas_width, g.channels});
  for (std::size_t r = 0; r < g.canvas_height; ++r) {
    for (std::size_t c = 0; c < g.canvas_width; ++c) {
      for (std::size_t ch = 0; ch < g.channels; ++ch) {
        m[(r * g.canvas_width + c) * g.channels + ch] = g.in_window(r, c) ? 0.0 : 1.0;
      }
    }
  }
  return m;
}

void Prompt::set_values(std::span<const double> values) {
  Tensor& v = params_.value(0);
  if (values.size() != v.size()) throw Error(ErrorCode::invalid_input, "prompt value count mismatch");
  std::copy(values.begin(), values.end(), v.values().begin());
}

Tensor Prompt::flatten_input(const Tensor& images) const {
  const CanvasGeometry& g = geometry_;
  if (images.rank() == 4 && images.dim(1) == g.image_height && images.dim(2) == g.image_width && images.dim(3) == g.channels) {
    return images.reshaped({images.dim(0), g.image_size()});
  }
  if (images.rank() == 3 && images.dim(0) == g.image_height && images.dim(1) == g.image_width && images.dim(2) == g.channels) {
    return images.reshaped({1, g.image_size()});
  }
  throw Error(ErrorCode::invalid_input, "prompt expects images of " +
                                            shape_string({g.image_height, g.image_width, g.channels}) + ", got " +
                                            shape_string(images.shape()));
}

Tensor Prompt::apply(const Tensor& images) const {
  const CanvasGeometry& g = geometry_;
  const Tensor rows = flatten_input(images);
  const std::size_t batch = rows.dim(0);
  const Tensor& p = params_.value(0);
  Tensor out({batch, g.canvas_height, g.canvas_width, g.channels});
  const auto& index = *index_;
  std::vector<double> program;
  if (kind_ == PromptKind::watermark) {
    program.resize(p.size());
    for (std::size_t j = 0; j < p.size(); ++j) program[j] = std::tanh(p[j]) * mask_[j];
  }
  for (std::size_t b = 0; b < batch; ++b) {
    auto src = rows.row(b);
    auto dst = out.row(b);
    for (std::size_t j = 0; j < index.size(); ++j) {
      const std::int64_t s = index[j];
      if (kind_ == PromptKind::padding) {
        dst[j] = s >= 0 ? src[static_cast<std::size_t>(s)] : p[static_cast<std::size_t>(-s - 1)];
      } else {
        const double base = s >= 0 ? src[static_cast<std::size_t>(s)] : 0.0;
        dst[j] = std::clamp(base + program[j], 0.0, 1.0);
      }
    }
  }
  return out;
}

NodeId Prompt::record_with(Graph& graph, NodeId rows, NodeId prompt) const {
  const CanvasGeometry& g = geometry_;
  if (kind_ == PromptKind::padding) return graph.embed(rows, prompt, index_, g.canvas_size());
  NodeId zeros = g.border_size() == 0 ? Graph::no_node : graph.constant(Tensor({g.border_size()}));
  NodeId placed = graph.embed(rows, zeros, index_, g.canvas_size());
  NodeId flat = graph.reshape(prompt, {g.canvas_size()});
  NodeId program = graph.mul_constant(graph.tanh(flat), mask_.reshaped({g.canvas_size()}));
  return graph.clamp(graph.add_bias(placed, program), 0.0, 1.0);
}

NodeId Prompt::record(Graph& graph, NodeId rows) { return record_with(graph, rows, graph.parameter(params_, "prompt")); }

NodeId Prompt::record_frozen(Graph& graph, NodeId rows) const {
  return record_with(graph, rows, graph.constant(params_.value(0)));
}

}  // namespace bbal
