#include "bbal/reprogram.hpp"

#include <cmath>
#include <string>

#include "bbal/checkpoint.hpp"
#include "bbal/error.hpp"
#include "bbal/losses.hpp"
#include "bbal/optim.hpp"
#include "bbal/rng.hpp"

namespace bbal {

void VrConfig::validate() const {
  if (epochs < 1) throw Error(ErrorCode::configuration, "vr epochs must be >= 1");
  if (!(lr > 0.0)) throw Error(ErrorCode::configuration, "vr learning rate must be positive");
  if (batch < 1) throw Error(ErrorCode::configuration, "vr batch must be >= 1");
  if (refresh_every < 1) throw Error(ErrorCode::configuration, "label map refresh interval must be >= 1");
  if (!(blm_alpha > 0.0)) throw Error(ErrorCode::configuration, "blm smoothing must be positive");
  if (!(prompt_init >= 0.0 && prompt_init < 1.0)) {
    throw Error(ErrorCode::configuration, "prompt init must lie in [0, 1)");
  }
}

LabelMap fit_label_map(MapKind kind, const Tensor& source_probs, std::span<const std::size_t> labels,
                       std::size_t target_classes, double blm_alpha) {
  const std::size_t ks = source_probs.dim(1);
  switch (kind) {
    case MapKind::identity:
      if (ks != target_classes) {
        throw Error(ErrorCode::configuration, "identity map needs matching label spaces (" + std::to_string(ks) +
                                                  " vs " + std::to_string(target_classes) + ")");
      }
      return LabelMap::identity(ks);
    case MapKind::flm: {
      const auto predicted = predict_classes(source_probs);
      return flm_fit(predicted, labels, ks, target_classes);
    }
    case MapKind::blm: return blm_fit(source_probs, labels, target_classes, blm_alpha);
  }
  return LabelMap::identity(ks);
}

Tensor prompted_probabilities(const LocalModel& local, const Prompt& prompt, const Tensor& images) {
  Tensor z = local.logits(prompt.apply(images));
  for (std::size_t i = 0; i < z.dim(0); ++i) {
    auto row = z.row(i);
    Tensor p = softmax(Tensor({row.size()}, std::vector<double>(row.begin(), row.end())));
    std::copy(p.values().begin(), p.values().end(), row.begin());
  }
  return z;
}

VrResult train_prompt_foo(const LocalModel& local, Prompt& prompt, const Dataset& data, const VrConfig& config) {
  config.validate();
  data.validate();
  if (prompt.geometry().canvas_size() != local.input_size()) {
    throw Error(ErrorCode::invalid_input, "prompt canvas does not match the local model input");
  }
  data.images.require_finite("train_prompt_foo images");
  const std::size_t n = data.size();
  const std::size_t row = prompt.geometry().image_size();
  const Tensor rows = data.images.reshaped({n, row});
  Rng rng(Rng::derive(config.seed, "vr-batches"));
  Adam adam(config.lr);
  VrResult result{LabelMap::identity(2), {}};
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    if (epoch % config.refresh_every == 0) {
      Tensor probs;
      try {
        probs = prompted_probabilities(local, prompt, data.images);
      } catch (const Error& e) {
        // Inputs were checked above, so a non-finite forward pass is divergence.
        throw Error(ErrorCode::training, "prompt forward diverged at epoch " + std::to_string(epoch) + ": " + e.what());
      }
      result.map = fit_label_map(config.map, probs, data.labels, data.classes, config.blm_alpha);
    }
    const auto order = rng.permutation(n);
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += config.batch) {
      const std::size_t end = std::min(n, start + config.batch);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      std::vector<std::size_t> y;
      for (std::size_t i : idx) y.push_back(data.labels[i]);
      Graph g;
      NodeId x = g.constant(rows.gather_rows(idx));
      NodeId z = local.forward(g, prompt.record(g, x));
      NodeId loss = g.mapped_nll(z, y, result.map.matrix());
      const double v = g.value(loss)[0];
      if (!std::isfinite(v)) throw Error(ErrorCode::training, "prompt loss diverged at epoch " + std::to_string(epoch));
      total += v * static_cast<double>(idx.size());
      prompt.params().zero_grad();
      g.backward(loss);
      adam.step(prompt.params());
    }
    result.loss_curve.push_back(total / static_cast<double>(n));
  }
  return result;
}

std::vector<std::size_t> mapped_predictions(const LabelMap& map, const Tensor& source_probs) {
  std::vector<std::size_t> out;
  out.reserve(source_probs.dim(0));
  for (std::size_t i = 0; i < source_probs.dim(0); ++i) {
    auto row = source_probs.row(i);
    out.push_back(argmax(map.apply(Tensor({row.size()}, std::vector<double>(row.begin(), row.end()))).values()));
  }
  return out;
}

std::vector<std::size_t> infer_batch(const LocalModel& local, const Prompt& prompt, const LabelMap& map,
                                     const Tensor& images) {
  return mapped_predictions(map, prompted_probabilities(local, prompt, images));
}

std::size_t infer(const LocalModel& local, const Prompt& prompt, const LabelMap& map, const Tensor& image) {
  if (image.rank() != 3) throw Error(ErrorCode::invalid_input, "infer expects one [h, w, C] image");
  Shape s = image.shape();
  s.insert(s.begin(), 1);
  return infer_batch(local, prompt, map, image.reshaped(s)).front();
}

namespace {

nlohmann::json geometry_json(const CanvasGeometry& g) {
  return {{"image_height", g.image_height}, {"image_width", g.image_width}, {"canvas_height", g.canvas_height},
          {"canvas_width", g.canvas_width}, {"channels", g.channels}};
}

CanvasGeometry geometry_from(const nlohmann::json& j) {
  CanvasGeometry g;
  g.image_height = j.at("image_height").get<std::size_t>();
  g.image_width = j.at("image_width").get<std::size_t>();
  g.canvas_height = j.at("canvas_height").get<std::size_t>();
  g.canvas_width = j.at("canvas_width").get<std::size_t>();
  g.channels = j.at("channels").get<std::size_t>();
  return g;
}

}  // namespace

void save_prompt_artifact(const std::filesystem::path& path, const Prompt& prompt, const LabelMap& map) {
  nlohmann::json header = {{"kind", "prompt"},
                           {"prompt_kind", to_string(prompt.kind())},
                           {"geometry", geometry_json(prompt.geometry())},
                           {"map_kind", to_string(map.kind())},
                           {"map_assignment", map.assignment()}};
  std::vector<NamedTensor> blocks = {{"prompt", prompt.params().value(0)}};
  if (prompt.kind() == PromptKind::watermark) blocks.push_back({"mask", prompt.mask()});
  blocks.push_back({"map", map.matrix()});
  write_container(path, std::move(header), blocks);
}

PromptArtifact load_prompt_artifact(const std::filesystem::path& path) {
  Container c = read_container(path);
  try {
    if (c.header.at("kind") != "prompt") throw Error(ErrorCode::io, path.string() + " is not a prompt artifact");
    const CanvasGeometry geom = geometry_from(c.header.at("geometry"));
    const auto kind = parse_prompt_kind(c.header.at("prompt_kind").get<std::string>());
    const auto map_kind = parse_map_kind(c.header.at("map_kind").get<std::string>());
    if (!kind || !map_kind) throw Error(ErrorCode::io, "unknown prompt or map kind in " + path.string());
    Prompt prompt = *kind == PromptKind::padding ? Prompt::padding(geom) : Prompt::watermark(geom, c.block("mask"));
    prompt.set_values(c.block("prompt").values());
    const Tensor& m = c.block("map");
    LabelMap map = *map_kind == MapKind::identity ? LabelMap::identity(m.dim(0))
                   : *map_kind == MapKind::flm
                       ? LabelMap::flm(c.header.at("map_assignment").get<std::vector<std::size_t>>(), m.dim(1))
                       : LabelMap::blm(m);
    return {std::move(prompt), std::move(map)};
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::io, "malformed prompt artifact header: " + std::string(e.what()));
  }
}

}  // namespace bbal
