#include "bbal/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <string>

#include "bbal/checkpoint.hpp"
#include "bbal/error.hpp"
#include "bbal/rng.hpp"

namespace bbal {

std::string_view to_string(TaskKind kind) { return kind == TaskKind::source ? "source" : "target"; }

std::optional<TaskKind> parse_task_kind(std::string_view name) {
  if (name == "source") return TaskKind::source;
  if (name == "target") return TaskKind::target;
  return std::nullopt;
}

Tensor pattern_image(std::size_t slot, std::size_t height, std::size_t width, std::size_t channels,
                     double rotation_degrees) {
  if (slot >= kPatternSlots) throw Error(ErrorCode::configuration, "pattern slot out of range");
  const double pi = std::numbers::pi;
  const double theta = static_cast<double>(slot % 8) * pi / 8.0 + rotation_degrees * pi / 180.0;
  const double freq = 0.06 + 0.04 * static_cast<double>(slot / 8);
  const double phase = 2.0 * pi * std::fmod(static_cast<double>(slot) * 0.6180339887498949, 1.0);
  const double cy = (static_cast<double>(height) - 1.0) / 2.0;
  const double cx = (static_cast<double>(width) - 1.0) / 2.0;
  Tensor img({height, width, channels});
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double u = (static_cast<double>(x) - cx) * std::cos(theta) + (static_cast<double>(y) - cy) * std::sin(theta);
      for (std::size_t c = 0; c < channels; ++c) {
        // Channels share the pattern with a small per-channel phase offset.
        const double v = 0.5 + 0.4 * std::sin(2.0 * pi * freq * u + phase + 0.5 * static_cast<double>(c));
        img[(y * width + x) * channels + c] = v;
      }
    }
  }
  return img;
}

SyntheticTask generate_task(const TaskSpec& spec) {
  if (spec.classes < 2 || spec.per_class < 1 || spec.height < 1 || spec.width < 1 || spec.channels < 1) {
    throw Error(ErrorCode::configuration, "synthetic task parameters must be positive (at least 2 classes)");
  }
  if (spec.classes > kPatternSlots) {
    throw Error(ErrorCode::configuration, "synthetic task asks for " + std::to_string(spec.classes) +
                                              " classes but only " + std::to_string(kPatternSlots) +
                                              " patterns exist");
  }
  if (!(spec.shift.noise_sigma >= 0.0)) throw Error(ErrorCode::configuration, "noise sigma must be >= 0");
  const std::size_t first =
      spec.first_slot.value_or(spec.kind == TaskKind::source ? 0 : kPatternSlots - spec.classes);
  if (first + spec.classes > kPatternSlots) throw Error(ErrorCode::configuration, "pattern slots out of range");
  const double rotation = spec.kind == TaskKind::target ? spec.shift.rotation_degrees : 0.0;

  const std::size_t n = spec.classes * spec.per_class;
  const std::size_t pixels = spec.height * spec.width * spec.channels;
  SyntheticTask task{spec, {}};
  task.data.classes = spec.classes;
  task.data.images = Tensor({n, spec.height, spec.width, spec.channels});
  task.data.labels.resize(n);
  Rng rng(Rng::derive(spec.seed, to_string(spec.kind)));
  for (std::size_t k = 0; k < spec.classes; ++k) {
    const Tensor base = pattern_image(first + k, spec.height, spec.width, spec.channels, rotation);
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      const std::size_t row = k * spec.per_class + i;
      task.data.labels[row] = k;
      auto out = task.data.images.row(row);
      for (std::size_t j = 0; j < pixels; ++j) {
        const double noise = spec.shift.noise_sigma > 0.0 ? spec.shift.noise_sigma * rng.normal() : 0.0;
        out[j] = std::clamp(base[j] + noise, 0.0, 1.0);
      }
    }
  }
  return task;
}

void write_dataset(const std::filesystem::path& path, const Dataset& data) {
  data.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
  out.write(kDatasetMagic, 4);
  write_u32(out, kDatasetVersion);
  for (std::size_t v : {data.classes, data.size(), data.height(), data.width(), data.channels()}) {
    write_u32(out, static_cast<std::uint32_t>(v));
  }
  for (double v : data.images.values()) write_f64(out, v);
  for (std::size_t y : data.labels) write_u32(out, static_cast<std::uint32_t>(y));
  if (!out) throw Error(ErrorCode::io, "write failed for " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot read " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || !std::equal(magic, magic + 4, kDatasetMagic)) throw Error(ErrorCode::io, path.string() + " is not a dataset file");
  if (read_u32(in) != kDatasetVersion) throw Error(ErrorCode::io, "unsupported dataset version in " + path.string());
  Dataset d;
  d.classes = read_u32(in);
  const std::size_t n = read_u32(in), h = read_u32(in), w = read_u32(in), c = read_u32(in);
  if (n == 0 || h == 0 || w == 0 || c == 0) throw Error(ErrorCode::io, "empty dataset dimensions in " + path.string());
  d.images = Tensor({n, h, w, c});
  for (double& v : d.images.values()) v = read_f64(in);
  d.labels.resize(n);
  for (std::size_t& y : d.labels) y = read_u32(in);
  if (!in) throw Error(ErrorCode::io, "truncated dataset file " + path.string());
  d.validate();
  return d;
}

}  // namespace bbal
