#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string_view>

#include "bbal/dataset.hpp"

namespace bbal {

/// Distinct class patterns available to the generator (8 orientations x 8
/// frequency bands).
inline constexpr std::size_t kPatternSlots = 64;

enum class TaskKind { source, target };

std::string_view to_string(TaskKind kind);
std::optional<TaskKind> parse_task_kind(std::string_view name);

struct TaskShift {
  double rotation_degrees = 0.0;
  double noise_sigma = 0.0;
};

struct TaskSpec {
  TaskKind kind = TaskKind::source;
  std::size_t classes = 0;
  std::size_t per_class = 0;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 1;
  std::uint64_t seed = 0;
  TaskShift shift;
  /// First pattern slot. Defaults to 0 for source tasks and to
  /// kPatternSlots - classes for target tasks, which keeps the two apart.
  std::optional<std::size_t> first_slot;
};

struct SyntheticTask {
  TaskSpec spec;
  Dataset data;
};

/// Oriented sinusoid per class plus Gaussian pixel noise, clamped to
/// [0, 1]. Target tasks rotate every pattern by the shift angle. Images are
/// ordered class-major.
SyntheticTask generate_task(const TaskSpec& spec);

/// Noise-free pattern of one slot, [H, W, C].
Tensor pattern_image(std::size_t slot, std::size_t height, std::size_t width, std::size_t channels,
                     double rotation_degrees);

inline constexpr char kDatasetMagic[4] = {'B', 'B', 'D', 'S'};
inline constexpr std::uint32_t kDatasetVersion = 1;

void write_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace bbal
