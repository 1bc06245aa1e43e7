#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "bbal/classifier.hpp"
#include "bbal/local_model.hpp"
#include "json.hpp"

namespace bbal {

/// Binary container shared by model checkpoints and prompt artifacts:
///
///   "BBAL" | u32 version | u32 header length | header JSON text
///   | little-endian f64 blocks in declaration order
///
/// The header carries a "blocks" array of {name, shape} that fixes the
/// order and size of the f64 blocks that follow.
inline constexpr char kContainerMagic[4] = {'B', 'B', 'A', 'L'};
inline constexpr std::uint32_t kContainerVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Container {
  nlohmann::json header;
  std::vector<NamedTensor> blocks;

  const Tensor& block(std::string_view name) const;
};

void write_container(const std::filesystem::path& path, nlohmann::json header, const std::vector<NamedTensor>& blocks);
Container read_container(const std::filesystem::path& path);

void save_classifier(const std::filesystem::path& path, const Classifier& model);
Classifier load_classifier(const std::filesystem::path& path);

void save_local_model(const std::filesystem::path& path, const LocalModel& model);
LocalModel load_local_model(const std::filesystem::path& path);

// Little-endian primitives, also used by the dataset file format.
void write_u32(std::ostream& out, std::uint32_t v);
void write_f64(std::ostream& out, double v);
std::uint32_t read_u32(std::istream& in);
double read_f64(std::istream& in);

}  // namespace bbal
