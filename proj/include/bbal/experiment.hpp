#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bbal/classifier.hpp"
#include "bbal/priming.hpp"
#include "bbal/reprogram.hpp"
#include "bbal/service_api.hpp"
#include "bbal/synthetic.hpp"
#include "bbal/theory.hpp"
#include "bbal/zoo.hpp"
#include "json.hpp"

namespace bbal {

enum class Method { ares, ares_ms, zoo_rgf, zoo_spsa, local_vr, local_lp, local_vr_lp, zero_shot };

std::string_view to_string(Method m);
std::optional<Method> parse_method(std::string_view name);

enum class LabelSpace { disjoint, shared };

struct DataConfig {
  std::size_t source_classes = 20;
  std::size_t source_per_class = 100;
  std::size_t target_classes = 5;
  std::size_t shots = 16;
  std::size_t test_per_class = 200;
  std::size_t image_size = 16;
  std::size_t canvas_size = 24;
  std::size_t channels = 1;
  double rotation_degrees = 20.0;
  double noise_sigma = 0.05;
};

struct ModelConfig {
  std::vector<std::size_t> hidden;
  TrainConfig train;
};

struct ServiceConfig {
  ModelConfig model{{128, 128}, {}};
  OutputSpec output;
  Robustness robustness;
  double price_per_call = 1e-3;
  bool debug_logits = false;
};

enum class QStar { transfer, zoo };

struct TheoryConfig {
  bool enabled = false;
  /// Service-side prompt: reuse the local prompt, or train one with
  /// zoo_spsa through a separate, unmetered service instance.
  QStar q_star = QStar::transfer;
};

struct ExperimentConfig {
  Method method = Method::ares;
  std::uint64_t seed = 0;
  /// Seed for data and pretrained models; defaults to `seed`.
  std::optional<std::uint64_t> world_seed;
  LabelSpace label_space = LabelSpace::disjoint;
  DataConfig data;
  ServiceConfig service;
  ModelConfig local{{64}, {}};
  PrimingConfig priming;
  VrConfig vr;
  /// Unset means identity for shared label spaces and FLM otherwise.
  std::optional<MapKind> map;
  ZooConfig zoo;
  double tau = 0.0;
  double holdout_fraction = 0.2;
  TheoryConfig theory;

  std::uint64_t effective_world_seed() const { return world_seed.value_or(seed); }
  MapKind effective_map() const;
  CanvasGeometry geometry() const;
  void validate() const;

  /// Strict parse: unknown keys are a configuration error.
  static ExperimentConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// Datasets and pretrained networks shared by every method for one world seed.
struct World {
  Dataset source;
  Dataset target_train;
  Dataset target_test;
  Classifier service;
  double service_train_accuracy = 0.0;
  Classifier local;
  double local_train_accuracy = 0.0;
};

struct WorldData {
  Dataset source;
  Dataset target_train;
  Dataset target_test;
};

/// The three datasets of a world, without training any model.
WorldData generate_world_data(const ExperimentConfig& config);
Architecture service_architecture(const ExperimentConfig& config);
Architecture local_architecture(const ExperimentConfig& config);
ServiceOptions service_options(const ExperimentConfig& config);
/// Prompt of the configured kind with every border pixel at `vr.prompt_init`.
Prompt make_prompt(const ExperimentConfig& config);

/// Builds (or returns the cached) world for a config.
std::shared_ptr<const World> build_world(const ExperimentConfig& config);
void clear_world_cache();

enum class Path { local, api };
std::string_view to_string(Path p);

/// local iff primed_local_acc >= zero_shot_acc - tau.
Path select_path(double zero_shot_acc, double primed_local_acc, double tau);

struct ExperimentReport {
  std::string method;
  std::uint64_t seed = 0;
  std::uint64_t world_seed = 0;
  /// Empty when the method does not apply (zero-shot on disjoint labels).
  std::optional<double> test_accuracy;
  std::uint64_t train_calls = 0;
  std::uint64_t infer_calls = 0;
  std::uint64_t debug_calls = 0;
  double price_per_call = 0.0;
  double cost = 0.0;
  nlohmann::json selection;
  nlohmann::json loss_curves = nlohmann::json::object();
  nlohmann::json diagnostics = nlohmann::json::object();
  std::optional<BoundReport> theory;
  std::vector<std::string> notes;
  nlohmann::json config;

  nlohmann::json to_json() const;
  /// Sorted keys, trailing newline.
  std::string dump() const;
};

/// Runs one method end to end and asserts its call-count postconditions
/// (gate error on mismatch).
ExperimentReport run_experiment(const ExperimentConfig& config);

/// Expected train-phase calls of a zoo run on `n` images.
std::uint64_t expected_zoo_calls(const ZooConfig& config, std::size_t n);

struct SuiteRow {
  std::string label;
  std::string method;
  std::size_t runs = 0;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
  double mean_train_calls = 0.0;
  double mean_infer_calls = 0.0;
  double mean_cost = 0.0;
  std::string status = "ok";
  std::vector<ExperimentReport> reports;
};

/// Every config under every seed; a failing run marks its row failed and
/// the suite moves on.
std::vector<SuiteRow> compare_suite(std::span<const ExperimentConfig> configs, std::span<const std::uint64_t> seeds);
std::string suite_csv(std::span<const SuiteRow> rows);

}  // namespace bbal
