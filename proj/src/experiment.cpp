#include "bbal/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <mutex>
#include <set>
#include <sstream>

#include "bbal/error.hpp"
#include "bbal/losses.hpp"
#include "bbal/rng.hpp"

namespace bbal {

using nlohmann::json;

std::string_view to_string(Method m) {
  switch (m) {
    case Method::ares: return "ares";
    case Method::ares_ms: return "ares_ms";
    case Method::zoo_rgf: return "zoo_rgf";
    case Method::zoo_spsa: return "zoo_spsa";
    case Method::local_vr: return "local_vr";
    case Method::local_lp: return "local_lp";
    case Method::local_vr_lp: return "local_vr_lp";
    case Method::zero_shot: return "zero_shot";
  }
  return "ares";
}

std::optional<Method> parse_method(std::string_view name) {
  for (auto m : {Method::ares, Method::ares_ms, Method::zoo_rgf, Method::zoo_spsa, Method::local_vr, Method::local_lp,
                 Method::local_vr_lp, Method::zero_shot}) {
    if (to_string(m) == name) return m;
  }
  return std::nullopt;
}

std::string_view to_string(Path p) { return p == Path::local ? "local" : "api"; }

Path select_path(double zero_shot_acc, double primed_local_acc, double tau) {
  return primed_local_acc >= zero_shot_acc - tau ? Path::local : Path::api;
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

// Reads the members of one JSON object and rejects any it was not asked for.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw Error(ErrorCode::configuration, path_ + " must be an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw Error(ErrorCode::configuration, where(key) + ": " + e.what());
    }
  }

  template <typename T, typename Parse>
  void get_enum(const std::string& key, T& out, Parse parse) {
    std::string name;
    if (!j_.contains(key)) return;
    get(key, name);
    auto v = parse(name);
    if (!v) throw Error(ErrorCode::configuration, where(key) + ": unknown value \"" + name + "\"");
    out = *v;
  }

  const json* child(const std::string& key) {
    if (!j_.contains(key)) return nullptr;
    used_.insert(key);
    return &j_.at(key);
  }

  std::string where(const std::string& key) const { return path_ + "." + key; }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!used_.count(item.key())) throw Error(ErrorCode::configuration, "unknown key " + where(item.key()));
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

std::optional<LabelSpace> parse_label_space(std::string_view s) {
  if (s == "disjoint") return LabelSpace::disjoint;
  if (s == "shared") return LabelSpace::shared;
  return std::nullopt;
}

std::string_view to_string(LabelSpace s) { return s == LabelSpace::shared ? "shared" : "disjoint"; }

std::optional<QStar> parse_q_star(std::string_view s) {
  if (s == "transfer") return QStar::transfer;
  if (s == "zoo") return QStar::zoo;
  return std::nullopt;
}

std::string_view to_string(QStar q) { return q == QStar::zoo ? "zoo" : "transfer"; }

std::optional<Robustness::Kind> parse_robustness(std::string_view s) {
  if (s == "none") return Robustness::Kind::none;
  if (s == "quantize") return Robustness::Kind::quantize;
  return std::nullopt;
}

void read_train(const json& j, const std::string& path, TrainConfig& t) {
  Fields f(j, path);
  f.get("epochs", t.epochs);
  f.get("lr", t.lr);
  f.get("batch", t.batch);
  f.finish();
}

void read_model(const json& j, const std::string& path, ModelConfig& m) {
  Fields f(j, path);
  f.get("hidden", m.hidden);
  if (const json* t = f.child("train")) read_train(*t, path + ".train", m.train);
  f.finish();
}

json train_json(const TrainConfig& t) { return {{"epochs", t.epochs}, {"lr", t.lr}, {"batch", t.batch}}; }
json model_json(const ModelConfig& m) { return {{"hidden", m.hidden}, {"train", train_json(m.train)}}; }

}  // namespace

MapKind ExperimentConfig::effective_map() const {
  if (map) return *map;
  return label_space == LabelSpace::shared ? MapKind::identity : MapKind::flm;
}

CanvasGeometry ExperimentConfig::geometry() const {
  CanvasGeometry g;
  g.image_height = g.image_width = data.image_size;
  g.canvas_height = g.canvas_width = data.canvas_size;
  g.channels = data.channels;
  return g;
}

void ExperimentConfig::validate() const {
  const auto& d = data;
  if (d.shots < 1) throw Error(ErrorCode::configuration, "shots must be >= 1");
  if (d.source_classes < 2 || d.target_classes < 2) throw Error(ErrorCode::configuration, "need at least 2 classes");
  if (d.source_per_class < 1 || d.test_per_class < 1) throw Error(ErrorCode::configuration, "per-class counts must be >= 1");
  if (label_space == LabelSpace::disjoint && d.source_classes + d.target_classes > kPatternSlots) {
    throw Error(ErrorCode::configuration, "source and target classes together exceed the pattern slots");
  }
  if (d.canvas_size <= d.image_size) throw Error(ErrorCode::configuration, "canvas must be larger than the image");
  if (d.noise_sigma < 0.0) throw Error(ErrorCode::configuration, "noise sigma must be >= 0");
  if (service.model.hidden.empty() || local.hidden.empty()) {
    throw Error(ErrorCode::configuration, "service and local networks need at least one hidden layer");
  }
  if (service.output.mode != OutputMode::full) {
    const std::size_t ks = label_space == LabelSpace::shared ? d.target_classes : d.source_classes;
    if (service.output.k < 1 || service.output.k > ks) throw Error(ErrorCode::configuration, "top-k needs 1 <= k <= K");
    if (service.output.mode == OutputMode::topk_hard && service.output.k == ks) {
      throw Error(ErrorCode::configuration, "top-k hard output needs k < K");
    }
  }
  if (service.robustness.kind == Robustness::Kind::quantize && service.robustness.levels < 2) {
    throw Error(ErrorCode::configuration, "quantize needs at least 2 levels");
  }
  if (!(service.price_per_call >= 0.0)) throw Error(ErrorCode::configuration, "price per call must be >= 0");
  if (!(tau >= 0.0)) throw Error(ErrorCode::configuration, "tau must be >= 0");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
    throw Error(ErrorCode::configuration, "holdout fraction must lie in (0, 1)");
  }
  if (effective_map() == MapKind::identity && label_space == LabelSpace::disjoint) {
    throw Error(ErrorCode::configuration, "identity map needs a shared label space");
  }
  if (theory.enabled) {
    if (label_space != LabelSpace::shared) throw Error(ErrorCode::configuration, "theory checks need a shared label space");
    if (!service.debug_logits) throw Error(ErrorCode::configuration, "theory checks need service debug logits");
  }
  priming.validate();
  vr.validate();
  zoo.validate();
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  Fields top(j, "config");
  top.get_enum("method", c.method, parse_method);
  top.get("seed", c.seed);
  if (j.contains("world_seed")) {
    std::uint64_t ws = 0;
    top.get("world_seed", ws);
    c.world_seed = ws;
  }
  top.get_enum("label_space", c.label_space, parse_label_space);
  top.get("tau", c.tau);
  top.get("holdout_fraction", c.holdout_fraction);
  if (j.contains("map")) {
    MapKind m = MapKind::blm;
    top.get_enum("map", m, parse_map_kind);
    c.map = m;
  }
  if (const json* d = top.child("data")) {
    Fields f(*d, "config.data");
    f.get("source_classes", c.data.source_classes);
    f.get("source_per_class", c.data.source_per_class);
    f.get("target_classes", c.data.target_classes);
    f.get("shots", c.data.shots);
    f.get("test_per_class", c.data.test_per_class);
    f.get("image_size", c.data.image_size);
    f.get("canvas_size", c.data.canvas_size);
    f.get("channels", c.data.channels);
    f.get("rotation_degrees", c.data.rotation_degrees);
    f.get("noise_sigma", c.data.noise_sigma);
    f.finish();
  }
  if (const json* s = top.child("service")) {
    Fields f(*s, "config.service");
    f.get("hidden", c.service.model.hidden);
    if (const json* t = f.child("train")) read_train(*t, "config.service.train", c.service.model.train);
    f.get_enum("output_mode", c.service.output.mode, parse_output_mode);
    f.get("k", c.service.output.k);
    f.get_enum("robustness", c.service.robustness.kind, parse_robustness);
    f.get("levels", c.service.robustness.levels);
    f.get("price_per_call", c.service.price_per_call);
    f.get("debug_logits", c.service.debug_logits);
    f.finish();
  }
  if (const json* l = top.child("local")) read_model(*l, "config.local", c.local);
  if (const json* p = top.child("priming")) {
    Fields f(*p, "config.priming");
    f.get_enum("loss", c.priming.loss, parse_priming_loss);
    f.get("lr", c.priming.lr);
    f.get("epochs", c.priming.epochs);
    f.get("batch", c.priming.batch);
    f.finish();
  }
  if (const json* v = top.child("vr")) {
    Fields f(*v, "config.vr");
    f.get("lr", c.vr.lr);
    f.get("epochs", c.vr.epochs);
    f.get("batch", c.vr.batch);
    f.get("refresh_every", c.vr.refresh_every);
    f.get("blm_alpha", c.vr.blm_alpha);
    f.get_enum("prompt", c.vr.prompt, parse_prompt_kind);
    f.get("prompt_init", c.vr.prompt_init);
    f.finish();
  }
  if (const json* z = top.child("zoo")) {
    Fields f(*z, "config.zoo");
    f.get("q", c.zoo.q);
    f.get("mu", c.zoo.mu);
    f.get("c0", c.zoo.c0);
    f.get("a0", c.zoo.a0);
    f.get("stability_fraction", c.zoo.stability_fraction);
    f.get("beta", c.zoo.beta);
    f.get("steps", c.zoo.steps);
    f.get("batch", c.zoo.batch);
    f.get("gamma", c.zoo.gamma);
    f.get("refresh_every", c.zoo.refresh_every);
    if (z->contains("max_calls")) {
      std::uint64_t cap = 0;
      f.get("max_calls", cap);
      c.zoo.max_calls = cap;
    }
    f.finish();
  }
  if (const json* t = top.child("theory")) {
    Fields f(*t, "config.theory");
    f.get("enabled", c.theory.enabled);
    f.get_enum("q_star", c.theory.q_star, parse_q_star);
    f.finish();
  }
  top.finish();
  if (c.service.robustness.kind == Robustness::Kind::none) c.service.robustness.levels = 0;
  c.validate();
  return c;
}

json ExperimentConfig::to_json() const {
  json j;
  j["method"] = to_string(method);
  j["seed"] = seed;
  j["world_seed"] = effective_world_seed();
  j["label_space"] = to_string(label_space);
  j["map"] = to_string(effective_map());
  j["tau"] = tau;
  j["holdout_fraction"] = holdout_fraction;
  j["data"] = {{"source_classes", data.source_classes}, {"source_per_class", data.source_per_class},
               {"target_classes", data.target_classes}, {"shots", data.shots},
               {"test_per_class", data.test_per_class}, {"image_size", data.image_size},
               {"canvas_size", data.canvas_size},       {"channels", data.channels},
               {"rotation_degrees", data.rotation_degrees}, {"noise_sigma", data.noise_sigma}};
  j["service"] = {{"hidden", service.model.hidden},
                  {"train", train_json(service.model.train)},
                  {"output_mode", to_string(service.output.mode)},
                  {"k", service.output.k},
                  {"robustness", service.robustness.kind == Robustness::Kind::quantize ? "quantize" : "none"},
                  {"levels", service.robustness.levels},
                  {"price_per_call", service.price_per_call},
                  {"debug_logits", service.debug_logits}};
  j["local"] = model_json(local);
  j["priming"] = {{"loss", to_string(priming.loss)}, {"lr", priming.lr}, {"epochs", priming.epochs},
                  {"batch", priming.batch}};
  j["vr"] = {{"lr", vr.lr},
             {"epochs", vr.epochs},
             {"batch", vr.batch},
             {"refresh_every", vr.refresh_every},
             {"blm_alpha", vr.blm_alpha},
             {"prompt", to_string(vr.prompt)},
             {"prompt_init", vr.prompt_init}};
  j["zoo"] = {{"q", zoo.q},
              {"mu", zoo.mu},
              {"c0", zoo.c0},
              {"a0", zoo.a0},
              {"stability_fraction", zoo.stability_fraction},
              {"beta", zoo.beta},
              {"steps", zoo.steps},
              {"batch", zoo.batch},
              {"gamma", zoo.gamma},
              {"refresh_every", zoo.refresh_every},
              {"max_calls", zoo.max_calls ? json(*zoo.max_calls) : json(nullptr)}};
  j["theory"] = {{"enabled", theory.enabled}, {"q_star", to_string(theory.q_star)}};
  return j;
}

// ---------------------------------------------------------------------------
// World

namespace {

std::size_t source_class_count(const ExperimentConfig& c) {
  return c.label_space == LabelSpace::shared ? c.data.target_classes : c.data.source_classes;
}

Architecture make_arch(const ExperimentConfig& c, const std::vector<std::size_t>& hidden) {
  Architecture a;
  a.height = a.width = c.data.canvas_size;
  a.channels = c.data.channels;
  a.hidden = hidden;
  a.activation = Activation::tanh;
  a.classes = source_class_count(c);
  return a;
}

std::string world_key(const ExperimentConfig& c) {
  const json cfg = c.to_json();
  json key = {{"world_seed", c.effective_world_seed()},
              {"label_space", to_string(c.label_space)},
              {"data", cfg["data"]},
              {"service", model_json(c.service.model)},
              {"local", cfg["local"]}};
  return key.dump();
}

std::shared_ptr<const World> make_world(const ExperimentConfig& c) {
  const std::uint64_t ws = c.effective_world_seed();
  WorldData data = generate_world_data(c);
  auto service = train_classifier(data.source, service_architecture(c), c.service.model.train,
                                  Rng::derive(ws, "service-model"));
  auto local = train_classifier(data.source, local_architecture(c), c.local.train, Rng::derive(ws, "local-model"));
  return std::make_shared<const World>(World{std::move(data.source), std::move(data.target_train),
                                             std::move(data.target_test), std::move(service.model),
                                             service.train_accuracy, std::move(local.model), local.train_accuracy});
}

std::mutex g_world_mutex;
std::map<std::string, std::shared_ptr<const World>> g_worlds;

}  // namespace

WorldData generate_world_data(const ExperimentConfig& c) {
  const std::uint64_t ws = c.effective_world_seed();
  const auto& d = c.data;

  TaskSpec src;
  src.kind = TaskKind::source;
  src.classes = source_class_count(c);
  src.per_class = d.source_per_class;
  src.height = src.width = d.canvas_size;
  src.channels = d.channels;
  src.seed = Rng::derive(ws, "source-data");
  src.shift = {0.0, d.noise_sigma};
  // Target classes take the slots right after the source classes, so they
  // share the source frequency range without sharing any pattern. Shared
  // label spaces reuse the target slots for the source task.
  const std::size_t target_first = c.label_space == LabelSpace::shared ? 0 : src.classes;
  src.first_slot = 0;

  TaskSpec tgt;
  tgt.kind = TaskKind::target;
  tgt.classes = d.target_classes;
  tgt.per_class = d.shots;
  tgt.height = tgt.width = d.image_size;
  tgt.channels = d.channels;
  tgt.seed = Rng::derive(ws, "target-train");
  tgt.shift = {d.rotation_degrees, d.noise_sigma};
  tgt.first_slot = target_first;
  TaskSpec test = tgt;
  test.per_class = d.test_per_class;
  test.seed = Rng::derive(ws, "target-test");

  return {generate_task(src).data, generate_task(tgt).data, generate_task(test).data};
}

Architecture service_architecture(const ExperimentConfig& c) { return make_arch(c, c.service.model.hidden); }
Architecture local_architecture(const ExperimentConfig& c) { return make_arch(c, c.local.hidden); }

ServiceOptions service_options(const ExperimentConfig& c) {
  ServiceOptions o;
  o.output = c.service.output;
  o.robustness = c.service.robustness;
  o.price_per_call = c.service.price_per_call;
  o.debug_logits = c.service.debug_logits;
  return o;
}

Prompt make_prompt(const ExperimentConfig& c) {
  const CanvasGeometry g = c.geometry();
  Prompt p = c.vr.prompt == PromptKind::padding ? Prompt::padding(g) : Prompt::watermark(g, Prompt::frame_mask(g));
  // Watermark borders start at zero and add tanh(W).
  const double v = c.vr.prompt == PromptKind::padding ? c.vr.prompt_init : std::atanh(c.vr.prompt_init);
  p.set_values(std::vector<double>(p.dimension(), v));
  return p;
}

std::shared_ptr<const World> build_world(const ExperimentConfig& config) {
  const std::string key = world_key(config);
  {
    std::lock_guard lock(g_world_mutex);
    auto it = g_worlds.find(key);
    if (it != g_worlds.end()) return it->second;
  }
  auto world = make_world(config);
  std::lock_guard lock(g_world_mutex);
  return g_worlds.emplace(key, std::move(world)).first->second;
}

void clear_world_cache() {
  std::lock_guard lock(g_world_mutex);
  g_worlds.clear();
}

// ---------------------------------------------------------------------------
// Reports

json ExperimentReport::to_json() const {
  json j;
  j["method"] = method;
  j["seed"] = seed;
  j["world_seed"] = world_seed;
  j["test_accuracy"] = test_accuracy ? json(*test_accuracy) : json(nullptr);
  j["api_calls"] = {{"train", train_calls}, {"infer", infer_calls}, {"debug", debug_calls}};
  j["price_per_call"] = price_per_call;
  j["cost"] = cost;
  j["selection"] = selection;
  j["loss_curves"] = loss_curves;
  j["diagnostics"] = diagnostics;
  j["theory"] = theory ? theory->to_json() : json(nullptr);
  j["notes"] = notes;
  j["config"] = config;
  return j;
}

std::string ExperimentReport::dump() const { return to_json().dump(2) + "\n"; }

std::uint64_t expected_zoo_calls(const ZooConfig& config, std::size_t n) {
  const std::size_t per_epoch = (n + config.batch - 1) / config.batch;
  std::uint64_t total = 0;
  for (std::size_t step = 0; step < config.steps; ++step) {
    const std::size_t pos = (step % per_epoch) * config.batch;
    total += config.calls_per_step(std::min(n, pos + config.batch) - pos);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Methods

namespace {

double accuracy_of(std::span<const std::size_t> predicted, std::span<const std::size_t> labels) {
  return accuracy(predicted, labels);
}

VrConfig vr_config(const ExperimentConfig& c, MapKind map, std::string_view stage) {
  VrConfig v = c.vr;
  v.map = map;
  v.seed = Rng::derive(c.seed, stage);
  return v;
}

PrimingConfig priming_config(const ExperimentConfig& c, std::string_view stage) {
  PrimingConfig p = c.priming;
  p.seed = Rng::derive(c.seed, stage);
  return p;
}

json curve(const std::vector<double>& v) { return json(v); }

// Runs a stage and tags any library error with its name.
template <typename F>
auto stage(std::string_view name, F&& f) {
  try {
    return f();
  } catch (const BudgetExceeded&) {
    throw;
  } catch (const Error& e) {
    if (e.code() == ErrorCode::gate) throw;
    throw Error(e.code(), "stage " + std::string(name) + ": " + e.what());
  }
}

void require_calls(const ServiceApi& api, std::uint64_t train, std::uint64_t infer, std::string_view method) {
  if (api.calls(Phase::train) != train || api.calls(Phase::infer) != infer) {
    throw Error(ErrorCode::gate, std::string(method) + " call accounting: expected train=" + std::to_string(train) +
                                     " infer=" + std::to_string(infer) + ", metered train=" +
                                     std::to_string(api.calls(Phase::train)) +
                                     " infer=" + std::to_string(api.calls(Phase::infer)));
  }
}

// Stratified split: `fraction` of each class (at least one image when the
// class has two or more) goes to the holdout side.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> holdout_split(const Dataset& data, double fraction,
                                                                            std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::size_t> fit, hold;
  for (std::size_t k = 0; k < data.classes; ++k) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (data.labels[i] == k) members.push_back(i);
    }
    rng.shuffle(members);
    std::size_t h = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(members.size())));
    if (members.size() >= 2) h = std::clamp<std::size_t>(h, 1, members.size() - 1);
    else h = 0;
    hold.insert(hold.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(h));
    fit.insert(fit.end(), members.begin() + static_cast<std::ptrdiff_t>(h), members.end());
  }
  std::sort(fit.begin(), fit.end());
  std::sort(hold.begin(), hold.end());
  return {fit, hold};
}

// Accuracy of a local model with the zero prompt and a map of `kind` fitted
// on the training images.
double zero_prompt_accuracy(const LocalModel& local, const ExperimentConfig& c, const World& w, MapKind kind) {
  const Prompt zero = make_prompt(c);
  const LabelMap map = fit_label_map(kind, prompted_probabilities(local, zero, w.target_train.images),
                                     w.target_train.labels, w.target_train.classes, c.vr.blm_alpha);
  return accuracy_of(infer_batch(local, zero, map, w.target_test.images), w.target_test.labels);
}

struct AresOutcome {
  LocalModel local;
  Prompt prompt;
  LabelMap map;
  SoftLabelSet soft;
};

AresOutcome prime_and_reprogram(const ExperimentConfig& c, const World& w, const ServiceApi& api,
                                const Dataset& vr_data, ExperimentReport& report) {
  const Prompt zero = make_prompt(c);
  const Tensor raw = zero.apply(w.target_train.images);
  SoftLabelSet soft = stage("collect", [&] { return collect_soft_labels(api, raw); });
  if (uses_logits(c.priming.loss)) soft.logits = api.debug_logits(raw);
  LocalModel local = LocalModel::with_fresh_head(w.local, api.num_classes());
  const auto primed = stage("prime", [&] { return prime(local, raw, soft, priming_config(c, "prime")); });
  report.loss_curves["priming"] = curve(primed.loss_curve);
  Prompt prompt = make_prompt(c);
  const auto vr = stage("reprogram", [&] {
    return train_prompt_foo(local, prompt, vr_data, vr_config(c, c.effective_map(), "reprogram"));
  });
  report.loss_curves["vr"] = curve(vr.loss_curve);
  return {std::move(local), std::move(prompt), vr.map, std::move(soft)};
}

void attach_theory(const ExperimentConfig& c, const World& w, const ServiceApi& api, const AresOutcome& ares,
                   ExperimentReport& report) {
  Prompt q_star = ares.prompt;
  if (c.theory.q_star == QStar::zoo) {
    // Separate instance so the method's own meter stays exact.
    ServiceApi side(w.service, service_options(c));
    q_star = make_prompt(c);
    ZooConfig z = c.zoo;
    z.estimator = Estimator::spsa_gc;
    z.loss = ZooLoss::cross_entropy;
    z.map = c.effective_map();
    z.seed = Rng::derive(c.seed, "theory-q-star");
    stage("theory-q-star", [&] { return train_prompt_zoo(side, q_star, w.target_train, z); });
    report.diagnostics["theory_q_star_calls"] = side.calls(Phase::train);
  }
  report.theory = stage("theory", [&] {
    return verify_bound(measure_bound_inputs(ares.local, api, w.target_test, &ares.prompt, &q_star, c.seed));
  });
  report.diagnostics["theory_q_star"] = to_string(c.theory.q_star);
}

void run_ares(const ExperimentConfig& c, const World& w, const ServiceApi& api, ExperimentReport& report) {
  report.diagnostics["local_zero_prompt_accuracy"] =
      zero_prompt_accuracy(LocalModel::with_pretrained_head(w.local), c, w, c.effective_map());
  AresOutcome out = prime_and_reprogram(c, w, api, w.target_train, report);
  report.diagnostics["primed_zero_prompt_accuracy"] = zero_prompt_accuracy(out.local, c, w, c.effective_map());
  report.diagnostics["soft_label_provenance"] = out.soft.provenance.front();
  report.test_accuracy = stage("infer", [&] {
    return accuracy_of(infer_batch(out.local, out.prompt, out.map, w.target_test.images), w.target_test.labels);
  });
  require_calls(api, w.target_train.size(), 0, "ares");
  if (c.theory.enabled) attach_theory(c, w, api, out, report);
}

void run_ares_ms(const ExperimentConfig& c, const World& w, const ServiceApi& api, ExperimentReport& report) {
  const auto [fit_idx, hold_idx] = holdout_split(w.target_train, c.holdout_fraction, Rng::derive(c.seed, "holdout"));
  const Dataset fit = w.target_train.subset(fit_idx);
  const Dataset hold = w.target_train.subset(hold_idx);
  AresOutcome out = prime_and_reprogram(c, w, api, fit, report);
  const double primed_acc = accuracy_of(infer_batch(out.local, out.prompt, out.map, hold.images), hold.labels);

  json sel = {{"holdout_size", hold.size()}, {"tau", c.tau}, {"primed_local_accuracy", primed_acc},
              {"split", "stratified held-out share of the few-shot training set"}};
  std::optional<double> zs_acc;
  if (c.label_space == LabelSpace::shared) {
    std::vector<std::size_t> zs_pred;
    for (std::size_t i : hold_idx) zs_pred.push_back(argmax(out.soft.probs.row(i)));
    zs_acc = accuracy_of(zs_pred, hold.labels);
  }
  const Path path = zs_acc ? select_path(*zs_acc, primed_acc, c.tau) : Path::local;
  sel["zero_shot_accuracy"] = zs_acc ? json(*zs_acc) : json(nullptr);
  sel["decision"] = to_string(path);
  if (!zs_acc) sel["reason"] = "zero-shot not applicable to disjoint label spaces";
  report.selection = sel;

  if (path == Path::local) {
    report.test_accuracy =
        accuracy_of(infer_batch(out.local, out.prompt, out.map, w.target_test.images), w.target_test.labels);
    require_calls(api, w.target_train.size(), 0, "ares_ms");
  } else {
    const Prompt zero = make_prompt(c);
    const auto pred = stage("zero-shot", [&] {
      return service_infer(api, zero, LabelMap::identity(api.num_classes()), w.target_test.images, Phase::infer);
    });
    report.test_accuracy = accuracy_of(pred, w.target_test.labels);
    require_calls(api, w.target_train.size(), w.target_test.size(), "ares_ms");
  }
}

void run_zoo(const ExperimentConfig& c, const World& w, const ServiceApi& api, Estimator estimator,
             ExperimentReport& report) {
  ZooConfig z = c.zoo;
  z.estimator = estimator;
  z.loss = estimator == Estimator::rgf ? ZooLoss::focal : ZooLoss::cross_entropy;
  z.map = c.effective_map();
  z.blm_alpha = c.vr.blm_alpha;
  z.seed = Rng::derive(c.seed, "zoo");
  Prompt prompt = make_prompt(c);
  {
    // Starting point, measured on an unmetered twin of the service.
    ServiceApi twin(w.service, service_options(c));
    const Prompt zero = make_prompt(c);
    const auto responses = twin.predict_batch(zero.apply(w.target_train.images), Phase::train);
    Tensor probs({responses.size(), twin.num_classes()});
    for (std::size_t i = 0; i < responses.size(); ++i) {
      const Tensor p = expand_response(responses[i], twin.num_classes()).first;
      std::copy(p.values().begin(), p.values().end(), probs.row(i).begin());
    }
    const LabelMap map = fit_label_map(z.map, probs, w.target_train.labels, w.target_train.classes, z.blm_alpha);
    report.diagnostics["initial_prompt_accuracy"] =
        accuracy_of(service_infer(twin, zero, map, w.target_test.images, Phase::infer), w.target_test.labels);
  }
  ZooResult res = stage("zoo", [&] { return train_prompt_zoo(api, prompt, w.target_train, z); });
  json losses = json::array();
  for (const auto& row : res.trace.rows) losses.push_back(row.loss);
  report.loss_curves["zoo"] = losses;
  report.diagnostics["zoo_prompt_l2"] = l2_norm(prompt.values());
  report.test_accuracy = stage("infer", [&] {
    return accuracy_of(service_infer(api, prompt, res.map, w.target_test.images, Phase::infer), w.target_test.labels);
  });
  require_calls(api, expected_zoo_calls(z, w.target_train.size()), w.target_test.size(), to_string(c.method));
}

void run_local_vr(const ExperimentConfig& c, const World& w, ExperimentReport& report) {
  LocalModel local = LocalModel::with_pretrained_head(w.local);
  Prompt prompt = make_prompt(c);
  const auto vr = stage("reprogram", [&] {
    return train_prompt_foo(local, prompt, w.target_train, vr_config(c, c.effective_map(), "reprogram"));
  });
  report.loss_curves["vr"] = curve(vr.loss_curve);
  report.test_accuracy = accuracy_of(infer_batch(local, prompt, vr.map, w.target_test.images), w.target_test.labels);
}

void run_local_lp(const ExperimentConfig& c, const World& w, bool with_vr, ExperimentReport& report) {
  LocalModel local = LocalModel::with_fresh_head(w.local, w.target_train.classes);
  Prompt prompt = make_prompt(c);
  Dataset raw = w.target_train;
  raw.images = prompt.apply(w.target_train.images);
  const auto lp = stage("linear-probe", [&] { return linear_probe(local, raw, priming_config(c, "linear-probe")); });
  report.loss_curves["linear_probe"] = curve(lp.loss_curve);
  LabelMap map = LabelMap::identity(w.target_train.classes);
  if (with_vr) {
    const auto vr = stage("reprogram", [&] {
      return train_prompt_foo(local, prompt, w.target_train, vr_config(c, MapKind::identity, "reprogram"));
    });
    report.loss_curves["vr"] = curve(vr.loss_curve);
    map = vr.map;
  }
  report.test_accuracy = accuracy_of(infer_batch(local, prompt, map, w.target_test.images), w.target_test.labels);
}

void run_zero_shot(const ExperimentConfig& c, const World& w, const ServiceApi& api, ExperimentReport& report) {
  if (c.label_space != LabelSpace::shared) {
    report.notes.push_back("zero-shot is not applicable to disjoint label spaces");
    require_calls(api, 0, 0, "zero_shot");
    return;
  }
  const Prompt zero = make_prompt(c);
  const auto pred = stage("zero-shot", [&] {
    return service_infer(api, zero, LabelMap::identity(api.num_classes()), w.target_test.images, Phase::infer);
  });
  report.test_accuracy = accuracy_of(pred, w.target_test.labels);
  require_calls(api, 0, w.target_test.size(), "zero_shot");
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& config) {
  config.validate();
  auto world = stage("world", [&] { return build_world(config); });
  const World& w = *world;
  ServiceApi api(w.service, service_options(config));

  ExperimentReport report;
  report.method = std::string(to_string(config.method));
  report.seed = config.seed;
  report.world_seed = config.effective_world_seed();
  report.config = config.to_json();
  report.selection = nullptr;
  report.diagnostics["service_source_train_accuracy"] = w.service_train_accuracy;
  report.diagnostics["local_source_train_accuracy"] = w.local_train_accuracy;
  report.diagnostics["train_images"] = w.target_train.size();
  report.diagnostics["test_images"] = w.target_test.size();
  if (config.label_space == LabelSpace::disjoint) {
    report.notes.push_back("local encoder is pretrained on the synthetic source task");
  }
  if (config.effective_map() == MapKind::blm) {
    report.notes.push_back("blm matrix is a Laplace-smoothed conditional mean of source probabilities");
  }

  switch (config.method) {
    case Method::ares: run_ares(config, w, api, report); break;
    case Method::ares_ms:
      report.notes.push_back("ares_ms judges primed-local potential on a held-out split of the few-shot set");
      run_ares_ms(config, w, api, report);
      break;
    case Method::zoo_rgf: run_zoo(config, w, api, Estimator::rgf, report); break;
    case Method::zoo_spsa: run_zoo(config, w, api, Estimator::spsa_gc, report); break;
    case Method::local_vr: run_local_vr(config, w, report); break;
    case Method::local_lp: run_local_lp(config, w, false, report); break;
    case Method::local_vr_lp: run_local_lp(config, w, true, report); break;
    case Method::zero_shot: run_zero_shot(config, w, api, report); break;
  }
  if (config.theory.enabled && config.method != Method::ares) {
    report.notes.push_back("theory checks run only for ares");
  }
  report.train_calls = api.calls(Phase::train);
  report.infer_calls = api.calls(Phase::infer);
  report.debug_calls = api.debug_calls();
  report.price_per_call = api.price_per_call();
  report.cost = static_cast<double>(report.train_calls + report.infer_calls) * report.price_per_call;
  return report;
}

// ---------------------------------------------------------------------------
// Suites

std::vector<SuiteRow> compare_suite(std::span<const ExperimentConfig> configs, std::span<const std::uint64_t> seeds) {
  if (configs.empty()) throw Error(ErrorCode::configuration, "compare needs at least one config");
  if (seeds.empty()) throw Error(ErrorCode::configuration, "compare needs at least one seed");
  std::vector<SuiteRow> rows;
  for (const auto& base : configs) {
    SuiteRow row;
    row.method = std::string(to_string(base.method));
    row.label = row.method;
    std::vector<double> acc;
    for (std::uint64_t seed : seeds) {
      ExperimentConfig c = base;
      c.seed = seed;
      try {
        ExperimentReport r = run_experiment(c);
        if (r.test_accuracy) acc.push_back(*r.test_accuracy);
        row.mean_train_calls += static_cast<double>(r.train_calls);
        row.mean_infer_calls += static_cast<double>(r.infer_calls);
        row.mean_cost += r.cost;
        row.reports.push_back(std::move(r));
      } catch (const std::exception& e) {
        row.status = "failed: seed " + std::to_string(seed) + ": " + e.what();
      }
    }
    row.runs = row.reports.size();
    if (row.runs > 0) {
      const double n = static_cast<double>(row.runs);
      row.mean_train_calls /= n;
      row.mean_infer_calls /= n;
      row.mean_cost /= n;
    }
    if (!acc.empty()) {
      double sum = 0.0;
      for (double a : acc) sum += a;
      row.mean_accuracy = sum / static_cast<double>(acc.size());
      double ss = 0.0;
      for (double a : acc) ss += (a - row.mean_accuracy) * (a - row.mean_accuracy);
      row.std_accuracy = acc.size() > 1 ? std::sqrt(ss / static_cast<double>(acc.size() - 1)) : 0.0;
    } else if (row.status == "ok") {
      row.status = "not-applicable";
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch == '\n' ? ' ' : ch;
  }
  return out + "\"";
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::string suite_csv(std::span<const SuiteRow> rows) {
  std::ostringstream out;
  out << "label,method,runs,mean_accuracy,std_accuracy,mean_train_calls,mean_infer_calls,mean_cost,status\n";
  for (const auto& r : rows) {
    out << csv_field(r.label) << ',' << r.method << ',' << r.runs << ',' << fixed(r.mean_accuracy, 6) << ','
        << fixed(r.std_accuracy, 6) << ',' << fixed(r.mean_train_calls, 1) << ',' << fixed(r.mean_infer_calls, 1)
        << ',' << fixed(r.mean_cost, 6) << ',' << csv_field(r.status) << '\n';
  }
  return out.str();
}

}  // namespace bbal
