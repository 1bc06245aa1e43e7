// bbal: command-line front end for the closed-box adaptation laboratory.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bbal/checkpoint.hpp"
#include "bbal/error.hpp"
#include "bbal/experiment.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace bbal;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;
constexpr int kExitGate = 4;

struct CommonOptions {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
  std::string format = "json";
};

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::configuration, "cannot open config " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::configuration, "config " + path + " is not valid JSON: " + e.what());
  }
}

ExperimentConfig load_config(const CommonOptions& o, const json* override_doc = nullptr) {
  json doc = override_doc ? *override_doc : (o.config.empty() ? json::object() : read_json_file(o.config));
  if (o.seed_set) doc["seed"] = o.seed;
  return ExperimentConfig::from_json(doc);
}

fs::path out_dir(const CommonOptions& o) {
  fs::path dir = o.out.empty() ? fs::path(".") : fs::path(o.out);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
  out << text;
}

// Writes to <out>/<name> when --out is given, otherwise to stdout.
void emit(const CommonOptions& o, const std::string& name, const std::string& text) {
  if (o.out.empty()) {
    std::cout << text;
  } else {
    const fs::path p = out_dir(o) / name;
    write_text(p, text);
    std::cerr << "wrote " << p.string() << "\n";
  }
}

std::string report_csv(const ExperimentReport& r) {
  std::ostringstream s;
  s << "method,seed,test_accuracy,train_calls,infer_calls,debug_calls,cost\n";
  s.precision(17);
  s << r.method << ',' << r.seed << ',';
  if (r.test_accuracy) s << *r.test_accuracy;
  s << ',' << r.train_calls << ',' << r.infer_calls << ',' << r.debug_calls << ',' << r.cost << '\n';
  return s.str();
}

void emit_report(const CommonOptions& o, const ExperimentReport& r) {
  if (o.format == "csv") emit(o, "report.csv", report_csv(r));
  else emit(o, "report.json", r.dump());
}

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option_function<std::uint64_t>(
      "--seed", [&o](const std::uint64_t& s) { o.seed = s, o.seed_set = true; }, "Experiment seed");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--format", o.format, "Output format")->check(CLI::IsMember({"json", "csv"}));
}

int cmd_gen_data(const CommonOptions& o) {
  const ExperimentConfig c = load_config(o);
  const WorldData d = generate_world_data(c);
  const fs::path dir = out_dir(o);
  write_dataset(dir / "source.bbds", d.source);
  write_dataset(dir / "target_train.bbds", d.target_train);
  write_dataset(dir / "target_test.bbds", d.target_test);
  std::cout << "source " << d.source.size() << ", target train " << d.target_train.size() << ", target test "
            << d.target_test.size() << " images in " << dir.string() << "\n";
  return kExitOk;
}

int cmd_train_models(const CommonOptions& o) {
  const ExperimentConfig c = load_config(o);
  const auto w = build_world(c);
  const fs::path dir = out_dir(o);
  save_classifier(dir / "service.bbal", w->service);
  save_classifier(dir / "local.bbal", w->local);
  const json meta = {{"world_seed", c.effective_world_seed()},
                     {"service_train_accuracy", w->service_train_accuracy},
                     {"local_train_accuracy", w->local_train_accuracy}};
  write_text(dir / "models.json", meta.dump(2) + "\n");
  std::cout << "service train accuracy " << w->service_train_accuracy << ", local train accuracy "
            << w->local_train_accuracy << "\n";
  return kExitOk;
}

int cmd_prime(const CommonOptions& o) {
  const ExperimentConfig c = load_config(o);
  const auto w = build_world(c);
  const fs::path dir = out_dir(o);
  ServiceApi api(w->service, service_options(c));
  const Tensor raw = make_prompt(c).apply(w->target_train.images);
  const fs::path cache = dir / "soft_labels.jsonl";
  SoftLabelSet soft;
  if (fs::exists(cache)) {
    soft = read_soft_labels(cache);
    if (soft.size() != raw.dim(0)) throw Error(ErrorCode::configuration, "soft label cache does not match the data");
  } else {
    soft = collect_soft_labels(api, raw);
    write_soft_labels(cache, soft);
  }
  if (uses_logits(c.priming.loss)) soft.logits = api.debug_logits(raw);
  LocalModel local = LocalModel::with_fresh_head(w->local, soft.classes());
  PrimingConfig pc = c.priming;
  pc.seed = Rng::derive(c.seed, "prime");
  const PrimingResult res = prime(local, raw, soft, pc);
  save_local_model(dir / "primed_local.bbal", local);
  const json summary = {{"train_calls", api.calls(Phase::train)},
                        {"cached", api.calls(Phase::train) == 0},
                        {"loss_curve", res.loss_curve}};
  write_text(dir / "priming.json", summary.dump(2) + "\n");
  std::cout << "primed on " << soft.size() << " soft labels with " << api.calls(Phase::train) << " api calls\n";
  return kExitOk;
}

int cmd_reprogram(const CommonOptions& o) {
  const ExperimentConfig c = load_config(o);
  const auto w = build_world(c);
  const fs::path dir = out_dir(o);
  const fs::path primed = dir / "primed_local.bbal";
  if (!fs::exists(primed)) throw Error(ErrorCode::configuration, "run `bbal prime` with the same --out first");
  const LocalModel local = load_local_model(primed);
  Prompt prompt = make_prompt(c);
  VrConfig vc = c.vr;
  vc.map = c.effective_map();
  vc.seed = Rng::derive(c.seed, "reprogram");
  const VrResult res = train_prompt_foo(local, prompt, w->target_train, vc);
  save_prompt_artifact(dir / "prompt.bbal", prompt, res.map);
  const double acc = accuracy(infer_batch(local, prompt, res.map, w->target_test.images), w->target_test.labels);
  const json summary = {{"test_accuracy", acc}, {"api_calls", 0}, {"loss_curve", res.loss_curve}};
  write_text(dir / "reprogram.json", summary.dump(2) + "\n");
  std::cout << "test accuracy " << acc << " (local inference, no api calls)\n";
  return kExitOk;
}

int cmd_zoo(const CommonOptions& o) {
  ExperimentConfig c = load_config(o);
  if (c.method != Method::zoo_rgf && c.method != Method::zoo_spsa) c.method = Method::zoo_spsa;
  const auto w = build_world(c);
  const fs::path dir = out_dir(o);
  ServiceApi api(w->service, service_options(c));
  Prompt prompt = make_prompt(c);
  ZooConfig z = c.zoo;
  z.estimator = c.method == Method::zoo_rgf ? Estimator::rgf : Estimator::spsa_gc;
  z.loss = c.method == Method::zoo_rgf ? ZooLoss::focal : ZooLoss::cross_entropy;
  z.map = c.effective_map();
  z.blm_alpha = c.vr.blm_alpha;
  z.seed = Rng::derive(c.seed, "zoo");
  try {
    const ZooResult res = train_prompt_zoo(api, prompt, w->target_train, z);
    std::ofstream trace(dir / "zoo_trace.csv");
    res.trace.write_csv(trace);
    save_prompt_artifact(dir / "prompt.bbal", prompt, res.map);
  } catch (const BudgetExceeded& e) {
    std::ofstream trace(dir / "zoo_trace.csv");
    e.trace().write_csv(trace);
    throw;
  }
  std::cout << "zoo training used " << api.calls(Phase::train) << " api calls\n";
  return kExitOk;
}

int cmd_run(const CommonOptions& o) {
  const ExperimentReport r = run_experiment(load_config(o));
  emit_report(o, r);
  return kExitOk;
}

int cmd_compare(const CommonOptions& o) {
  if (o.config.empty()) throw Error(ErrorCode::configuration, "compare needs --config with {configs, seeds}");
  const json doc = read_json_file(o.config);
  if (!doc.is_object() || !doc.contains("configs") || !doc.at("configs").is_array()) {
    throw Error(ErrorCode::configuration, "compare config needs a \"configs\" array");
  }
  for (const auto& item : doc.items()) {
    if (item.key() != "configs" && item.key() != "seeds") {
      throw Error(ErrorCode::configuration, "unknown key compare." + item.key());
    }
  }
  std::vector<ExperimentConfig> configs;
  for (const auto& j : doc.at("configs")) configs.push_back(ExperimentConfig::from_json(j));
  std::vector<std::uint64_t> seeds = {o.seed_set ? o.seed : 0};
  if (doc.contains("seeds")) {
    try {
      seeds = doc.at("seeds").get<std::vector<std::uint64_t>>();
    } catch (const json::exception& e) {
      throw Error(ErrorCode::configuration, std::string("compare.seeds: ") + e.what());
    }
  }
  const auto rows = compare_suite(configs, seeds);
  if (o.format == "json") {
    json arr = json::array();
    for (const auto& r : rows) {
      json reports = json::array();
      for (const auto& rep : r.reports) reports.push_back(rep.to_json());
      arr.push_back({{"label", r.label},
                     {"method", r.method},
                     {"runs", r.runs},
                     {"mean_accuracy", r.mean_accuracy},
                     {"std_accuracy", r.std_accuracy},
                     {"mean_train_calls", r.mean_train_calls},
                     {"mean_infer_calls", r.mean_infer_calls},
                     {"mean_cost", r.mean_cost},
                     {"status", r.status},
                     {"reports", reports}});
    }
    emit(o, "comparison.json", arr.dump(2) + "\n");
  } else {
    emit(o, "comparison.csv", suite_csv(rows));
  }
  return kExitOk;
}

int cmd_verify_theory(const CommonOptions& o) {
  json doc = o.config.empty() ? json::object() : read_json_file(o.config);
  doc["method"] = "ares";
  if (!doc.contains("label_space")) doc["label_space"] = "shared";
  doc["service"]["debug_logits"] = true;
  doc["theory"]["enabled"] = true;
  if (!doc["theory"].contains("q_star")) doc["theory"]["q_star"] = "zoo";
  const ExperimentConfig c = load_config(o, &doc);

  Rng rng(Rng::derive(c.seed, "lipschitz"));
  const LipschitzResult lip = verify_lipschitz(100000, 2, 32, rng);
  const ExperimentReport r = run_experiment(c);
  const BoundReport& b = *r.theory;
  json out = b.to_json();
  out["lipschitz_max_ratio"] = lip.max_ratio;
  out["lipschitz_samples"] = lip.evaluated;
  out["q_star"] = r.diagnostics.value("theory_q_star", "transfer");
  emit(o, "bound_report.json", out.dump(2) + "\n");
  const bool ok = lip.passed && b.pre.holds && b.post.holds;
  if (!ok) {
    std::cerr << "theory check failed\n";
    return kExitGate;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Closed-box API reprogramming laboratory"};
  app.require_subcommand(1);
  CommonOptions opts;
  struct Sub {
    const char* name;
    const char* help;
    int (*fn)(const CommonOptions&);
  };
  const Sub subs[] = {
      {"gen-data", "Generate the source and target datasets", cmd_gen_data},
      {"train-models", "Train the service and local source models", cmd_train_models},
      {"prime", "Collect soft labels once and fit the local head", cmd_prime},
      {"reprogram", "Train a prompt on the primed local model", cmd_reprogram},
      {"zoo", "Train a prompt through the service with zeroth-order estimates", cmd_zoo},
      {"run", "Run one method end to end and write its report", cmd_run},
      {"compare", "Run several configs over several seeds", cmd_compare},
      {"verify-theory", "Check the Lipschitz lemma and the risk sandwich", cmd_verify_theory},
  };
  int (*chosen)(const CommonOptions&) = nullptr;
  for (const auto& s : subs) {
    CLI::App* cmd = app.add_subcommand(s.name, s.help);
    add_common(cmd, opts);
    cmd->callback([&chosen, fn = s.fn] { chosen = fn; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  try {
    return chosen(opts);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (e.code() == ErrorCode::configuration) return kExitConfig;
    if (e.code() == ErrorCode::gate) return kExitGate;
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
