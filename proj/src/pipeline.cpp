#include "ng/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "ng/rng.hpp"
#include "ng/sha256.hpp"

namespace ng {

namespace fs = std::filesystem;
using nlohmann::json;

// --- config -------------------------------------------------------------------

namespace {

[[noreturn]] void config_error(const std::string& path, const std::string& what) {
  throw PipelineError("config: " + path + ": " + what, 1);
}

void check_keys(const json& j, const std::string& path, const std::set<std::string>& allowed) {
  if (!j.is_object()) config_error(path, "expected an object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!allowed.count(key)) config_error(path.empty() ? key : path + "." + key, "unknown key");
  }
}

template <typename T>
T get_or(const json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  return j.at(key).get<T>();
}

const json& require_key(const json& j, const std::string& key, const std::string& path) {
  if (!j.contains(key)) config_error(path.empty() ? key : path + "." + key, "missing required key");
  return j.at(key);
}

}  // namespace

PipelineConfig parse_config(const json& j) {
  check_keys(j, "", {"seed", "out_dir", "threads", "vocab", "corpus", "split", "model", "train",
                     "attribution", "probe", "gate", "decode", "eval", "judge", "report", "ablate"});
  PipelineConfig cfg;
  cfg.seed = require_key(j, "seed", "").get<uint64_t>();
  cfg.out_dir = require_key(j, "out_dir", "").get<std::string>();
  cfg.threads = get_or(j, "threads", 0);

  if (j.contains("vocab")) {
    const json& v = j.at("vocab");
    check_keys(v, "vocab", {"surface_per_attribute", "stereotypes_per_attribute", "neutral_per_attribute",
                            "num_toxic", "num_facts", "total_size"});
    cfg.vocab.surface_per_attribute = get_or(v, "surface_per_attribute", cfg.vocab.surface_per_attribute);
    cfg.vocab.stereotypes_per_attribute =
        get_or(v, "stereotypes_per_attribute", cfg.vocab.stereotypes_per_attribute);
    cfg.vocab.neutral_per_attribute = get_or(v, "neutral_per_attribute", cfg.vocab.neutral_per_attribute);
    cfg.vocab.num_toxic = get_or(v, "num_toxic", cfg.vocab.num_toxic);
    cfg.vocab.num_facts = get_or(v, "num_facts", cfg.vocab.num_facts);
    cfg.vocab.total_size = get_or(v, "total_size", cfg.vocab.total_size);
  }
  cfg.vocab.seed = cfg.seed;

  if (j.contains("corpus")) {
    const json& c = j.at("corpus");
    check_keys(c, "corpus", {"num_sequences", "rho", "toxic_rate", "carry_rate", "neutral_theme_rate",
                             "dissolve_unigrams", "min_exchanges", "max_exchanges", "max_len"});
    cfg.corpus.num_sequences = get_or(c, "num_sequences", cfg.corpus.num_sequences);
    cfg.corpus.rho = get_or(c, "rho", cfg.corpus.rho);
    cfg.corpus.toxic_rate = get_or(c, "toxic_rate", cfg.corpus.toxic_rate);
    cfg.corpus.carry_rate = get_or(c, "carry_rate", cfg.corpus.carry_rate);
    cfg.corpus.neutral_theme_rate = get_or(c, "neutral_theme_rate", cfg.corpus.neutral_theme_rate);
    cfg.corpus.dissolve_unigrams = get_or(c, "dissolve_unigrams", cfg.corpus.dissolve_unigrams);
    cfg.corpus.min_exchanges = get_or(c, "min_exchanges", cfg.corpus.min_exchanges);
    cfg.corpus.max_exchanges = get_or(c, "max_exchanges", cfg.corpus.max_exchanges);
    cfg.corpus.max_len = get_or(c, "max_len", cfg.corpus.max_len);
  }
  cfg.corpus.seed = cfg.seed;

  if (j.contains("split")) {
    const json& s = j.at("split");
    check_keys(s, "split", {"train", "validation", "neutral_eval"});
    cfg.split.train = get_or(s, "train", cfg.split.train);
    cfg.split.validation = get_or(s, "validation", cfg.split.validation);
    cfg.split.neutral_eval = get_or(s, "neutral_eval", cfg.split.neutral_eval);
  }

  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m, "model", {"num_layers", "model_dim", "mlp_hidden", "num_heads", "context_len", "mlp_init_scale", "mlp_topk"});
    cfg.model.num_layers = get_or(m, "num_layers", cfg.model.num_layers);
    cfg.model.model_dim = get_or(m, "model_dim", cfg.model.model_dim);
    cfg.model.mlp_hidden = get_or(m, "mlp_hidden", cfg.model.mlp_hidden);
    cfg.model.num_heads = get_or(m, "num_heads", cfg.model.num_heads);
    cfg.model.context_len = get_or(m, "context_len", cfg.model.context_len);
    cfg.model.mlp_init_scale = get_or(m, "mlp_init_scale", cfg.model.mlp_init_scale);
    cfg.model.mlp_topk = get_or(m, "mlp_topk", cfg.model.mlp_topk);
  }
  cfg.model.vocab_size = cfg.vocab.total_size;
  cfg.model.seed = cfg.seed;

  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t, "train", {"epochs", "batch_size", "lr", "warmup_steps", "target_val_loss", "clip_norm", "weight_decay", "activation_l1"});
    cfg.train_params.epochs = get_or(t, "epochs", cfg.train_params.epochs);
    cfg.train_params.batch_size = get_or(t, "batch_size", cfg.train_params.batch_size);
    cfg.train_params.lr = get_or(t, "lr", cfg.train_params.lr);
    cfg.train_params.warmup_steps = get_or(t, "warmup_steps", cfg.train_params.warmup_steps);
    cfg.train_params.target_val_loss = get_or(t, "target_val_loss", cfg.train_params.target_val_loss);
    cfg.train_params.clip_norm = get_or(t, "clip_norm", cfg.train_params.clip_norm);
    cfg.train_params.weight_decay = get_or(t, "weight_decay", cfg.train_params.weight_decay);
    cfg.train_params.activation_l1 = get_or(t, "activation_l1", cfg.train_params.activation_l1);
  }
  cfg.train_params.seed = cfg.seed;

  if (j.contains("attribution")) {
    const json& a = j.at("attribution");
    check_keys(a, "attribution",
               {"method", "ig_steps", "lambda", "instances_per_instruction", "templates", "absolute_values"});
    std::string method = get_or<std::string>(a, "method", "grad_x_activation");
    if (method == "grad_x_activation")
      cfg.attribution.method = AttributionMethod::kGradXActivation;
    else if (method == "integrated_gradients")
      cfg.attribution.method = AttributionMethod::kIntegratedGradients;
    else
      config_error("attribution.method", "must be grad_x_activation or integrated_gradients");
    cfg.attribution.ig_steps = get_or(a, "ig_steps", cfg.attribution.ig_steps);
    cfg.attribution.lambda = get_or(a, "lambda", cfg.attribution.lambda);
    cfg.attribution.instances_per_instruction =
        get_or(a, "instances_per_instruction", cfg.attribution.instances_per_instruction);
    cfg.attribution.templates = get_or(a, "templates", cfg.attribution.templates);
    cfg.attribution.absolute_values = get_or(a, "absolute_values", cfg.attribution.absolute_values);
  }
  cfg.attribution.seed = cfg.seed;

  if (j.contains("probe")) {
    const json& p = j.at("probe");
    check_keys(p, "probe", {"pairs_bias", "pairs_knowledge", "tau", "consistency_histories"});
    cfg.probe.pairs_bias = get_or(p, "pairs_bias", cfg.probe.pairs_bias);
    cfg.probe.pairs_knowledge = get_or(p, "pairs_knowledge", cfg.probe.pairs_knowledge);
    cfg.probe.tau = get_or(p, "tau", cfg.probe.tau);
    cfg.probe.consistency_histories = get_or(p, "consistency_histories", cfg.probe.consistency_histories);
  }

  if (j.contains("gate")) {
    const json& g = j.at("gate");
    check_keys(g, "gate", {"alpha", "beta", "theta", "k"});
    cfg.gate.alpha = get_or(g, "alpha", cfg.gate.alpha);
    cfg.gate.beta = get_or(g, "beta", cfg.gate.beta);
    cfg.gate.theta = get_or(g, "theta", cfg.gate.theta);
    cfg.top_k = get_or(g, "k", cfg.top_k);
  }

  if (j.contains("decode")) {
    const json& d = j.at("decode");
    check_keys(d, "decode", {"temperature", "top_p", "max_tokens"});
    cfg.decode.temperature = get_or(d, "temperature", cfg.decode.temperature);
    cfg.decode.top_p = get_or(d, "top_p", cfg.decode.top_p);
    cfg.decode.max_tokens = get_or(d, "max_tokens", cfg.decode.max_tokens);
  }

  if (j.contains("eval")) {
    const json& e = j.at("eval");
    check_keys(e, "eval", {"tasks", "attributes", "scenarios_per_cell", "turns", "knowledge_checks_per_turn",
                           "trace_cosine"});
    if (e.contains("tasks")) {
      cfg.eval.tasks.clear();
      for (const auto& t : e.at("tasks")) cfg.eval.tasks.push_back(task_from_name(t.get<std::string>()));
    }
    if (e.contains("attributes")) {
      cfg.eval.attributes.clear();
      for (const auto& a : e.at("attributes"))
        cfg.eval.attributes.push_back(attribute_from_name(a.get<std::string>()));
    }
    cfg.eval.scenarios_per_cell = get_or(e, "scenarios_per_cell", cfg.eval.scenarios_per_cell);
    cfg.eval.turns = get_or(e, "turns", cfg.eval.turns);
    cfg.eval.knowledge_checks_per_turn =
        get_or(e, "knowledge_checks_per_turn", cfg.eval.knowledge_checks_per_turn);
    cfg.eval.trace_cosine = get_or(e, "trace_cosine", cfg.eval.trace_cosine);
  }

  cfg.ensemble.weights = {{"lexicon", 0.6}, {"classifier", 0.4}};
  if (j.contains("judge")) {
    const json& jd = j.at("judge");
    check_keys(jd, "judge", {"weights", "external"});
    if (jd.contains("weights")) {
      cfg.ensemble.weights.clear();
      for (const auto& [name, w] : jd.at("weights").items())
        cfg.ensemble.weights[name] = w.get<double>();
    }
    cfg.external_judge = get_or(jd, "external", false);
  }

  if (j.contains("report")) {
    const json& r = j.at("report");
    check_keys(r, "report", {"bootstrap_resamples"});
    cfg.bootstrap_resamples = get_or(r, "bootstrap_resamples", cfg.bootstrap_resamples);
  }

  if (j.contains("ablate")) {
    const json& a = j.at("ablate");
    check_keys(a, "ablate", {"sweep_ks", "random_k_seeds"});
    if (a.contains("sweep_ks")) cfg.sweep_ks = a.at("sweep_ks").get<std::vector<int>>();
    cfg.random_k_seeds = get_or(a, "random_k_seeds", cfg.random_k_seeds);
  }
  return cfg;
}

json config_to_json(const PipelineConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir;
  j["threads"] = cfg.threads;
  j["vocab"] = {{"surface_per_attribute", cfg.vocab.surface_per_attribute},
                {"stereotypes_per_attribute", cfg.vocab.stereotypes_per_attribute},
                {"neutral_per_attribute", cfg.vocab.neutral_per_attribute},
                {"num_toxic", cfg.vocab.num_toxic},
                {"num_facts", cfg.vocab.num_facts},
                {"total_size", cfg.vocab.total_size}};
  j["corpus"] = {{"num_sequences", cfg.corpus.num_sequences},
                 {"rho", cfg.corpus.rho},
                 {"toxic_rate", cfg.corpus.toxic_rate},
                 {"carry_rate", cfg.corpus.carry_rate},
                 {"neutral_theme_rate", cfg.corpus.neutral_theme_rate},
                 {"dissolve_unigrams", cfg.corpus.dissolve_unigrams},
                 {"min_exchanges", cfg.corpus.min_exchanges},
                 {"max_exchanges", cfg.corpus.max_exchanges},
                 {"max_len", cfg.corpus.max_len}};
  j["split"] = {{"train", cfg.split.train},
                {"validation", cfg.split.validation},
                {"neutral_eval", cfg.split.neutral_eval}};
  j["model"] = {{"num_layers", cfg.model.num_layers},
                {"model_dim", cfg.model.model_dim},
                {"mlp_hidden", cfg.model.mlp_hidden},
                {"num_heads", cfg.model.num_heads},
                {"context_len", cfg.model.context_len},
                {"mlp_init_scale", cfg.model.mlp_init_scale},
                {"mlp_topk", cfg.model.mlp_topk}};
  j["train"] = {{"epochs", cfg.train_params.epochs},
                {"batch_size", cfg.train_params.batch_size},
                {"lr", cfg.train_params.lr},
                {"warmup_steps", cfg.train_params.warmup_steps},
                {"target_val_loss", cfg.train_params.target_val_loss},
                {"clip_norm", cfg.train_params.clip_norm},
                {"weight_decay", cfg.train_params.weight_decay},
                {"activation_l1", cfg.train_params.activation_l1}};
  j["attribution"] = {
      {"method", cfg.attribution.method == AttributionMethod::kGradXActivation ? "grad_x_activation"
                                                                               : "integrated_gradients"},
      {"ig_steps", cfg.attribution.ig_steps},
      {"lambda", cfg.attribution.lambda},
      {"instances_per_instruction", cfg.attribution.instances_per_instruction},
      {"templates", cfg.attribution.templates},
      {"absolute_values", cfg.attribution.absolute_values}};
  j["probe"] = {{"pairs_bias", cfg.probe.pairs_bias},
                {"pairs_knowledge", cfg.probe.pairs_knowledge},
                {"tau", cfg.probe.tau},
                {"consistency_histories", cfg.probe.consistency_histories}};
  j["gate"] = {{"alpha", cfg.gate.alpha}, {"beta", cfg.gate.beta}, {"theta", cfg.gate.theta}, {"k", cfg.top_k}};
  j["decode"] = {{"temperature", cfg.decode.temperature},
                 {"top_p", cfg.decode.top_p},
                 {"max_tokens", cfg.decode.max_tokens}};
  json tasks = json::array(), attrs = json::array();
  for (TaskType t : cfg.eval.tasks) tasks.push_back(task_name(t));
  for (AttributeTag a : cfg.eval.attributes) attrs.push_back(attribute_name(a));
  j["eval"] = {{"tasks", tasks},
               {"attributes", attrs},
               {"scenarios_per_cell", cfg.eval.scenarios_per_cell},
               {"turns", cfg.eval.turns},
               {"knowledge_checks_per_turn", cfg.eval.knowledge_checks_per_turn},
               {"trace_cosine", cfg.eval.trace_cosine}};
  json weights;
  for (const auto& [name, w] : cfg.ensemble.weights) weights[name] = w;
  j["judge"] = {{"weights", weights}, {"external", cfg.external_judge}};
  j["report"] = {{"bootstrap_resamples", cfg.bootstrap_resamples}};
  j["ablate"] = {{"sweep_ks", cfg.sweep_ks}, {"random_k_seeds", cfg.random_k_seeds}};
  return j;
}

PipelineConfig load_config_file(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw PipelineError("cannot open config file " + path, 1);
  json j;
  try {
    j = json::parse(in);
  } catch (const std::exception& e) {
    throw PipelineError(std::string("config parse error: ") + e.what(), 1);
  }
  for (const std::string& ov : overrides) {
    auto eq = ov.find('=');
    if (eq == std::string::npos) throw PipelineError("override '" + ov + "' is not key=value", 1);
    std::string keypath = ov.substr(0, eq), value = ov.substr(eq + 1);
    json parsed;
    try {
      parsed = json::parse(value);
    } catch (...) {
      parsed = value;  // plain string
    }
    json* cursor = &j;
    size_t pos = 0;
    while (true) {
      size_t dot = keypath.find('.', pos);
      std::string part = keypath.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
      if (dot == std::string::npos) {
        (*cursor)[part] = parsed;
        break;
      }
      cursor = &(*cursor)[part];
      pos = dot + 1;
    }
  }
  return parse_config(j);
}

// --- run plans -------------------------------------------------------------------

void RunPlan::validate() const {
  if (conditions.empty()) throw PipelineError("run plan: needs at least one condition", 1);
  bool has_off = false;
  std::set<std::string> names;
  for (const auto& c : conditions) {
    if (!names.insert(c.name).second)
      throw PipelineError("run plan: duplicate condition name '" + c.name + "'", 1);
    if (c.mode == GateMode::kOff) has_off = true;
  }
  if (!has_off) throw PipelineError("run plan: baseline 'off' condition is required", 1);
}

RunPlan default_run_plan(const PipelineConfig& cfg) {
  RunPlan plan;
  plan.conditions.push_back({"off", GateMode::kOff, cfg.top_k, 0, true, cfg.eval.trace_cosine});
  plan.conditions.push_back({"dynamic", GateMode::kDynamic, cfg.top_k, 0, true, cfg.eval.trace_cosine});
  return plan;
}

RunPlan ablation_run_plan(const PipelineConfig& cfg) {
  RunPlan plan;
  plan.conditions.push_back({"off", GateMode::kOff, cfg.top_k, 0, true, cfg.eval.trace_cosine});
  plan.conditions.push_back({"dynamic", GateMode::kDynamic, cfg.top_k, 0, true, cfg.eval.trace_cosine});
  plan.conditions.push_back({"static", GateMode::kStatic, cfg.top_k, 0, false, cfg.eval.trace_cosine});
  plan.conditions.push_back({"hard_zero", GateMode::kHardZero, cfg.top_k, 0, false, cfg.eval.trace_cosine});
  for (int k : cfg.sweep_ks) {
    if (k != cfg.top_k)
      plan.conditions.push_back({"dynamic_k" + std::to_string(k), GateMode::kDynamic, k, 0, false, false});
    for (int s = 0; s < cfg.random_k_seeds; ++s)
      plan.conditions.push_back({"random_k" + std::to_string(k) + "_s" + std::to_string(s),
                                 GateMode::kRandomK, k, static_cast<uint64_t>(s), false, false});
  }
  return plan;
}

// --- parallel_for -------------------------------------------------------------------

void parallel_for(int threads, int64_t n, const std::function<void(int64_t)>& fn) {
  if (threads <= 0) threads = static_cast<int>(std::thread::hardware_concurrency());
  if (threads < 1) threads = 1;
  if (threads == 1 || n <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<size_t>(threads));
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t]() {
      try {
        for (int64_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[static_cast<size_t>(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// --- pipeline ----------------------------------------------------------------------

Pipeline::Pipeline(PipelineConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.model.validate();
  fs::create_directories(cfg_.out_dir);
}

namespace {

std::string now_iso8601() {
  auto now = std::chrono::system_clock::now();
  std::time_t tt = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&tt));
  return buf;
}

}  // namespace

bool Pipeline::stage_cached(const std::string& stage, const std::string& input_hash) const {
  std::string record_path = cfg_.out_dir + "/stage_" + stage + ".json";
  std::ifstream in(record_path);
  if (!in) return false;
  json j;
  try {
    j = json::parse(in);
  } catch (...) {
    return false;
  }
  if (j.value("input_hash", "") != input_hash) return false;
  if (!j.contains("outputs")) return false;
  for (const auto& [rel, digest] : j.at("outputs").items()) {
    std::string path = cfg_.out_dir + "/" + rel;
    if (!fs::exists(path)) return false;
    if (Sha256::of_file(path) != digest.get<std::string>()) return false;
  }
  return true;
}

void Pipeline::write_stage_record(const std::string& stage, const std::string& input_hash,
                                  const std::vector<std::string>& outputs) {
  json j;
  j["stage"] = stage;
  j["input_hash"] = input_hash;
  json out = json::object();
  for (const std::string& rel : outputs) out[rel] = Sha256::of_file(cfg_.out_dir + "/" + rel);
  j["outputs"] = out;
  std::ofstream f(cfg_.out_dir + "/stage_" + stage + ".json", std::ios::binary);
  f << j.dump(2) << "\n";
}

void Pipeline::append_manifest_stage(const std::string& stage, const std::string& input_hash, bool cached) {
  manifest_stages_.push_back(
      {{"stage", stage}, {"input_hash", input_hash}, {"cached", cached}, {"timestamp", now_iso8601()}});
}

void Pipeline::write_manifest(const std::string& status) {
  json j;
  j["status"] = status;
  j["config"] = config_to_json(cfg_);
  j["seed"] = cfg_.seed;
  j["stages"] = manifest_stages_;
  json inventory = json::object();
  for (const auto& entry : fs::recursive_directory_iterator(cfg_.out_dir)) {
    if (!entry.is_regular_file()) continue;
    std::string rel = fs::relative(entry.path(), cfg_.out_dir).string();
    if (rel == "manifest.json") continue;
    inventory[rel] = Sha256::of_file(entry.path().string());
  }
  j["inventory"] = inventory;
  std::ofstream f(cfg_.out_dir + "/manifest.json", std::ios::binary);
  f << j.dump(2) << "\n";
}

// --- stages ----------------------------------------------------------------------------

void Pipeline::stage_corpus() {
  if (vocab_ && corpus_ && split_) return;
  vocab_ = build_vocab(cfg_.vocab);
  json input;
  input["vocab"] = config_to_json(cfg_)["vocab"];
  input["corpus"] = config_to_json(cfg_)["corpus"];
  input["split"] = config_to_json(cfg_)["split"];
  input["eval"] = config_to_json(cfg_)["eval"];
  input["seed"] = cfg_.seed;
  std::string hash = Sha256::of_string(input.dump());
  std::vector<std::string> outputs = {"corpus.jsonl", "corpus.manifest.json", "scenarios.jsonl"};

  if (stage_cached("corpus", hash)) {
    corpus_ = read_corpus_jsonl(cfg_.out_dir + "/corpus.jsonl", cfg_.out_dir + "/corpus.manifest.json");
    append_manifest_stage("corpus", hash, true);
  } else {
    corpus_ = plant_bias(*vocab_, cfg_.corpus);
    write_corpus_jsonl(*corpus_, cfg_.out_dir + "/corpus.jsonl");
    write_corpus_manifest(*corpus_, cfg_.out_dir + "/corpus.manifest.json");
    write_scenarios_jsonl(make_grid(), cfg_.out_dir + "/scenarios.jsonl");
    write_stage_record("corpus", hash, outputs);
    append_manifest_stage("corpus", hash, false);
  }
  split_ = split_corpus(*corpus_, *vocab_, cfg_.split, cfg_.seed);
}

void Pipeline::stage_train() {
  if (ckpt_) return;
  stage_corpus();
  json input;
  input["corpus_digest"] = Sha256::of_file(cfg_.out_dir + "/corpus.jsonl");
  input["model"] = config_to_json(cfg_)["model"];
  input["train"] = config_to_json(cfg_)["train"];
  std::string hash = Sha256::of_string(input.dump());
  std::vector<std::string> outputs = {"model.ckpt"};

  if (stage_cached("train", hash)) {
    ckpt_ = load_checkpoint(cfg_.out_dir + "/model.ckpt");
    append_manifest_stage("train", hash, true);
  } else {
    TrainResult tr = train(cfg_.model, split_->train, split_->validation, cfg_.train_params);
    ckpt_ = std::move(tr.checkpoint);
    ckpt_->meta.corpus_digest = input["corpus_digest"].get<std::string>();
    save_checkpoint(*ckpt_, cfg_.out_dir + "/model.ckpt");
    write_stage_record("train", hash, outputs);
    append_manifest_stage("train", hash, false);
  }
}

void Pipeline::stage_attribute() {
  if (ranking_) return;
  stage_train();
  json input;
  input["ckpt"] = Sha256::of_file(cfg_.out_dir + "/model.ckpt");
  input["attribution"] = config_to_json(cfg_)["attribution"];
  std::string hash = Sha256::of_string(input.dump());
  std::vector<std::string> outputs = {"ranking.csv"};

  if (stage_cached("attribute", hash)) {
    ranking_ = read_ranking_csv(cfg_.out_dir + "/ranking.csv");
    ranking_->num_instructions = kNumAttributes * cfg_.attribution.templates;
    ranking_->num_instances = cfg_.attribution.instances_per_instruction;
    append_manifest_stage("attribute", hash, true);
  } else {
    ranking_ = rank_bias_neurons(*ckpt_, *vocab_, cfg_.attribution);
    write_ranking_csv(*ranking_, cfg_.out_dir + "/ranking.csv");
    write_stage_record("attribute", hash, outputs);
    append_manifest_stage("attribute", hash, false);
  }
}

void Pipeline::stage_probe() {
  if (consistency_) return;
  stage_attribute();
  json input;
  input["ranking"] = Sha256::of_file(cfg_.out_dir + "/ranking.csv");
  input["probe"] = config_to_json(cfg_)["probe"];
  input["max_k"] = *std::max_element(cfg_.sweep_ks.begin(), cfg_.sweep_ks.end());
  input["k"] = cfg_.top_k;
  std::string hash = Sha256::of_string(input.dump());
  std::vector<std::string> outputs = {"probe.csv"};

  if (stage_cached("probe", hash)) {
    consistency_ = read_probe_csv(cfg_.out_dir + "/probe.csv");
    append_manifest_stage("probe", hash, true);
  } else {
    int max_k = std::max(cfg_.top_k, *std::max_element(cfg_.sweep_ks.begin(), cfg_.sweep_ks.end()));
    max_k = std::min<int>(max_k, static_cast<int>(ranking_->entries.size()));
    std::vector<NeuronId> candidates = select_top_k(*ranking_, max_k);
    std::vector<ProbePair> pairs =
        build_probe_pairs(*vocab_, cfg_.probe.pairs_bias, cfg_.probe.pairs_knowledge, cfg_.seed);

    // stereotype-reinforcing reference histories keep the bias circuitry
    // active while the consistency statistics are gathered
    std::vector<DialogueHistory> histories;
    Rng hrng = Rng::stream(cfg_.seed, "probe.histories");
    for (int h = 0; h < cfg_.probe.consistency_histories; ++h) {
      DialogueHistory hist;
      for (int t = 0; t < 3; ++t) {
        AttributeTag g = static_cast<AttributeTag>(hrng.below_int(kNumAttributes));
        int a = vocab_->attribute_tokens(g)[0];
        int s = vocab_->stereotype_tokens(g)[static_cast<size_t>(hrng.below_int(
            static_cast<int>(vocab_->stereotype_tokens(g).size())))];
        DialogueTurn turn;
        turn.user = {a, vocab_->question};
        turn.model = {a, s};
        hist.turns.push_back(turn);
      }
      histories.push_back(hist);
    }
    consistency_ = probe_neuron_consistency(*ckpt_, *vocab_, histories, pairs, candidates);
    write_probe_csv(*consistency_, cfg_.out_dir + "/probe.csv");
    write_stage_record("probe", hash, outputs);
    append_manifest_stage("probe", hash, false);
  }

  // per-attribute calibration scales for in-loop memory scores
  probe_scale_by_attr_.clear();
  for (int g = 0; g < kNumAttributes; ++g) {
    std::vector<ProbePair> pairs = attribute_probe_pairs(*vocab_, static_cast<AttributeTag>(g));
    probe_scale_by_attr_.push_back(calibrate_probe_scale(*ckpt_, *vocab_, pairs));
  }
}

// --- accessors -----------------------------------------------------------------------

const Vocab& Pipeline::vocab() {
  stage_corpus();
  return *vocab_;
}

const Checkpoint& Pipeline::checkpoint() {
  stage_train();
  return *ckpt_;
}

const NeuronRanking& Pipeline::ranking() {
  stage_attribute();
  return *ranking_;
}

NeuronClassification Pipeline::classification(int k) {
  stage_probe();
  k = std::min<int>(k, static_cast<int>(ranking_->entries.size()));
  std::vector<NeuronId> topk = select_top_k(*ranking_, k);
  std::set<NeuronId> topk_set(topk.begin(), topk.end());
  NeuronConsistency subset;
  for (size_t i = 0; i < consistency_->candidates.size(); ++i) {
    if (!topk_set.count(consistency_->candidates[i])) continue;
    subset.candidates.push_back(consistency_->candidates[i]);
    subset.bias_consistency.push_back(consistency_->bias_consistency[i]);
    subset.knowledge_consistency.push_back(consistency_->knowledge_consistency[i]);
  }
  return classify_neurons(subset, cfg_.probe.tau);
}

void Pipeline::ensure_judges() {
  if (classifier_) return;
  stage_corpus();
  auto turns = make_judge_training_turns(*vocab_, 4000, cfg_.seed);
  ClassifierTrainParams params;
  params.seed = cfg_.seed;
  classifier_ = train_classifier_judge(*vocab_, turns, params);
}

double Pipeline::score_turn(const std::vector<int>& turn_tokens) {
  std::vector<JudgeVerdict> verdicts = {lexicon_judge(*vocab_, turn_tokens),
                                        classifier_->judge(*vocab_, turn_tokens)};
  if (cfg_.external_judge)
    verdicts.push_back(external_judge(external_judge_config_from_env(), *vocab_, turn_tokens));
  try {
    return ensemble_score(verdicts, cfg_.ensemble);
  } catch (const std::runtime_error&) {
    return 0.0;  // all abstained; caller treats the turn as unscored via judges
  }
}

std::vector<Scenario> Pipeline::make_grid() const {
  std::vector<Scenario> grid;
  int id = 0;
  for (TaskType task : cfg_.eval.tasks) {
    for (AttributeTag attribute : cfg_.eval.attributes) {
      auto batch = generate_scenarios(*vocab_, task, attribute, cfg_.eval.scenarios_per_cell, cfg_.seed,
                                      cfg_.eval.turns);
      for (auto& s : batch) {
        s.id = id++;
        grid.push_back(std::move(s));
      }
    }
  }
  return grid;
}

std::vector<Scenario> Pipeline::scenario_grid() {
  stage_corpus();
  return make_grid();
}

std::vector<NeuronId> Pipeline::mask_for(const Condition& condition) {
  switch (condition.mode) {
    case GateMode::kOff:
      return {};
    case GateMode::kRandomK: {
      Rng rng = Rng::stream(cfg_.seed,
                            "random_mask." + condition.name + "." + std::to_string(condition.mask_seed));
      return random_mask(cfg_.model.num_layers, cfg_.model.mlp_hidden, condition.k, rng);
    }
    default:
      return classification(condition.k).gate_eligible;
  }
}

// --- evaluation ------------------------------------------------------------------------

namespace {

QueryConcept concept_of_turn(const Vocab& v, const Scenario& s, const ScenarioTurn& turn) {
  for (int tok : turn.user) {
    if (v.class_of(tok) == TokenClass::kFactQ) return {true, AttributeTag::kGender, v.fact_index_of(tok)};
  }
  for (int tok : turn.user) {
    if (v.class_of(tok) == TokenClass::kAttribute) return {false, v.attribute_of(tok), -1};
  }
  // anaphora or bare question: refers back to the scenario's attribute
  return {false, s.attribute, -1};
}

}  // namespace

ConditionResult Pipeline::evaluate_condition(const Condition& condition,
                                             const std::vector<Scenario>& scenarios) {
  stage_probe();
  ensure_judges();
  classification(condition.k);  // warm the stage before threading

  const Checkpoint& ckpt = *ckpt_;
  const Vocab& v = *vocab_;
  std::vector<NeuronId> mask = mask_for(condition);

  ConditionResult result;
  result.condition = condition;
  result.dialogues.resize(scenarios.size());

  parallel_for(cfg_.threads, static_cast<int64_t>(scenarios.size()), [&](int64_t si) {
    const Scenario& scenario = scenarios[static_cast<size_t>(si)];
    DialogueRun run;
    run.scenario_id = scenario.id;
    run.task = scenario.task;
    run.attribute = scenario.attribute;

    GateState state(condition.mode, mask, cfg_.gate, cfg_.model.num_layers, cfg_.model.mlp_hidden);
    std::vector<ProbePair> pairs = attribute_probe_pairs(v, scenario.attribute);
    double scale = probe_scale_by_attr_[static_cast<size_t>(scenario.attribute)];

    double prev_model_score = 0.0;
    Tensor prev_pooled;
    bool prev_pooled_ok = false;

    for (size_t t = 0; t < scenario.turns.size(); ++t) {
      const ScenarioTurn& sturn = scenario.turns[t];
      double s_user = score_turn(sturn.user);
      double s_gate = std::max(s_user, prev_model_score);

      bool gated_mode = condition.mode == GateMode::kDynamic || condition.mode == GateMode::kRandomK ||
                        (condition.mode == GateMode::kStatic && t == 0);
      bool need_c = condition.probe_log || (gated_mode && s_gate >= cfg_.gate.theta);
      // the probe runs ungated: it measures what the model carries from the
      // history text itself
      MemoryScoreResult ms;
      if (need_c) ms = memory_score(ckpt, v, run.history, pairs, scale, nullptr);
      double c_t = ms.defined ? ms.c_t : 0.0;

      if (t == 0)
        state.prime(s_gate, c_t);
      else
        state = state.next_turn(s_gate, c_t, mask);

      DialogueTurn dturn;
      dturn.user = sturn.user;
      dturn.user_cue = sturn.cue;
      run.history.turns.push_back(dturn);

      uint64_t gen_seed = Rng::stream(cfg_.seed, "gen." + condition.name + "." +
                                                     std::to_string(scenario.id) + "." + std::to_string(t))
                              .next_u64();
      GenerateResult gen = generate_turn(ckpt, v, run.history, &state, cfg_.decode, gen_seed);
      run.history.turns.back().model = gen.tokens;
      run.fallback_count += gen.fallback_count;

      // judge the model turn
      std::vector<JudgeVerdict> verdicts = {lexicon_judge(v, gen.tokens),
                                            classifier_->judge(v, gen.tokens)};
      if (cfg_.external_judge)
        verdicts.push_back(external_judge(external_judge_config_from_env(), v, gen.tokens));
      TurnRecord rec;
      rec.scenario_id = scenario.id;
      rec.turn = static_cast<int>(t) + 1;
      try {
        rec.ensemble_score = ensemble_score(verdicts, cfg_.ensemble);
        rec.scored = true;
      } catch (const std::runtime_error&) {
        rec.scored = false;
      }
      rec.toxic = ensemble_toxic(verdicts);
      prev_model_score = rec.scored ? rec.ensemble_score : 0.0;

      // knowledge checks under the run's gate
      Rng krng = Rng::stream(cfg_.seed, "kcheck." + std::to_string(scenario.id) + "." + std::to_string(t));
      ActivationHook khook = [&state](int layer, Tensor& hidden) { state.apply(layer, hidden); };
      const ActivationHook* khook_ptr = condition.mode == GateMode::kOff ? nullptr : &khook;
      rec.knowledge_checked = cfg_.eval.knowledge_checks_per_turn > 0;
      rec.knowledge_ok = true;
      for (int kc = 0; kc < cfg_.eval.knowledge_checks_per_turn; ++kc) {
        int f = krng.below_int(v.num_facts());
        std::vector<int> prefix =
            probe_query_prefix(v, run.history, {v.fact_q(f), v.question}, v.fact_q(f), ckpt.config.context_len);
        Tensor lp = next_token_log_probs(ckpt, prefix, khook_ptr);
        int64_t best = 0;
        for (int64_t i = 1; i < lp.numel(); ++i)
          if (lp.at(i) > lp.at(best)) best = i;
        if (static_cast<int>(best) != v.fact_a(f)) rec.knowledge_ok = false;
      }

      // structural faithfulness and relevancy
      auto claims = extract_claims(v, gen.tokens);
      rec.claims = static_cast<int64_t>(claims.size());
      for (const Claim& c : claims)
        if (c.truthful) ++rec.truthful_claims;
      QueryConcept qc = concept_of_turn(v, scenario, sturn);
      rec.has_query = true;
      rec.relevant = turn_relevant(v, qc, gen.tokens);

      rec.c_t = c_t;
      rec.c_t_defined = ms.defined;
      rec.s_gate = s_gate;
      rec.g = state.g();
      rec.mask_size = static_cast<int>(state.mask().size());
      rec.released = state.released();

      // cosine of pooled final-layer activations between consecutive turns
      double cos_val = std::nan("");
      if (condition.trace && !gen.tokens.empty()) {
        ActivationHook thook = [&state](int layer, Tensor& hidden) { state.apply(layer, hidden); };
        const ActivationHook* thook_ptr = condition.mode == GateMode::kOff ? nullptr : &thook;
        std::vector<int> full = serialize_dialogue(v, run.history, ckpt.config.context_len);
        ForwardResult fr = forward(ckpt, full, thook_ptr, true);
        int64_t len = static_cast<int64_t>(full.size());
        int64_t span = static_cast<int64_t>(gen.tokens.size());
        Tensor pooled = pool_rows_mean(fr.trace.layers.back(), len - 1 - span, len - 1);
        if (prev_pooled_ok) {
          auto cv = cosine(prev_pooled, pooled);
          if (cv) cos_val = *cv;
        }
        prev_pooled = pooled;
        prev_pooled_ok = true;
      }
      run.cosine_per_turn.push_back(cos_val);
      run.turns.push_back(rec);
    }
    result.dialogues[static_cast<size_t>(si)] = std::move(run);
  });

  // perplexity on the neutral split under the condition's strongest gate
  GateState ppl_state(condition.mode, mask, cfg_.gate, cfg_.model.num_layers, cfg_.model.mlp_hidden);
  ppl_state.prime(1.0, 1.0);
  result.perplexity_neutral =
      split_->neutral_eval.empty()
          ? 0.0
          : perplexity(ckpt, split_->neutral_eval, condition.mode == GateMode::kOff ? nullptr : &ppl_state);

  std::vector<TurnRecord> all;
  for (const auto& d : result.dialogues) all.insert(all.end(), d.turns.begin(), d.turns.end());
  result.bundle = compute_metrics(all);
  return result;
}

// --- evaluate / report stages ---------------------------------------------------------

namespace {

void write_turns_csv(const ConditionResult& r, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "scenario,task,attribute,turn,score,scored,toxic,kchecked,kok,claims,truth,has_query,relevant,"
         "c_t,c_def,s_gate,g,mask,released,cosine\n";
  for (const auto& d : r.dialogues) {
    for (size_t t = 0; t < d.turns.size(); ++t) {
      const TurnRecord& rec = d.turns[t];
      double cv = d.cosine_per_turn[t];
      out << rec.scenario_id << "," << task_name(d.task) << "," << attribute_name(d.attribute) << ","
          << rec.turn << "," << fmt_double(rec.ensemble_score) << "," << (rec.scored ? 1 : 0) << ","
          << (rec.toxic ? 1 : 0) << "," << (rec.knowledge_checked ? 1 : 0) << ","
          << (rec.knowledge_ok ? 1 : 0) << "," << rec.claims << "," << rec.truthful_claims << ","
          << (rec.has_query ? 1 : 0) << "," << (rec.relevant ? 1 : 0) << "," << fmt_double(rec.c_t) << ","
          << (rec.c_t_defined ? 1 : 0) << "," << fmt_double(rec.s_gate) << "," << fmt_double(rec.g) << ","
          << rec.mask_size << "," << (rec.released ? 1 : 0) << ","
          << (std::isnan(cv) ? "NA" : fmt_double(cv)) << "\n";
    }
  }
}

ConditionResult read_turns_csv(const Condition& condition, const std::string& path, double ppl) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  ConditionResult r;
  r.condition = condition;
  r.perplexity_neutral = ppl;
  std::string line;
  std::getline(in, line);
  std::map<int, DialogueRun> by_id;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    size_t pos = 0;
    while (pos <= line.size()) {
      size_t comma = line.find(',', pos);
      f.push_back(comma == std::string::npos ? line.substr(pos) : line.substr(pos, comma - pos));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    TurnRecord rec;
    rec.scenario_id = std::stoi(f[0]);
    rec.turn = std::stoi(f[3]);
    rec.ensemble_score = std::stod(f[4]);
    rec.scored = f[5] == "1";
    rec.toxic = f[6] == "1";
    rec.knowledge_checked = f[7] == "1";
    rec.knowledge_ok = f[8] == "1";
    rec.claims = std::stoll(f[9]);
    rec.truthful_claims = std::stoll(f[10]);
    rec.has_query = f[11] == "1";
    rec.relevant = f[12] == "1";
    rec.c_t = std::stod(f[13]);
    rec.c_t_defined = f[14] == "1";
    rec.s_gate = std::stod(f[15]);
    rec.g = std::stod(f[16]);
    rec.mask_size = std::stoi(f[17]);
    rec.released = f[18] == "1";
    DialogueRun& d = by_id[rec.scenario_id];
    d.scenario_id = rec.scenario_id;
    d.task = task_from_name(f[1]);
    d.attribute = attribute_from_name(f[2]);
    d.turns.push_back(rec);
    d.cosine_per_turn.push_back(f[19] == "NA" ? std::nan("") : std::stod(f[19]));
  }
  for (auto& [id, d] : by_id) {
    (void)id;
    r.dialogues.push_back(std::move(d));
  }
  std::vector<TurnRecord> all;
  for (const auto& d : r.dialogues) all.insert(all.end(), d.turns.begin(), d.turns.end());
  r.bundle = compute_metrics(all);
  return r;
}

void write_transcripts_jsonl(const ConditionResult& r, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& d : r.dialogues) {
    json j;
    j["scenario"] = d.scenario_id;
    j["task"] = task_name(d.task);
    j["attribute"] = attribute_name(d.attribute);
    j["fallbacks"] = d.fallback_count;
    json turns = json::array();
    for (const auto& t : d.history.turns) turns.push_back({{"user", t.user}, {"model", t.model}});
    j["turns"] = turns;
    out << j.dump() << "\n";
  }
}

void write_gate_log_csv(const ConditionResult& r, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "scenario,turn,s_t,c_t,g,mask_size,released\n";
  for (const auto& d : r.dialogues)
    for (const auto& rec : d.turns)
      out << rec.scenario_id << "," << rec.turn << "," << fmt_double(rec.s_gate) << ","
          << fmt_double(rec.c_t) << "," << fmt_double(rec.g) << "," << rec.mask_size << ","
          << (rec.released ? 1 : 0) << "\n";
}

std::string cond_dir_name(const Condition& c) { return "cond_" + c.name; }

}  // namespace

void Pipeline::stage_evaluate(const RunPlan& plan) {
  plan.validate();
  stage_probe();
  ensure_judges();

  json plan_json = json::array();
  for (const auto& c : plan.conditions)
    plan_json.push_back({{"name", c.name},
                         {"mode", gate_mode_name(c.mode)},
                         {"k", c.k},
                         {"mask_seed", c.mask_seed},
                         {"probe_log", c.probe_log},
                         {"trace", c.trace}});
  json input;
  input["ranking"] = Sha256::of_file(cfg_.out_dir + "/ranking.csv");
  input["probe"] = Sha256::of_file(cfg_.out_dir + "/probe.csv");
  json cj = config_to_json(cfg_);
  input["decode"] = cj["decode"];
  input["eval"] = cj["eval"];
  input["gate"] = cj["gate"];
  input["judge"] = cj["judge"];
  input["plan"] = plan_json;
  std::string hash = Sha256::of_string(input.dump());

  std::vector<std::string> outputs;
  for (const auto& c : plan.conditions) {
    outputs.push_back(cond_dir_name(c) + "/turns.csv");
    outputs.push_back(cond_dir_name(c) + "/transcripts.jsonl");
    outputs.push_back(cond_dir_name(c) + "/gate_log.csv");
    outputs.push_back(cond_dir_name(c) + "/result.json");
  }

  if (stage_cached("evaluate", hash)) {
    results_.clear();
    for (const auto& c : plan.conditions) {
      std::ifstream rin(cfg_.out_dir + "/" + cond_dir_name(c) + "/result.json");
      json rj = json::parse(rin);
      results_.push_back(
          read_turns_csv(c, cfg_.out_dir + "/" + cond_dir_name(c) + "/turns.csv", rj.at("perplexity_neutral")));
    }
    append_manifest_stage("evaluate", hash, true);
    return;
  }

  std::vector<Scenario> scenarios = scenario_grid();
  results_.clear();
  for (const auto& c : plan.conditions) {
    ConditionResult r = evaluate_condition(c, scenarios);
    std::string dir = cfg_.out_dir + "/" + cond_dir_name(c);
    fs::create_directories(dir);
    write_turns_csv(r, dir + "/turns.csv");
    write_transcripts_jsonl(r, dir + "/transcripts.jsonl");
    write_gate_log_csv(r, dir + "/gate_log.csv");
    json rj;
    rj["condition"] = c.name;
    rj["perplexity_neutral"] = r.perplexity_neutral;
    std::ofstream rout(dir + "/result.json", std::ios::binary);
    rout << rj.dump(2) << "\n";
    results_.push_back(std::move(r));
  }
  write_stage_record("evaluate", hash, outputs);
  append_manifest_stage("evaluate", hash, false);
}

void Pipeline::stage_report(const RunPlan& plan) {
  if (results_.empty()) stage_evaluate(plan);
  std::vector<std::string> report_outputs;

  const ConditionResult* baseline = nullptr;
  for (const auto& r : results_)
    if (r.condition.mode == GateMode::kOff) baseline = &r;

  ReportInputs inputs;
  for (const auto& r : results_) {
    ConditionMetrics cm;
    cm.condition = r.condition.name;
    cm.bundle = r.bundle;
    if (baseline && baseline->bundle.S.defined && r.bundle.S.defined) {
      cm.delta_bias = baseline->bundle.S.value - r.bundle.S.value;
      cm.delta_defined = true;
    }
    cm.perplexity = r.perplexity_neutral;
    cm.perplexity_defined = r.perplexity_neutral > 0.0;
    inputs.conditions.push_back(cm);

    // per-turn sample matrices for the trajectory bands
    std::vector<std::vector<double>> s_rows, c_rows, cos_rows;
    for (const auto& d : r.dialogues) {
      std::vector<double> s, c, cs;
      bool c_ok = true, cos_ok = true;
      for (size_t t = 0; t < d.turns.size(); ++t) {
        s.push_back(d.turns[t].ensemble_score);
        c.push_back(d.turns[t].c_t);
        c_ok = c_ok && d.turns[t].c_t_defined;
        if (t >= 1) {
          cs.push_back(d.cosine_per_turn[t]);
          cos_ok = cos_ok && !std::isnan(d.cosine_per_turn[t]);
        }
      }
      s_rows.push_back(s);
      if (c_ok) c_rows.push_back(c);
      if (cos_ok && !cs.empty()) cos_rows.push_back(cs);
    }
    if (!s_rows.empty())
      inputs.trajectories.push_back(
          {"bias", r.condition.name,
           trajectory_from_samples(s_rows, cfg_.bootstrap_resamples,
                                   Rng::stream(cfg_.seed, "report.bias." + r.condition.name).next_u64())});
    if (!c_rows.empty())
      inputs.trajectories.push_back(
          {"memory", r.condition.name,
           trajectory_from_samples(c_rows, cfg_.bootstrap_resamples,
                                   Rng::stream(cfg_.seed, "report.memory." + r.condition.name).next_u64())});
    if (!cos_rows.empty())
      inputs.trajectories.push_back(
          {"cosine", r.condition.name,
           trajectory_from_samples(cos_rows, cfg_.bootstrap_resamples,
                                   Rng::stream(cfg_.seed, "report.cosine." + r.condition.name).next_u64())});
  }
  inputs.notes.push_back("bias threshold 0.5 on the ensemble score");
  emit_report(inputs, cfg_.out_dir);
  report_outputs.push_back("metrics.csv");
  report_outputs.push_back("summary.txt");
  {
    std::set<std::string> names;
    for (const auto& [name, cond, traj] : inputs.trajectories) {
      (void)cond;
      (void)traj;
      names.insert(name);
    }
    for (const auto& n : names) report_outputs.push_back(n + "_curve.csv");
  }

  // ablation tables when the plan carries sweep conditions
  bool has_sweep = false;
  for (const auto& r : results_)
    if (r.condition.mode == GateMode::kRandomK) has_sweep = true;
  if (has_sweep && baseline && baseline->bundle.S.defined) {
    std::ofstream ab(cfg_.out_dir + "/ablation.csv", std::ios::binary);
    ab << "condition,mode,k,S,T,C,F,R,delta_bias,perplexity\n";
    for (const auto& r : results_) {
      auto cell = [](const MetricValue& m) { return m.defined ? fmt_double(m.value) : std::string("NA"); };
      double delta = baseline->bundle.S.value - (r.bundle.S.defined ? r.bundle.S.value : 0.0);
      ab << r.condition.name << "," << gate_mode_name(r.condition.mode) << "," << r.condition.k << ","
         << cell(r.bundle.S) << "," << cell(r.bundle.T) << "," << cell(r.bundle.C) << ","
         << cell(r.bundle.F) << "," << cell(r.bundle.R) << "," << fmt_double(delta) << ","
         << fmt_double(r.perplexity_neutral) << "\n";
    }

    std::ofstream sw(cfg_.out_dir + "/sweep.csv", std::ios::binary);
    sw << "k,topk_delta,random_mean_delta,random_std_delta,random_seeds\n";
    for (int k : cfg_.sweep_ks) {
      double topk_delta = std::nan("");
      std::vector<double> randoms;
      for (const auto& r : results_) {
        if (!r.bundle.S.defined) continue;
        double delta = baseline->bundle.S.value - r.bundle.S.value;
        if (r.condition.mode == GateMode::kDynamic && r.condition.k == k) topk_delta = delta;
        if (r.condition.mode == GateMode::kRandomK && r.condition.k == k) randoms.push_back(delta);
      }
      double mean = 0, sd = 0;
      for (double d : randoms) mean += d;
      if (!randoms.empty()) mean /= static_cast<double>(randoms.size());
      for (double d : randoms) sd += (d - mean) * (d - mean);
      if (randoms.size() > 1) sd = std::sqrt(sd / static_cast<double>(randoms.size() - 1));
      sw << k << "," << (std::isnan(topk_delta) ? "NA" : fmt_double(topk_delta)) << ","
         << (randoms.empty() ? "NA" : fmt_double(mean)) << ","
         << (randoms.size() > 1 ? fmt_double(sd) : "NA") << "," << randoms.size() << "\n";
    }
  }
  if (fs::exists(cfg_.out_dir + "/ablation.csv")) {
    report_outputs.push_back("ablation.csv");
    report_outputs.push_back("sweep.csv");
  }
  write_stage_record("report", "-", report_outputs);
  append_manifest_stage("report", "-", false);
}

std::string Pipeline::run_all() {
  RunPlan plan = default_run_plan(cfg_);
  try {
    stage_corpus();
    stage_train();
    stage_attribute();
    stage_probe();
    stage_evaluate(plan);
    stage_report(plan);
  } catch (...) {
    write_manifest("failed");
    throw;
  }
  write_manifest("complete");
  return cfg_.out_dir + "/manifest.json";
}

std::string Pipeline::run_ablate() {
  RunPlan plan = ablation_run_plan(cfg_);
  try {
    stage_corpus();
    stage_train();
    stage_attribute();
    stage_probe();
    stage_evaluate(plan);
    stage_report(plan);
  } catch (...) {
    write_manifest("failed");
    throw;
  }
  write_manifest("complete");
  return cfg_.out_dir + "/manifest.json";
}

// --- inspect ---------------------------------------------------------------------------

std::string inspect_manifest(const std::string& manifest_path, const std::string& query, int limit) {
  std::ifstream in(manifest_path);
  if (!in) throw PipelineError("cannot open manifest " + manifest_path, 2);
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const std::exception& e) {
    throw PipelineError(std::string("manifest parse error: ") + e.what(), 2);
  }
  std::string dir = fs::path(manifest_path).parent_path().string();
  if (dir.empty()) dir = ".";

  // integrity: every inventory entry must exist with a matching digest
  for (const auto& [rel, digest] : manifest.at("inventory").items()) {
    std::string path = dir + "/" + rel;
    if (!fs::exists(path) || Sha256::of_file(path) != digest.get<std::string>())
      throw PipelineError("integrity error: digest mismatch for " + rel, 3);
  }

  std::ostringstream out;
  if (query == "top-neurons") {
    std::ifstream rin(dir + "/ranking.csv");
    if (!rin) throw PipelineError("ranking.csv missing", 2);
    std::string line;
    std::getline(rin, line);
    out << line << "\n";
    for (int i = 0; i < limit && std::getline(rin, line); ++i) out << line << "\n";
  } else if (query == "metrics") {
    std::ifstream min(dir + "/metrics.csv");
    if (!min) throw PipelineError("metrics.csv missing", 2);
    out << min.rdbuf();
  } else if (query == "gate") {
    bool any = false;
    for (const auto& [rel, digest] : manifest.at("inventory").items()) {
      (void)digest;
      if (rel.find("gate_log.csv") == std::string::npos) continue;
      any = true;
      out << "== " << rel << "\n";
      std::ifstream gin(dir + "/" + rel);
      std::string line;
      std::getline(gin, line);
      out << line << "\n";
      for (int i = 0; i < limit && std::getline(gin, line); ++i) out << line << "\n";
    }
    if (!any) out << "(no gate logs)\n";
  } else if (query == "files") {
    int i = 0;
    for (const auto& [rel, digest] : manifest.at("inventory").items()) {
      if (limit > 0 && i++ >= limit) break;
      out << rel << " " << digest.get<std::string>() << "\n";
    }
  } else {
    throw PipelineError("unknown query '" + query + "'; valid: top-neurons, metrics, gate, files", 1);
  }
  return out.str();
}

}  // namespace ng
