#include "peftlab/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

namespace peftlab {

using nlohmann::json;

const char* kVersionStamp = "peftlab 1.0.0";

namespace {

/// Pull-and-complain view over one JSON object: every key must be consumed.
class StrictObject {
 public:
  StrictObject(json j, std::string name) : j_(std::move(j)), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config section \"" + name_ + "\" must be an object");
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    seen_.insert(key);
    if (!j_.contains(key)) return fallback;
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config key \"" + name_ + "." + key + "\" has the wrong type");
    }
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  json raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) {
        throw ConfigError("unknown config key \"" + name_ + "." + it.key() + "\"");
      }
    }
  }

 private:
  json j_;
  std::string name_;
  std::set<std::string> seen_;
};

json empty_object() { return json::object(); }

}  // namespace

ExperimentConfig parse_experiment_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config root must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    static const std::set<std::string> known{"model", "peft", "task", "train", "out_dir"};
    if (!known.count(it.key())) throw ConfigError("unknown config key \"" + it.key() + "\"");
  }
  ExperimentConfig cfg;

  StrictObject task(j.contains("task") ? j.at("task") : empty_object(), "task");
  cfg.task.name = task.get<std::string>("name", "qa");
  if (cfg.task.name != "qa" && cfg.task.name != "caption" && cfg.task.name != "multitask") {
    throw ConfigError("unknown task \"" + cfg.task.name + "\"; valid: qa, caption, multitask");
  }
  cfg.task.attributes = task.get<std::size_t>("attributes", 4);
  cfg.task.values = task.get<std::size_t>("values", 4);
  cfg.task.n = task.get<std::size_t>("n", 4096);
  cfg.task.noise_sigma = task.get<double>("noise_sigma", 0.1);
  cfg.task.world_seed = task.get<std::uint64_t>("world_seed", 1);
  cfg.task.data_seed = task.get<std::uint64_t>("data_seed", 2);
  cfg.task.ablation = parse_ablation_mode(task.get<std::string>("ablation", "none"));
  cfg.task.ablation_scope = parse_ablation_scope(task.get<std::string>("ablation_scope", "routing_only"));
  task.finish();

  StrictObject model(j.contains("model") ? j.at("model") : empty_object(), "model");
  const std::string default_kind = cfg.task.name == "qa"          ? "encoder_classifier"
                                   : cfg.task.name == "caption"   ? "decoder_generator"
                                                                  : "encdec_multitask";
  cfg.model.kind = parse_model_kind(model.get<std::string>("kind", default_kind));
  cfg.model.d = model.get<std::size_t>("d", 32);
  cfg.model.heads = model.get<std::size_t>("heads", 2);
  cfg.model.enc_blocks = model.get<std::size_t>("blocks", 2);
  cfg.model.dec_blocks = model.get<std::size_t>("dec_blocks", 2);
  cfg.model.ffn_mult = model.get<std::size_t>("ffn_mult", 4);
  cfg.model.vocab = model.get<std::size_t>("vocab", 64);
  cfg.model.max_len = model.get<std::size_t>("max_len", 16);
  cfg.model.visual_dim = model.get<std::size_t>("visual_dim", cfg.model.d);
  cfg.model.comparator_mode = model.get<bool>("comparator_mode", false);
  cfg.model.head_hidden = model.get<std::size_t>("head_hidden", cfg.model.d);
  cfg.model.attn_gain = model.get<double>("attn_gain", 1.0);
  cfg.model.seed = model.get<std::uint64_t>("seed", 1);
  cfg.model.classes = cfg.task.values;
  model.finish();

  const std::size_t vocab_used = 4 + cfg.task.attributes + cfg.task.values;
  if (cfg.model.vocab < vocab_used) {
    throw ConfigError("vocab " + std::to_string(cfg.model.vocab) + " too small for task layout (needs " +
                      std::to_string(vocab_used) + ")");
  }
  if (cfg.task.name == "qa" && cfg.model.kind != ModelKind::EncoderClassifier) {
    throw ConfigError("task qa runs on the encoder_classifier model");
  }
  if (cfg.task.name == "caption" && cfg.model.kind != ModelKind::DecoderGenerator) {
    throw ConfigError("task caption runs on the decoder_generator model");
  }
  if (cfg.task.name == "multitask" && cfg.model.kind != ModelKind::EncDecMultitask) {
    throw ConfigError("task multitask runs on the encdec_multitask model");
  }

  StrictObject peft(j.contains("peft") ? j.at("peft") : empty_object(), "peft");
  cfg.peft.spec.kind = parse_peft_kind(peft.get<std::string>("kind", "lora"));
  cfg.peft.spec.rank = peft.get<std::size_t>("r", 4);
  if (peft.has("alpha")) cfg.peft.spec.alpha = peft.get<double>("alpha", 0.0);
  cfg.peft.spec.routing = parse_routing_kind(peft.get<std::string>("routing", "none"));
  cfg.peft.spec.share_down = peft.get<bool>("share_down", true);
  cfg.peft.spec.chain = parse_chain_kind(peft.get<std::string>("chain", "standard"));
  cfg.peft.spec.nonlinearity = parse_nonlinearity(peft.get<std::string>("nonlinearity", "relu"));
  const std::string sharing = peft.get<std::string>("sharing", "single");
  if (sharing != "single" && sharing != "per_task") {
    throw ConfigError("unknown peft sharing \"" + sharing + "\"; valid: single, per_task");
  }
  cfg.peft.sharing = sharing == "single" ? UnitSharing::Single : UnitSharing::PerTask;
  if (cfg.peft.sharing == UnitSharing::PerTask) {
    if (cfg.task.name != "multitask") {
      throw ConfigError("per_task peft sharing requires the multitask task");
    }
    cfg.peft.tasks = {"qa", "cap"};
  }
  if (peft.has("per_task_routing")) {
    const json m = peft.raw("per_task_routing");
    if (!m.is_object()) throw ConfigError("peft.per_task_routing must be an object");
    for (auto it = m.begin(); it != m.end(); ++it) {
      if (it.key() != "qa" && it.key() != "cap") {
        throw ConfigError("per_task_routing has unknown task \"" + it.key() + "\"");
      }
      cfg.peft.per_task_routing[it.key()] = parse_routing_kind(it.value().get<std::string>());
    }
    if (!cfg.peft.per_task_routing.empty() && cfg.peft.sharing != UnitSharing::PerTask) {
      throw ConfigError("per_task_routing requires peft.sharing = per_task");
    }
  }
  cfg.peft.route_encoder_units = peft.get<bool>("route_encoder_units", false);
  peft.finish();

  StrictObject train(j.contains("train") ? j.at("train") : empty_object(), "train");
  cfg.train.steps = train.get<std::size_t>("steps", 2000);
  cfg.train.batch = train.get<std::size_t>("batch", 16);
  cfg.train.lr = train.get<double>("lr", 1e-3);
  cfg.train.warmup_frac = train.get<double>("warmup_frac", 0.05);
  cfg.train.weight_decay = train.get<double>("weight_decay", 0.01);
  cfg.train.seed = train.get<std::uint64_t>("seed", 7);
  cfg.train.eval_every = train.get<std::size_t>("eval_every", 0);
  cfg.train.log_every = train.get<std::size_t>("log_every", 50);
  train.finish();
  if (cfg.train.warmup_frac < 0.0 || cfg.train.warmup_frac >= 1.0) {
    throw ConfigError("train.warmup_frac must lie in [0, 1)");
  }

  if (j.contains("out_dir")) {
    if (!j.at("out_dir").is_string()) throw ConfigError("out_dir must be a string");
    cfg.out_dir = j.at("out_dir").get<std::string>();
  }
  return cfg;
}

Dataset ExperimentConfig::build_dataset() const {
  const AttributeWorld world = AttributeWorld::make(task.attributes, task.values, model.visual_dim,
                                                    task.noise_sigma, task.world_seed);
  Dataset ds;
  if (task.name == "qa") {
    ds = gen_qa(world, task.n, task.data_seed);
  } else if (task.name == "caption") {
    ds = gen_caption(world, task.n, task.data_seed);
  } else {
    ds = gen_multitask(world, task.n, task.data_seed);
  }
  if (task.ablation != AblationMode::None) {
    ds = ablate_visual(ds, task.ablation, task.ablation_scope);
  }
  return ds;
}

Model ExperimentConfig::build_model() const {
  Model m = Model::build(model);
  Rng rng(mix_seed(model.seed, 0x9EF7));
  m.inject_peft(peft, rng);
  return m;
}

json ExperimentConfig::to_json() const {
  json j;
  j["task"] = {{"name", task.name},
               {"attributes", task.attributes},
               {"values", task.values},
               {"n", task.n},
               {"noise_sigma", task.noise_sigma},
               {"world_seed", task.world_seed},
               {"data_seed", task.data_seed},
               {"ablation", ablation_mode_name(task.ablation)},
               {"ablation_scope", ablation_scope_name(task.ablation_scope)}};
  j["model"] = {{"kind", model_kind_name(model.kind)},
                {"d", model.d},
                {"heads", model.heads},
                {"blocks", model.enc_blocks},
                {"dec_blocks", model.dec_blocks},
                {"ffn_mult", model.ffn_mult},
                {"vocab", model.vocab},
                {"max_len", model.max_len},
                {"visual_dim", model.visual_dim},
                {"comparator_mode", model.comparator_mode},
                {"head_hidden", model.head_hidden},
                {"attn_gain", model.attn_gain},
                {"seed", model.seed}};
  j["peft"] = {{"kind", peft_kind_name(peft.spec.kind)},
               {"r", peft.spec.rank},
               {"alpha", peft.spec.resolved_alpha()},
               {"routing", routing_kind_name(peft.spec.routing)},
               {"share_down", peft.spec.share_down},
               {"chain", chain_kind_name(peft.spec.chain)},
               {"nonlinearity", nonlinearity_name(peft.spec.nonlinearity)},
               {"sharing", peft.sharing == UnitSharing::Single ? "single" : "per_task"},
               {"route_encoder_units", peft.route_encoder_units}};
  if (!peft.per_task_routing.empty()) {
    json per_task = json::object();
    for (const auto& [t, k] : peft.per_task_routing) per_task[t] = routing_kind_name(k);
    j["peft"]["per_task_routing"] = per_task;
  }
  j["train"] = {{"steps", train.steps},     {"batch", train.batch},
                {"lr", train.lr},           {"warmup_frac", train.warmup_frac},
                {"weight_decay", train.weight_decay}, {"seed", train.seed},
                {"eval_every", train.eval_every},     {"log_every", train.log_every}};
  j["out_dir"] = out_dir;
  return j;
}

std::filesystem::path ExperimentConfig::resolved_out_dir() const {
  std::filesystem::path p(out_dir);
  if (p.is_relative()) {
    if (const char* root = std::getenv("PEFTLAB_OUT_ROOT")) {
      return std::filesystem::path(root) / p;
    }
  }
  return p;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override must look like section.key=value, got \"" + assignment + "\"");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::exception&) {
    parsed = value;  // bare string
  }
  json* cursor = &j;
  std::size_t begin = 0;
  while (true) {
    const auto dot = path.find('.', begin);
    const std::string key = path.substr(begin, dot == std::string::npos ? dot : dot - begin);
    if (key.empty()) throw ConfigError("override path has an empty segment: \"" + path + "\"");
    if (dot == std::string::npos) {
      (*cursor)[key] = parsed;
      return;
    }
    cursor = &(*cursor)[key];
    begin = dot + 1;
  }
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file: " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("config parse error in " + path.string() + ": " + e.what());
  }
  // A run manifest embeds its resolved config; accept it directly so any run
  // is reproducible from the manifest alone.
  if (j.contains("version") && j.contains("config")) j = j.at("config");
  for (const std::string& o : overrides) apply_override(j, o);
  return parse_experiment_json(j);
}

void write_manifest(const ExperimentConfig& cfg, Model& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json m;
  m["version"] = kVersionStamp;
  m["config"] = cfg.to_json();
  m["signature"] = model.signature();
  m["seeds"] = {{"model", cfg.model.seed},
                {"world", cfg.task.world_seed},
                {"data", cfg.task.data_seed},
                {"train", cfg.train.seed}};
  m["artifacts"] = {{"metrics", "metrics.jsonl"},
                    {"metrics_table", "metrics.txt"},
                    {"initial_checkpoint", "checkpoint_initial.ckpt"},
                    {"final_checkpoint", "checkpoint_final.ckpt"},
                    {"summary", "summary.json"}};
  std::ofstream os(dir / "manifest.json");
  if (!os) throw Error("cannot write manifest in " + dir.string());
  os << m.dump(2) << "\n";
}

}  // namespace peftlab
