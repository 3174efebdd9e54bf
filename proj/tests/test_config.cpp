#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <fstream>

#include "peftlab/config.hpp"

using namespace peftlab;
using nlohmann::json;

namespace {

json minimal_config() {
  return json::parse(R"({
    "task": {"name": "qa", "attributes": 4, "values": 4, "n": 64, "noise_sigma": 0.1},
    "model": {"d": 16, "heads": 2, "blocks": 2, "ffn_mult": 2, "vocab": 16, "max_len": 8},
    "peft": {"kind": "lora", "r": 2, "routing": "proj"},
    "train": {"steps": 10, "batch": 4, "lr": 0.001},
    "out_dir": "tmp_cfg_run"
  })");
}

}  // namespace

TEST_CASE("routing strings parse into the experiment config") {
  ExperimentConfig cfg = parse_experiment_json(minimal_config());
  CHECK(cfg.peft.spec.routing == RoutingKind::ProjMul);
  CHECK(cfg.model.kind == ModelKind::EncoderClassifier);
  CHECK(cfg.model.classes == 4);
}

TEST_CASE("invalid enum strings fail with the valid list in the message") {
  json j = minimal_config();
  j["peft"]["routing"] = "projection";
  try {
    parse_experiment_json(j);
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("projection") != std::string::npos);
    CHECK(msg.find("proj") != std::string::npos);
    CHECK(msg.find("rescale") != std::string::npos);
  }
}

TEST_CASE("unknown keys are rejected at every level") {
  json j = minimal_config();
  j["experiment"] = 1;
  CHECK_THROWS_AS(parse_experiment_json(j), ConfigError);
  j = minimal_config();
  j["train"]["learning_rate"] = 0.1;
  CHECK_THROWS_AS(parse_experiment_json(j), ConfigError);
  j = minimal_config();
  j["peft"]["alpha_scale"] = 2;
  CHECK_THROWS_AS(parse_experiment_json(j), ConfigError);
}

TEST_CASE("alpha defaults to the rank") {
  ExperimentConfig cfg = parse_experiment_json(minimal_config());
  CHECK(!cfg.peft.spec.alpha.has_value());
  CHECK(cfg.peft.spec.resolved_alpha() == 2.0);
  json j = minimal_config();
  j["peft"]["alpha"] = 8.0;
  CHECK(parse_experiment_json(j).peft.spec.resolved_alpha() == 8.0);
}

TEST_CASE("task and model kinds must agree") {
  json j = minimal_config();
  j["model"]["kind"] = "decoder_generator";
  CHECK_THROWS_AS(parse_experiment_json(j), ConfigError);
}

TEST_CASE("vocab must cover the task layout") {
  json j = minimal_config();
  j["model"]["vocab"] = 8;  // needs 4 + 4 + 4
  CHECK_THROWS_AS(parse_experiment_json(j), ConfigError);
}

TEST_CASE("per-task routing requires per-task sharing and known tags") {
  json j = minimal_config();
  j["task"]["name"] = "multitask";
  j["model"].erase("kind");
  j["peft"]["sharing"] = "per_task";
  j["peft"]["per_task_routing"] = {{"qa", "mul"}, {"cap", "rescale"}};
  ExperimentConfig cfg = parse_experiment_json(j);
  CHECK(cfg.peft.sharing == UnitSharing::PerTask);
  CHECK(cfg.peft.per_task_routing.at("qa") == RoutingKind::EltwiseMul);
  CHECK(cfg.peft.per_task_routing.at("cap") == RoutingKind::RescaleMul);

  j["peft"]["per_task_routing"]["nlvr"] = "proj";
  CHECK_THROWS_AS(parse_experiment_json(j), ConfigError);

  json single = minimal_config();
  single["peft"]["per_task_routing"] = {{"qa", "mul"}};
  CHECK_THROWS_AS(parse_experiment_json(single), ConfigError);
}

TEST_CASE("overrides rewrite nested keys after the file loads") {
  json j = minimal_config();
  apply_override(j, "peft.routing=rescale");
  apply_override(j, "train.steps=25");
  apply_override(j, "task.noise_sigma=0.5");
  ExperimentConfig cfg = parse_experiment_json(j);
  CHECK(cfg.peft.spec.routing == RoutingKind::RescaleMul);
  CHECK(cfg.train.steps == 25);
  CHECK(cfg.task.noise_sigma == 0.5);
  CHECK_THROWS_AS(apply_override(j, "no_equals_sign"), ConfigError);
}

TEST_CASE("configs echo back as resolved json and round-trip") {
  ExperimentConfig cfg = parse_experiment_json(minimal_config());
  const json echoed = cfg.to_json();
  CHECK(echoed["peft"]["alpha"] == 2.0);  // resolved, not omitted
  ExperimentConfig again = parse_experiment_json(echoed);
  CHECK(again.to_json() == echoed);
}

TEST_CASE("config file loading applies overrides in order") {
  const std::filesystem::path p = "tmp_test_config.json";
  {
    std::ofstream os(p);
    os << minimal_config().dump();
  }
  ExperimentConfig cfg = load_experiment_config(p, {"peft.routing=add", "peft.routing=mul"});
  CHECK(cfg.peft.spec.routing == RoutingKind::EltwiseMul);
  CHECK_THROWS_AS(load_experiment_config("does_not_exist.json"), ConfigError);
  std::filesystem::remove(p);
}

TEST_CASE("dataset and model construction from a config") {
  ExperimentConfig cfg = parse_experiment_json(minimal_config());
  const Dataset ds = cfg.build_dataset();
  CHECK(ds.samples.size() == 64);
  Model m = cfg.build_model();
  CHECK(m.injected());
  CHECK(m.units().size() == 4);

  write_manifest(cfg, m, "tmp_cfg_manifest");
  std::ifstream is("tmp_cfg_manifest/manifest.json");
  REQUIRE(is);
  const json manifest = json::parse(is);
  CHECK(manifest["config"]["peft"]["routing"] == "proj");
  CHECK(manifest["signature"] == m.signature());
  std::filesystem::remove_all("tmp_cfg_manifest");
}

TEST_CASE("ablation settings flow through to the dataset") {
  json j = minimal_config();
  j["task"]["ablation"] = "ones";
  ExperimentConfig cfg = parse_experiment_json(j);
  const Dataset ds = cfg.build_dataset();
  REQUIRE(ds.samples.front().routing_override.has_value());
  CHECK((*ds.samples.front().routing_override)[0] == 1.0);
}
