#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <fstream>
#include <string>

#include <sys/wait.h>

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PEFTLAB_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  return WEXITSTATUS(status);
}

}  // namespace

TEST_CASE("exit code contract: 0 success, 1 failure, 2 configuration error") {
  CHECK(run_cli("grad-check --seed 7") == 0);

  // missing config file
  CHECK(run_cli("train -c this_file_does_not_exist.json") == 2);

  // unknown config key
  {
    std::ofstream os("tmp_cli_bad.json");
    os << R"({"task": {"name": "qa"}, "bogus": 1})";
  }
  CHECK(run_cli("train -c tmp_cli_bad.json") == 2);

  // invalid enum string
  {
    std::ofstream os("tmp_cli_enum.json");
    os << R"({"task": {"name": "qa", "attributes": 2, "values": 2, "n": 32},
              "model": {"d": 8, "heads": 2, "blocks": 1, "ffn_mult": 2, "vocab": 8, "max_len": 6},
              "peft": {"kind": "lora", "r": 2, "routing": "projection"},
              "train": {"steps": 1, "batch": 2}})";
  }
  CHECK(run_cli("train -c tmp_cli_enum.json") == 2);

  // malformed flags
  CHECK(run_cli("definitely-not-a-subcommand") == 2);

  // runtime failure: drift on a missing checkpoint
  CHECK(run_cli("drift --initial nope.ckpt --final nope.ckpt") == 1);

  // a tiny but complete run succeeds
  {
    std::ofstream os("tmp_cli_ok.json");
    os << R"({"task": {"name": "qa", "attributes": 2, "values": 2, "n": 64},
              "model": {"d": 8, "heads": 2, "blocks": 1, "ffn_mult": 2, "vocab": 8, "max_len": 6},
              "peft": {"kind": "lora", "r": 2, "routing": "mul"},
              "train": {"steps": 5, "batch": 4, "lr": 0.001},
              "out_dir": "tmp_cli_run"})";
  }
  CHECK(run_cli("train -c tmp_cli_ok.json") == 0);
  CHECK(run_cli("count-params -c tmp_cli_ok.json") == 0);
  CHECK(run_cli("drift --initial tmp_cli_run/checkpoint_initial.ckpt "
                "--final tmp_cli_run/checkpoint_final.ckpt") == 0);
}
