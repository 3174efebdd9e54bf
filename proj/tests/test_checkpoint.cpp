#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <fstream>
#include <sstream>

#include "peftlab/checkpoint.hpp"

using namespace peftlab;

namespace {

Model small_model(std::size_t r) {
  ModelConfig mc;
  mc.kind = ModelKind::EncoderClassifier;
  mc.d = 16;
  mc.heads = 2;
  mc.enc_blocks = 2;
  mc.ffn_mult = 2;
  mc.vocab = 16;
  mc.classes = 3;
  mc.visual_dim = 16;
  mc.max_len = 8;
  mc.seed = 13;
  Model m = Model::build(mc);
  PeftPlacement p;
  p.spec.kind = PeftKind::Lora;
  p.spec.rank = r;
  p.spec.routing = RoutingKind::RescaleMul;
  Rng inj(14);
  m.inject_peft(p, inj);
  return m;
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("save, load, save round-trips to identical bytes") {
  Model m = small_model(2);
  // Non-trivial values in the trainable tensors.
  Rng rng(15);
  for (const UnitInstance& ui : m.units()) {
    for (std::size_t i = 0; i < ui.unit->w_up.numel(); ++i) ui.unit->w_up[i] = rng.gaussian();
  }
  save_checkpoint(m, "tmp_ckpt_a.ckpt", 99, 7);

  Model fresh = small_model(2);
  load_checkpoint_file(fresh, "tmp_ckpt_a.ckpt");
  save_checkpoint(fresh, "tmp_ckpt_b.ckpt", 99, 7);
  CHECK(file_bytes("tmp_ckpt_a.ckpt") == file_bytes("tmp_ckpt_b.ckpt"));

  const CheckpointData data = read_checkpoint("tmp_ckpt_a.ckpt");
  CHECK(data.seed == 99);
  CHECK(data.step == 7);
  CHECK(data.signature == m.signature());
}

TEST_CASE("loading into a mismatched architecture names both signatures") {
  Model m = small_model(2);
  save_checkpoint(m, "tmp_ckpt_r2.ckpt", 1, 0);
  Model other = small_model(4);
  try {
    load_checkpoint_file(other, "tmp_ckpt_r2.ckpt");
    FAIL("expected a signature mismatch");
  } catch (const Error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("r=2") != std::string::npos);
    CHECK(msg.find("r=4") != std::string::npos);
  }
}

TEST_CASE("loading preserves the trainable partition and clears gradients") {
  Model m = small_model(2);
  Model target = small_model(2);
  target.units().front().unit->w_down.grad = std::vector<double>(2 * 16, 1.0);
  const CheckpointData data = snapshot_model(m, 0, 0);
  load_checkpoint(target, data);
  CHECK(!target.units().front().unit->w_down.grad.has_value());
  CHECK(target.units().front().unit->w_down.requires_grad);
  bool backbone_frozen = true;
  for (const NamedTensor& nt : target.named_tensors()) {
    if (nt.group == "backbone" && nt.tensor->requires_grad) backbone_frozen = false;
  }
  CHECK(backbone_frozen);
}

TEST_CASE("truncated archives are rejected") {
  Model m = small_model(2);
  save_checkpoint(m, "tmp_ckpt_full.ckpt", 1, 0);
  const std::string bytes = file_bytes("tmp_ckpt_full.ckpt");
  {
    std::ofstream os("tmp_ckpt_cut.ckpt", std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(read_checkpoint("tmp_ckpt_cut.ckpt"), Error);
}
