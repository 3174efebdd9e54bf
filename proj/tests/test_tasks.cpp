#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <set>
#include <sstream>

#include "peftlab/tasks.hpp"

using namespace peftlab;

namespace {

bool same_samples(const Sample& a, const Sample& b) {
  return a.task == b.task && a.question == b.question && a.target == b.target &&
         a.label == b.label && a.latents == b.latents && max_abs_diff(a.visual, b.visual) == 0.0;
}

}  // namespace

TEST_CASE("world regeneration is bit-exact and rows are distinct") {
  const AttributeWorld a = AttributeWorld::make(3, 4, 16, 0.1, 42);
  const AttributeWorld b = AttributeWorld::make(3, 4, 16, 0.1, 42);
  CHECK(max_abs_diff(a.embed, b.embed) == 0.0);
  const AttributeWorld c = AttributeWorld::make(3, 4, 16, 0.1, 43);
  CHECK(max_abs_diff(a.embed, c.embed) > 0.0);
}

TEST_CASE("qa generation replays its own labels") {
  const AttributeWorld world = AttributeWorld::make(4, 4, 16, 0.1, 7);
  const Dataset ds = gen_qa(world, 200, 11);
  const VocabLayout& v = ds.vocab;
  for (const Sample& s : ds.samples) {
    REQUIRE(s.question.size() == 1);
    const int attr = s.question[0] - v.question_token(0);
    REQUIRE(attr >= 0);
    REQUIRE(attr < 4);
    CHECK(s.label == s.latents[static_cast<std::size_t>(attr)]);
  }
}

TEST_CASE("qa with zero noise and one attribute is separable from the visual alone") {
  const AttributeWorld world = AttributeWorld::make(1, 2, 16, 0.0, 13);
  const Dataset ds = gen_qa(world, 50, 17);
  for (const Sample& s : ds.samples) {
    const double* row = world.value_embedding(0, static_cast<std::size_t>(s.label));
    for (std::size_t c = 0; c < 16; ++c) CHECK(s.visual[c] == row[c]);
  }
}

TEST_CASE("generation is deterministic given seeds") {
  const AttributeWorld world = AttributeWorld::make(2, 3, 8, 0.2, 3);
  const Dataset a = gen_qa(world, 64, 5);
  const Dataset b = gen_qa(world, 64, 5);
  REQUIRE(a.samples.size() == b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) CHECK(same_samples(a.samples[i], b.samples[i]));
  const Dataset c = gen_qa(world, 64, 6);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    if (!same_samples(a.samples[i], c.samples[i])) any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("caption targets spell the latents and end with EOS") {
  const AttributeWorld world = AttributeWorld::make(2, 3, 8, 0.1, 9);
  const Dataset ds = gen_caption(world, 40, 21);
  for (const Sample& s : ds.samples) {
    REQUIRE(s.target.size() == 3);  // K values + EOS
    CHECK(s.target.back() == VocabLayout::kEos);
    for (std::size_t k = 0; k < 2; ++k) {
      CHECK(s.target[k] == ds.vocab.value_token(static_cast<std::size_t>(s.latents[k])));
    }
  }
  // The latent-reading oracle reproduces every target exactly.
  std::size_t matches = 0;
  for (const Sample& s : ds.samples) {
    std::vector<int> oracle;
    for (int v : s.latents) oracle.push_back(ds.vocab.value_token(static_cast<std::size_t>(v)));
    oracle.push_back(VocabLayout::kEos);
    if (oracle == s.target) ++matches;
  }
  CHECK(matches == ds.samples.size());
}

TEST_CASE("multitask carries both prompts and keeps the split sizes") {
  const AttributeWorld world = AttributeWorld::make(2, 3, 8, 0.1, 15);
  const Dataset ds = gen_multitask(world, 100, 23);
  CHECK(ds.samples.size() == 100);
  std::set<int> prompts;
  std::size_t qa = 0, cap = 0;
  for (const Sample& s : ds.samples) {
    REQUIRE(!s.question.empty());
    prompts.insert(s.question[0]);
    (s.task == "qa" ? qa : cap) += 1;
    CHECK(!s.target.empty());
  }
  CHECK(prompts == std::set<int>{VocabLayout::kPromptQa, VocabLayout::kPromptCap});
  CHECK(qa + cap == 100);
  CHECK(ds.train_idx.size() + ds.val_idx.size() == 100);
}

TEST_CASE("split membership is stable when the dataset grows") {
  const AttributeWorld world = AttributeWorld::make(2, 3, 8, 0.1, 15);
  const Dataset small = gen_qa(world, 50, 23);
  const Dataset large = gen_qa(world, 200, 23);
  std::set<std::size_t> small_val(small.val_idx.begin(), small.val_idx.end());
  std::set<std::size_t> large_val(large.val_idx.begin(), large.val_idx.end());
  for (std::size_t i = 0; i < 50; ++i) {
    CHECK(small_val.count(i) == large_val.count(i));
  }
  // Roughly one tenth lands in the validation split.
  CHECK(large.val_idx.size() > 5);
  CHECK(large.val_idx.size() < 50);
}

TEST_CASE("ablation replaces only the visual stream") {
  const AttributeWorld world = AttributeWorld::make(2, 3, 8, 0.3, 25);
  const Dataset base = gen_qa(world, 60, 27);

  const Dataset ones = ablate_visual(base, AblationMode::Ones, AblationScope::RoutingOnly);
  for (std::size_t i = 0; i < base.samples.size(); ++i) {
    const Sample& o = ones.samples[i];
    REQUIRE(o.routing_override.has_value());
    for (std::size_t c = 0; c < o.routing_override->numel(); ++c) {
      CHECK((*o.routing_override)[c] == 1.0);
    }
    CHECK(o.label == base.samples[i].label);
    CHECK(o.question == base.samples[i].question);
    CHECK(max_abs_diff(o.visual, base.samples[i].visual) == 0.0);  // prepend untouched
  }

  const Dataset n1 = ablate_visual(base, AblationMode::Noise, AblationScope::RoutingOnly);
  const Dataset n2 = ablate_visual(base, AblationMode::Noise, AblationScope::RoutingOnly);
  for (std::size_t i = 0; i < base.samples.size(); ++i) {
    CHECK(max_abs_diff(*n1.samples[i].routing_override, *n2.samples[i].routing_override) == 0.0);
  }

  const Dataset both = ablate_visual(base, AblationMode::Noise, AblationScope::Both);
  bool replaced = false;
  for (std::size_t i = 0; i < base.samples.size(); ++i) {
    CHECK(!both.samples[i].routing_override.has_value());
    if (max_abs_diff(both.samples[i].visual, base.samples[i].visual) > 0.0) replaced = true;
  }
  CHECK(replaced);

  CHECK_THROWS_AS(parse_ablation_mode("gaussian"), ConfigError);
}

TEST_CASE("dataset dump emits one record per sample") {
  const AttributeWorld world = AttributeWorld::make(2, 2, 4, 0.0, 29);
  const Dataset ds = gen_multitask(world, 6, 31);
  std::ostringstream os;
  dump_dataset(ds, os);
  std::size_t lines = 0;
  for (char ch : os.str()) {
    if (ch == '\n') ++lines;
  }
  CHECK(lines == 6);
}

TEST_CASE("token names are readable") {
  const VocabLayout v = VocabLayout::make(2, 3);
  CHECK(v.token_name(VocabLayout::kBos) == "<s>");
  CHECK(v.token_name(v.question_token(1)) == "attr1");
  CHECK(v.token_name(v.value_token(2)) == "val2");
  CHECK(v.used() == 9);
}
