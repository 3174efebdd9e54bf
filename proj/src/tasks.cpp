#include "peftlab/tasks.hpp"

#include <cmath>
#include <ostream>

namespace peftlab {

VocabLayout VocabLayout::make(std::size_t attr_count, std::size_t values_per_attr) {
  if (attr_count == 0 || values_per_attr == 0) {
    throw ConfigError("attribute world needs at least one attribute and one value");
  }
  VocabLayout v;
  v.attr_count = attr_count;
  v.values_per_attr = values_per_attr;
  return v;
}

int VocabLayout::question_token(std::size_t attr) const {
  if (attr >= attr_count) throw Error("question attribute out of range");
  return 4 + static_cast<int>(attr);
}

int VocabLayout::value_token(std::size_t value) const {
  if (value >= values_per_attr) throw Error("attribute value out of range");
  return 4 + static_cast<int>(attr_count) + static_cast<int>(value);
}

std::string VocabLayout::token_name(int id) const {
  if (id == kBos) return "<s>";
  if (id == kEos) return "</s>";
  if (id == kPromptQa) return "<qa>";
  if (id == kPromptCap) return "<cap>";
  const int q = id - 4;
  if (q >= 0 && q < static_cast<int>(attr_count)) return "attr" + std::to_string(q);
  const int v = q - static_cast<int>(attr_count);
  if (v >= 0 && v < static_cast<int>(values_per_attr)) return "val" + std::to_string(v);
  return "tok" + std::to_string(id);
}

const double* AttributeWorld::value_embedding(std::size_t attr, std::size_t value) const {
  return &embed.data()[(attr * values_per_attr + value) * visual_dim];
}

AttributeWorld AttributeWorld::make(std::size_t attr_count, std::size_t values_per_attr,
                                    std::size_t visual_dim, double noise_sigma, std::uint64_t seed) {
  if (attr_count == 0 || values_per_attr == 0 || visual_dim == 0) {
    throw ConfigError("attribute world dims must be positive");
  }
  AttributeWorld w;
  w.attr_count = attr_count;
  w.values_per_attr = values_per_attr;
  w.visual_dim = visual_dim;
  w.noise_sigma = noise_sigma;
  w.seed = seed;
  Rng rng(mix_seed(seed, 0x7707));
  w.embed = Tensor::randn({attr_count * values_per_attr, visual_dim}, rng,
                          1.0 / std::sqrt(static_cast<double>(visual_dim)));
  const std::size_t rows = w.embed.rows();
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = i + 1; j < rows; ++j) {
      double dist = 0.0;
      for (std::size_t c = 0; c < visual_dim; ++c) {
        const double d = w.embed.at(i, c) - w.embed.at(j, c);
        dist += d * d;
      }
      if (dist == 0.0) throw Error("attribute embeddings collide; change the world seed");
    }
  }
  return w;
}

AblationMode parse_ablation_mode(const std::string& name) {
  if (name == "none") return AblationMode::None;
  if (name == "noise") return AblationMode::Noise;
  if (name == "ones") return AblationMode::Ones;
  throw ConfigError("unknown ablation mode \"" + name + "\"; valid: none, noise, ones");
}

std::string ablation_mode_name(AblationMode m) {
  switch (m) {
    case AblationMode::None: return "none";
    case AblationMode::Noise: return "noise";
    case AblationMode::Ones: return "ones";
  }
  throw Error("unreachable ablation mode");
}

AblationScope parse_ablation_scope(const std::string& name) {
  if (name == "routing_only") return AblationScope::RoutingOnly;
  if (name == "both") return AblationScope::Both;
  throw ConfigError("unknown ablation scope \"" + name + "\"; valid: routing_only, both");
}

std::string ablation_scope_name(AblationScope s) {
  return s == AblationScope::RoutingOnly ? "routing_only" : "both";
}

namespace {

// Seed-independent split so membership is stable across regeneration.
bool is_val_index(std::size_t index) { return mix_seed(0xC0FFEE, index) % 10 == 0; }

Tensor draw_visual(const AttributeWorld& world, const std::vector<int>& latents, Rng& rng) {
  Tensor v({1, world.visual_dim});
  for (std::size_t k = 0; k < world.attr_count; ++k) {
    const double* row = world.value_embedding(k, static_cast<std::size_t>(latents[k]));
    for (std::size_t c = 0; c < world.visual_dim; ++c) v[c] += row[c];
  }
  for (std::size_t c = 0; c < world.visual_dim; ++c) v[c] += world.noise_sigma * rng.gaussian();
  return v;
}

std::vector<int> draw_latents(const AttributeWorld& world, Rng& rng) {
  std::vector<int> latents(world.attr_count);
  for (auto& l : latents) l = static_cast<int>(rng.uniform_index(world.values_per_attr));
  return latents;
}

std::vector<int> caption_target(const VocabLayout& vocab, const std::vector<int>& latents) {
  std::vector<int> t;
  t.reserve(latents.size() + 1);
  for (int v : latents) t.push_back(vocab.value_token(static_cast<std::size_t>(v)));
  t.push_back(VocabLayout::kEos);
  return t;
}

Dataset start_dataset(const AttributeWorld& world, std::uint64_t seed) {
  Dataset ds;
  ds.world = world;
  ds.vocab = VocabLayout::make(world.attr_count, world.values_per_attr);
  ds.gen_seed = seed;
  return ds;
}

void finish_split(Dataset& ds) {
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    (is_val_index(i) ? ds.val_idx : ds.train_idx).push_back(i);
  }
}

}  // namespace

Dataset gen_qa(const AttributeWorld& world, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ConfigError("dataset size must be positive");
  Dataset ds = start_dataset(world, seed);
  Rng rng(mix_seed(world.seed, mix_seed(n, seed)));
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.task = "qa";
    s.latents = draw_latents(world, rng);
    s.visual = draw_visual(world, s.latents, rng);
    const std::size_t ask = rng.uniform_index(world.attr_count);
    s.question = {ds.vocab.question_token(ask)};
    s.label = s.latents[ask];
    ds.samples.push_back(std::move(s));
  }
  finish_split(ds);
  return ds;
}

Dataset gen_caption(const AttributeWorld& world, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ConfigError("dataset size must be positive");
  Dataset ds = start_dataset(world, seed);
  Rng rng(mix_seed(world.seed, mix_seed(n, mix_seed(seed, 0xCA9))));
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.task = "cap";
    s.latents = draw_latents(world, rng);
    s.visual = draw_visual(world, s.latents, rng);
    s.target = caption_target(ds.vocab, s.latents);
    ds.samples.push_back(std::move(s));
  }
  finish_split(ds);
  return ds;
}

Dataset gen_multitask(const AttributeWorld& world, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ConfigError("dataset size must be positive");
  Dataset ds = start_dataset(world, seed);
  Rng rng(mix_seed(world.seed, mix_seed(n, mix_seed(seed, 0x3317))));
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.latents = draw_latents(world, rng);
    s.visual = draw_visual(world, s.latents, rng);
    if (i % 2 == 0) {
      s.task = "qa";
      const std::size_t ask = rng.uniform_index(world.attr_count);
      s.question = {VocabLayout::kPromptQa, ds.vocab.question_token(ask)};
      s.label = s.latents[ask];
      s.target = {ds.vocab.value_token(static_cast<std::size_t>(s.label)), VocabLayout::kEos};
    } else {
      s.task = "cap";
      s.question = {VocabLayout::kPromptCap};
      s.target = caption_target(ds.vocab, s.latents);
    }
    ds.samples.push_back(std::move(s));
  }
  finish_split(ds);
  return ds;
}

Dataset ablate_visual(const Dataset& source, AblationMode mode, AblationScope scope) {
  if (mode == AblationMode::None) return source;
  Dataset ds = source;
  Rng rng(mix_seed(source.gen_seed, 0xAB1A7E));
  for (Sample& s : ds.samples) {
    Tensor replacement({1, source.world.visual_dim});
    if (mode == AblationMode::Noise) {
      for (std::size_t c = 0; c < replacement.numel(); ++c) replacement[c] = rng.gaussian();
    } else {
      replacement = Tensor::ones({1, source.world.visual_dim});
    }
    if (scope == AblationScope::RoutingOnly) {
      s.routing_override = std::move(replacement);
    } else {
      s.visual = std::move(replacement);
      s.routing_override.reset();
    }
  }
  return ds;
}

void dump_dataset(const Dataset& ds, std::ostream& os) {
  for (const Sample& s : ds.samples) {
    os << s.task << "\tq=";
    for (std::size_t i = 0; i < s.question.size(); ++i) os << (i ? "," : "") << s.question[i];
    os << "\tt=";
    for (std::size_t i = 0; i < s.target.size(); ++i) os << (i ? "," : "") << s.target[i];
    os << "\tv=";
    for (std::size_t i = 0; i < s.visual.numel(); ++i) os << (i ? "," : "") << s.visual[i];
    os << "\tlabel=" << s.label << "\n";
  }
}

}  // namespace peftlab
