#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "peftlab/rng.hpp"
#include "peftlab/tensor.hpp"

namespace peftlab {

/// Fixed token id layout shared by all tasks built on one attribute world.
struct VocabLayout {
  std::size_t attr_count = 0;
  std::size_t values_per_attr = 0;

  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kPromptQa = 2;
  static constexpr int kPromptCap = 3;

  int question_token(std::size_t attr) const;
  int value_token(std::size_t value) const;
  std::size_t used() const { return 4 + attr_count + values_per_attr; }
  std::string token_name(int id) const;

  static VocabLayout make(std::size_t attr_count, std::size_t values_per_attr);
};

/// Synthetic stand-in for a vision encoder: each (attribute, value) pair owns
/// a fixed random embedding; an image is the sum of its chosen value
/// embeddings plus Gaussian noise. Regenerable bit-exactly from the seed.
struct AttributeWorld {
  std::size_t attr_count = 0;       // K
  std::size_t values_per_attr = 0;  // values each attribute can take
  std::size_t visual_dim = 0;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
  Tensor embed;  // (K * values) x visual_dim, row = attr * values + value

  const double* value_embedding(std::size_t attr, std::size_t value) const;

  static AttributeWorld make(std::size_t attr_count, std::size_t values_per_attr,
                             std::size_t visual_dim, double noise_sigma, std::uint64_t seed);
};

enum class AblationMode { None, Noise, Ones };
enum class AblationScope { RoutingOnly, Both };

AblationMode parse_ablation_mode(const std::string& name);
std::string ablation_mode_name(AblationMode m);
AblationScope parse_ablation_scope(const std::string& name);
std::string ablation_scope_name(AblationScope s);

struct Sample {
  Tensor visual;                            // L_v x visual_dim
  std::optional<Tensor> routing_override;   // replaces the routing feature only
  std::vector<int> question;                // encoder-side text tokens
  std::vector<int> target;                  // generation target, EOS-terminated
  int label = -1;                           // class id for QA
  std::string task;                         // "qa" | "cap"
  std::vector<int> latents;                 // attribute values behind the visual
};

struct Dataset {
  AttributeWorld world;
  VocabLayout vocab;
  std::uint64_t gen_seed = 0;
  std::vector<Sample> samples;
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> val_idx;
};

/// Question answering: the question names an attribute, the label is that
/// attribute's value in the image.
Dataset gen_qa(const AttributeWorld& world, std::size_t n, std::uint64_t seed);

/// Captioning: the target spells out every attribute value in order, then EOS.
Dataset gen_caption(const AttributeWorld& world, std::size_t n, std::uint64_t seed);

/// Union of QA and captioning samples, each question prefixed with its task
/// prompt token and labels kept in generation form.
Dataset gen_multitask(const AttributeWorld& world, std::size_t n, std::uint64_t seed);

/// Replaces the visual stream with per-sample noise or an all-ones vector.
/// RoutingOnly keeps the original visual in the token stream and overrides
/// only the routing feature; Both replaces the visual everywhere. Labels and
/// text are untouched.
Dataset ablate_visual(const Dataset& source, AblationMode mode, AblationScope scope);

/// One record per line: task, token ids, visual vector, label.
void dump_dataset(const Dataset& ds, std::ostream& os);

}  // namespace peftlab
