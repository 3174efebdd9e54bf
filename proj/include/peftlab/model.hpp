#pragma once

#include <map>
#include <memory>

#include "peftlab/blocks.hpp"
#include "peftlab/tasks.hpp"

namespace peftlab {

enum class ModelKind { EncoderClassifier, DecoderGenerator, EncDecMultitask };

ModelKind parse_model_kind(const std::string& name);
std::string model_kind_name(ModelKind kind);

struct ModelConfig {
  ModelKind kind = ModelKind::EncoderClassifier;
  std::size_t d = 32;
  std::size_t heads = 2;
  std::size_t enc_blocks = 2;
  std::size_t dec_blocks = 2;   // encdec only
  std::size_t ffn_mult = 4;
  std::size_t vocab = 64;
  std::size_t classes = 4;       // classifier only
  std::size_t head_hidden = 0;   // classifier MLP width; 0 = model width
  double attn_gain = 1.0;        // frozen attention sharpness
  std::size_t visual_dim = 32;
  std::size_t max_len = 16;
  bool comparator_mode = false;  // generator prepends BOS and feeds the raw feature grid
  std::uint64_t seed = 1;
};

enum class UnitSharing { Single, PerTask };

/// Where and how PEFT units are attached. LoRA lands on the query and value
/// maps of every block; Adapter fills the two per-block slots.
struct PeftPlacement {
  PeftUnitSpec spec;
  UnitSharing sharing = UnitSharing::Single;
  std::vector<std::string> tasks;                        // PerTask unit sets
  std::map<std::string, RoutingKind> per_task_routing;   // overrides spec.routing per task
  bool route_encoder_units = false;                      // encdec: encoder units route too
};

struct UnitInstance {
  std::string section;  // "enc" | "dec"
  std::size_t block = 0;
  std::string slot;     // "lora_q" | "lora_v" | "adapter_attn" | "adapter_ffn"
  std::string task;     // empty = shared
  std::shared_ptr<PeftUnit> unit;
};

struct NamedTensor {
  std::string name;
  Tensor* tensor;
  std::string group;  // "backbone" | "head" | "visual_proj" | unit id
};

struct ParamBudget {
  std::size_t trainable = 0;
  std::size_t frozen = 0;
  std::vector<std::pair<std::string, std::size_t>> per_unit;
  std::size_t total() const { return trainable + frozen; }
};

/// A frozen toy backbone plus everything the run may train: PEFT units and,
/// depending on the architecture, a classifier head or visual projection.
class Model {
 public:
  Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  static Model build(const ModelConfig& cfg);

  /// Attaches PEFT units per the placement, exactly once per site.
  void inject_peft(const PeftPlacement& placement, Rng& rng);

  /// Selects the active unit set. PerTask sharing requires a known task tag.
  void bind_task(const std::string& task);

  /// Teacher-forced logits for the sample: 1 x classes for the classifier,
  /// T x vocab for the generators.
  Var forward_logits(Graph& g, const Sample& sample, AttentionTrace* trace = nullptr);

  Var loss(Graph& g, const Sample& sample);

  /// Argmax decoding, ties to the lowest token id; stops at `eos` or after
  /// `max_len` tokens. Returns the generated continuation including EOS.
  std::vector<int> greedy_decode(const Sample& sample, std::size_t max_len,
                                 int eos = VocabLayout::kEos);

  std::vector<NamedTensor> named_tensors();
  std::vector<Tensor*> trainable_tensors();
  void clear_grads();

  /// Structural descriptor; checkpoints refuse to load across differing
  /// signatures.
  std::string signature() const;

  const ModelConfig& config() const { return cfg_; }
  const std::vector<UnitInstance>& units() const { return units_; }
  bool injected() const { return injected_; }
  const PeftPlacement& placement() const { return placement_; }

  std::vector<TransformerBlock>& encoder_blocks() { return encoder_; }
  std::vector<TransformerBlock>& decoder_blocks() { return decoder_; }

 private:
  Var classifier_forward(Graph& g, const Sample& sample, AttentionTrace* trace);
  Var generator_forward(Graph& g, const Sample& sample, const std::vector<int>& teacher,
                        AttentionTrace* trace);
  Var encdec_forward(Graph& g, const Sample& sample, const std::vector<int>& teacher,
                     AttentionTrace* trace);
  Var tied_logits(Graph& g, Var hidden);
  Var add_positions(Graph& g, Var seq);
  Var visual_rows(Graph& g, const Sample& sample);
  Var routing_feature(Graph& g, const Sample& sample, Var visual);
  void bind_slots(const std::string& task);
  void check_sample(const Sample& sample) const;

  ModelConfig cfg_;
  Tensor tok_embed_;
  Tensor pos_embed_;
  std::vector<TransformerBlock> encoder_;
  std::vector<TransformerBlock> decoder_;
  std::optional<LinearMap> visual_proj_;  // encdec, trainable
  std::optional<LinearMap> head_hidden_;  // classifier, trainable
  std::optional<LinearMap> head_out_;     // classifier, trainable, zero-initialized
  bool injected_ = false;
  PeftPlacement placement_;
  std::vector<UnitInstance> units_;
  std::string bound_task_;
  bool bound_ = false;
};

ParamBudget count_params(Model& model);

}  // namespace peftlab
