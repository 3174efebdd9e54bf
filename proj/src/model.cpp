#include "peftlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace peftlab {

ModelKind parse_model_kind(const std::string& name) {
  if (name == "encoder_classifier") return ModelKind::EncoderClassifier;
  if (name == "decoder_generator") return ModelKind::DecoderGenerator;
  if (name == "encdec_multitask") return ModelKind::EncDecMultitask;
  throw ConfigError("unknown model kind \"" + name +
                    "\"; valid: encoder_classifier, decoder_generator, encdec_multitask");
}

std::string model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::EncoderClassifier: return "encoder_classifier";
    case ModelKind::DecoderGenerator: return "decoder_generator";
    case ModelKind::EncDecMultitask: return "encdec_multitask";
  }
  throw Error("unreachable model kind");
}

Model Model::build(const ModelConfig& cfg) {
  if (cfg.d == 0 || cfg.vocab == 0 || cfg.max_len == 0) throw ConfigError("model dims must be positive");
  if (cfg.heads == 0 || cfg.d % cfg.heads != 0) {
    throw ConfigError("model width " + std::to_string(cfg.d) + " must be divisible by head count " +
                      std::to_string(cfg.heads));
  }
  const bool has_proj = cfg.kind == ModelKind::EncDecMultitask;
  if (!has_proj && cfg.visual_dim != cfg.d) {
    throw ConfigError("visual dim " + std::to_string(cfg.visual_dim) + " != model width " +
                      std::to_string(cfg.d) + " and this architecture has no visual projection");
  }
  if (cfg.comparator_mode && cfg.kind != ModelKind::DecoderGenerator) {
    throw ConfigError("comparator mode is only defined for the decoder generator");
  }

  Model m;
  m.cfg_ = cfg;
  Rng rng(mix_seed(cfg.seed, 0xB0DE));
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(cfg.d));
  m.tok_embed_ = Tensor::randn({cfg.vocab, cfg.d}, rng, emb_std);
  m.pos_embed_ = Tensor::randn({cfg.max_len, cfg.d}, rng, emb_std);
  m.tok_embed_.requires_grad = false;
  m.pos_embed_.requires_grad = false;

  const bool enc_causal = cfg.kind == ModelKind::DecoderGenerator;
  for (std::size_t i = 0; i < cfg.enc_blocks; ++i) {
    m.encoder_.push_back(
        TransformerBlock::make(cfg.d, cfg.heads, cfg.ffn_mult, enc_causal, rng, cfg.attn_gain));
  }
  if (cfg.kind == ModelKind::EncDecMultitask) {
    for (std::size_t i = 0; i < cfg.dec_blocks; ++i) {
      m.decoder_.push_back(
          TransformerBlock::make(cfg.d, cfg.heads, cfg.ffn_mult, /*causal=*/true, rng, cfg.attn_gain));
    }
    m.visual_proj_ = LinearMap::make(cfg.d, cfg.visual_dim, rng, /*frozen=*/false);
  }
  if (cfg.kind == ModelKind::EncoderClassifier) {
    if (cfg.classes == 0) throw ConfigError("classifier needs at least one class");
    if (m.cfg_.head_hidden == 0) m.cfg_.head_hidden = cfg.d;
    m.head_hidden_ = LinearMap::make(m.cfg_.head_hidden, cfg.d, rng, /*frozen=*/false);
    // Zero-initialized output layer: logits start uniform.
    LinearMap out;
    out.weight = Tensor::zeros({cfg.classes, m.cfg_.head_hidden});
    out.bias = Tensor::zeros({1, cfg.classes});
    out.set_frozen(false);
    m.head_out_ = std::move(out);
  }
  return m;
}

void Model::inject_peft(const PeftPlacement& placement, Rng& rng) {
  if (injected_) throw Error("peft units already injected; a site cannot be occupied twice");
  placement_ = placement;
  if (placement.sharing == UnitSharing::PerTask && placement.tasks.empty()) {
    throw ConfigError("per-task unit sharing requires a task list");
  }

  PeftUnitSpec base = placement.spec;
  if (cfg_.comparator_mode) base.pool_guide = false;

  std::vector<std::string> tasks =
      placement.sharing == UnitSharing::PerTask ? placement.tasks : std::vector<std::string>{""};

  struct Section {
    const char* name;
    std::vector<TransformerBlock>* blocks;
    bool is_decoder;
  };
  std::vector<Section> sections{{"enc", &encoder_, false}};
  if (cfg_.kind == ModelKind::EncDecMultitask) sections.push_back({"dec", &decoder_, true});

  for (const std::string& task : tasks) {
    for (const Section& sec : sections) {
      PeftUnitSpec spec = base;
      if (auto it = placement.per_task_routing.find(task); it != placement.per_task_routing.end()) {
        spec.routing = it->second;
      }
      // In the encoder-decoder the guidance feature is wired to the decoder;
      // encoder units stay unrouted unless explicitly enabled.
      if (cfg_.kind == ModelKind::EncDecMultitask && !sec.is_decoder && !placement.route_encoder_units) {
        spec.routing = RoutingKind::None;
      }
      for (std::size_t i = 0; i < sec.blocks->size(); ++i) {
        const std::string at = sec.name + std::to_string(i);
        const std::string suffix = task.empty() ? "" : "@" + task;
        auto add_unit = [&](const std::string& slot, std::size_t in_dim, std::size_t out_dim) {
          UnitInstance ui;
          ui.section = sec.name;
          ui.block = i;
          ui.slot = slot;
          ui.task = task;
          ui.unit = std::make_shared<PeftUnit>(
              make_peft_unit(spec, in_dim, out_dim, at + "." + slot + suffix, rng));
          units_.push_back(std::move(ui));
        };
        if (spec.kind == PeftKind::Lora) {
          add_unit("lora_q", cfg_.d, cfg_.d);
          add_unit("lora_v", cfg_.d, cfg_.d);
        } else {
          add_unit("adapter_attn", cfg_.d, cfg_.d);
          add_unit("adapter_ffn", cfg_.d, cfg_.d);
        }
      }
    }
  }

  // The backbone is frozen by construction; enforce it anyway so injection is
  // the single place that fixes the trainable partition.
  tok_embed_.requires_grad = false;
  pos_embed_.requires_grad = false;
  for (auto* blocks : {&encoder_, &decoder_}) {
    for (TransformerBlock& b : *blocks) {
      for (LinearMap* lm : {&b.query, &b.key, &b.value, &b.output, &b.ffn_in, &b.ffn_out}) {
        lm->set_frozen(true);
      }
      b.ln_attn.set_frozen(true);
      b.ln_ffn.set_frozen(true);
    }
  }

  injected_ = true;
  if (placement.sharing == UnitSharing::Single) bind_task("");
}

void Model::bind_slots(const std::string& task) {
  for (auto* blocks : {&encoder_, &decoder_}) {
    for (TransformerBlock& b : *blocks) {
      b.lora_query = b.lora_value = nullptr;
      b.adapter_attn = b.adapter_ffn = nullptr;
    }
  }
  for (UnitInstance& ui : units_) {
    if (ui.task != task) continue;
    auto& blocks = ui.section == "enc" ? encoder_ : decoder_;
    TransformerBlock& b = blocks.at(ui.block);
    PeftUnit* u = ui.unit.get();
    if (ui.slot == "lora_q") {
      if (b.lora_query) throw Error("site " + ui.unit->id + " already occupied");
      b.lora_query = u;
    } else if (ui.slot == "lora_v") {
      if (b.lora_value) throw Error("site " + ui.unit->id + " already occupied");
      b.lora_value = u;
    } else if (ui.slot == "adapter_attn") {
      if (b.adapter_attn) throw Error("site " + ui.unit->id + " already occupied");
      b.adapter_attn = u;
    } else if (ui.slot == "adapter_ffn") {
      if (b.adapter_ffn) throw Error("site " + ui.unit->id + " already occupied");
      b.adapter_ffn = u;
    } else {
      throw Error("unknown peft slot " + ui.slot);
    }
  }
}

void Model::bind_task(const std::string& task) {
  if (!injected_) {
    bound_task_.clear();
    bound_ = true;
    return;
  }
  if (placement_.sharing == UnitSharing::Single) {
    if (!bound_) bind_slots("");
    bound_task_.clear();
    bound_ = true;
    return;
  }
  if (std::find(placement_.tasks.begin(), placement_.tasks.end(), task) == placement_.tasks.end()) {
    throw Error("unknown task tag \"" + task + "\" for per-task peft units");
  }
  if (bound_ && bound_task_ == task) return;
  bind_slots(task);
  bound_task_ = task;
  bound_ = true;
}

Var Model::add_positions(Graph& g, Var seq) {
  const std::size_t len = g.value(seq).rows();
  if (len > cfg_.max_len) {
    throw DimError("sequence length " + std::to_string(len) + " exceeds max_len " +
                   std::to_string(cfg_.max_len));
  }
  return g.add(seq, g.take_rows(g.leaf(pos_embed_), 0, len));
}

Var Model::visual_rows(Graph& g, const Sample& sample) {
  const Tensor& v = sample.visual;
  if (!v.is_matrix() || v.cols() != cfg_.visual_dim) {
    throw DimError("sample visual shape " + shape_str(v.shape()) + " does not match visual dim " +
                   std::to_string(cfg_.visual_dim));
  }
  Var raw = g.constant(v);
  if (visual_proj_) raw = linear_forward(g, *visual_proj_, raw);
  return raw;
}

Var Model::routing_feature(Graph& g, const Sample& sample, Var visual) {
  if (sample.routing_override) {
    return g.constant(*sample.routing_override);
  }
  return visual;
}

void Model::check_sample(const Sample& sample) const {
  if (!sample.visual.is_matrix()) throw DimError("sample visual must be a matrix");
  if (!cfg_.comparator_mode && sample.visual.rows() != 1) {
    throw DimError("this pipeline prepends a single visual token; pooled feature expected, got " +
                   shape_str(sample.visual.shape()));
  }
}

Var Model::tied_logits(Graph& g, Var hidden) {
  return g.matmul(hidden, g.transpose(g.leaf(tok_embed_)));
}

Var Model::classifier_forward(Graph& g, const Sample& sample, AttentionTrace* trace) {
  check_sample(sample);
  Var vis = visual_rows(g, sample);
  Var seq = vis;
  if (!sample.question.empty()) {
    seq = g.concat_rows(vis, embed_tokens(g, tok_embed_, sample.question));
  }
  seq = add_positions(g, seq);
  Var guide = routing_feature(g, sample, vis);
  Var x = seq;
  for (TransformerBlock& b : encoder_) x = block_forward(g, b, x, guide, trace);
  Var pooled = g.take_rows(x, 0, 1);
  Var hidden = g.relu(linear_forward(g, *head_hidden_, pooled));
  return linear_forward(g, *head_out_, hidden);
}

Var Model::generator_forward(Graph& g, const Sample& sample, const std::vector<int>& teacher,
                             AttentionTrace* trace) {
  check_sample(sample);
  if (teacher.empty()) throw Error("generator needs a non-empty target sequence");
  Var prefix;
  if (cfg_.comparator_mode) {
    prefix = embed_tokens(g, tok_embed_, {VocabLayout::kBos});
  } else {
    prefix = visual_rows(g, sample);
  }
  Var seq = prefix;
  if (teacher.size() > 1) {
    std::vector<int> fed(teacher.begin(), teacher.end() - 1);
    seq = g.concat_rows(prefix, embed_tokens(g, tok_embed_, fed));
  }
  seq = add_positions(g, seq);
  Var guide = routing_feature(g, sample, g.constant(sample.visual));
  Var x = seq;
  for (TransformerBlock& b : encoder_) x = block_forward(g, b, x, guide, trace);
  return tied_logits(g, x);
}

Var Model::encdec_forward(Graph& g, const Sample& sample, const std::vector<int>& teacher,
                          AttentionTrace* trace) {
  check_sample(sample);
  if (teacher.empty()) throw Error("generator needs a non-empty target sequence");
  Var proj_vis = visual_rows(g, sample);
  Var enc_seq = proj_vis;
  if (!sample.question.empty()) {
    enc_seq = g.concat_rows(proj_vis, embed_tokens(g, tok_embed_, sample.question));
  }
  enc_seq = add_positions(g, enc_seq);
  std::optional<Var> enc_guide;
  if (placement_.route_encoder_units) enc_guide = proj_vis;
  Var enc_x = enc_seq;
  for (TransformerBlock& b : encoder_) enc_x = block_forward(g, b, enc_x, enc_guide, trace);

  // Guidance into the decoder: pooled last encoder hidden state, recomputed
  // per sample.
  Var dec_guide = sample.routing_override ? g.constant(*sample.routing_override) : g.mean_rows(enc_x);

  Var dec_seq = embed_tokens(g, tok_embed_, {VocabLayout::kBos});
  if (teacher.size() > 1) {
    std::vector<int> fed(teacher.begin(), teacher.end() - 1);
    dec_seq = g.concat_rows(dec_seq, embed_tokens(g, tok_embed_, fed));
  }
  dec_seq = add_positions(g, dec_seq);
  Var x = dec_seq;
  for (TransformerBlock& b : decoder_) x = block_forward(g, b, x, dec_guide, trace);
  return tied_logits(g, x);
}

Var Model::forward_logits(Graph& g, const Sample& sample, AttentionTrace* trace) {
  if (injected_ && placement_.sharing == UnitSharing::PerTask) bind_task(sample.task);
  switch (cfg_.kind) {
    case ModelKind::EncoderClassifier: return classifier_forward(g, sample, trace);
    case ModelKind::DecoderGenerator: return generator_forward(g, sample, sample.target, trace);
    case ModelKind::EncDecMultitask: return encdec_forward(g, sample, sample.target, trace);
  }
  throw Error("unreachable model kind");
}

Var Model::loss(Graph& g, const Sample& sample) {
  Var logits = forward_logits(g, sample);
  if (cfg_.kind == ModelKind::EncoderClassifier) {
    if (sample.label < 0) throw Error("classification sample has no label");
    return g.cross_entropy(logits, {sample.label});
  }
  return g.cross_entropy(logits, sample.target);
}

std::vector<int> Model::greedy_decode(const Sample& sample, std::size_t max_len, int eos) {
  if (cfg_.kind == ModelKind::EncoderClassifier) {
    throw Error("greedy_decode requires a generative model");
  }
  if (injected_ && placement_.sharing == UnitSharing::PerTask) bind_task(sample.task);
  std::vector<int> out;
  while (out.size() < max_len) {
    std::vector<int> teacher = out;
    teacher.push_back(eos);  // placeholder target; only the input rows matter
    Graph g;
    Var logits = cfg_.kind == ModelKind::DecoderGenerator
                     ? generator_forward(g, sample, teacher, nullptr)
                     : encdec_forward(g, sample, teacher, nullptr);
    const Tensor& lv = g.value(logits);
    const std::size_t last = lv.rows() - 1;
    int best = 0;
    for (std::size_t j = 1; j < lv.cols(); ++j) {
      if (lv.at(last, j) > lv.at(last, static_cast<std::size_t>(best))) best = static_cast<int>(j);
    }
    out.push_back(best);
    if (best == eos) break;
  }
  return out;
}

std::vector<NamedTensor> Model::named_tensors() {
  std::vector<NamedTensor> out;
  out.push_back({"embed.tok", &tok_embed_, "backbone"});
  out.push_back({"embed.pos", &pos_embed_, "backbone"});
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    for (auto& [name, t] : encoder_[i].named_tensors("enc" + std::to_string(i))) {
      out.push_back({name, t, "backbone"});
    }
  }
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    for (auto& [name, t] : decoder_[i].named_tensors("dec" + std::to_string(i))) {
      out.push_back({name, t, "backbone"});
    }
  }
  if (visual_proj_) {
    out.push_back({"visual_proj.w", &visual_proj_->weight, "visual_proj"});
    if (visual_proj_->bias) out.push_back({"visual_proj.b", &*visual_proj_->bias, "visual_proj"});
  }
  if (head_hidden_) {
    out.push_back({"head.hidden.w", &head_hidden_->weight, "head"});
    if (head_hidden_->bias) out.push_back({"head.hidden.b", &*head_hidden_->bias, "head"});
    out.push_back({"head.out.w", &head_out_->weight, "head"});
    if (head_out_->bias) out.push_back({"head.out.b", &*head_out_->bias, "head"});
  }
  for (UnitInstance& ui : units_) {
    for (auto& [name, t] : ui.unit->named_tensors()) {
      out.push_back({"unit." + name, t, ui.unit->id});
    }
  }
  return out;
}

std::vector<Tensor*> Model::trainable_tensors() {
  std::vector<Tensor*> out;
  for (const NamedTensor& nt : named_tensors()) {
    if (nt.tensor->requires_grad) out.push_back(nt.tensor);
  }
  return out;
}

void Model::clear_grads() {
  for (const NamedTensor& nt : named_tensors()) nt.tensor->clear_grad();
}

std::string Model::signature() const {
  std::ostringstream os;
  os << "kind=" << model_kind_name(cfg_.kind) << ";d=" << cfg_.d << ";h=" << cfg_.heads
     << ";enc=" << cfg_.enc_blocks << ";dec=" << (cfg_.kind == ModelKind::EncDecMultitask ? cfg_.dec_blocks : 0)
     << ";ffn=" << cfg_.ffn_mult << ";vocab=" << cfg_.vocab << ";classes=" << cfg_.classes
     << ";dv=" << cfg_.visual_dim << ";maxlen=" << cfg_.max_len << ";hh=" << cfg_.head_hidden
     << ";ag=" << cfg_.attn_gain
     << ";cmp=" << (cfg_.comparator_mode ? 1 : 0);
  if (injected_) {
    const PeftUnitSpec& s = placement_.spec;
    os << ";peft=" << peft_kind_name(s.kind) << ";r=" << s.rank << ";alpha=" << s.resolved_alpha()
       << ";routing=" << routing_kind_name(s.routing) << ";share=" << (s.share_down ? 1 : 0)
       << ";chain=" << chain_kind_name(s.chain) << ";act=" << nonlinearity_name(s.nonlinearity)
       << ";sharing=" << (placement_.sharing == UnitSharing::Single ? "single" : "per_task")
       << ";encroute=" << (placement_.route_encoder_units ? 1 : 0) << ";tasks=";
    for (std::size_t i = 0; i < placement_.tasks.size(); ++i) {
      os << (i ? "+" : "") << placement_.tasks[i];
    }
    os << ";pertask=";
    bool first = true;
    for (const auto& [task, kind] : placement_.per_task_routing) {
      os << (first ? "" : "+") << task << ":" << routing_kind_name(kind);
      first = false;
    }
  } else {
    os << ";peft=none";
  }
  return os.str();
}

ParamBudget count_params(Model& model) {
  ParamBudget b;
  for (const NamedTensor& nt : model.named_tensors()) {
    if (nt.tensor->requires_grad) {
      b.trainable += nt.tensor->numel();
    } else {
      b.frozen += nt.tensor->numel();
    }
  }
  for (const UnitInstance& ui : model.units()) {
    b.per_unit.emplace_back(ui.unit->id, ui.unit->param_count());
  }
  return b;
}

}  // namespace peftlab
