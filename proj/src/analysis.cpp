#include "peftlab/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace peftlab {

namespace {

double frobenius_delta(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) {
    throw Error("drift arrays have mismatched shapes: " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace

std::vector<DriftRecord> weight_drift(const CheckpointData& initial, const CheckpointData& final_ckpt) {
  if (initial.signature != final_ckpt.signature) {
    throw Error("drift requires matching signatures:\n  initial: " + initial.signature +
                "\n  final:   " + final_ckpt.signature);
  }
  std::vector<DriftRecord> out;
  const std::string down_suffix = ".w_down";
  for (const NamedArray& a : initial.arrays) {
    if (a.name.rfind("unit.", 0) != 0) continue;
    if (a.name.size() < down_suffix.size() ||
        a.name.compare(a.name.size() - down_suffix.size(), down_suffix.size(), down_suffix) != 0) {
      continue;
    }
    const std::string unit_id = a.name.substr(5, a.name.size() - 5 - down_suffix.size());
    const Tensor* down_final = final_ckpt.find(a.name);
    const std::string up_name = "unit." + unit_id + ".w_up";
    const Tensor* up_initial = initial.find(up_name);
    const Tensor* up_final = final_ckpt.find(up_name);
    if (!down_final || !up_initial || !up_final) {
      throw Error("checkpoint missing arrays for unit " + unit_id);
    }
    DriftRecord r;
    r.unit_id = unit_id;
    r.delta_down = frobenius_delta(*down_final, a.tensor);
    r.delta_up = frobenius_delta(*up_final, *up_initial);
    if (r.delta_up > 0.0) r.ratio = r.delta_down / r.delta_up;
    out.push_back(std::move(r));
  }
  return out;
}

std::string drift_table(const std::vector<DriftRecord>& records) {
  std::ostringstream os;
  os << std::left << std::setw(28) << "unit" << std::right << std::setw(14) << "dW_down"
     << std::setw(14) << "dW_up" << std::setw(14) << "ratio" << "\n";
  os << std::setprecision(6) << std::fixed;
  for (const DriftRecord& r : records) {
    os << std::left << std::setw(28) << r.unit_id << std::right << std::setw(14) << r.delta_down
       << std::setw(14) << r.delta_up << std::setw(14);
    if (r.ratio) {
      os << *r.ratio;
    } else {
      os << "-";
    }
    os << "\n";
  }
  return os.str();
}

AttentionReport attention_inspect(Model& model, const Sample& sample, std::size_t layer,
                                  const VocabLayout& vocab) {
  AttentionTrace trace;
  Graph g;
  model.forward_logits(g, sample, &trace);
  if (layer >= trace.layers.size()) {
    throw Error("layer " + std::to_string(layer) + " out of range; model traced " +
                std::to_string(trace.layers.size()) + " layers");
  }
  AttentionReport report;
  report.full = trace.layers[layer];
  const std::size_t len = report.full.rows();
  const std::size_t last = len - 1;
  report.last_row.resize(len);
  for (std::size_t j = 0; j < len; ++j) report.last_row[j] = report.full.at(last, j);

  const ModelKind kind = model.config().kind;
  const bool decoder_layer =
      kind == ModelKind::EncDecMultitask && layer >= model.encoder_blocks().size();
  std::vector<int> tokens;
  std::string first_label;
  if (decoder_layer || (kind == ModelKind::DecoderGenerator && model.config().comparator_mode)) {
    first_label = vocab.token_name(VocabLayout::kBos);
    tokens = sample.target;
    if (!tokens.empty()) tokens.pop_back();  // input rows stop before the last target
  } else if (kind == ModelKind::DecoderGenerator) {
    first_label = "IMAGE";
    tokens = sample.target;
    if (!tokens.empty()) tokens.pop_back();
  } else {
    first_label = "IMAGE";
    tokens = sample.question;
  }
  report.labels.push_back(first_label);
  for (int t : tokens) report.labels.push_back(vocab.token_name(t));
  if (report.labels.size() != len) {
    report.labels.resize(len, "?");
  }
  return report;
}

TimingRecord time_inference(Model& model, const Dataset& ds, const std::vector<std::size_t>& indices,
                            std::size_t reps, std::size_t warmup, const std::string& label) {
  if (reps < 3) throw Error("time_inference requires reps >= 3, got " + std::to_string(reps));
  if (indices.empty()) throw Error("time_inference needs a non-empty batch");
  auto run_batch = [&] {
    for (std::size_t idx : indices) {
      Graph g;
      model.forward_logits(g, ds.samples.at(idx));
    }
  };
  for (std::size_t i = 0; i < warmup; ++i) run_batch();
  std::vector<double> per_sample_ms;
  per_sample_ms.reserve(reps);
  for (std::size_t i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    run_batch();
    const auto t1 = std::chrono::steady_clock::now();
    per_sample_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count() /
                            static_cast<double>(indices.size()));
  }
  std::sort(per_sample_ms.begin(), per_sample_ms.end());
  TimingRecord rec;
  rec.label = label;
  rec.reps = reps;
  rec.warmup = warmup;
  rec.samples = indices.size();
  const std::size_t mid = reps / 2;
  rec.ms_per_sample =
      reps % 2 ? per_sample_ms[mid] : 0.5 * (per_sample_ms[mid - 1] + per_sample_ms[mid]);
  return rec;
}

namespace {

std::size_t built_unit_params(PeftKind kind, std::size_t d, std::size_t r, RoutingKind routing,
                              bool share_down, ChainKind chain) {
  PeftUnitSpec spec;
  spec.kind = kind;
  spec.rank = r;
  spec.routing = routing;
  spec.share_down = share_down;
  spec.chain = chain;
  Rng rng(1);
  return make_peft_unit(spec, d, d, "probe", rng).param_count();
}

void check_built(const std::string& label, std::size_t analytic, std::size_t built) {
  if (analytic != built) {
    throw Error("budget formula disagrees with built unit for " + label + ": " +
                std::to_string(analytic) + " vs " + std::to_string(built));
  }
}

}  // namespace

BudgetTable budget_comparison(std::size_t d, std::size_t r) {
  if (r == 0 || r >= d) throw ConfigError("budget comparison needs 0 < r < d");
  BudgetTable t;
  t.d = d;
  t.r = r;
  const bool quarter_ok = r % 4 == 0;

  auto push = [&](const std::string& label, std::size_t analytic, std::size_t built) {
    check_built(label, analytic, built);
    t.rows.push_back({label, analytic});
  };

  push("lora", lora_routed_param_count(d, r, true, ChainKind::Standard),
       built_unit_params(PeftKind::Lora, d, r, RoutingKind::None, true, ChainKind::Standard));
  push("lora+routing", lora_routed_param_count(d, r, true, ChainKind::Standard),
       built_unit_params(PeftKind::Lora, d, r, RoutingKind::ProjMul, true, ChainKind::Standard));
  push("lora+routing separate", lora_routed_param_count(d, r, false, ChainKind::Standard),
       built_unit_params(PeftKind::Lora, d, r, RoutingKind::ProjMul, false, ChainKind::Standard));
  if (quarter_ok) {
    push("lora+routing separate quarter", lora_routed_param_count(d, r, false, ChainKind::Quarter),
         built_unit_params(PeftKind::Lora, d, r, RoutingKind::ProjMul, false, ChainKind::Quarter));
    push("lora+cross_attn quarter", cross_attn_param_count(d, r, ChainKind::Quarter),
         built_unit_params(PeftKind::Lora, d, r, RoutingKind::CrossAttn, true, ChainKind::Quarter));
  }
  push("lora+cross_attn", cross_attn_param_count(d, r, ChainKind::Standard),
       built_unit_params(PeftKind::Lora, d, r, RoutingKind::CrossAttn, true, ChainKind::Standard));
  push("adapter+routing (biases)", adapter_routed_param_count(d, r, true),
       built_unit_params(PeftKind::Adapter, d, r, RoutingKind::ProjMul, true, ChainKind::Standard));
  t.rows.push_back({"adapter+routing (bias-free)", adapter_routed_param_count(d, r, false)});
  push("adapter+cross_attn", cross_attn_param_count(d, r, ChainKind::Standard),
       built_unit_params(PeftKind::Adapter, d, r, RoutingKind::CrossAttn, true, ChainKind::Standard));
  return t;
}

void assert_budget_orderings(std::size_t d, std::size_t r) {
  const std::size_t routed = lora_routed_param_count(d, r, true, ChainKind::Standard);
  const std::size_t unrouted = lora_routed_param_count(d, r, true, ChainKind::Standard);
  if (routed != unrouted) throw Error("budget invariant violated: routed != unrouted at equal rank");

  const std::size_t cross_full = cross_attn_param_count(d, r, ChainKind::Standard);
  const std::size_t adapter_bare = adapter_routed_param_count(d, r, false);
  if (cross_full < 2 * adapter_bare) {
    throw Error("budget invariant violated: cross-attention < 2x bias-free routed adapter at d=" +
                std::to_string(d) + " r=" + std::to_string(r));
  }
  if (routed > cross_full) {
    throw Error("budget invariant violated: routed unit > cross-attention unit at equal rank");
  }
  if (r % 4 == 0) {
    const std::size_t sep_quarter = lora_routed_param_count(d, r, false, ChainKind::Quarter);
    const std::size_t cross_quarter = cross_attn_param_count(d, r, ChainKind::Quarter);
    if (sep_quarter >= cross_quarter) {
      throw Error("budget invariant violated: separate-mapping quarter chain >= quarter cross-attention");
    }
    if (cross_quarter >= cross_full) {
      throw Error("budget invariant violated: quarter cross-attention >= full-rank cross-attention");
    }
  }
}

std::string budget_table_text(const BudgetTable& table) {
  std::ostringstream os;
  os << "d=" << table.d << " r=" << table.r << "\n";
  os << std::left << std::setw(34) << "config" << std::right << std::setw(12) << "params" << "\n";
  for (const BudgetRow& row : table.rows) {
    os << std::left << std::setw(34) << row.label << std::right << std::setw(12) << row.unit_params
       << "\n";
  }
  return os.str();
}

}  // namespace peftlab
