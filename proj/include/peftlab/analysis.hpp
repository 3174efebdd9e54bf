#pragma once

#include "peftlab/checkpoint.hpp"
#include "peftlab/train.hpp"

namespace peftlab {

struct DriftRecord {
  std::string unit_id;
  double delta_down = 0.0;
  double delta_up = 0.0;
  std::optional<double> ratio;  // delta_down / delta_up, absent when delta_up == 0
};

/// Frobenius norm of the per-unit weight change between two checkpoints of
/// the same architecture, in layer order.
std::vector<DriftRecord> weight_drift(const CheckpointData& initial, const CheckpointData& final_ckpt);

std::string drift_table(const std::vector<DriftRecord>& records);

struct AttentionReport {
  std::vector<std::string> labels;   // one per input position
  std::vector<double> last_row;      // head-averaged weights at the final position
  Tensor full;                       // head-averaged L x L matrix for the layer
};

/// Head-averaged attention for one block (encoder layers first, then decoder
/// layers for the encoder-decoder model), labeled by input token. The
/// prepended visual position is labeled IMAGE.
AttentionReport attention_inspect(Model& model, const Sample& sample, std::size_t layer,
                                  const VocabLayout& vocab);

struct TimingRecord {
  std::string label;
  double ms_per_sample = 0.0;  // median over repetitions
  std::size_t reps = 0;
  std::size_t warmup = 0;
  std::size_t samples = 0;
};

/// Median forward wall time per sample over `reps` repetitions after
/// `warmup` unrecorded ones. Requires reps >= 3.
TimingRecord time_inference(Model& model, const Dataset& ds, const std::vector<std::size_t>& indices,
                            std::size_t reps, std::size_t warmup, const std::string& label);

struct BudgetRow {
  std::string label;
  std::size_t unit_params = 0;
};

struct BudgetTable {
  std::size_t d = 0;
  std::size_t r = 0;
  std::vector<BudgetRow> rows;
};

/// Per-unit trainable counts for the comparator family at one (d, r) point.
/// Analytic formulas are cross-checked against freshly built units.
BudgetTable budget_comparison(std::size_t d, std::size_t r);

/// Throws naming the violated inequality. Checked: routed == unrouted;
/// cross-attention >= 2x bias-free routed adapter; separate-mapping quarter
/// chain < quarter cross-attention; quarter cross-attention < full-rank
/// cross-attention; shared routed unit <= cross-attention at equal rank.
void assert_budget_orderings(std::size_t d, std::size_t r);

std::string budget_table_text(const BudgetTable& table);

}  // namespace peftlab
