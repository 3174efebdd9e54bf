#pragma once

#include <filesystem>
#include <unordered_map>

#include "peftlab/checkpoint.hpp"
#include "peftlab/model.hpp"

namespace peftlab {

struct AdamWConfig {
  double peak_lr = 1e-3;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay and a piecewise-linear learning rate:
/// 0 -> peak over the warmup steps, then linear decay to 0 at the last step.
/// Parameters without a populated gradient are skipped entirely, moments
/// included, so unvisited units stay bit-identical.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg);

  double lr_at(std::size_t step) const;
  void step(const std::vector<Tensor*>& params);
  std::size_t steps_taken() const { return step_; }

 private:
  struct Slot {
    std::vector<double> m;
    std::vector<double> v;
    std::size_t t = 0;
  };
  AdamWConfig cfg_;
  std::size_t step_ = 0;
  std::unordered_map<Tensor*, Slot> slots_;
};

struct MetricsRecord {
  std::size_t step = 0;
  std::string task;   // empty = all tasks
  std::string split;  // "train" | "val"
  std::string name;   // "loss" | "accuracy" | "exact_match" | "token_accuracy"
  double value = 0.0;
  double wall_ms = 0.0;  // informational only; excluded from the canonical stream
};

/// Canonical line format. Deterministic for a given run: wall time is left
/// out so equal configs and seeds produce byte-identical streams.
std::string metrics_line(const MetricsRecord& r);

/// Argmax classification accuracy (ties to the lowest id) or greedy-decode
/// exact match plus token accuracy, grouped per task tag. Counting is
/// integer-exact, so the result is independent of sample order.
std::vector<MetricsRecord> evaluate(Model& model, const Dataset& ds,
                                    const std::vector<std::size_t>& indices, std::size_t step,
                                    const std::string& split);

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch = 16;
  double lr = 1e-3;
  double warmup_frac = 0.05;
  double weight_decay = 0.01;
  std::uint64_t seed = 7;
  std::size_t eval_every = 0;  // 0 = final evaluation only
  std::size_t log_every = 50;
};

struct TrainResult {
  std::vector<MetricsRecord> metrics;
  std::filesystem::path initial_checkpoint;
  std::filesystem::path final_checkpoint;
};

/// Deterministic training loop: seeded shuffling, fixed batch order, no
/// dropout. Saves the initial checkpoint before the first step and aborts
/// with the step number if the loss stops being finite.
TrainResult train(Model& model, const Dataset& ds, const TrainConfig& cfg,
                  const std::filesystem::path& out_dir);

/// Final value of a metric, preferring the latest step.
double final_metric(const std::vector<MetricsRecord>& metrics, const std::string& split,
                    const std::string& name, const std::string& task = "");

}  // namespace peftlab
