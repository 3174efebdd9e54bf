#include "peftlab/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <sstream>

namespace peftlab {

AdamW::AdamW(AdamWConfig cfg) : cfg_(cfg) {
  if (cfg_.total_steps == 0) throw ConfigError("optimizer schedule needs total_steps > 0");
  if (cfg_.warmup_steps >= cfg_.total_steps && cfg_.warmup_steps != 0) {
    throw ConfigError("warmup_steps " + std::to_string(cfg_.warmup_steps) +
                      " must stay below total_steps " + std::to_string(cfg_.total_steps));
  }
}

double AdamW::lr_at(std::size_t step) const {
  if (step >= cfg_.total_steps) {
    throw Error("optimizer stepped past its schedule: step " + std::to_string(step) + " of " +
                std::to_string(cfg_.total_steps));
  }
  if (cfg_.warmup_steps > 0 && step < cfg_.warmup_steps) {
    return cfg_.peak_lr * static_cast<double>(step) / static_cast<double>(cfg_.warmup_steps);
  }
  const double remain = static_cast<double>(cfg_.total_steps - step);
  const double span = static_cast<double>(cfg_.total_steps - cfg_.warmup_steps);
  return cfg_.peak_lr * remain / span;
}

void AdamW::step(const std::vector<Tensor*>& params) {
  const double lr = lr_at(step_);
  for (Tensor* p : params) {
    if (!p->grad) continue;  // untouched this step: moments stay put too
    Slot& s = slots_[p];
    if (s.m.empty()) {
      s.m.assign(p->numel(), 0.0);
      s.v.assign(p->numel(), 0.0);
    }
    s.t += 1;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s.t));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s.t));
    const std::vector<double>& g = *p->grad;
    for (std::size_t i = 0; i < p->numel(); ++i) {
      s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g[i];
      s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      (*p)[i] -= lr * cfg_.weight_decay * (*p)[i];
      (*p)[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
  ++step_;
}

std::string metrics_line(const MetricsRecord& r) {
  std::ostringstream os;
  os.precision(17);
  os << "{\"step\":" << r.step << ",\"task\":\"" << r.task << "\",\"split\":\"" << r.split
     << "\",\"name\":\"" << r.name << "\",\"value\":" << r.value << "}";
  return os.str();
}

namespace {

int argmax_lowest(const Tensor& logits, std::size_t row) {
  int best = 0;
  for (std::size_t j = 1; j < logits.cols(); ++j) {
    if (logits.at(row, j) > logits.at(row, static_cast<std::size_t>(best))) {
      best = static_cast<int>(j);
    }
  }
  return best;
}

struct TaskTally {
  std::size_t n = 0;
  std::size_t correct = 0;       // classification or exact match
  std::size_t token_hits = 0;    // generative only
  std::size_t token_total = 0;
};

}  // namespace

std::vector<MetricsRecord> evaluate(Model& model, const Dataset& ds,
                                    const std::vector<std::size_t>& indices, std::size_t step,
                                    const std::string& split) {
  if (indices.empty()) throw Error("evaluate needs a non-empty index set");
  const bool classify = model.config().kind == ModelKind::EncoderClassifier;
  std::map<std::string, TaskTally> tallies;
  for (std::size_t idx : indices) {
    const Sample& s = ds.samples.at(idx);
    TaskTally& t = tallies[s.task];
    t.n += 1;
    if (classify) {
      Graph g;
      const Tensor& logits = g.value(model.forward_logits(g, s));
      if (argmax_lowest(logits, 0) == s.label) t.correct += 1;
    } else {
      const std::vector<int> decoded =
          model.greedy_decode(s, model.config().max_len - 1);
      if (decoded == s.target) t.correct += 1;
      t.token_total += s.target.size();
      for (std::size_t i = 0; i < std::min(decoded.size(), s.target.size()); ++i) {
        if (decoded[i] == s.target[i]) t.token_hits += 1;
      }
    }
  }

  std::vector<MetricsRecord> out;
  TaskTally all;
  for (const auto& [task, t] : tallies) {
    all.n += t.n;
    all.correct += t.correct;
    all.token_hits += t.token_hits;
    all.token_total += t.token_total;
    const std::string metric = classify ? "accuracy" : "exact_match";
    out.push_back({step, task, split, metric, static_cast<double>(t.correct) / static_cast<double>(t.n), 0.0});
    if (!classify) {
      out.push_back({step, task, split, "token_accuracy",
                     t.token_total ? static_cast<double>(t.token_hits) / static_cast<double>(t.token_total) : 0.0,
                     0.0});
    }
  }
  const std::string metric = classify ? "accuracy" : "exact_match";
  out.push_back({step, "", split, metric, static_cast<double>(all.correct) / static_cast<double>(all.n), 0.0});
  if (!classify) {
    out.push_back({step, "", split, "token_accuracy",
                   all.token_total ? static_cast<double>(all.token_hits) / static_cast<double>(all.token_total) : 0.0,
                   0.0});
  }
  return out;
}

TrainResult train(Model& model, const Dataset& ds, const TrainConfig& cfg,
                  const std::filesystem::path& out_dir) {
  if (cfg.batch == 0) throw ConfigError("batch size must be positive");
  if (ds.train_idx.empty()) throw Error("dataset has no training split");
  std::filesystem::create_directories(out_dir);

  TrainResult result;
  result.initial_checkpoint = out_dir / "checkpoint_initial.ckpt";
  result.final_checkpoint = out_dir / "checkpoint_final.ckpt";
  save_checkpoint(model, result.initial_checkpoint, cfg.seed, 0);

  const std::vector<Tensor*> trainable = model.trainable_tensors();
  AdamWConfig opt_cfg;
  opt_cfg.peak_lr = cfg.lr;
  opt_cfg.total_steps = std::max<std::size_t>(cfg.steps, 1);
  opt_cfg.warmup_steps = static_cast<std::size_t>(std::llround(cfg.warmup_frac * static_cast<double>(cfg.steps)));
  if (opt_cfg.warmup_steps >= opt_cfg.total_steps) opt_cfg.warmup_steps = opt_cfg.total_steps - 1;
  opt_cfg.weight_decay = cfg.weight_decay;
  AdamW opt(opt_cfg);

  Rng shuffle_rng(mix_seed(cfg.seed, 0x54A1));
  std::vector<std::size_t> order = ds.train_idx;
  shuffle_rng.shuffle(order);
  std::size_t cursor = 0;

  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed_ms = [&t0] {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  };

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Graph g;
    Var total{};
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      if (cursor == order.size()) {
        shuffle_rng.shuffle(order);
        cursor = 0;
      }
      const Sample& s = ds.samples.at(order[cursor++]);
      Var l = model.loss(g, s);
      total = b == 0 ? l : g.add(total, l);
    }
    Var loss = g.scale(total, 1.0 / static_cast<double>(cfg.batch));
    const double loss_value = g.value(loss).item();
    if (!std::isfinite(loss_value)) {
      throw Error("training loss is not finite at step " + std::to_string(step));
    }
    g.backward(loss);
    opt.step(trainable);
    model.clear_grads();

    const bool last = step + 1 == cfg.steps;
    if (cfg.log_every && (step % cfg.log_every == 0 || last)) {
      result.metrics.push_back({step, "", "train", "loss", loss_value, elapsed_ms()});
    }
    if (cfg.eval_every && !ds.val_idx.empty() && ((step + 1) % cfg.eval_every == 0) && !last) {
      for (MetricsRecord r : evaluate(model, ds, ds.val_idx, step + 1, "val")) {
        r.wall_ms = elapsed_ms();
        result.metrics.push_back(std::move(r));
      }
    }
  }

  if (!ds.val_idx.empty()) {
    for (MetricsRecord r : evaluate(model, ds, ds.val_idx, cfg.steps, "val")) {
      r.wall_ms = elapsed_ms();
      result.metrics.push_back(std::move(r));
    }
  }
  save_checkpoint(model, result.final_checkpoint, cfg.seed, cfg.steps);
  return result;
}

double final_metric(const std::vector<MetricsRecord>& metrics, const std::string& split,
                    const std::string& name, const std::string& task) {
  const MetricsRecord* found = nullptr;
  for (const MetricsRecord& r : metrics) {
    if (r.split == split && r.name == name && r.task == task) {
      if (!found || r.step >= found->step) found = &r;
    }
  }
  if (!found) throw Error("no metric " + name + " for split " + split);
  return found->value;
}

}  // namespace peftlab
