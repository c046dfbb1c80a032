#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "molang/ops.hpp"
#include "molang/rng.hpp"
#include "molang/tape.hpp"

namespace molang {

// Named persistent parameters with gradient accumulators. Iteration order is
// creation order, which keeps optimizer updates and checkpoints deterministic.
class ParamStore {
 public:
  int create(const std::string& name, Tensor init) {
    if (index_.count(name)) throw std::runtime_error("ParamStore: duplicate name " + name);
    int idx = static_cast<int>(names_.size());
    index_[name] = idx;
    names_.push_back(name);
    grads_.push_back(Tensor::zeros(init.shape));
    values_.push_back(std::move(init));
    return idx;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }
  int index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::runtime_error("ParamStore: unknown name " + name);
    return it->second;
  }

  int size() const { return static_cast<int>(names_.size()); }
  const std::string& name(int i) const { return names_[static_cast<size_t>(i)]; }
  Tensor& value(int i) { return values_[static_cast<size_t>(i)]; }
  const Tensor& value(int i) const { return values_[static_cast<size_t>(i)]; }
  Tensor& value(const std::string& name) { return values_[static_cast<size_t>(index(name))]; }
  const Tensor& value(const std::string& name) const {
    return values_[static_cast<size_t>(index(name))];
  }
  Tensor& grad(int i) { return grads_[static_cast<size_t>(i)]; }

  void zero_grad() {
    for (Tensor& g : grads_) std::fill(g.data.begin(), g.data.end(), 0.0f);
  }

  int64_t param_count() const {
    int64_t n = 0;
    for (const Tensor& v : values_) n += v.numel();
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, int> index_;
  std::vector<Tensor> values_;
  std::vector<Tensor> grads_;
};

// Binds store parameters to tape leaves for one forward pass and routes
// gradients back after backward().
class ModelGraph {
 public:
  ModelGraph(Tape& tape, ParamStore& store, bool needs_grad = true)
      : tape_(tape), store_(store), needs_grad_(needs_grad) {}

  Var p(const std::string& name) {
    int idx = store_.index(name);
    auto it = bound_.find(idx);
    if (it != bound_.end()) return Var{it->second};
    Var v = tape_.leaf(store_.value(idx), needs_grad_);
    bound_[idx] = v.id;
    return v;
  }

  // call after tape.backward(); adds tape gradients into the store
  void accumulate_grads() {
    for (auto& [idx, node] : bound_) {
      const Tensor& g = tape_.grad(Var{node});
      if (g.data.empty()) continue;
      Tensor& acc = store_.grad(idx);
      for (size_t i = 0; i < g.data.size(); ++i) acc.data[i] += g.data[i];
    }
  }

  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  ParamStore& store_;
  bool needs_grad_;
  std::unordered_map<int, int> bound_;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct NanGradientError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bias-corrected Adam. Per-element math runs in f64; moments are stored f32.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  // single-element update, exposed for direct verification
  static double update(double p, double g, double& m, double& v, int64_t step,
                       const AdamConfig& cfg);

  void step(ParamStore& store, double lr);

  int64_t step_count() const { return step_count_; }
  const AdamConfig& config() const { return cfg_; }

  // moments keyed by parameter name, for checkpointing
  void export_state(ParamStore& out) const;
  void import_state(const ParamStore& in, const ParamStore& params, int64_t step_count);

 private:
  AdamConfig cfg_;
  int64_t step_count_ = 0;
  std::vector<Tensor> m_, v_;
  std::vector<std::string> names_;
};

struct CosineScheduleConfig {
  double eta_max = 1e-4;
  double eta_min = 7e-5;
  int period = 20;  // warm restart every `period` epochs, T_mult = 1
};

double cosine_lr(const CosineScheduleConfig& cfg, int64_t epoch);

// standard inits
Tensor init_linear_weight(int64_t din, int64_t dout, Rng& rng);  // trunc normal 0.02
Tensor init_embedding(int64_t rows, int64_t dim, Rng& rng);      // normal 0.02

}  // namespace molang
