#include "molang/nn.hpp"

#include <cmath>

namespace molang {

double Adam::update(double p, double g, double& m, double& v, int64_t step,
                    const AdamConfig& cfg) {
  m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
  v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
  double mhat = m / (1.0 - std::pow(cfg.beta1, static_cast<double>(step)));
  double vhat = v / (1.0 - std::pow(cfg.beta2, static_cast<double>(step)));
  return p - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
}

void Adam::step(ParamStore& store, double lr) {
  if (m_.empty()) {
    for (int i = 0; i < store.size(); ++i) {
      m_.push_back(Tensor::zeros(store.value(i).shape));
      v_.push_back(Tensor::zeros(store.value(i).shape));
      names_.push_back(store.name(i));
    }
  }
  ++step_count_;
  AdamConfig cfg = cfg_;
  cfg.lr = lr;
  for (int i = 0; i < store.size(); ++i) {
    Tensor& p = store.value(i);
    Tensor& g = store.grad(i);
    Tensor& m = m_[static_cast<size_t>(i)];
    Tensor& v = v_[static_cast<size_t>(i)];
    for (size_t k = 0; k < p.data.size(); ++k) {
      double gd = g.data[k];
      if (!std::isfinite(gd)) {
        throw NanGradientError("non-finite gradient in parameter " + store.name(i));
      }
      double md = m.data[k], vd = v.data[k];
      p.data[k] = static_cast<float>(update(p.data[k], gd, md, vd, step_count_, cfg));
      m.data[k] = static_cast<float>(md);
      v.data[k] = static_cast<float>(vd);
    }
  }
}

void Adam::export_state(ParamStore& out) const {
  for (size_t i = 0; i < names_.size(); ++i) {
    out.create("adam.m." + names_[i], m_[i]);
    out.create("adam.v." + names_[i], v_[i]);
  }
}

void Adam::import_state(const ParamStore& in, const ParamStore& params, int64_t step_count) {
  m_.clear();
  v_.clear();
  names_.clear();
  for (int i = 0; i < params.size(); ++i) {
    const std::string& name = params.name(i);
    m_.push_back(in.value("adam.m." + name));
    v_.push_back(in.value("adam.v." + name));
    names_.push_back(name);
  }
  step_count_ = step_count;
}

double cosine_lr(const CosineScheduleConfig& cfg, int64_t epoch) {
  if (epoch < 0) throw std::invalid_argument("cosine_lr: negative epoch");
  int64_t t_cur = epoch % cfg.period;
  double c = std::cos(M_PI * static_cast<double>(t_cur) / static_cast<double>(cfg.period));
  return cfg.eta_min + (cfg.eta_max - cfg.eta_min) * (1.0 + c) / 2.0;
}

Tensor init_linear_weight(int64_t din, int64_t dout, Rng& rng) {
  Tensor w = Tensor::zeros({din, dout});
  for (float& v : w.data) v = static_cast<float>(rng.truncated_normal(0.02));
  return w;
}

Tensor init_embedding(int64_t rows, int64_t dim, Rng& rng) {
  Tensor e = Tensor::zeros({rows, dim});
  for (float& v : e.data) v = static_cast<float>(rng.normal() * 0.02);
  return e;
}

}  // namespace molang
