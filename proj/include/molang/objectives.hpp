#pragma once

#include "molang/motion_encoder.hpp"

namespace molang {

// Learnable temperature stored as log(1/tau); tau is clamped to
// [0.01, 1.0] after every optimizer step.
struct Temperature {
  static constexpr double kInit = 0.07;
  static constexpr double kMin = 0.01;
  static constexpr double kMax = 1.0;
  static constexpr const char* kParamName = "temperature.logit";

  static void create(ParamStore& store) {
    store.create(kParamName, Tensor::scalar(static_cast<float>(std::log(1.0 / kInit))));
  }
  static double tau(const ParamStore& store) {
    return std::exp(-static_cast<double>(store.value(kParamName).data[0]));
  }
  static void clamp(ParamStore& store) {
    float& logit = store.value(kParamName).data[0];
    float lo = static_cast<float>(std::log(1.0 / kMax));
    float hi = static_cast<float>(std::log(1.0 / kMin));
    logit = std::clamp(logit, lo, hi);
  }
};

struct LossBreakdown {
  double total = 0.0;
  double contrastive_m2t = 0.0;
  double contrastive_t2m = 0.0;
  double recon = 0.0;
  double alpha = 10.0;
};

// L1 over masked frames only (optionally over all valid frames), per-item
// mean then batch mean. Throws std::invalid_argument when no frame is masked.
Var mmp_loss(Tape& t, const MotionEncoding& enc, bool masked_frames_only = true);

// S_ij = (m_i . l_j) * exp(logit); rows of both inputs must be unit norm
Var similarity_matrix(Tape& t, Var motion_vecs, Var text_vecs, Var temperature_logit);

struct CstarResult {
  Var total;
  LossBreakdown breakdown;
};

// Symmetric InfoNCE over the in-batch similarity matrix plus alpha-weighted
// L1 reconstruction over valid frames.
CstarResult cstar_loss(Tape& t, Var motion_vecs, Var text_vecs, Var temperature_logit,
                       const MotionEncoding& enc, double alpha);

}  // namespace molang
