#include "molang/objectives.hpp"

namespace molang {

namespace {

std::vector<float> mask_row_weights(const MotionEncoding& enc, bool masked_only) {
  int64_t nf = enc.frame_offsets.total();
  std::vector<float> w(static_cast<size_t>(nf), masked_only ? 0.0f : 1.0f);
  if (masked_only) {
    if (enc.spans.empty()) {
      throw std::invalid_argument("mmp_loss: batch was encoded without masking");
    }
    for (int64_t b = 0; b < enc.frame_offsets.items(); ++b) {
      const MaskSpan& s = enc.spans[static_cast<size_t>(b)];
      int64_t base = enc.frame_offsets.offsets[static_cast<size_t>(b)];
      for (int64_t f = s.start; f < s.start + s.len; ++f)
        w[static_cast<size_t>(base + f)] = 1.0f;
    }
  }
  return w;
}

}  // namespace

Var mmp_loss(Tape& t, const MotionEncoding& enc, bool masked_frames_only) {
  return ops::l1_weighted(t, enc.reconstruction, enc.target_motion,
                          mask_row_weights(enc, masked_frames_only), enc.item_of_frame,
                          enc.frame_offsets.items());
}

Var similarity_matrix(Tape& t, Var motion_vecs, Var text_vecs, Var temperature_logit) {
  const Tensor& m = t.val(motion_vecs);
  const Tensor& l = t.val(text_vecs);
  int64_t d = m.shape.back();
  auto check_norms = [&](const Tensor& x, const char* which) {
    int64_t rows = x.numel() / d;
    for (int64_t i = 0; i < rows; ++i) {
      double s = 0.0;
      for (int64_t k = 0; k < d; ++k) {
        double v = x.data[static_cast<size_t>(i * d + k)];
        s += v * v;
      }
      if (std::abs(std::sqrt(s) - 1.0) > 1e-4) {
        throw std::invalid_argument(std::string("similarity_matrix: ") + which +
                                    " row " + std::to_string(i) + " is not unit norm");
      }
    }
  };
  check_norms(m, "motion");
  check_norms(l, "text");
  return ops::scale_by_exp(t, ops::matmul_nt(t, motion_vecs, text_vecs), temperature_logit);
}

CstarResult cstar_loss(Tape& t, Var motion_vecs, Var text_vecs, Var temperature_logit,
                       const MotionEncoding& enc, double alpha) {
  if (t.val(motion_vecs).dim(0) < 1) throw std::invalid_argument("cstar_loss: empty batch");
  Var s = similarity_matrix(t, motion_vecs, text_vecs, temperature_logit);
  if (!t.val(s).all_finite()) {
    throw std::runtime_error("cstar_loss: non-finite similarity matrix");
  }
  Var m2t = ops::cross_entropy_diag(t, s);
  Var t2m = ops::cross_entropy_diag(t, ops::transpose2(t, s));
  Var recon = mmp_loss(t, enc, /*masked_frames_only=*/false);

  CstarResult r;
  r.total = ops::add(t, ops::add(t, m2t, t2m),
                     ops::scale(t, recon, static_cast<float>(alpha)));
  r.breakdown.contrastive_m2t = t.val(m2t).item();
  r.breakdown.contrastive_t2m = t.val(t2m).item();
  r.breakdown.recon = t.val(recon).item();
  r.breakdown.alpha = alpha;
  r.breakdown.total = t.val(r.total).item();
  return r;
}

}  // namespace molang
