#pragma once

#include "molang/motion_data.hpp"
#include "molang/transformer.hpp"

namespace molang {

struct MotionEncoderConfig {
  int layers = 10;
  int heads = 12;
  int model_dim = 768;
  int ffn_dim = 1024;
  int max_len = 150;
  int gcb_after_layer = 4;  // GCB runs after this many encoder layers
  int gcb_joint_dim = 32;   // per-joint bottleneck width g
  int projection_dim = 768;
  float dropout = 0.1f;
  bool use_gcb = true;

  static MotionEncoderConfig paper();
  static MotionEncoderConfig desk();
  static MotionEncoderConfig preset(const std::string& name);

  void validate() const;
  std::string to_json() const;
  static MotionEncoderConfig from_json(const std::string& text);

  TransformerStackConfig stack() const {
    return {layers, heads, model_dim, ffn_dim, dropout};
  }
};

// Forward-pass outputs plus the packing metadata the losses need.
struct MotionEncoding {
  Var projected;              // [B, projection_dim], unit rows
  Var cls_state;              // [B, model_dim]
  Var reconstruction;         // [Nf, 132] packed frame reconstruction
  PackedOffsets frame_offsets;
  std::vector<int64_t> item_of_frame;
  Tensor target_motion;       // packed original (pre-mask) frames, [Nf, 132]
  std::vector<MaskSpan> spans;  // per item; empty when masking was off
};

class MotionEncoder {
 public:
  MotionEncoder(MotionEncoderConfig cfg, Rng& init_rng);
  MotionEncoder(MotionEncoderConfig cfg, ParamStore store);  // from checkpoint

  // Encodes a collated batch. When mask_rng is non-null, one mask span per
  // item is sampled and applied before embedding; the reconstruction target
  // stays the unmasked input. dropout_rng enables dropout (training mode).
  MotionEncoding encode(ModelGraph& m, const Batch& batch, Rng* mask_rng,
                        Rng* dropout_rng = nullptr) const;

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const MotionEncoderConfig& config() const { return cfg_; }

  static int64_t expected_param_count(const MotionEncoderConfig& cfg);

 private:
  void init_params(Rng& rng);

  MotionEncoderConfig cfg_;
  ParamStore params_;
  Tensor adjacency_;  // 22 x 22 with self-loops, f32
};

}  // namespace molang
