#pragma once

#include "molang/nn.hpp"

namespace molang {

// Shared pre-LN residual transformer blocks (LN -> MHSA -> residual;
// LN -> FFN(GELU) -> residual), operating on packed ragged token batches.
struct TransformerStackConfig {
  int layers = 4;
  int heads = 4;
  int model_dim = 64;
  int ffn_dim = 128;
  float dropout = 0.0f;
};

void init_transformer_params(ParamStore& store, const std::string& prefix,
                             const TransformerStackConfig& cfg, Rng& rng);

// runs block `layer` of the stack in place on x
Var transformer_block(ModelGraph& m, Var x, const PackedOffsets& po, const std::string& prefix,
                      int layer, const TransformerStackConfig& cfg, Rng* dropout_rng,
                      bool training);

int64_t transformer_param_count(const TransformerStackConfig& cfg);

}  // namespace molang
