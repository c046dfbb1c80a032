#include "molang/transformer.hpp"

namespace molang {

void init_transformer_params(ParamStore& store, const std::string& prefix,
                             const TransformerStackConfig& cfg, Rng& rng) {
  int64_t d = cfg.model_dim, f = cfg.ffn_dim;
  for (int l = 0; l < cfg.layers; ++l) {
    std::string p = prefix + "." + std::to_string(l) + ".";
    store.create(p + "ln1.g", Tensor::full({d}, 1.0f));
    store.create(p + "ln1.b", Tensor::zeros({d}));
    store.create(p + "attn.wqkv", init_linear_weight(d, 3 * d, rng));
    store.create(p + "attn.bqkv", Tensor::zeros({3 * d}));
    store.create(p + "attn.wo", init_linear_weight(d, d, rng));
    store.create(p + "attn.bo", Tensor::zeros({d}));
    store.create(p + "ln2.g", Tensor::full({d}, 1.0f));
    store.create(p + "ln2.b", Tensor::zeros({d}));
    store.create(p + "ffn.w1", init_linear_weight(d, f, rng));
    store.create(p + "ffn.b1", Tensor::zeros({f}));
    store.create(p + "ffn.w2", init_linear_weight(f, d, rng));
    store.create(p + "ffn.b2", Tensor::zeros({d}));
  }
}

Var transformer_block(ModelGraph& m, Var x, const PackedOffsets& po, const std::string& prefix,
                      int layer, const TransformerStackConfig& cfg, Rng* dropout_rng,
                      bool training) {
  Tape& t = m.tape();
  std::string p = prefix + "." + std::to_string(layer) + ".";
  Var h = ops::layer_norm(t, x, m.p(p + "ln1.g"), m.p(p + "ln1.b"));
  Var a = ops::mhsa_packed(t, h, po, m.p(p + "attn.wqkv"), m.p(p + "attn.bqkv"),
                           m.p(p + "attn.wo"), m.p(p + "attn.bo"), cfg.heads);
  if (dropout_rng) a = ops::dropout(t, a, cfg.dropout, *dropout_rng, training);
  x = ops::add(t, x, a);
  h = ops::layer_norm(t, x, m.p(p + "ln2.g"), m.p(p + "ln2.b"));
  Var f = ops::linear(t, h, m.p(p + "ffn.w1"), m.p(p + "ffn.b1"));
  f = ops::gelu(t, f);
  f = ops::linear(t, f, m.p(p + "ffn.w2"), m.p(p + "ffn.b2"));
  if (dropout_rng) f = ops::dropout(t, f, cfg.dropout, *dropout_rng, training);
  return ops::add(t, x, f);
}

int64_t transformer_param_count(const TransformerStackConfig& cfg) {
  int64_t d = cfg.model_dim, f = cfg.ffn_dim;
  int64_t per_layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d +
                      (d * f + f) + (f * d + d);
  return per_layer * cfg.layers;
}

}  // namespace molang
