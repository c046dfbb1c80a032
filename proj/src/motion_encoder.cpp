#include "molang/motion_encoder.hpp"

#include "json.hpp"

using nlohmann::json;

namespace molang {

MotionEncoderConfig MotionEncoderConfig::paper() { return {}; }

MotionEncoderConfig MotionEncoderConfig::desk() {
  MotionEncoderConfig c;
  c.layers = 4;
  c.heads = 4;
  c.model_dim = 64;
  c.ffn_dim = 128;
  c.gcb_after_layer = 2;
  c.gcb_joint_dim = 8;
  c.projection_dim = 32;
  c.dropout = 0.0f;
  return c;
}

MotionEncoderConfig MotionEncoderConfig::preset(const std::string& name) {
  if (name == "paper") return paper();
  if (name == "desk") return desk();
  throw std::invalid_argument("unknown preset '" + name + "' (expected paper|desk)");
}

void MotionEncoderConfig::validate() const {
  if (model_dim % heads != 0) {
    throw std::invalid_argument("motion encoder: model_dim not divisible by heads");
  }
  if (use_gcb && (gcb_after_layer < 1 || gcb_after_layer >= layers)) {
    throw std::invalid_argument("motion encoder: gcb_after_layer must be in [1, layers)");
  }
}

std::string MotionEncoderConfig::to_json() const {
  return json{{"layers", layers},
              {"heads", heads},
              {"model_dim", model_dim},
              {"ffn_dim", ffn_dim},
              {"max_len", max_len},
              {"gcb_after_layer", gcb_after_layer},
              {"gcb_joint_dim", gcb_joint_dim},
              {"projection_dim", projection_dim},
              {"dropout", dropout},
              {"use_gcb", use_gcb}}
      .dump();
}

MotionEncoderConfig MotionEncoderConfig::from_json(const std::string& text) {
  json doc = json::parse(text);
  MotionEncoderConfig c;
  c.layers = doc.at("layers").get<int>();
  c.heads = doc.at("heads").get<int>();
  c.model_dim = doc.at("model_dim").get<int>();
  c.ffn_dim = doc.at("ffn_dim").get<int>();
  c.max_len = doc.at("max_len").get<int>();
  c.gcb_after_layer = doc.at("gcb_after_layer").get<int>();
  c.gcb_joint_dim = doc.at("gcb_joint_dim").get<int>();
  c.projection_dim = doc.at("projection_dim").get<int>();
  c.dropout = doc.at("dropout").get<float>();
  c.use_gcb = doc.at("use_gcb").get<bool>();
  return c;
}

namespace {

Tensor adjacency_f32() {
  const auto& a = SkeletonGraph::smpl22().adjacency;
  Tensor t = Tensor::zeros({kNumJoints, kNumJoints});
  for (int i = 0; i < kNumJoints; ++i)
    for (int j = 0; j < kNumJoints; ++j)
      t.data[static_cast<size_t>(i * kNumJoints + j)] = static_cast<float>(a(i, j));
  return t;
}

}  // namespace

MotionEncoder::MotionEncoder(MotionEncoderConfig cfg, Rng& init_rng)
    : cfg_(cfg), adjacency_(adjacency_f32()) {
  cfg_.validate();
  init_params(init_rng);
}

MotionEncoder::MotionEncoder(MotionEncoderConfig cfg, ParamStore store)
    : cfg_(cfg), params_(std::move(store)), adjacency_(adjacency_f32()) {
  cfg_.validate();
}

void MotionEncoder::init_params(Rng& rng) {
  int64_t d = cfg_.model_dim;
  params_.create("frame_embed.w", init_linear_weight(kFrameDim, d, rng));
  params_.create("frame_embed.b", Tensor::zeros({d}));
  params_.create("cls", init_embedding(1, d, rng));
  params_.create("pos_embed", init_embedding(cfg_.max_len + 1, d, rng));
  params_.create("seg_embed", init_embedding(2, d, rng));
  init_transformer_params(params_, "enc", cfg_.stack(), rng);
  if (cfg_.use_gcb) {
    int64_t jg = static_cast<int64_t>(kNumJoints) * cfg_.gcb_joint_dim;
    params_.create("gcb.win", init_linear_weight(d, jg, rng));
    params_.create("gcb.bin", Tensor::zeros({jg}));
    params_.create("gcb.w", init_linear_weight(cfg_.gcb_joint_dim, cfg_.gcb_joint_dim, rng));
    params_.create("gcb.wout", init_linear_weight(jg, d, rng));
    params_.create("gcb.ln.g", Tensor::full({d}, 1.0f));
    params_.create("gcb.ln.b", Tensor::zeros({d}));
  }
  params_.create("ln_f.g", Tensor::full({d}, 1.0f));
  params_.create("ln_f.b", Tensor::zeros({d}));
  params_.create("recon.w", init_linear_weight(d, kFrameDim, rng));
  params_.create("recon.b", Tensor::zeros({kFrameDim}));
  params_.create("proj.w", init_linear_weight(d, cfg_.projection_dim, rng));
}

int64_t MotionEncoder::expected_param_count(const MotionEncoderConfig& cfg) {
  int64_t d = cfg.model_dim;
  int64_t n = kFrameDim * d + d;          // frame embed
  n += d;                                 // cls
  n += (cfg.max_len + 1) * d;             // positions
  n += 2 * d;                             // segment embedding
  n += transformer_param_count(cfg.stack());
  if (cfg.use_gcb) {
    int64_t jg = static_cast<int64_t>(kNumJoints) * cfg.gcb_joint_dim;
    n += d * jg + jg;                     // in projection
    n += static_cast<int64_t>(cfg.gcb_joint_dim) * cfg.gcb_joint_dim;
    n += jg * d;                          // out projection, no bias
    n += 2 * d;                           // gcb layer norm
  }
  n += 2 * d;                             // final layer norm
  n += d * kFrameDim + kFrameDim;         // reconstruction head
  n += d * cfg.projection_dim;            // contrastive projection
  return n;
}

MotionEncoding MotionEncoder::encode(ModelGraph& m, const Batch& batch, Rng* mask_rng,
                                     Rng* dropout_rng) const {
  Tape& t = m.tape();
  bool training = dropout_rng != nullptr;
  int64_t b_count = batch.size;

  MotionEncoding out;
  out.frame_offsets.offsets.assign(1, 0);
  for (int64_t b = 0; b < b_count; ++b)
    out.frame_offsets.offsets.push_back(out.frame_offsets.offsets.back() +
                                        batch.length[static_cast<size_t>(b)]);
  int64_t nf = out.frame_offsets.total();

  // pack valid frames; padded frames never enter the computation
  Tensor packed = Tensor::zeros({nf, kFrameDim});
  for (int64_t b = 0; b < b_count; ++b) {
    int64_t len = batch.length[static_cast<size_t>(b)];
    std::copy_n(batch.motion.data.data() + b * cfg_.max_len * kFrameDim, len * kFrameDim,
                packed.data.data() + out.frame_offsets.offsets[static_cast<size_t>(b)] * kFrameDim);
    for (int64_t i = 0; i < len; ++i)
      out.item_of_frame.push_back(b);
  }
  out.target_motion = packed;

  if (mask_rng) {
    for (int64_t b = 0; b < b_count; ++b) {
      MaskSpan span = sample_mask_span(batch.length[static_cast<size_t>(b)], *mask_rng);
      int64_t base = out.frame_offsets.offsets[static_cast<size_t>(b)];
      for (int64_t f = span.start; f < span.start + span.len; ++f)
        for (int c = 0; c < kFrameDim; ++c)
          packed.data[static_cast<size_t>((base + f) * kFrameDim + c)] =
              static_cast<float>(mask_rng->normal());
      out.spans.push_back(span);
    }
  }

  Var motion_in = t.leaf(std::move(packed));
  Var frame_emb = ops::linear(t, motion_in, m.p("frame_embed.w"), m.p("frame_embed.b"));
  Var x = ops::pack_with_cls(t, frame_emb, m.p("cls"), out.frame_offsets);

  PackedOffsets po;
  po.offsets.assign(1, 0);
  std::vector<int64_t> pos_ids, cls_pos, frame_pos;
  for (int64_t b = 0; b < b_count; ++b) {
    int64_t len = batch.length[static_cast<size_t>(b)];
    int64_t tok_base = po.offsets.back();
    po.offsets.push_back(tok_base + len + 1);
    cls_pos.push_back(tok_base);
    pos_ids.push_back(0);
    for (int64_t i = 0; i < len; ++i) {
      pos_ids.push_back(i + 1);
      frame_pos.push_back(tok_base + 1 + i);
    }
  }
  x = ops::add(t, x, ops::gather_rows(t, m.p("pos_embed"), pos_ids));
  // every packed token is a valid frame (or CLS); the pad row of the segment
  // embedding is reserved for checkpoint compatibility with padded layouts
  x = ops::add(t, x,
               ops::gather_rows(t, m.p("seg_embed"),
                                std::vector<int64_t>(static_cast<size_t>(po.total()), 1)));
  if (dropout_rng) x = ops::dropout(t, x, cfg_.dropout, *dropout_rng, training);

  TransformerStackConfig stack = cfg_.stack();
  for (int l = 0; l < cfg_.layers; ++l) {
    x = transformer_block(m, x, po, "enc", l, stack, dropout_rng, training);
    if (cfg_.use_gcb && l + 1 == cfg_.gcb_after_layer) {
      // CLS has no joint structure: it bypasses the bottleneck untouched
      Var cls_rows = ops::select_rows(t, x, cls_pos);
      Var frames = ops::select_rows(t, x, frame_pos);
      Var h = ops::linear(t, frames, m.p("gcb.win"), m.p("gcb.bin"));
      h = ops::graph_conv(t, h, adjacency_, m.p("gcb.w"), kNumJoints, cfg_.gcb_joint_dim);
      Var branch = ops::linear(t, h, m.p("gcb.wout"));
      Var merged = ops::layer_norm(t, ops::add(t, frames, branch), m.p("gcb.ln.g"),
                                   m.p("gcb.ln.b"));
      x = ops::merge_cls_frames(t, cls_rows, merged, out.frame_offsets);
    }
  }
  x = ops::layer_norm(t, x, m.p("ln_f.g"), m.p("ln_f.b"));

  out.cls_state = ops::select_rows(t, x, cls_pos);
  out.projected = ops::l2_normalize_rows(t, ops::linear(t, out.cls_state, m.p("proj.w")));
  Var frame_states = ops::select_rows(t, x, frame_pos);
  out.reconstruction = ops::linear(t, frame_states, m.p("recon.w"), m.p("recon.b"));
  return out;
}

}  // namespace molang
