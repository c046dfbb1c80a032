#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <set>

#include "doctest.h"
#include "grad_check.hpp"
#include "molang/motion_encoder.hpp"
#include "molang/text_encoder.hpp"

using namespace molang;
using molang::testing::dot_f64;
using molang::testing::random_tensor;
using molang::testing::weighted_sum;

namespace {

MotionEncoderConfig tiny_motion_cfg() {
  MotionEncoderConfig c;
  c.layers = 2;
  c.heads = 2;
  c.model_dim = 8;
  c.ffn_dim = 16;
  c.max_len = 150;
  c.gcb_after_layer = 1;
  c.gcb_joint_dim = 2;
  c.projection_dim = 4;
  c.dropout = 0.0f;
  c.use_gcb = true;
  return c;
}

TextEncoderConfig tiny_text_cfg() {
  TextEncoderConfig c;
  c.layers = 2;
  c.heads = 2;
  c.model_dim = 8;
  c.ffn_dim = 16;
  c.max_tokens = 8;
  c.projection_dim = 4;
  c.dropout = 0.0f;
  return c;
}

DataItem make_item(int64_t frames, uint64_t seed) {
  Rng rng(seed);
  DataItem it;
  it.frames = frames;
  it.motion.resize(static_cast<size_t>(frames) * kFrameDim);
  for (float& v : it.motion) v = static_cast<float>(rng.uniform(-0.8, 0.8));
  it.text = "item";
  it.label = "item";
  return it;
}

struct MotionForward {
  Tensor projected, cls, recon;
};

MotionForward run_motion(const MotionEncoder& enc, const Batch& batch) {
  Tape t;
  ModelGraph m(t, const_cast<MotionEncoder&>(enc).params(), false);
  MotionEncoding e = enc.encode(m, batch, nullptr, nullptr);
  return {t.val(e.projected), t.val(e.cls_state), t.val(e.reconstruction)};
}

}  // namespace

TEST_CASE("motion encoder ignores the padded region entirely") {
  Rng init = Rng::stream(3, 1);
  MotionEncoder enc(tiny_motion_cfg(), init);
  DataItem a = make_item(5, 10), b = make_item(9, 11);
  Batch clean = collate({&a, &b});
  Batch dirty = clean;
  // garbage beyond each item's valid prefix must not reach the model
  for (int64_t i = 0; i < dirty.size; ++i)
    for (int64_t t = dirty.length[static_cast<size_t>(i)]; t < kMaxFrames; ++t)
      for (int k = 0; k < kFrameDim; ++k)
        dirty.motion.data[static_cast<size_t>((i * kMaxFrames + t) * kFrameDim + k)] = 777.0f;

  MotionForward y0 = run_motion(enc, clean);
  MotionForward y1 = run_motion(enc, dirty);
  CHECK(y0.projected.data == y1.projected.data);
  CHECK(y0.cls.data == y1.cls.data);
  CHECK(y0.recon.data == y1.recon.data);
}

TEST_CASE("an item's encoding does not depend on its batch neighbours") {
  Rng init = Rng::stream(3, 2);
  MotionEncoder enc(tiny_motion_cfg(), init);
  DataItem a = make_item(6, 20), b = make_item(12, 21);
  MotionForward both = run_motion(enc, collate({&a, &b}));
  MotionForward alone = run_motion(enc, collate({&a}));

  int64_t pd = both.projected.shape.back();
  for (int64_t k = 0; k < pd; ++k)
    CHECK(both.projected.data[static_cast<size_t>(k)] ==
          doctest::Approx(alone.projected.data[static_cast<size_t>(k)]).epsilon(1e-6));
  int64_t d = both.cls.shape.back();
  for (int64_t k = 0; k < d; ++k)
    CHECK(both.cls.data[static_cast<size_t>(k)] ==
          doctest::Approx(alone.cls.data[static_cast<size_t>(k)]).epsilon(1e-6));

  // two identical items in one batch produce identical encodings
  MotionForward twin = run_motion(enc, collate({&a, &a}));
  for (int64_t k = 0; k < pd; ++k)
    CHECK(twin.projected.data[static_cast<size_t>(k)] ==
          doctest::Approx(twin.projected.data[static_cast<size_t>(pd + k)]).epsilon(1e-7));
}

TEST_CASE("projected vectors are unit norm and unmasked encoding is reproducible") {
  Rng init = Rng::stream(3, 3);
  MotionEncoder enc(tiny_motion_cfg(), init);
  DataItem a = make_item(30, 30), b = make_item(150, 31), c = make_item(1, 32);
  Batch batch = collate({&a, &b, &c});
  MotionForward y = run_motion(enc, batch);
  int64_t pd = y.projected.shape.back();
  for (int64_t i = 0; i < 3; ++i) {
    double n = 0.0;
    for (int64_t k = 0; k < pd; ++k) {
      double v = y.projected.data[static_cast<size_t>(i * pd + k)];
      n += v * v;
    }
    CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-6);
  }
  MotionForward y2 = run_motion(enc, batch);
  CHECK(y.projected.data == y2.projected.data);
  CHECK(y.recon.data == y2.recon.data);
  CHECK(y.recon.all_finite());

  // reconstruction covers exactly the packed valid frames
  CHECK(y.recon.shape == std::vector<int64_t>{30 + 150 + 1, kFrameDim});
}

TEST_CASE("masking changes only masked frames of the input and keeps clean targets") {
  Rng init = Rng::stream(3, 4);
  MotionEncoder enc(tiny_motion_cfg(), init);
  DataItem a = make_item(40, 40);
  Batch batch = collate({&a});

  Tape t;
  ModelGraph m(t, enc.params(), false);
  Rng mask_rng = Rng::stream(9, 1);
  MotionEncoding e = enc.encode(m, batch, &mask_rng);
  REQUIRE(e.spans.size() == 1);
  CHECK(e.spans[0].len >= 1);
  CHECK(e.spans[0].start + e.spans[0].len <= 40);
  // the reconstruction target is the unmasked input
  for (int64_t f = 0; f < 40; ++f)
    for (int k = 0; k < kFrameDim; ++k)
      CHECK(e.target_motion.data[static_cast<size_t>(f * kFrameDim + k)] ==
            a.motion[static_cast<size_t>(f * kFrameDim + k)]);

  // same mask stream reproduces the identical encoding
  Tape t2;
  ModelGraph m2(t2, enc.params(), false);
  Rng mask_rng2 = Rng::stream(9, 1);
  MotionEncoding e2 = enc.encode(m2, batch, &mask_rng2);
  CHECK(t.val(e.projected).data == t2.val(e2.projected).data);
  CHECK(e2.spans[0].start == e.spans[0].start);
  CHECK(e2.spans[0].len == e.spans[0].len);
}

TEST_CASE("cls rows bypass the gcb transform exactly") {
  // the encoder routes CLS rows around the graph branch with
  // select_rows/merge_cls_frames; verify that mechanism is exact under an
  // arbitrary (here: random) frame transformation
  Rng rng(50);
  const int64_t d = 6;
  PackedOffsets fo{{0, 3, 7}};
  Tensor tokens = random_tensor({9, d}, rng);  // 2 CLS + 7 frame rows
  std::vector<int64_t> cls_pos = {0, 4}, frame_pos = {1, 2, 3, 5, 6, 7, 8};

  Tape t;
  Var x = t.leaf(tokens);
  Var cls_rows = ops::select_rows(t, x, cls_pos);
  Var frames = ops::select_rows(t, x, frame_pos);
  Var mangled = ops::mul(t, frames, t.leaf(random_tensor({7, d}, rng, 2.0, 3.0)));
  const Tensor& out = t.val(ops::merge_cls_frames(t, cls_rows, mangled, fo));

  for (int64_t k = 0; k < d; ++k) {
    CHECK(out.data[static_cast<size_t>(0 * d + k)] == tokens.data[static_cast<size_t>(0 * d + k)]);
    CHECK(out.data[static_cast<size_t>(4 * d + k)] == tokens.data[static_cast<size_t>(4 * d + k)]);
  }
  // frame rows carry the transformed values in order
  for (int64_t k = 0; k < d; ++k)
    CHECK(out.data[static_cast<size_t>(1 * d + k)] == t.val(mangled).data[static_cast<size_t>(k)]);
}

TEST_CASE("graph_conv locality: zero Jacobian blocks for non-adjacent joints") {
  // chain 0-1-2 with self-loops; joint 0 and joint 2 are not adjacent
  const int j = 3, g = 4;
  Tensor adj = Tensor::from({j, j}, {1, 1, 0, 1, 1, 1, 0, 1, 1});
  Rng rng(51);
  Tensor x = random_tensor({2, j * g}, rng);
  Tensor w = random_tensor({g, g}, rng, -0.8, 0.8);

  // finite differences on the graph branch alone
  auto forward = [&](const Tensor& xin) {
    Tape t;
    return t.val(ops::graph_conv(t, t.leaf(xin), adj, t.leaf(w), j, g));
  };
  Tensor base = forward(x);
  for (int kin = 0; kin < g; ++kin) {
    Tensor xp = x;
    xp.data[static_cast<size_t>(0 * g + kin)] += 0.25f;  // joint 0 feature, row 0
    Tensor yp = forward(xp);
    for (int kout = 0; kout < g; ++kout) {
      // joint 2 outputs must not move at all
      CHECK(yp.data[static_cast<size_t>(2 * g + kout)] ==
            base.data[static_cast<size_t>(2 * g + kout)]);
    }
  }

  // and the analytic gradient of joint 2's outputs is exactly zero on joint 0
  Tape t;
  Var vx = t.leaf(x, true);
  Var y = ops::graph_conv(t, vx, adj, t.leaf(w), j, g);
  Tensor sel = Tensor::zeros({2, j * g});
  for (int k = 0; k < g; ++k) sel.data[static_cast<size_t>(2 * g + k)] = 1.0f;
  t.backward(weighted_sum(t, y, sel));
  const Tensor& gx = t.grad(vx);
  for (int k = 0; k < g; ++k) CHECK(gx.data[static_cast<size_t>(k)] == 0.0f);
}

TEST_CASE("graph_conv is equivariant under joint relabeling") {
  const int j = 3, g = 2;
  Tensor adj = Tensor::from({j, j}, {1, 1, 0, 1, 1, 1, 0, 1, 1});
  Rng rng(52);
  Tensor x = random_tensor({1, j * g}, rng);
  Tensor w = random_tensor({g, g}, rng, -0.8, 0.8);

  // swap joints 0 and 2 in both the features and the adjacency
  auto swap_joints = [&](const Tensor& in) {
    Tensor out = in;
    for (int k = 0; k < g; ++k)
      std::swap(out.data[static_cast<size_t>(k)], out.data[static_cast<size_t>(2 * g + k)]);
    return out;
  };
  Tensor adj_p = Tensor::from({j, j}, {1, 1, 0, 1, 1, 1, 0, 1, 1});  // symmetric under the swap

  Tape t;
  Tensor y = t.val(ops::graph_conv(t, t.leaf(x), adj, t.leaf(w), j, g));
  Tensor yp = t.val(ops::graph_conv(t, t.leaf(swap_joints(x)), adj_p, t.leaf(w), j, g));
  for (int k = 0; k < g; ++k) {
    CHECK(yp.data[static_cast<size_t>(k)] == y.data[static_cast<size_t>(2 * g + k)]);
    CHECK(yp.data[static_cast<size_t>(2 * g + k)] == y.data[static_cast<size_t>(k)]);
    CHECK(yp.data[static_cast<size_t>(g + k)] == y.data[static_cast<size_t>(g + k)]);
  }
}

TEST_CASE("parameter counts match the closed-form formula for both presets") {
  for (const char* preset : {"desk", "paper"}) {
    MotionEncoderConfig cfg = MotionEncoderConfig::preset(preset);
    Rng rng = Rng::stream(4, 1);
    MotionEncoder enc(cfg, rng);
    CHECK(enc.params().param_count() == MotionEncoder::expected_param_count(cfg));
  }
  // and with the bottleneck disabled
  MotionEncoderConfig cfg = MotionEncoderConfig::desk();
  cfg.use_gcb = false;
  Rng rng = Rng::stream(4, 2);
  MotionEncoder enc(cfg, rng);
  CHECK(enc.params().param_count() == MotionEncoder::expected_param_count(cfg));

  std::vector<std::string> corpus = {"a person walks", "someone jumps high", "a person waves"};
  Vocab v = Vocab::build(corpus);
  TextEncoderConfig tc = tiny_text_cfg();
  Rng trng = Rng::stream(4, 3);
  TextEncoder tenc(tc, v, trng);
  CHECK(tenc.params().param_count() == TextEncoder::expected_param_count(tc, v.size()));
}

TEST_CASE("motion encoder config validates and round-trips through json") {
  MotionEncoderConfig cfg = MotionEncoderConfig::desk();
  MotionEncoderConfig back = MotionEncoderConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  CHECK(back.layers == 4);
  CHECK(back.heads == 4);
  CHECK(back.model_dim == 64);
  CHECK(back.ffn_dim == 128);
  CHECK(back.gcb_joint_dim == 8);

  cfg.heads = 3;  // 64 not divisible by 3
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = MotionEncoderConfig::desk();
  cfg.gcb_after_layer = cfg.layers;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.gcb_after_layer = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  CHECK_THROWS_AS(MotionEncoderConfig::preset("galaxy"), std::invalid_argument);
}

TEST_CASE("motion encoder end-to-end gradients pass finite differences") {
  Rng init = Rng::stream(3, 5);
  MotionEncoder enc(tiny_motion_cfg(), init);
  DataItem a = make_item(4, 60), b = make_item(6, 61);
  Batch batch = collate({&a, &b});

  Tensor cp = molang::testing::random_tensor({2, 4}, init, -1.0, 1.0);
  Tensor cr = molang::testing::random_tensor({10, kFrameDim}, init, -0.05, 0.05);

  auto forward = [&]() {
    Tape t;
    ModelGraph m(t, enc.params(), false);
    MotionEncoding e = enc.encode(m, batch, nullptr);
    return dot_f64(t.val(e.projected), cp) + dot_f64(t.val(e.reconstruction), cr);
  };

  // analytic gradients
  enc.params().zero_grad();
  Tape t;
  ModelGraph m(t, enc.params(), true);
  MotionEncoding e = enc.encode(m, batch, nullptr);
  Var loss = ops::add(t, weighted_sum(t, e.projected, cp), weighted_sum(t, e.reconstruction, cr));
  t.backward(loss);
  m.accumulate_grads();

  molang::testing::DirectionalReport rep =
      molang::testing::directional_check(enc.params(), forward);
  CAPTURE(rep.worst_tensor);
  CHECK(rep.global_rel < 1e-3);
  CHECK(rep.worst_tensor_rel < 2e-2);
}

TEST_CASE("vocab construction is deterministic and handles unknown words") {
  std::vector<std::string> corpus = {"Walk forward", "walk back", "walk, Forward!"};
  std::vector<std::string> shuffled = {"walk, Forward!", "Walk forward", "walk back"};
  Vocab a = Vocab::build(corpus);
  Vocab b = Vocab::build(shuffled);
  CHECK(a.to_json() == b.to_json());

  CHECK(a.token(kPadId) == "[PAD]");
  CHECK(a.token(kUnkId) == "[UNK]");
  CHECK(a.token(kClsId) == "[CLS]");
  CHECK(a.token(kSepId) == "[SEP]");
  CHECK(a.id("walk") > kSepId);       // most frequent word, first non-reserved slot
  CHECK(a.id("walk") == 4);
  CHECK(a.id("zebra") == kUnkId);
  // lookup is exact-match; lowercasing happens in split_words before lookup
  CHECK(a.id(Vocab::split_words("FORWARD")[0]) == a.id("forward"));

  Vocab back = Vocab::from_json(a.to_json());
  CHECK(back.to_json() == a.to_json());
  CHECK(back.id("walk") == a.id("walk"));
  CHECK_THROWS_AS(Vocab::build({}), std::invalid_argument);

  auto words = Vocab::split_words("Walk, forward!  THEN stop.");
  CHECK(words == std::vector<std::string>{"walk", "forward", "then", "stop"});
}

TEST_CASE("tokenize frames text with cls/sep, pads, and truncates keeping sep") {
  Vocab v = Vocab::build({"walk forward back"});
  TokenSeq empty = tokenize("", v, 8);
  CHECK(empty.valid == 2);
  CHECK(empty.ids[0] == kClsId);
  CHECK(empty.ids[1] == kSepId);
  for (size_t i = 2; i < 8; ++i) CHECK(empty.ids[i] == kPadId);

  TokenSeq twice = tokenize("walk walk", v, 8);
  CHECK(twice.valid == 4);
  CHECK(twice.ids[1] == v.id("walk"));
  CHECK(twice.ids[2] == v.id("walk"));
  CHECK(twice.ids[3] == kSepId);

  std::string longtext;
  for (int i = 0; i < 100; ++i) longtext += "walk forward ";
  TokenSeq trunc = tokenize(longtext, v, 8);
  CHECK(trunc.valid == 8);
  CHECK(static_cast<int64_t>(trunc.ids.size()) == 8);
  CHECK(trunc.ids[0] == kClsId);
  CHECK(trunc.ids[7] == kSepId);
  for (size_t i = 1; i < 7; ++i) CHECK(trunc.ids[i] != kPadId);
}

TEST_CASE("text encoder: determinism, unit norm, and pad invariance") {
  Vocab v = Vocab::build({"a person walks forward", "someone jumps", "a person waves hello"});
  Rng init = Rng::stream(5, 1);
  TextEncoder enc(tiny_text_cfg(), v, init);

  auto embed = [&](const std::vector<std::string>& texts) {
    Tape t;
    ModelGraph m(t, enc.params(), false);
    return t.val(enc.encode_texts(m, texts));
  };

  Tensor y = embed({"a person walks forward", "someone jumps", "a person walks forward"});
  int64_t d = y.shape.back();
  for (int64_t i = 0; i < 3; ++i) {
    double n = 0.0;
    for (int64_t k = 0; k < d; ++k) {
      double x = y.data[static_cast<size_t>(i * d + k)];
      n += x * x;
    }
    CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-6);
  }
  // identical strings give identical vectors
  for (int64_t k = 0; k < d; ++k)
    CHECK(y.data[static_cast<size_t>(k)] == y.data[static_cast<size_t>(2 * d + k)]);

  // batch composition must not matter: PAD is dropped from the packed layout
  Tensor alone = embed({"a person walks forward"});
  for (int64_t k = 0; k < d; ++k)
    CHECK(alone.data[static_cast<size_t>(k)] ==
          doctest::Approx(y.data[static_cast<size_t>(k)]).epsilon(1e-6));

  // out-of-vocab words fall back to UNK but still encode
  Tensor unk = embed({"quantum zebra"});
  CHECK(unk.all_finite());
}

TEST_CASE("text encoder end-to-end gradients pass finite differences") {
  Vocab v = Vocab::build({"a person walks", "someone jumps high"});
  Rng init = Rng::stream(5, 2);
  TextEncoder enc(tiny_text_cfg(), v, init);
  std::vector<std::string> texts = {"a person walks", "someone jumps high"};
  Tensor cp = molang::testing::random_tensor({2, 4}, init, -1.0, 1.0);

  auto forward = [&]() {
    Tape t;
    ModelGraph m(t, enc.params(), false);
    return dot_f64(t.val(enc.encode_texts(m, texts)), cp);
  };

  enc.params().zero_grad();
  Tape t;
  ModelGraph m(t, enc.params(), true);
  t.backward(weighted_sum(t, enc.encode_texts(m, texts), cp));
  m.accumulate_grads();

  molang::testing::DirectionalReport rep =
      molang::testing::directional_check(enc.params(), forward);
  CAPTURE(rep.worst_tensor);
  CHECK(rep.global_rel < 1e-3);
  CHECK(rep.worst_tensor_rel < 2e-2);
}
