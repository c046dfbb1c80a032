#include "molang/train_eval.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace molang {

namespace {

// rng stream tags: one purpose per tag, epoch in the third slot
constexpr uint64_t kStreamMotionInit = 0x1817;
constexpr uint64_t kStreamTextInit = 0x7e47;
constexpr uint64_t kStreamShuffle = 0x54f1;
constexpr uint64_t kStreamMask = 0x3a5c;
constexpr uint64_t kStreamDropout = 0xd409;
constexpr uint64_t kStreamRetrieval = 0x9e71;

void copy_params(const ParamStore& src, const std::string& prefix, ParamStore& dst) {
  for (int i = 0; i < src.size(); ++i) dst.create(prefix + src.name(i), src.value(i));
}

ParamStore extract_params(const ParamStore& src, const std::string& prefix) {
  ParamStore out;
  for (int i = 0; i < src.size(); ++i) {
    const std::string& n = src.name(i);
    if (n.rfind(prefix, 0) == 0) out.create(n.substr(prefix.size()), src.value(i));
  }
  return out;
}

// adam moments are stored as "adam.{m,v}.<scope>.<param>" in combined stores
void export_adam(const Adam& adam, const std::string& scope, ParamStore& dst) {
  ParamStore flat;
  adam.export_state(flat);
  for (int i = 0; i < flat.size(); ++i) {
    const std::string& n = flat.name(i);  // "adam.m.<param>" / "adam.v.<param>"
    dst.create(n.substr(0, 7) + scope + n.substr(7), flat.value(i));
  }
}

void import_adam(Adam& adam, const ParamStore& combined, const std::string& scope,
                 const ParamStore& params, int64_t step_count) {
  ParamStore flat;
  for (int i = 0; i < combined.size(); ++i) {
    const std::string& n = combined.name(i);
    for (const char* tag : {"adam.m.", "adam.v."}) {
      std::string want = std::string(tag) + scope;
      if (n.rfind(want, 0) == 0) flat.create(std::string(tag) + n.substr(want.size()),
                                             combined.value(i));
    }
  }
  adam.import_state(flat, params, step_count);
}

std::vector<size_t> shuffled_indices(size_t n, Rng& rng) {
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  for (size_t i = n; i > 1; --i) {
    size_t j = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

std::vector<std::vector<size_t>> plain_batches(const std::vector<size_t>& order, int batch_size) {
  std::vector<std::vector<size_t>> out;
  for (size_t i = 0; i < order.size(); i += static_cast<size_t>(batch_size)) {
    size_t end = std::min(order.size(), i + static_cast<size_t>(batch_size));
    out.emplace_back(order.begin() + static_cast<long>(i), order.begin() + static_cast<long>(end));
  }
  return out;
}

// Contrastive batches must not contain the same text twice (a duplicate would
// make its own positive a false negative). Greedy fill over the shuffled order.
std::vector<std::vector<size_t>> unique_text_batches(const std::vector<DataItem>& data,
                                                     const std::vector<size_t>& order,
                                                     int batch_size) {
  std::vector<std::vector<size_t>> out;
  std::deque<size_t> pending(order.begin(), order.end());
  while (!pending.empty()) {
    std::vector<size_t> batch;
    std::set<std::string> used;
    for (auto it = pending.begin();
         it != pending.end() && batch.size() < static_cast<size_t>(batch_size);) {
      if (used.insert(data[*it].text).second) {
        batch.push_back(*it);
        it = pending.erase(it);
      } else {
        ++it;
      }
    }
    out.push_back(std::move(batch));
  }
  return out;
}

Batch collate_indices(const std::vector<DataItem>& data, const std::vector<size_t>& idx) {
  std::vector<const DataItem*> ptrs;
  ptrs.reserve(idx.size());
  for (size_t i : idx) ptrs.push_back(&data[i]);
  return collate(ptrs);
}

void write_metrics_line(std::ofstream& out, const json& line) {
  out << line.dump() << "\n";
  out.flush();
}

void require_finite(double loss, const char* stage, int epoch, size_t batch) {
  if (!std::isfinite(loss)) {
    throw NumericalError(std::string(stage) + ": non-finite loss at epoch " +
                         std::to_string(epoch) + ", batch " + std::to_string(batch));
  }
}

struct StagePaths {
  std::string last, best;
  explicit StagePaths(const std::string& out_dir)
      : last((fs::path(out_dir) / "last.ckpt").string()),
        best((fs::path(out_dir) / "best.ckpt").string()) {}
};

}  // namespace

std::vector<std::string> distinct_labels(const std::vector<DataItem>& items) {
  std::vector<std::string> labels;
  for (const DataItem& it : items) {
    if (std::find(labels.begin(), labels.end(), it.label) == labels.end())
      labels.push_back(it.label);
  }
  return labels;
}

// ---- MolangModel ----

namespace {

MotionEncoder make_motion(const MotionEncoderConfig& cfg, uint64_t seed) {
  Rng r = Rng::stream(seed, kStreamMotionInit);
  return MotionEncoder(cfg, r);
}

TextEncoder make_text(const TextEncoderConfig& cfg, Vocab vocab, uint64_t seed) {
  Rng r = Rng::stream(seed, kStreamTextInit);
  return TextEncoder(cfg, std::move(vocab), r);
}

}  // namespace

MolangModel::MolangModel(MotionEncoderConfig mcfg, TextEncoderConfig tcfg, Vocab vocab,
                         uint64_t seed)
    : motion(make_motion(mcfg, seed)), text(make_text(tcfg, std::move(vocab), seed)) {
  Temperature::create(extra);
}

MolangModel::MolangModel(MotionEncoder m, TextEncoder t, ParamStore e)
    : motion(std::move(m)), text(std::move(t)), extra(std::move(e)) {}

ParamStore MolangModel::combined() const {
  ParamStore out;
  copy_params(motion.params(), "motion.", out);
  copy_params(text.params(), "text.", out);
  copy_params(extra, "", out);
  return out;
}

void MolangModel::save(const std::string& path, const std::string& metadata_json) const {
  json meta = metadata_json.empty() ? json::object() : json::parse(metadata_json);
  meta["kind"] = "molang";
  meta["motion_config"] = json::parse(motion.config().to_json());
  meta["text_config"] = json::parse(text.config().to_json());
  meta["vocab"] = json::parse(text.vocab().to_json());
  save_checkpoint(combined(), path, meta.dump());
}

MolangModel MolangModel::load(const std::string& path) {
  ParamStore store = load_checkpoint(path);
  json meta = json::parse(load_checkpoint_sidecar(path));
  if (meta.value("kind", "") != "molang") {
    throw CheckpointError("checkpoint " + path + " is not a joint model checkpoint");
  }
  MotionEncoderConfig mcfg = MotionEncoderConfig::from_json(meta.at("motion_config").dump());
  TextEncoderConfig tcfg = TextEncoderConfig::from_json(meta.at("text_config").dump());
  Vocab vocab = Vocab::from_json(meta.at("vocab").dump());
  MotionEncoder menc(mcfg, extract_params(store, "motion."));
  TextEncoder tenc(tcfg, std::move(vocab), extract_params(store, "text."));
  ParamStore extra;
  extra.create(Temperature::kParamName, store.value(Temperature::kParamName));
  return MolangModel(std::move(menc), std::move(tenc), std::move(extra));
}

Tensor MolangModel::embed_motions(const std::vector<const DataItem*>& items,
                                  int64_t batch_size) const {
  int64_t d = motion.config().projection_dim;
  Tensor out = Tensor::zeros({static_cast<int64_t>(items.size()), d});
  for (size_t base = 0; base < items.size(); base += static_cast<size_t>(batch_size)) {
    size_t end = std::min(items.size(), base + static_cast<size_t>(batch_size));
    std::vector<const DataItem*> chunk(items.begin() + static_cast<long>(base),
                                       items.begin() + static_cast<long>(end));
    Batch b = collate(chunk);
    Tape tape;
    ModelGraph m(tape, const_cast<ParamStore&>(motion.params()), /*needs_grad=*/false);
    MotionEncoding enc = motion.encode(m, b, nullptr, nullptr);
    const Tensor& proj = tape.val(enc.projected);
    std::copy(proj.data.begin(), proj.data.end(),
              out.data.begin() + static_cast<long>(base * static_cast<size_t>(d)));
  }
  return out;
}

Tensor MolangModel::embed_texts(const std::vector<std::string>& texts) const {
  int64_t d = text.config().projection_dim;
  Tensor out = Tensor::zeros({static_cast<int64_t>(texts.size()), d});
  constexpr size_t kChunk = 256;
  for (size_t base = 0; base < texts.size(); base += kChunk) {
    size_t end = std::min(texts.size(), base + kChunk);
    std::vector<std::string> chunk(texts.begin() + static_cast<long>(base),
                                   texts.begin() + static_cast<long>(end));
    Tape tape;
    ModelGraph m(tape, const_cast<ParamStore&>(text.params()), /*needs_grad=*/false);
    Var proj = text.encode_texts(m, chunk);
    const Tensor& p = tape.val(proj);
    std::copy(p.data.begin(), p.data.end(),
              out.data.begin() + static_cast<long>(base * static_cast<size_t>(d)));
  }
  return out;
}

// ---- MMP pretraining ----

StageResult pretrain_mmp(const std::vector<DataItem>& data, const PretrainConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("pretrain_mmp: empty dataset");
  fs::create_directories(cfg.out_dir);
  StagePaths paths(cfg.out_dir);

  Rng init_rng = Rng::stream(cfg.seed, kStreamMotionInit);
  MotionEncoder enc(cfg.encoder, init_rng);
  Adam adam;
  int start_epoch = 0;
  double best = std::numeric_limits<double>::infinity();
  bool resuming = !cfg.resume_from.empty();
  if (resuming) {
    ParamStore store = load_checkpoint(cfg.resume_from);
    json meta = json::parse(load_checkpoint_sidecar(cfg.resume_from));
    if (meta.value("kind", "") != "mmp") {
      throw CheckpointError("resume checkpoint is not an MMP checkpoint");
    }
    MotionEncoderConfig saved = MotionEncoderConfig::from_json(meta.at("encoder").dump());
    if (saved.to_json() != cfg.encoder.to_json()) {
      throw CheckpointError("resume checkpoint encoder config does not match");
    }
    enc = MotionEncoder(cfg.encoder, extract_params(store, "motion."));
    import_adam(adam, store, "motion.", enc.params(), meta.at("adam_step").get<int64_t>());
    start_epoch = meta.at("epoch").get<int>();
    best = meta.at("best_loss").get<double>();
  }

  std::ofstream metrics(fs::path(cfg.out_dir) / "metrics.jsonl",
                        resuming ? std::ios::app : std::ios::trunc);

  auto save = [&](const std::string& path, int epoch_done, double loss) {
    ParamStore store;
    copy_params(enc.params(), "motion.", store);
    export_adam(adam, "motion.", store);
    json meta = {{"kind", "mmp"},
                 {"encoder", json::parse(cfg.encoder.to_json())},
                 {"seed", cfg.seed},
                 {"epoch", epoch_done},
                 {"adam_step", adam.step_count()},
                 {"best_loss", best},
                 {"last_loss", loss}};
    save_checkpoint(store, path, meta.dump());
  };

  StageResult res;
  double last_loss = 0.0;
  for (int e = start_epoch; e < cfg.epochs; ++e) {
    double lr = cosine_lr(cfg.schedule, e);
    Rng shuffle_rng = Rng::stream(cfg.seed, kStreamShuffle, static_cast<uint64_t>(e));
    Rng mask_rng = Rng::stream(cfg.seed, kStreamMask, static_cast<uint64_t>(e));
    Rng drop_rng = Rng::stream(cfg.seed, kStreamDropout, static_cast<uint64_t>(e));
    Rng* drop = cfg.encoder.dropout > 0.0f ? &drop_rng : nullptr;

    auto batches = plain_batches(shuffled_indices(data.size(), shuffle_rng), cfg.batch_size);
    double sum = 0.0;
    for (size_t bi = 0; bi < batches.size(); ++bi) {
      Batch batch = collate_indices(data, batches[bi]);
      Tape tape;
      ModelGraph m(tape, enc.params());
      MotionEncoding out = enc.encode(m, batch, &mask_rng, drop);
      Var loss = mmp_loss(tape, out);
      double lv = tape.val(loss).item();
      require_finite(lv, "pretrain_mmp", e, bi);
      tape.backward(loss);
      m.accumulate_grads();
      adam.step(enc.params(), lr);
      enc.params().zero_grad();
      sum += lv;
    }
    last_loss = sum / static_cast<double>(batches.size());
    res.epoch_loss.push_back(last_loss);
    write_metrics_line(metrics, {{"stage", "pretrain"},
                                 {"epoch", e},
                                 {"lr", lr},
                                 {"loss", last_loss},
                                 {"seed", cfg.seed}});
    if (last_loss < best) {
      best = last_loss;
      save(paths.best, e + 1, last_loss);
    }
    save(paths.last, e + 1, last_loss);
  }
  if (cfg.epochs == start_epoch || !fs::exists(paths.last)) {
    // zero remaining epochs: still emit a loadable checkpoint
    save(paths.last, start_epoch, last_loss);
    if (!fs::exists(paths.best)) save(paths.best, start_epoch, last_loss);
  }
  res.last.total = last_loss;
  res.last.recon = last_loss;
  res.last_checkpoint = paths.last;
  res.best_checkpoint = paths.best;
  res.epochs_run = cfg.epochs - start_epoch;
  return res;
}

// ---- shared contrastive stage ----

namespace {

struct CstarStageParams {
  const std::vector<DataItem>* data = nullptr;
  int epochs = 0;
  int batch_size = 32;
  uint64_t seed = 0;
  bool masking = true;
  double alpha = 10.0;
  CosineScheduleConfig schedule;
  std::string out_dir;
  std::string stage_name;  // metrics tag
  int start_epoch = 0;
  double best = std::numeric_limits<double>::infinity();
  int64_t adam_step = 0;
  std::string pretrained_source;
};

StageResult run_cstar_stage(MolangModel& model, Adam& adam_m, Adam& adam_t, Adam& adam_x,
                            const CstarStageParams& p) {
  const std::vector<DataItem>& data = *p.data;
  fs::create_directories(p.out_dir);
  StagePaths paths(p.out_dir);
  double best = p.best;

  std::ofstream metrics(fs::path(p.out_dir) / "metrics.jsonl",
                        p.start_epoch > 0 ? std::ios::app : std::ios::trunc);

  auto save = [&](const std::string& path, int epoch_done, const LossBreakdown& lb) {
    ParamStore store = model.combined();
    export_adam(adam_m, "motion.", store);
    export_adam(adam_t, "text.", store);
    export_adam(adam_x, "", store);
    json meta = {{"kind", "molang"},
                 {"stage", p.stage_name},
                 {"motion_config", json::parse(model.motion.config().to_json())},
                 {"text_config", json::parse(model.text.config().to_json())},
                 {"vocab", json::parse(model.text.vocab().to_json())},
                 {"seed", p.seed},
                 {"epoch", epoch_done},
                 {"adam_step", adam_m.step_count()},
                 {"alpha", p.alpha},
                 {"masking", p.masking},
                 {"best_loss", best},
                 {"last_loss", lb.total},
                 {"pretrained_source", p.pretrained_source}};
    save_checkpoint(store, path, meta.dump());
  };

  StageResult res;
  LossBreakdown last;
  for (int e = p.start_epoch; e < p.epochs; ++e) {
    double lr = cosine_lr(p.schedule, e);
    Rng shuffle_rng = Rng::stream(p.seed, kStreamShuffle, static_cast<uint64_t>(e));
    Rng mask_rng = Rng::stream(p.seed, kStreamMask, static_cast<uint64_t>(e));
    Rng drop_rng = Rng::stream(p.seed, kStreamDropout, static_cast<uint64_t>(e));
    bool use_drop =
        model.motion.config().dropout > 0.0f || model.text.config().dropout > 0.0f;

    auto batches = unique_text_batches(data, shuffled_indices(data.size(), shuffle_rng),
                                       p.batch_size);
    LossBreakdown epoch{};
    epoch.alpha = p.alpha;
    for (size_t bi = 0; bi < batches.size(); ++bi) {
      Batch batch = collate_indices(data, batches[bi]);
      std::vector<std::string> texts;
      for (const DataItem* it : batch.items) texts.push_back(it->text);

      Tape tape;
      ModelGraph gm(tape, model.motion.params());
      ModelGraph gt(tape, model.text.params());
      ModelGraph gx(tape, model.extra);
      MotionEncoding enc = model.motion.encode(gm, batch, p.masking ? &mask_rng : nullptr,
                                               use_drop ? &drop_rng : nullptr);
      Var txt = model.text.encode_texts(gt, texts, use_drop ? &drop_rng : nullptr);
      CstarResult cr = cstar_loss(tape, enc.projected, txt, gx.p(Temperature::kParamName),
                                  enc, p.alpha);
      require_finite(cr.breakdown.total, p.stage_name.c_str(), e, bi);
      tape.backward(cr.total);
      gm.accumulate_grads();
      gt.accumulate_grads();
      gx.accumulate_grads();
      adam_m.step(model.motion.params(), lr);
      adam_t.step(model.text.params(), lr);
      adam_x.step(model.extra, lr);
      Temperature::clamp(model.extra);
      model.motion.params().zero_grad();
      model.text.params().zero_grad();
      model.extra.zero_grad();

      epoch.total += cr.breakdown.total;
      epoch.contrastive_m2t += cr.breakdown.contrastive_m2t;
      epoch.contrastive_t2m += cr.breakdown.contrastive_t2m;
      epoch.recon += cr.breakdown.recon;
    }
    double nb = static_cast<double>(batches.size());
    epoch.total /= nb;
    epoch.contrastive_m2t /= nb;
    epoch.contrastive_t2m /= nb;
    epoch.recon /= nb;
    last = epoch;
    res.epoch_loss.push_back(epoch.total);
    write_metrics_line(metrics, {{"stage", p.stage_name},
                                 {"epoch", e},
                                 {"lr", lr},
                                 {"loss", epoch.total},
                                 {"m2t", epoch.contrastive_m2t},
                                 {"t2m", epoch.contrastive_t2m},
                                 {"recon", epoch.recon},
                                 {"tau", Temperature::tau(model.extra)},
                                 {"seed", p.seed}});
    if (epoch.total < best) {
      best = epoch.total;
      save(paths.best, e + 1, epoch);
    }
    save(paths.last, e + 1, epoch);
  }
  if (!fs::exists(paths.last)) {
    save(paths.last, p.start_epoch, last);
    if (!fs::exists(paths.best)) save(paths.best, p.start_epoch, last);
  }
  res.last = last;
  res.last_checkpoint = paths.last;
  res.best_checkpoint = paths.best;
  res.epochs_run = p.epochs - p.start_epoch;
  return res;
}

}  // namespace

StageResult train_contrastive(const std::vector<DataItem>& data, const ContrastiveConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("train_contrastive: empty dataset");
  TextEncoderConfig tcfg = cfg.text;
  if (tcfg.projection_dim != cfg.encoder.projection_dim) {
    throw std::invalid_argument("train_contrastive: projection dims differ");
  }

  CstarStageParams p;
  p.data = &data;
  p.epochs = cfg.epochs;
  p.batch_size = cfg.batch_size;
  p.seed = cfg.seed;
  p.masking = cfg.masking;
  p.alpha = cfg.alpha;
  p.schedule = cfg.schedule;
  p.out_dir = cfg.out_dir;
  p.stage_name = "contrastive";
  p.pretrained_source = cfg.motion_init;

  Adam adam_m, adam_t, adam_x;

  if (!cfg.resume_from.empty()) {
    ParamStore store = load_checkpoint(cfg.resume_from);
    json meta = json::parse(load_checkpoint_sidecar(cfg.resume_from));
    if (meta.value("kind", "") != "molang") {
      throw CheckpointError("resume checkpoint is not a joint model checkpoint");
    }
    MolangModel model = MolangModel::load(cfg.resume_from);
    int64_t step = meta.at("adam_step").get<int64_t>();
    import_adam(adam_m, store, "motion.", model.motion.params(), step);
    import_adam(adam_t, store, "text.", model.text.params(), step);
    import_adam(adam_x, store, "", model.extra, step);
    p.start_epoch = meta.at("epoch").get<int>();
    p.best = meta.at("best_loss").get<double>();
    p.pretrained_source = meta.value("pretrained_source", "");
    return run_cstar_stage(model, adam_m, adam_t, adam_x, p);
  }

  std::vector<std::string> corpus;
  for (const DataItem& it : data) corpus.push_back(it.text);
  Vocab vocab = Vocab::build(corpus);

  Rng text_rng = Rng::stream(cfg.seed, kStreamTextInit);
  TextEncoder tenc(tcfg, std::move(vocab), text_rng);

  MotionEncoder menc = [&] {
    if (cfg.motion_init.empty()) {
      Rng r = Rng::stream(cfg.seed, kStreamMotionInit);
      return MotionEncoder(cfg.encoder, r);
    }
    ParamStore store = load_checkpoint(cfg.motion_init);
    json meta = json::parse(load_checkpoint_sidecar(cfg.motion_init));
    if (meta.value("kind", "") != "mmp") {
      throw CheckpointError("motion init is not an MMP checkpoint");
    }
    MotionEncoderConfig saved = MotionEncoderConfig::from_json(meta.at("encoder").dump());
    if (saved.to_json() != cfg.encoder.to_json()) {
      throw CheckpointError("motion init encoder config does not match training config");
    }
    return MotionEncoder(cfg.encoder, extract_params(store, "motion."));
  }();

  ParamStore extra;
  Temperature::create(extra);
  MolangModel model(std::move(menc), std::move(tenc), std::move(extra));
  return run_cstar_stage(model, adam_m, adam_t, adam_x, p);
}

StageResult finetune(const std::vector<DataItem>& data, const std::string& molang_ckpt,
                     const FinetuneConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("finetune: empty dataset");
  MolangModel model = MolangModel::load(molang_ckpt);

  std::vector<DataItem> labeled = data;
  for (DataItem& it : labeled) it.text = it.label;

  CstarStageParams p;
  p.data = &labeled;
  p.epochs = cfg.epochs;
  p.batch_size = cfg.batch_size;
  p.seed = cfg.seed;
  p.masking = cfg.masking;
  p.alpha = cfg.alpha;
  p.schedule = cfg.schedule;
  p.out_dir = cfg.out_dir;
  p.stage_name = "finetune";
  p.pretrained_source = molang_ckpt;

  Adam adam_m, adam_t, adam_x;
  return run_cstar_stage(model, adam_m, adam_t, adam_x, p);
}

// ---- evaluation ----

RecognitionResult eval_recognition(const MolangModel& model, const std::vector<DataItem>& data,
                                   const std::vector<std::string>& label_texts) {
  if (label_texts.empty()) throw std::invalid_argument("eval_recognition: empty label set");
  size_t k = label_texts.size();

  RecognitionResult res;
  res.labels = label_texts;
  res.confusion.assign(k, std::vector<int>(k, 0));

  // Each label is matched through a prompt prototype: the mean text embedding
  // of the distinct annotation texts carried by that label in the dataset,
  // renormalized to unit length. Labels with no items fall back to the label
  // string itself. Bare class names ("wave") embed far from the sentence-style
  // texts seen in training; averaging the class phrasebook closes that gap.
  std::vector<std::string> prompts;
  std::vector<size_t> prompt_label;
  for (size_t j = 0; j < k; ++j) {
    std::vector<std::string> seen;
    for (const DataItem& it : data) {
      if (it.label != label_texts[j]) continue;
      if (std::find(seen.begin(), seen.end(), it.text) == seen.end()) seen.push_back(it.text);
    }
    if (seen.empty()) seen.push_back(label_texts[j]);
    for (std::string& s : seen) {
      prompts.push_back(std::move(s));
      prompt_label.push_back(j);
    }
  }
  Tensor pe = model.embed_texts(prompts);
  int64_t pd = pe.shape.back();
  std::vector<double> proto(k * static_cast<size_t>(pd), 0.0);
  for (size_t r = 0; r < prompts.size(); ++r)
    for (int64_t c = 0; c < pd; ++c)
      proto[prompt_label[r] * static_cast<size_t>(pd) + static_cast<size_t>(c)] +=
          static_cast<double>(pe.data[r * static_cast<size_t>(pd) + static_cast<size_t>(c)]);
  Tensor lab = Tensor::uninit({static_cast<int64_t>(k), pd});
  for (size_t j = 0; j < k; ++j) {
    double n = 0.0;
    for (int64_t c = 0; c < pd; ++c) {
      double v = proto[j * static_cast<size_t>(pd) + static_cast<size_t>(c)];
      n += v * v;
    }
    n = std::max(std::sqrt(n), 1e-12);
    for (int64_t c = 0; c < pd; ++c)
      lab.data[j * static_cast<size_t>(pd) + static_cast<size_t>(c)] = static_cast<float>(
          proto[j * static_cast<size_t>(pd) + static_cast<size_t>(c)] / n);
  }
  std::vector<const DataItem*> ptrs;
  for (const DataItem& it : data) ptrs.push_back(&it);
  Tensor mot = model.embed_motions(ptrs);
  int64_t d = lab.shape.back();

  int correct = 0;
  for (size_t i = 0; i < data.size(); ++i) {
    auto truth = std::find(label_texts.begin(), label_texts.end(), data[i].label);
    if (truth == label_texts.end()) {
      throw std::invalid_argument("eval_recognition: item label '" + data[i].label +
                                  "' is not in the label set");
    }
    size_t truth_idx = static_cast<size_t>(truth - label_texts.begin());

    std::vector<double> sim(k, 0.0);
    for (size_t j = 0; j < k; ++j) {
      double s = 0.0;
      for (int64_t c = 0; c < d; ++c) {
        s += static_cast<double>(mot.data[i * static_cast<size_t>(d) + static_cast<size_t>(c)]) *
             static_cast<double>(lab.data[j * static_cast<size_t>(d) + static_cast<size_t>(c)]);
      }
      sim[j] = s;
    }
    // argmax, exact ties to the lowest index
    size_t pred = 0;
    for (size_t j = 1; j < k; ++j)
      if (sim[j] > sim[pred]) pred = j;
    if (pred == truth_idx) ++correct;
    res.confusion[truth_idx][pred] += 1;

    std::vector<size_t> order(k);
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return sim[a] > sim[b]; });
    std::array<std::pair<int, double>, 3> top3{};
    for (size_t j = 0; j < 3; ++j) {
      size_t idx = order[std::min(j, k - 1)];
      top3[j] = {static_cast<int>(idx), sim[idx]};
    }
    res.top3.push_back(top3);
  }
  res.accuracy = data.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(data.size());
  return res;
}

std::vector<RetrievalQuestion> build_retrieval_questions(const std::vector<DataItem>& data,
                                                         int n_candidates, int n_questions,
                                                         uint64_t seed) {
  std::vector<std::string> labels = distinct_labels(data);
  std::map<std::string, std::vector<size_t>> by_label;
  for (size_t i = 0; i < data.size(); ++i) by_label[data[i].label].push_back(i);
  if (labels.size() < 2) {
    throw std::invalid_argument("build_retrieval_questions: need at least 2 labels, have " +
                                std::to_string(labels.size()));
  }
  for (const std::string& lab : labels) {
    size_t others = data.size() - by_label[lab].size();
    if (others < static_cast<size_t>(n_candidates - 1)) {
      throw std::invalid_argument(
          "build_retrieval_questions: only " + std::to_string(others) +
          " distractor clips available outside label '" + lab + "', need " +
          std::to_string(n_candidates - 1));
    }
  }

  Rng rng = Rng::stream(seed, kStreamRetrieval);
  std::vector<RetrievalQuestion> out;
  for (int q = 0; q < n_questions; ++q) {
    const std::string& qlabel =
        labels[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(labels.size()) - 1))];
    const std::vector<size_t>& pool = by_label[qlabel];
    size_t correct_item =
        pool[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(pool.size()) - 1))];

    std::vector<std::string> others;
    for (const std::string& lab : labels)
      if (lab != qlabel) others.push_back(lab);
    for (size_t i = others.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(others[i - 1], others[j]);
    }

    // cycle distractor labels so classes stay distinct whenever possible
    std::set<size_t> used;
    std::vector<size_t> picked;
    size_t cursor = 0;
    while (picked.size() < static_cast<size_t>(n_candidates - 1)) {
      const std::vector<size_t>& lp = by_label[others[cursor % others.size()]];
      ++cursor;
      size_t item =
          lp[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(lp.size()) - 1))];
      if (!used.insert(item).second) continue;
      picked.push_back(item);
    }

    RetrievalQuestion question;
    question.query_text = data[correct_item].text;
    question.candidates = picked;
    question.candidates.push_back(correct_item);
    for (size_t i = question.candidates.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(question.candidates[i - 1], question.candidates[j]);
    }
    question.correct = static_cast<size_t>(
        std::find(question.candidates.begin(), question.candidates.end(), correct_item) -
        question.candidates.begin());
    out.push_back(std::move(question));
  }
  return out;
}

RetrievalResult eval_retrieval(const MolangModel& model, const std::vector<DataItem>& data,
                               const std::vector<RetrievalQuestion>& questions) {
  if (questions.empty()) return {};

  std::set<size_t> needed;
  for (const RetrievalQuestion& q : questions)
    for (size_t c : q.candidates) needed.insert(c);
  std::vector<size_t> item_list(needed.begin(), needed.end());
  std::map<size_t, size_t> row_of;
  std::vector<const DataItem*> ptrs;
  for (size_t i = 0; i < item_list.size(); ++i) {
    row_of[item_list[i]] = i;
    ptrs.push_back(&data[item_list[i]]);
  }
  Tensor mot = model.embed_motions(ptrs);

  std::vector<std::string> queries;
  for (const RetrievalQuestion& q : questions) queries.push_back(q.query_text);
  Tensor txt = model.embed_texts(queries);
  int64_t d = txt.shape.back();

  int top1 = 0, top3 = 0;
  for (size_t qi = 0; qi < questions.size(); ++qi) {
    const RetrievalQuestion& q = questions[qi];
    std::vector<double> sim(q.candidates.size(), 0.0);
    for (size_t c = 0; c < q.candidates.size(); ++c) {
      size_t row = row_of[q.candidates[c]];
      double s = 0.0;
      for (int64_t k = 0; k < d; ++k) {
        s += static_cast<double>(txt.data[qi * static_cast<size_t>(d) + static_cast<size_t>(k)]) *
             static_cast<double>(mot.data[row * static_cast<size_t>(d) + static_cast<size_t>(k)]);
      }
      sim[c] = s;
    }
    // rank of the correct candidate; ties resolve to the lowest index
    size_t better = 0;
    for (size_t c = 0; c < sim.size(); ++c) {
      if (c == q.correct) continue;
      if (sim[c] > sim[q.correct] || (sim[c] == sim[q.correct] && c < q.correct)) ++better;
    }
    if (better < 1) ++top1;
    if (better < 3) ++top3;
  }
  RetrievalResult r;
  r.top1 = static_cast<double>(top1) / static_cast<double>(questions.size());
  r.top3 = static_cast<double>(top3) / static_cast<double>(questions.size());
  return r;
}

// ---- ablation ----

std::vector<AblationRow> ablation_run(const std::vector<DataItem>& train_items,
                                      const std::vector<DataItem>& test_items,
                                      const AblationConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  std::vector<std::string> labels = distinct_labels(test_items);
  std::vector<RetrievalQuestion> questions;

  // stage-1 artifacts are shared across rows: keyed by (gcb, seed)
  std::map<std::pair<bool, uint64_t>, std::string> stage1;
  auto stage1_ckpt = [&](bool gcb, uint64_t seed) -> std::string {
    auto key = std::make_pair(gcb, seed);
    auto it = stage1.find(key);
    if (it != stage1.end()) return it->second;
    PretrainConfig pc;
    pc.encoder = cfg.encoder;
    pc.encoder.use_gcb = gcb;
    pc.epochs = cfg.pretrain_epochs;
    pc.batch_size = cfg.pretrain_batch_size;
    pc.seed = seed;
    pc.out_dir = (fs::path(cfg.out_dir) /
                  ("stage1_gcb" + std::to_string(gcb) + "_seed" + std::to_string(seed)))
                     .string();
    StageResult r = pretrain_mmp(train_items, pc);
    stage1[key] = r.last_checkpoint;
    return r.last_checkpoint;
  };

  std::vector<AblationRow> rows;
  for (int mmp = 0; mmp <= 1; ++mmp) {
    for (int gcb = 0; gcb <= 1; ++gcb) {
      for (int cstar = 0; cstar <= 1; ++cstar) {
        AblationRow row;
        row.mmp = mmp != 0;
        row.gcb = gcb != 0;
        row.cstar = cstar != 0;
        for (uint64_t seed : cfg.seeds) {
          ContrastiveConfig cc;
          cc.encoder = cfg.encoder;
          cc.encoder.use_gcb = row.gcb;
          cc.text = cfg.text;
          cc.epochs = cfg.contrastive_epochs;
          cc.batch_size = cfg.batch_size;
          cc.seed = seed;
          cc.alpha = row.cstar ? 10.0 : 0.0;
          cc.motion_init = row.mmp ? stage1_ckpt(row.gcb, seed) : "";
          cc.out_dir = (fs::path(cfg.out_dir) /
                        ("row_m" + std::to_string(mmp) + "g" + std::to_string(gcb) + "c" +
                         std::to_string(cstar) + "_seed" + std::to_string(seed)))
                           .string();
          StageResult sr = train_contrastive(train_items, cc);
          MolangModel model = MolangModel::load(sr.last_checkpoint);

          RecognitionResult rec = eval_recognition(model, test_items, labels);
          if (questions.empty()) {
            questions = build_retrieval_questions(test_items, cfg.retrieval_candidates,
                                                  cfg.retrieval_questions, /*seed=*/0);
          }
          RetrievalResult ret = eval_retrieval(model, test_items, questions);
          row.accuracy += rec.accuracy;
          row.top1 += ret.top1;
          row.top3 += ret.top3;
        }
        double n = static_cast<double>(cfg.seeds.size());
        row.accuracy /= n;
        row.top1 /= n;
        row.top3 /= n;
        rows.push_back(row);
      }
    }
  }

  std::ofstream csv(fs::path(cfg.out_dir) / "ablation.csv");
  csv << "mmp,gcb,cstar,accuracy,top1,top3\n";
  for (const AblationRow& r : rows) {
    csv << (r.mmp ? 1 : 0) << "," << (r.gcb ? 1 : 0) << "," << (r.cstar ? 1 : 0) << ","
        << r.accuracy << "," << r.top1 << "," << r.top3 << "\n";
  }
  return rows;
}

}  // namespace molang
