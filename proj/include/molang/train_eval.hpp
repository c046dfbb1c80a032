#pragma once

#include <array>
#include <optional>

#include "molang/checkpoint.hpp"
#include "molang/objectives.hpp"
#include "molang/text_encoder.hpp"

namespace molang {

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---- checkpointable joint model ----

struct MolangModel {
  MotionEncoder motion;
  TextEncoder text;
  ParamStore extra;  // temperature logit

  MolangModel(MotionEncoderConfig mcfg, TextEncoderConfig tcfg, Vocab vocab, uint64_t seed);
  MolangModel(MotionEncoder m, TextEncoder t, ParamStore extra);

  // combined store with "motion." / "text." prefixes plus the temperature
  ParamStore combined() const;

  void save(const std::string& path, const std::string& metadata_json) const;
  static MolangModel load(const std::string& path);

  // no-grad embedding helpers; masking and dropout are always off
  Tensor embed_motions(const std::vector<const DataItem*>& items, int64_t batch_size = 64) const;
  Tensor embed_texts(const std::vector<std::string>& texts) const;
};

// ---- training stages ----

struct StageResult {
  std::vector<double> epoch_loss;
  LossBreakdown last;
  std::string last_checkpoint;
  std::string best_checkpoint;
  int epochs_run = 0;
};

struct PretrainConfig {
  MotionEncoderConfig encoder = MotionEncoderConfig::desk();
  int epochs = 50;
  int batch_size = 64;
  uint64_t seed = 0;
  CosineScheduleConfig schedule;
  std::string out_dir;
  std::string resume_from;  // optional checkpoint path
};

StageResult pretrain_mmp(const std::vector<DataItem>& data, const PretrainConfig& cfg);

struct ContrastiveConfig {
  MotionEncoderConfig encoder = MotionEncoderConfig::desk();
  TextEncoderConfig text;
  int epochs = 100;
  int batch_size = 32;
  uint64_t seed = 0;
  bool masking = true;   // mask motion during contrastive training
  double alpha = 10.0;   // reconstruction weight; 0 disables CstAR recon
  CosineScheduleConfig schedule;
  std::string motion_init;  // MMP checkpoint; empty = train from scratch
  std::string out_dir;
  std::string resume_from;
};

StageResult train_contrastive(const std::vector<DataItem>& data, const ContrastiveConfig& cfg);

struct FinetuneConfig {
  int epochs = 30;
  int batch_size = 32;
  uint64_t seed = 0;
  bool masking = true;
  double alpha = 10.0;
  CosineScheduleConfig schedule;
  std::string out_dir;
};

// continues CstAR training with each pair's text set to its class label
StageResult finetune(const std::vector<DataItem>& data, const std::string& molang_ckpt,
                     const FinetuneConfig& cfg);

// ---- evaluation ----

struct RecognitionResult {
  double accuracy = 0.0;
  std::vector<std::string> labels;
  std::vector<std::vector<int>> confusion;  // [true][predicted]
  // per item: (label index, similarity) of the three closest label texts
  std::vector<std::array<std::pair<int, double>, 3>> top3;
};

RecognitionResult eval_recognition(const MolangModel& model, const std::vector<DataItem>& data,
                                   const std::vector<std::string>& label_texts);

struct RetrievalQuestion {
  std::string query_text;
  std::vector<size_t> candidates;  // item indices; distinct classes where possible
  size_t correct = 0;              // position within candidates
};

std::vector<RetrievalQuestion> build_retrieval_questions(const std::vector<DataItem>& data,
                                                         int n_candidates, int n_questions,
                                                         uint64_t seed);

struct RetrievalResult {
  double top1 = 0.0;
  double top3 = 0.0;
};

RetrievalResult eval_retrieval(const MolangModel& model, const std::vector<DataItem>& data,
                               const std::vector<RetrievalQuestion>& questions);

// ---- ablation ----

struct AblationRow {
  bool mmp = false, gcb = false, cstar = false;
  double accuracy = 0.0, top1 = 0.0, top3 = 0.0;
};

struct AblationConfig {
  MotionEncoderConfig encoder = MotionEncoderConfig::desk();
  TextEncoderConfig text;
  int pretrain_epochs = 10;
  int pretrain_batch_size = 64;
  int contrastive_epochs = 20;
  int batch_size = 32;
  std::vector<uint64_t> seeds = {0, 1, 2};
  std::string out_dir;
  int retrieval_candidates = 15;
  int retrieval_questions = 100;
};

// 2^3 toggle grid over {MMP, GCB, CstAR}; metrics averaged over seeds.
// Stage-1 checkpoints are shared between rows with identical stage-1 config.
std::vector<AblationRow> ablation_run(const std::vector<DataItem>& train_items,
                                      const std::vector<DataItem>& test_items,
                                      const AblationConfig& cfg);

// distinct labels in first-appearance order
std::vector<std::string> distinct_labels(const std::vector<DataItem>& items);

}  // namespace molang
