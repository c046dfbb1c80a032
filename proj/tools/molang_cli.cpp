#include <filesystem>
#include <fstream>
#include <iostream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "json.hpp"
#include "molang/train_eval.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace molang;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw CLI::ValidationError("--config", "cannot open " + path);
  return json::parse(in);
}

// flags > config file > defaults
template <typename T>
void overlay(const CLI::App* cmd, const std::string& flag, const json& cfg, const char* key,
             T& value) {
  if (cmd->count(flag) == 0 && cfg.contains(key)) value = cfg.at(key).get<T>();
}

void persist_config(const std::string& out_dir, const json& resolved) {
  fs::create_directories(out_dir);
  std::ofstream out(fs::path(out_dir) / "config.json");
  out << resolved.dump(2) << "\n";
}

struct EncoderFlags {
  std::string preset = "desk";
  bool no_gcb = false;
  int layers = -1, heads = -1, model_dim = -1, ffn_dim = -1;
  int gcb_after = -1, gcb_dim = -1, proj = -1;
  double dropout = -1.0;

  void attach(CLI::App* cmd) {
    cmd->add_option("--preset", preset, "encoder preset: paper|desk")
        ->check(CLI::IsMember({"paper", "desk"}));
    cmd->add_flag("--no-gcb", no_gcb, "build the encoder without the graph bottleneck");
    cmd->add_option("--layers", layers, "encoder layers");
    cmd->add_option("--heads", heads, "attention heads");
    cmd->add_option("--dim", model_dim, "model width");
    cmd->add_option("--ffn", ffn_dim, "feed-forward width");
    cmd->add_option("--gcb-after", gcb_after, "insert the graph bottleneck after this layer");
    cmd->add_option("--gcb-dim", gcb_dim, "per-joint bottleneck width");
    cmd->add_option("--proj", proj, "projection dimension");
    cmd->add_option("--dropout", dropout, "dropout probability");
  }

  MotionEncoderConfig resolve(const json& cfg) const {
    std::string p = preset;
    if (cfg.contains("preset")) p = cfg.at("preset").get<std::string>();
    MotionEncoderConfig c = MotionEncoderConfig::preset(p);
    auto pick = [&](const char* key, int flag_val, int& field) {
      if (flag_val >= 0)
        field = flag_val;
      else if (cfg.contains(key))
        field = cfg.at(key).get<int>();
    };
    pick("layers", layers, c.layers);
    pick("heads", heads, c.heads);
    pick("model_dim", model_dim, c.model_dim);
    pick("ffn_dim", ffn_dim, c.ffn_dim);
    pick("gcb_after_layer", gcb_after, c.gcb_after_layer);
    pick("gcb_joint_dim", gcb_dim, c.gcb_joint_dim);
    pick("projection_dim", proj, c.projection_dim);
    if (dropout >= 0.0)
      c.dropout = static_cast<float>(dropout);
    else if (cfg.contains("dropout"))
      c.dropout = cfg.at("dropout").get<float>();
    if (no_gcb || (cfg.contains("use_gcb") && !cfg.at("use_gcb").get<bool>())) c.use_gcb = false;
    c.validate();
    return c;
  }

  TextEncoderConfig resolve_text(const MotionEncoderConfig& m, const json& cfg) const {
    TextEncoderConfig t;
    if (cfg.contains("text")) t = TextEncoderConfig::from_json(cfg.at("text").dump());
    t.projection_dim = m.projection_dim;
    if (preset == "paper" || (cfg.contains("preset") && cfg.at("preset") == "paper")) {
      t.model_dim = 256;
      t.ffn_dim = 512;
      t.layers = 4;
    }
    t.validate();
    return t;
  }
};

json encoder_json(const MotionEncoderConfig& c) { return json::parse(c.to_json()); }

void print_stage_result(const char* stage, const StageResult& r) {
  json line = {{"stage", stage},
               {"epochs_run", r.epochs_run},
               {"final_loss", r.last.total},
               {"last_checkpoint", r.last_checkpoint},
               {"best_checkpoint", r.best_checkpoint}};
  std::cout << line.dump() << "\n";
}

int run(int argc, char** argv) {
  CLI::App app{"motion-language pipeline: synthesis, training, evaluation"};
  app.require_subcommand(1);

  // ---- synth ----
  auto* synth = app.add_subcommand("synth", "generate the procedural dataset");
  std::string synth_spec, synth_out = "data";
  uint64_t synth_seed = 0;
  synth->add_option("--spec", synth_spec, "JSON spec file (default: built-in 8 classes)");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->callback([&] {
    SynthSpec spec = SynthSpec::default_spec();
    if (!synth_spec.empty()) {
      std::ifstream in(synth_spec);
      if (!in) throw std::runtime_error("cannot open spec " + synth_spec);
      std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      spec = SynthSpec::from_json(text);
    }
    auto [train_m, test_m] = synth_write_dataset(spec, synth_seed, synth_out);
    DatasetManifest tr = load_manifest(train_m), te = load_manifest(test_m);
    json out = {{"train_manifest", train_m},
                {"test_manifest", test_m},
                {"train_clips", tr.entries.size()},
                {"test_clips", te.entries.size()},
                {"train_fingerprint", tr.fingerprint},
                {"test_fingerprint", te.fingerprint}};
    std::cout << out.dump() << "\n";
    persist_config(synth_out, {{"command", "synth"}, {"seed", synth_seed}});
  });

  // ---- pretrain ----
  auto* pre = app.add_subcommand("pretrain", "masked-motion pretraining of the motion encoder");
  std::string pre_data, pre_out = "runs/pretrain", pre_cfg_path, pre_resume;
  PretrainConfig pc;
  EncoderFlags pre_enc;
  pre->add_option("--data", pre_data, "training manifest")->required();
  pre->add_option("--out", pre_out, "output directory");
  pre->add_option("--config", pre_cfg_path, "JSON config file");
  pre->add_option("--seed", pc.seed, "seed");
  pre->add_option("--epochs", pc.epochs, "epochs");
  pre->add_option("--batch-size", pc.batch_size, "batch size");
  pre->add_option("--resume", pre_resume, "checkpoint to resume from");
  pre_enc.attach(pre);
  pre->callback([&] {
    json cfg = load_config_file(pre_cfg_path);
    pc.encoder = pre_enc.resolve(cfg);
    overlay(pre, "--seed", cfg, "seed", pc.seed);
    overlay(pre, "--epochs", cfg, "epochs", pc.epochs);
    overlay(pre, "--batch-size", cfg, "batch_size", pc.batch_size);
    pc.out_dir = pre_out;
    pc.resume_from = pre_resume;
    std::vector<DataItem> data = load_dataset(pre_data);
    persist_config(pre_out, {{"command", "pretrain"},
                             {"data", pre_data},
                             {"seed", pc.seed},
                             {"epochs", pc.epochs},
                             {"batch_size", pc.batch_size},
                             {"encoder", encoder_json(pc.encoder)}});
    print_stage_result("pretrain", pretrain_mmp(data, pc));
  });

  // ---- train ----
  auto* train = app.add_subcommand("train", "contrastive motion-text training");
  std::string tr_data, tr_out = "runs/train", tr_cfg_path, tr_init, tr_resume;
  bool tr_no_recon = false, tr_no_mask = false;
  ContrastiveConfig cc;
  EncoderFlags tr_enc;
  train->add_option("--data", tr_data, "training manifest")->required();
  train->add_option("--out", tr_out, "output directory");
  train->add_option("--config", tr_cfg_path, "JSON config file");
  train->add_option("--seed", cc.seed, "seed");
  train->add_option("--epochs", cc.epochs, "epochs");
  train->add_option("--batch-size", cc.batch_size, "batch size");
  train->add_option("--alpha", cc.alpha, "reconstruction loss weight");
  train->add_flag("--no-recon", tr_no_recon, "disable the auxiliary reconstruction loss");
  train->add_flag("--no-mask", tr_no_mask, "train on unmasked motion");
  train->add_option("--init", tr_init, "pretrained motion encoder checkpoint");
  train->add_option("--resume", tr_resume, "checkpoint to resume from");
  tr_enc.attach(train);
  train->callback([&] {
    json cfg = load_config_file(tr_cfg_path);
    cc.encoder = tr_enc.resolve(cfg);
    cc.text = tr_enc.resolve_text(cc.encoder, cfg);
    overlay(train, "--seed", cfg, "seed", cc.seed);
    overlay(train, "--epochs", cfg, "epochs", cc.epochs);
    overlay(train, "--batch-size", cfg, "batch_size", cc.batch_size);
    overlay(train, "--alpha", cfg, "alpha", cc.alpha);
    overlay(train, "--init", cfg, "motion_init", tr_init);
    if (tr_no_recon) cc.alpha = 0.0;
    cc.masking = !tr_no_mask;
    cc.motion_init = tr_init;
    cc.out_dir = tr_out;
    cc.resume_from = tr_resume;
    std::vector<DataItem> data = load_dataset(tr_data);
    persist_config(tr_out, {{"command", "train"},
                            {"data", tr_data},
                            {"seed", cc.seed},
                            {"epochs", cc.epochs},
                            {"batch_size", cc.batch_size},
                            {"alpha", cc.alpha},
                            {"masking", cc.masking},
                            {"motion_init", cc.motion_init},
                            {"encoder", encoder_json(cc.encoder)},
                            {"text", json::parse(cc.text.to_json())}});
    print_stage_result("contrastive", train_contrastive(data, cc));
  });

  // ---- finetune ----
  auto* ft = app.add_subcommand("finetune", "continue training with class labels as texts");
  std::string ft_data, ft_ckpt, ft_out = "runs/finetune", ft_cfg_path;
  FinetuneConfig fc;
  ft->add_option("--data", ft_data, "training manifest")->required();
  ft->add_option("--ckpt", ft_ckpt, "joint model checkpoint")->required();
  ft->add_option("--out", ft_out, "output directory");
  ft->add_option("--config", ft_cfg_path, "JSON config file");
  ft->add_option("--seed", fc.seed, "seed");
  ft->add_option("--epochs", fc.epochs, "epochs");
  ft->add_option("--batch-size", fc.batch_size, "batch size");
  ft->callback([&] {
    json cfg = load_config_file(ft_cfg_path);
    overlay(ft, "--seed", cfg, "seed", fc.seed);
    overlay(ft, "--epochs", cfg, "epochs", fc.epochs);
    overlay(ft, "--batch-size", cfg, "batch_size", fc.batch_size);
    fc.out_dir = ft_out;
    std::vector<DataItem> data = load_dataset(ft_data);
    persist_config(ft_out, {{"command", "finetune"},
                            {"data", ft_data},
                            {"ckpt", ft_ckpt},
                            {"seed", fc.seed},
                            {"epochs", fc.epochs},
                            {"batch_size", fc.batch_size}});
    print_stage_result("finetune", finetune(data, ft_ckpt, fc));
  });

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "recognition or retrieval evaluation");
  std::string ev_task, ev_ckpt, ev_data, ev_out;
  int ev_candidates = 15, ev_questions = 450;
  uint64_t ev_seed = 0;
  ev->add_option("--task", ev_task, "recognition|retrieval")
      ->required()
      ->check(CLI::IsMember({"recognition", "retrieval"}));
  ev->add_option("--ckpt", ev_ckpt, "joint model checkpoint")->required();
  ev->add_option("--data", ev_data, "evaluation manifest")->required();
  ev->add_option("--out", ev_out, "directory for CSV artifacts");
  ev->add_option("--candidates", ev_candidates, "retrieval candidates per question");
  ev->add_option("--questions", ev_questions, "retrieval question count");
  ev->add_option("--seed", ev_seed, "retrieval question seed");
  ev->callback([&] {
    MolangModel model = MolangModel::load(ev_ckpt);
    std::vector<DataItem> data = load_dataset(ev_data);
    if (ev_task == "recognition") {
      std::vector<std::string> labels = distinct_labels(data);
      RecognitionResult r = eval_recognition(model, data, labels);
      std::cout << json{{"accuracy", r.accuracy}, {"items", data.size()}}.dump() << "\n";
      if (!ev_out.empty()) {
        fs::create_directories(ev_out);
        std::ofstream cm(fs::path(ev_out) / "confusion.csv");
        cm << "true\\pred";
        for (const std::string& l : r.labels) cm << "," << l;
        cm << "\n";
        for (size_t i = 0; i < r.labels.size(); ++i) {
          cm << r.labels[i];
          for (int v : r.confusion[i]) cm << "," << v;
          cm << "\n";
        }
        std::ofstream top(fs::path(ev_out) / "top3.txt");
        for (size_t i = 0; i < r.top3.size(); ++i) {
          top << "clip " << i << " (" << data[i].label << ")\n";
          for (const auto& [idx, sim] : r.top3[i]) {
            top << "  " << r.labels[static_cast<size_t>(idx)] << "  " << sim << "\n";
          }
        }
      }
    } else {
      auto questions = build_retrieval_questions(data, ev_candidates, ev_questions, ev_seed);
      RetrievalResult r = eval_retrieval(model, data, questions);
      std::cout << json{{"top1", r.top1}, {"top3", r.top3}, {"questions", questions.size()}}.dump()
                << "\n";
      if (!ev_out.empty()) {
        fs::create_directories(ev_out);
        std::ofstream csv(fs::path(ev_out) / "retrieval.csv");
        csv << "top1,top3,questions\n"
            << r.top1 << "," << r.top3 << "," << questions.size() << "\n";
      }
    }
  });

  // ---- ablate ----
  auto* ab = app.add_subcommand("ablate", "2^3 toggle grid over {MMP, GCB, CstAR}");
  std::string ab_train, ab_test, ab_out = "runs/ablate";
  AblationConfig ac;
  int ab_seeds = 3;
  size_t ab_max_items = 0;
  ab->add_option("--data", ab_train, "training manifest")->required();
  ab->add_option("--test", ab_test, "test manifest")->required();
  ab->add_option("--out", ab_out, "output directory");
  ab->add_option("--seeds", ab_seeds, "number of seeds (0..n-1)");
  ab->add_option("--pretrain-epochs", ac.pretrain_epochs, "stage-1 epochs per variant");
  ab->add_option("--pretrain-batch-size", ac.pretrain_batch_size, "stage-1 batch size");
  ab->add_option("--epochs", ac.contrastive_epochs, "stage-2 epochs per variant");
  ab->add_option("--batch-size", ac.batch_size, "batch size");
  ab->add_option("--max-items", ab_max_items, "cap on training items (0 = all)");
  ab->add_option("--candidates", ac.retrieval_candidates, "retrieval candidates");
  ab->add_option("--questions", ac.retrieval_questions, "retrieval questions");
  ab->callback([&] {
    ac.seeds.clear();
    for (int s = 0; s < ab_seeds; ++s) ac.seeds.push_back(static_cast<uint64_t>(s));
    ac.out_dir = ab_out;
    std::vector<DataItem> train_items = load_dataset(ab_train);
    std::vector<DataItem> test_items = load_dataset(ab_test);
    if (ab_max_items > 0 && train_items.size() > ab_max_items) train_items.resize(ab_max_items);
    persist_config(ab_out, {{"command", "ablate"},
                            {"data", ab_train},
                            {"test", ab_test},
                            {"seeds", ab_seeds},
                            {"pretrain_epochs", ac.pretrain_epochs},
                            {"epochs", ac.contrastive_epochs},
                            {"batch_size", ac.batch_size},
                            {"max_items", ab_max_items}});
    std::vector<AblationRow> rows = ablation_run(train_items, test_items, ac);
    std::cout << "mmp gcb cstar  accuracy  top1   top3\n";
    for (const AblationRow& r : rows) {
      char line[96];
      std::snprintf(line, sizeof(line), " %c   %c   %c     %.4f  %.4f %.4f\n",
                    r.mmp ? '+' : '-', r.gcb ? '+' : '-', r.cstar ? '+' : '-', r.accuracy,
                    r.top1, r.top3);
      std::cout << line;
    }
  });

  // ---- embed ----
  auto* em = app.add_subcommand("embed", "export projected embeddings as CSV");
  std::string em_ckpt, em_data, em_out, em_what = "motion";
  em->add_option("--ckpt", em_ckpt, "joint model checkpoint")->required();
  em->add_option("--data", em_data, "manifest")->required();
  em->add_option("--out", em_out, "output CSV path")->required();
  em->add_option("--what", em_what, "motion|text")->check(CLI::IsMember({"motion", "text"}));
  em->callback([&] {
    MolangModel model = MolangModel::load(em_ckpt);
    std::vector<DataItem> data = load_dataset(em_data);
    std::ofstream csv(em_out);
    if (!csv) throw std::runtime_error("cannot write " + em_out);
    Tensor emb;
    if (em_what == "motion") {
      std::vector<const DataItem*> ptrs;
      for (const DataItem& it : data) ptrs.push_back(&it);
      emb = model.embed_motions(ptrs);
    } else {
      std::vector<std::string> texts;
      for (const DataItem& it : data) texts.push_back(it.text);
      emb = model.embed_texts(texts);
    }
    int64_t d = emb.shape.back();
    csv << "id,label";
    for (int64_t k = 0; k < d; ++k) csv << ",v" << k;
    csv << "\n";
    for (size_t i = 0; i < data.size(); ++i) {
      csv << i << "," << data[i].label;
      for (int64_t k = 0; k < d; ++k)
        csv << "," << emb.data[i * static_cast<size_t>(d) + static_cast<size_t>(k)];
      csv << "\n";
    }
    std::cout << json{{"rows", data.size()}, {"dim", d}, {"out", em_out}}.dump() << "\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // training allocates and frees large activation buffers every step; keep
  // them in the arena instead of bouncing pages through mmap/munmap
  mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
#endif
  try {
    return run(argc, argv);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const NanGradientError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}
