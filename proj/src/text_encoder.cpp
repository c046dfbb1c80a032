#include "molang/text_encoder.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include "json.hpp"

using nlohmann::json;

namespace molang {

std::vector<std::string> Vocab::split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    unsigned char c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c == '\'') {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

Vocab Vocab::build(const std::vector<std::string>& corpus, int min_freq) {
  if (corpus.empty()) throw std::invalid_argument("build_vocab: empty corpus");
  std::map<std::string, int64_t> freq;
  for (const std::string& text : corpus)
    for (const std::string& w : split_words(text)) ++freq[w];

  std::vector<std::pair<std::string, int64_t>> sorted(freq.begin(), freq.end());
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocab v;
  v.tokens_ = {"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
  for (const auto& [word, count] : sorted) {
    if (count < min_freq) continue;
    v.tokens_.push_back(word);
  }
  for (size_t i = 0; i < v.tokens_.size(); ++i) v.index_[v.tokens_[i]] = static_cast<int64_t>(i);
  return v;
}

std::string Vocab::to_json() const { return json(tokens_).dump(); }

Vocab Vocab::from_json(const std::string& text) {
  Vocab v;
  for (const auto& t : json::parse(text)) v.tokens_.push_back(t.get<std::string>());
  if (v.tokens_.size() < 4 || v.tokens_[0] != "[PAD]" || v.tokens_[2] != "[CLS]") {
    throw std::runtime_error("vocab json: missing reserved tokens");
  }
  for (size_t i = 0; i < v.tokens_.size(); ++i) v.index_[v.tokens_[i]] = static_cast<int64_t>(i);
  return v;
}

TokenSeq tokenize(const std::string& text, const Vocab& vocab, int64_t max_tokens) {
  TokenSeq seq;
  seq.ids.assign(static_cast<size_t>(max_tokens), kPadId);
  seq.ids[0] = kClsId;
  int64_t pos = 1;
  for (const std::string& w : Vocab::split_words(text)) {
    if (pos >= max_tokens - 1) break;  // reserve the last kept slot for SEP
    seq.ids[static_cast<size_t>(pos++)] = vocab.id(w);
  }
  seq.ids[static_cast<size_t>(pos++)] = kSepId;
  seq.valid = pos;
  return seq;
}

void TextEncoderConfig::validate() const {
  if (model_dim % heads != 0) {
    throw std::invalid_argument("text encoder: model_dim not divisible by heads");
  }
}

std::string TextEncoderConfig::to_json() const {
  return json{{"layers", layers},       {"heads", heads},
              {"model_dim", model_dim}, {"ffn_dim", ffn_dim},
              {"max_tokens", max_tokens}, {"projection_dim", projection_dim},
              {"dropout", dropout}}
      .dump();
}

TextEncoderConfig TextEncoderConfig::from_json(const std::string& text) {
  json doc = json::parse(text);
  TextEncoderConfig c;
  c.layers = doc.at("layers").get<int>();
  c.heads = doc.at("heads").get<int>();
  c.model_dim = doc.at("model_dim").get<int>();
  c.ffn_dim = doc.at("ffn_dim").get<int>();
  c.max_tokens = doc.at("max_tokens").get<int>();
  c.projection_dim = doc.at("projection_dim").get<int>();
  c.dropout = doc.at("dropout").get<float>();
  return c;
}

TextEncoder::TextEncoder(TextEncoderConfig cfg, Vocab vocab, Rng& init_rng)
    : cfg_(cfg), vocab_(std::move(vocab)) {
  cfg_.validate();
  int64_t d = cfg_.model_dim;
  params_.create("tok_embed", init_embedding(vocab_.size(), d, init_rng));
  params_.create("pos_embed", init_embedding(cfg_.max_tokens, d, init_rng));
  init_transformer_params(params_, "enc", cfg_.stack(), init_rng);
  params_.create("ln_f.g", Tensor::full({d}, 1.0f));
  params_.create("ln_f.b", Tensor::zeros({d}));
  params_.create("proj.w", init_linear_weight(d, cfg_.projection_dim, init_rng));
}

TextEncoder::TextEncoder(TextEncoderConfig cfg, Vocab vocab, ParamStore store)
    : cfg_(cfg), vocab_(std::move(vocab)), params_(std::move(store)) {
  cfg_.validate();
}

int64_t TextEncoder::expected_param_count(const TextEncoderConfig& cfg, int64_t vocab_size) {
  int64_t d = cfg.model_dim;
  int64_t n = vocab_size * d + cfg.max_tokens * d;
  n += transformer_param_count(cfg.stack());
  n += 2 * d;
  n += d * cfg.projection_dim;
  return n;
}

Var TextEncoder::encode(ModelGraph& m, const std::vector<TokenSeq>& batch,
                        Rng* dropout_rng) const {
  Tape& t = m.tape();
  bool training = dropout_rng != nullptr;

  // PAD tokens are dropped from the packed layout entirely, so they cannot
  // influence any other token's state
  PackedOffsets po;
  po.offsets.assign(1, 0);
  std::vector<int64_t> tok_ids, pos_ids, cls_pos;
  for (const TokenSeq& seq : batch) {
    cls_pos.push_back(po.offsets.back());
    po.offsets.push_back(po.offsets.back() + seq.valid);
    for (int64_t i = 0; i < seq.valid; ++i) {
      tok_ids.push_back(seq.ids[static_cast<size_t>(i)]);
      pos_ids.push_back(i);
    }
  }

  Var x = ops::add(t, ops::gather_rows(t, m.p("tok_embed"), tok_ids),
                   ops::gather_rows(t, m.p("pos_embed"), pos_ids));
  if (dropout_rng) x = ops::dropout(t, x, cfg_.dropout, *dropout_rng, training);

  TransformerStackConfig stack = cfg_.stack();
  for (int l = 0; l < cfg_.layers; ++l)
    x = transformer_block(m, x, po, "enc", l, stack, dropout_rng, training);
  x = ops::layer_norm(t, x, m.p("ln_f.g"), m.p("ln_f.b"));

  Var cls = ops::select_rows(t, x, cls_pos);
  return ops::l2_normalize_rows(t, ops::linear(t, cls, m.p("proj.w")));
}

Var TextEncoder::encode_texts(ModelGraph& m, const std::vector<std::string>& texts,
                              Rng* dropout_rng) const {
  std::vector<TokenSeq> batch;
  batch.reserve(texts.size());
  for (const std::string& s : texts) batch.push_back(tokenize(s, vocab_, cfg_.max_tokens));
  return encode(m, batch, dropout_rng);
}

}  // namespace molang
