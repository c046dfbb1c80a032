#pragma once

#include <unordered_map>

#include "molang/transformer.hpp"

namespace molang {

inline constexpr int64_t kPadId = 0;
inline constexpr int64_t kUnkId = 1;
inline constexpr int64_t kClsId = 2;
inline constexpr int64_t kSepId = 3;

// Whitespace/punctuation tokenizer vocabulary, deterministic: sorted by
// descending frequency then lexicographically.
class Vocab {
 public:
  static Vocab build(const std::vector<std::string>& corpus, int min_freq = 1);

  int64_t id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnkId : it->second;
  }
  const std::string& token(int64_t id) const { return tokens_.at(static_cast<size_t>(id)); }
  int64_t size() const { return static_cast<int64_t>(tokens_.size()); }

  static std::vector<std::string> split_words(const std::string& text);

  std::string to_json() const;  // token array in id order, reserved included
  static Vocab from_json(const std::string& text);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int64_t> index_;
};

struct TokenSeq {
  std::vector<int64_t> ids;  // fixed length max_tokens, PAD-filled
  int64_t valid = 0;         // tokens before padding (CLS..SEP inclusive)
};

// [CLS] + word ids + [SEP], truncated to max_tokens with SEP kept last
TokenSeq tokenize(const std::string& text, const Vocab& vocab, int64_t max_tokens);

struct TextEncoderConfig {
  int layers = 2;
  int heads = 4;
  int model_dim = 64;
  int ffn_dim = 128;
  int max_tokens = 32;
  int projection_dim = 32;  // must match the motion projection space
  float dropout = 0.0f;

  void validate() const;
  std::string to_json() const;
  static TextEncoderConfig from_json(const std::string& text);

  TransformerStackConfig stack() const {
    return {layers, heads, model_dim, ffn_dim, dropout};
  }
};

class TextEncoder {
 public:
  TextEncoder(TextEncoderConfig cfg, Vocab vocab, Rng& init_rng);
  TextEncoder(TextEncoderConfig cfg, Vocab vocab, ParamStore store);

  // returns unit-norm projected vectors, [B, projection_dim]
  Var encode(ModelGraph& m, const std::vector<TokenSeq>& batch,
             Rng* dropout_rng = nullptr) const;

  Var encode_texts(ModelGraph& m, const std::vector<std::string>& texts,
                   Rng* dropout_rng = nullptr) const;

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const TextEncoderConfig& config() const { return cfg_; }
  const Vocab& vocab() const { return vocab_; }

  static int64_t expected_param_count(const TextEncoderConfig& cfg, int64_t vocab_size);

 private:
  TextEncoderConfig cfg_;
  Vocab vocab_;
  ParamStore params_;
};

}  // namespace molang
