#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "styleswap/model.hpp"

namespace styleswap {

struct DecodeConfig {
  Index beam_size = 4;
  Index max_len = 24;
  Scalar length_penalty = 0.0;  // alpha; score / len^alpha when > 0
  Index min_len = 1;            // </s> is not proposed before this many tokens
};

struct DecodeResult {
  TokenIds tokens;  // without <s> / </s>
  Scalar score = 0.0;
  std::string style_id;
};

/// Next-token log-probabilities for a batch of prefixes (each starting at <s>).
class NextTokenScorer {
 public:
  virtual ~NextTokenScorer() = default;
  virtual Index vocab_size() const = 0;
  virtual std::vector<Vector> log_probs(const std::vector<TokenIds>& prefixes) const = 0;
  virtual TokenId bos() const { return 1; }
  // Negative when the instance has no end token (fixed-length search).
  virtual TokenId eos() const { return 2; }
  // Never proposed as a next token.
  virtual std::vector<TokenId> banned() const { return {0, 1, 3}; }
};

/// Scores continuations with a model whose adapter slot is already filled.
class ModelScorer final : public NextTokenScorer {
 public:
  ModelScorer(const Model& model, const TokenIds& source);
  Index vocab_size() const override { return model_.config().vocab_size; }
  std::vector<Vector> log_probs(const std::vector<TokenIds>& prefixes) const override;

 private:
  const Model& model_;
  Encoded encoded_;
};

/// Argmax per step; ties go to </s>, then the lowest token id. Stops at </s>
/// or max_len.
/// Both searches withhold </s> until min_len tokens exist.
DecodeResult greedy(const NextTokenScorer& scorer, const DecodeConfig& cfg);

/// Beam search with finished hypotheses retired into a pool. Ranking: higher
/// (optionally length-normalised) score, then shorter, then lexicographically
/// smaller token ids.
DecodeResult beam_search(const NextTokenScorer& scorer, const DecodeConfig& cfg);

DecodeResult greedy(const Model& model, const TokenIds& source, const DecodeConfig& cfg);
DecodeResult beam_search(const Model& model, const TokenIds& source, const DecodeConfig& cfg);

struct BatchOutput {
  std::vector<TokenIds> outputs;
  std::vector<Scalar> scores;
};

/// Decodes every line of `input_file` with the adapters currently installed
/// and writes one output line per input line (scores to `<output>.scores`).
BatchOutput generate_batch(const Model& model, const std::filesystem::path& input_file,
                           const std::filesystem::path& output_file, const DecodeConfig& cfg);

std::vector<TokenIds> generate_all(const Model& model, const std::vector<TokenIds>& sources, const DecodeConfig& cfg,
                                   std::vector<Scalar>* scores = nullptr);

}  // namespace styleswap
