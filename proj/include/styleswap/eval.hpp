#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "styleswap/styledata.hpp"
#include "styleswap/tensor.hpp"

namespace styleswap {

enum class RougeVariant { One, Two, L };

/// F1 of clipped n-gram overlap (One, Two) or of the longest common
/// subsequence (L). No stemming or stopword handling.
Scalar rouge(std::span<const TokenId> candidate, std::span<const TokenId> reference, RougeVariant variant);
// Mean over aligned pairs.
Scalar corpus_rouge(const std::vector<TokenIds>& candidates, const std::vector<TokenIds>& references,
                    RougeVariant variant);

std::size_t lcs_length(std::span<const TokenId> a, std::span<const TokenId> b);

/// Add-k smoothed n-gram LM over a fixed vocabulary, sentences padded with
/// order-1 <s> on the left and one </s> on the right.
class NgramLM {
 public:
  NgramLM(int order, Scalar k, Index vocab_size, std::string tag);

  static NgramLM train(const std::vector<TokenIds>& corpus, int order = 2, Scalar k = 0.1,
                       Index vocab_size = default_vocab().size(), std::string tag = "plain");

  int order() const { return order_; }
  Scalar k() const { return k_; }
  Index vocab_size() const { return vocab_size_; }
  const std::string& tag() const { return tag_; }

  // p(next | context); only the last order-1 context tokens are used.
  Scalar prob(std::span<const TokenId> context, TokenId next) const;
  // Sum of log p over the sentence tokens and the closing </s>.
  Scalar sentence_log_prob(std::span<const TokenId> sentence) const;

 private:
  struct Counts {
    Scalar total = 0.0;
    std::map<TokenId, Scalar> next;
  };
  TokenIds context_key(std::span<const TokenId> context) const;

  int order_;
  Scalar k_;
  Index vocab_size_;
  std::string tag_;
  std::map<TokenIds, Counts> counts_;
};

/// exp of the mean negative log-likelihood per predicted token (</s> counted,
/// <s> not).
Scalar perplexity(const NgramLM& lm, const std::vector<TokenIds>& sequences);

/// Fraction of lines that carry at least one marker of `style` and none of
/// any other style.
Scalar style_marker_rate(const std::vector<TokenIds>& outputs, const StyleSpec& style,
                         const Vocab& vocab = default_vocab());

struct MetricsReport {
  Scalar exact = 0.0;  // fraction of outputs identical to their reference
  Scalar r1 = 0.0;
  Scalar r2 = 0.0;
  Scalar rl = 0.0;
  std::optional<Scalar> bert_proxy;
  Scalar ppl = 0.0;
  std::map<std::string, Scalar> ppl_s;   // style id -> PPL under that style's LM
  std::map<std::string, Scalar> marker;  // style id -> style_marker_rate
  std::map<std::string, std::string> labels;  // free-form run descriptors (task, style, ...)

  void validate() const;
  bool operator==(const MetricsReport&) const = default;
};

struct MetricLMs {
  const NgramLM* plain = nullptr;
  std::map<std::string, const NgramLM*> styles;
};

/// Assembles ROUGE, PPL, PPL-S and marker rates for one generation run. When
/// `embeddings` is given, also reports the BERT-proxy (mean cosine of
/// mean-pooled token embeddings).
MetricsReport evaluate_run(const std::vector<TokenIds>& outputs, const std::vector<TokenIds>& references,
                           const MetricLMs& lms, const std::vector<StyleSpec>& styles,
                           const Matrix* embeddings = nullptr);

std::string format_report(const MetricsReport& report);
MetricsReport parse_report(const std::string& text);
void write_report(const std::filesystem::path& path, const MetricsReport& report);
MetricsReport read_report(const std::filesystem::path& path);

}  // namespace styleswap
