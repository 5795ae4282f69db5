#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "styleswap/tensor.hpp"

namespace styleswap {

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kMask = 3;

enum class TokenClass { Special, Keyword, Filler, Marker };

/// Synthetic vocabulary: 4 specials, 50 keywords (k*), 50 fillers (f*) and
/// 10 markers per style (s1_*, s2_*, s3_*).
class Vocab {
 public:
  static constexpr int kKeywords = 50;
  static constexpr int kFillers = 50;
  static constexpr int kStyles = 3;
  static constexpr int kMarkersPerStyle = 10;

  Vocab();

  Index size() const { return static_cast<Index>(names_.size()); }
  const std::string& name(TokenId id) const;
  TokenId id(std::string_view name) const;

  TokenClass kind(TokenId id) const;
  bool is_marker(TokenId id) const { return kind(id) == TokenClass::Marker; }
  bool is_keyword(TokenId id) const { return kind(id) == TokenClass::Keyword; }
  bool is_filler(TokenId id) const { return kind(id) == TokenClass::Filler; }
  // 1..3 for markers, 0 otherwise.
  int marker_style(TokenId id) const;

  std::span<const TokenId> keywords() const { return keywords_; }
  std::span<const TokenId> fillers() const { return fillers_; }
  std::span<const TokenId> markers(int style) const;

  TokenIds parse(std::string_view line) const;
  std::string format(std::span<const TokenId> ids) const;

 private:
  std::vector<std::string> names_;
  std::map<std::string, TokenId, std::less<>> ids_;
  std::vector<TokenId> keywords_;
  std::vector<TokenId> fillers_;
  std::vector<std::vector<TokenId>> markers_;
};

const Vocab& default_vocab();

TokenIds keyword_subsequence(std::span<const TokenId> ids, const Vocab& vocab = default_vocab());
TokenIds strip_markers(std::span<const TokenId> ids, const Vocab& vocab = default_vocab());

enum class DecorationRule {
  None,           // s0: plain text
  Bracket,        // s1: one marker before, two after
  EverySecond,    // s2: a marker after every second content token
  WrapDuplicate,  // s3: wrap in markers, repeat the final keyword
};

struct StyleSpec {
  std::string style_id;
  int index = 0;  // 0 for the style-less s0
  DecorationRule rule = DecorationRule::None;
  std::vector<TokenId> markers;
};

// "s0".."s3"
StyleSpec style_spec(std::string_view style_id, const Vocab& vocab = default_vocab());
std::vector<std::string> all_style_ids();     // s0, s1, s2, s3
std::vector<std::string> marked_style_ids();  // s1, s2, s3

enum class TaskKind { Headline, Story };
std::string_view to_string(TaskKind k);
TaskKind parse_task(std::string_view text);

struct TaskPair {
  TokenIds source;
  TokenIds target;
  TaskKind kind = TaskKind::Headline;
};

template <typename T>
struct Splits {
  std::vector<T> train;
  std::vector<T> valid;
  std::vector<T> test;
};

// 90/5/5 split boundaries for n items: [0, train_end), [train_end, valid_end), [valid_end, n).
std::pair<std::size_t, std::size_t> split_bounds(std::size_t n);

template <typename T>
Splits<T> split_90_5_5(std::vector<T> items) {
  const auto [a, b] = split_bounds(items.size());
  Splits<T> s;
  s.train.assign(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(a));
  s.valid.assign(items.begin() + static_cast<std::ptrdiff_t>(a), items.begin() + static_cast<std::ptrdiff_t>(b));
  s.test.assign(items.begin() + static_cast<std::ptrdiff_t>(b), items.end());
  return s;
}

/// Headline: article interleaves 3-6 distinct keywords with 5-15 fillers,
/// the headline is the keyword subsequence. Story: source is 3-6 keywords,
/// target repeats each of them twice.
std::vector<TaskPair> gen_task_pairs(std::uint64_t seed, std::size_t n, TaskKind kind,
                                     const Vocab& vocab = default_vocab());

// 3-6 distinct keywords with 0-3 fillers mixed in; the undecorated sentence
// every style corpus starts from.
TokenIds plain_sentence(std::mt19937_64& rng, const Vocab& vocab = default_vocab());

// General text for base pretraining: 3-20 keyword/filler tokens with
// occasional markers of any style at random positions (no decoration rule).
TokenIds general_sentence(std::mt19937_64& rng, const Vocab& vocab = default_vocab());

TokenIds stylize(std::span<const TokenId> plain, const StyleSpec& style, std::mt19937_64& rng,
                 const Vocab& vocab = default_vocab());

struct NoiseRates {
  Scalar mask = 0.15;
  Scalar remove = 0.10;
};

/// g_n: each token independently masked or deleted. Markers are not exempt.
TokenIds noise_gn(std::span<const TokenId> t, NoiseRates rates, std::mt19937_64& rng);

/// g_p surrogate: drops every marker, collapses a repeated final keyword,
/// resamples fillers and shuffles adjacent fillers. Keyword order is kept.
TokenIds strip_style_gp(std::span<const TokenId> t, std::mt19937_64& rng, const Vocab& vocab = default_vocab());

enum class PretrainMode { InversePara, Denoise };
std::string_view to_string(PretrainMode m);
PretrainMode parse_mode(std::string_view text);

struct StyleExample {
  TokenIds sentence;    // t
  TokenIds paraphrase;  // g_p(t)
  TokenIds noised;      // g_n(t)
};

struct StyleCorpus {
  StyleSpec style;
  Splits<StyleExample> data;
};

StyleCorpus build_style_corpus(const StyleSpec& style, std::size_t n, std::uint64_t seed, NoiseRates rates = {},
                               const Vocab& vocab = default_vocab());

// ---------------------------------------------------------------------------
// Corpus files: one sequence per line, space separated token names.

struct CorpusSizes {
  std::size_t task = 10000;
  std::size_t style = 10000;
  std::size_t general = 20000;
};

struct DataManifest {
  std::uint64_t seed = 0;
  CorpusSizes sizes;
  NoiseRates rates;
  std::map<std::string, std::string> entries;  // all key=value lines
};

void write_sequences(const std::filesystem::path& path, std::span<const TokenIds> seqs,
                     const Vocab& vocab = default_vocab());
std::vector<TokenIds> read_sequences(const std::filesystem::path& path, const Vocab& vocab = default_vocab());

/// Writes task, style and pretraining corpora plus manifest.txt under dir.
DataManifest write_corpora(const std::filesystem::path& dir, std::uint64_t seed, CorpusSizes sizes,
                           NoiseRates rates = {}, const Vocab& vocab = default_vocab());
DataManifest read_manifest(const std::filesystem::path& dir);

struct DataPaths {
  static std::filesystem::path task_src(const std::filesystem::path& dir, TaskKind k, std::string_view split);
  static std::filesystem::path task_tgt(const std::filesystem::path& dir, TaskKind k, std::string_view split);
  static std::filesystem::path style_txt(const std::filesystem::path& dir, std::string_view style, std::string_view split);
  static std::filesystem::path style_src(const std::filesystem::path& dir, std::string_view style, PretrainMode m,
                                         std::string_view split);
  static std::filesystem::path general(const std::filesystem::path& dir, std::string_view split);
};

std::vector<TaskPair> read_task_split(const std::filesystem::path& dir, TaskKind kind, std::string_view split,
                                      const Vocab& vocab = default_vocab());
// (input, target) pairs for adapter pretraining.
std::vector<std::pair<TokenIds, TokenIds>> read_style_pairs(const std::filesystem::path& dir, std::string_view style,
                                                             PretrainMode mode, std::string_view split,
                                                             const Vocab& vocab = default_vocab());

}  // namespace styleswap
