#include "styleswap/decode.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>

#include "styleswap/styledata.hpp"

namespace styleswap {

ModelScorer::ModelScorer(const Model& model, const TokenIds& source) : model_(model) {
  NoTapeScope no_tape;
  encoded_ = model_.encode(std::span<const TokenIds>(&source, 1));
}

std::vector<Vector> ModelScorer::log_probs(const std::vector<TokenIds>& prefixes) const {
  NoTapeScope no_tape;
  Tensor logits = model_.decode(encoded_, prefixes);
  std::vector<Vector> out;
  out.reserve(prefixes.size());
  Index row = 0;
  for (const auto& p : prefixes) {
    row += static_cast<Index>(p.size());
    out.push_back(log_softmax(logits.value().row(row - 1)));
  }
  return out;
}

namespace {

struct Hypothesis {
  TokenIds tokens;
  Scalar score = 0.0;
  bool finished = false;
};

Scalar ranked_score(const Hypothesis& h, Scalar alpha) {
  if (alpha <= 0.0) return h.score;
  const auto len = static_cast<Scalar>(h.tokens.size() + (h.finished ? 1 : 0));
  return h.score / std::pow(std::max<Scalar>(len, 1.0), alpha);
}

// Strict weak order: better hypotheses first.
bool better(const Hypothesis& a, const Hypothesis& b, Scalar alpha) {
  const Scalar sa = ranked_score(a, alpha);
  const Scalar sb = ranked_score(b, alpha);
  if (sa != sb) return sa > sb;
  if (a.tokens.size() != b.tokens.size()) return a.tokens.size() < b.tokens.size();
  return a.tokens < b.tokens;
}

TokenIds with_bos(const NextTokenScorer& scorer, const TokenIds& tokens) {
  TokenIds p{scorer.bos()};
  p.insert(p.end(), tokens.begin(), tokens.end());
  return p;
}

std::vector<bool> banned_mask(const NextTokenScorer& scorer) {
  std::vector<bool> mask(static_cast<std::size_t>(scorer.vocab_size()), false);
  for (TokenId t : scorer.banned())
    if (t >= 0 && t < scorer.vocab_size()) mask[static_cast<std::size_t>(t)] = true;
  return mask;
}

}  // namespace

DecodeResult greedy(const NextTokenScorer& scorer, const DecodeConfig& cfg) {
  const auto banned = banned_mask(scorer);
  DecodeResult result;
  for (Index step = 0; step < cfg.max_len; ++step) {
    const Vector lp = scorer.log_probs({with_bos(scorer, result.tokens)}).front();
    Index best = -1;
    const bool eos_ok = static_cast<Index>(result.tokens.size()) >= cfg.min_len;
    for (Index v = 0; v < lp.size(); ++v) {
      if (banned[static_cast<std::size_t>(v)]) continue;
      if (!eos_ok && static_cast<TokenId>(v) == scorer.eos()) continue;
      // same order as beam ranking: a finished (shorter) hypothesis wins a tie
      if (best < 0 || lp(v) > lp(best) || (lp(v) == lp(best) && static_cast<TokenId>(v) == scorer.eos())) best = v;
    }
    result.score += lp(best);
    if (static_cast<TokenId>(best) == scorer.eos()) break;
    result.tokens.push_back(static_cast<TokenId>(best));
  }
  return result;
}

DecodeResult beam_search(const NextTokenScorer& scorer, const DecodeConfig& cfg) {
  if (cfg.beam_size < 1) throw std::invalid_argument("beam_size must be >= 1");
  if (cfg.min_len < 0) throw std::invalid_argument("min_len must be >= 0");
  const auto banned = banned_mask(scorer);
  const Scalar alpha = cfg.length_penalty;
  const auto k = static_cast<std::size_t>(cfg.beam_size);

  std::vector<Hypothesis> live{Hypothesis{}};
  std::vector<Hypothesis> pool;
  for (Index step = 0; step < cfg.max_len && !live.empty(); ++step) {
    std::vector<TokenIds> prefixes;
    prefixes.reserve(live.size());
    for (const auto& h : live) prefixes.push_back(with_bos(scorer, h.tokens));
    const std::vector<Vector> lps = scorer.log_probs(prefixes);

    std::vector<Hypothesis> candidates;
    for (std::size_t i = 0; i < live.size(); ++i) {
      const bool eos_ok = static_cast<Index>(live[i].tokens.size()) >= cfg.min_len;
      for (Index v = 0; v < lps[i].size(); ++v) {
        if (banned[static_cast<std::size_t>(v)]) continue;
        if (!eos_ok && static_cast<TokenId>(v) == scorer.eos()) continue;
        Hypothesis c;
        c.score = live[i].score + lps[i](v);
        c.tokens = live[i].tokens;
        if (static_cast<TokenId>(v) == scorer.eos()) c.finished = true;
        else c.tokens.push_back(static_cast<TokenId>(v));
        candidates.push_back(std::move(c));
      }
    }
    const std::size_t keep = std::min(k, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      [alpha](const Hypothesis& a, const Hypothesis& b) { return better(a, b, alpha); });
    live.clear();
    for (std::size_t i = 0; i < keep; ++i) {
      if (candidates[i].finished) pool.push_back(std::move(candidates[i]));
      else live.push_back(std::move(candidates[i]));
    }
    // Scores only decrease, so without length normalisation no live beam can
    // overtake the best finished hypothesis.
    if (alpha <= 0.0 && !pool.empty() && !live.empty()) {
      const Scalar best_done = std::max_element(pool.begin(), pool.end(), [](auto& a, auto& b) {
                                 return a.score < b.score;
                               })->score;
      const Scalar best_live = std::max_element(live.begin(), live.end(), [](auto& a, auto& b) {
                                 return a.score < b.score;
                               })->score;
      if (best_done >= best_live) live.clear();
    }
  }
  for (auto& h : live) pool.push_back(std::move(h));

  const auto best = std::min_element(pool.begin(), pool.end(),
                                     [alpha](const Hypothesis& a, const Hypothesis& b) { return better(a, b, alpha); });
  return DecodeResult{best->tokens, best->score, {}};
}

DecodeResult greedy(const Model& model, const TokenIds& source, const DecodeConfig& cfg) {
  ModelScorer scorer(model, source);
  DecodeResult r = greedy(scorer, cfg);
  r.style_id = model.adapters().style_id();
  return r;
}

DecodeResult beam_search(const Model& model, const TokenIds& source, const DecodeConfig& cfg) {
  ModelScorer scorer(model, source);
  DecodeResult r = beam_search(scorer, cfg);
  r.style_id = model.adapters().style_id();
  return r;
}

std::vector<TokenIds> generate_all(const Model& model, const std::vector<TokenIds>& sources, const DecodeConfig& cfg,
                                   std::vector<Scalar>* scores) {
  std::vector<TokenIds> out;
  out.reserve(sources.size());
  for (const auto& s : sources) {
    DecodeResult r = beam_search(model, s.empty() ? TokenIds{kMask} : s, cfg);
    out.push_back(std::move(r.tokens));
    if (scores) scores->push_back(r.score);
  }
  return out;
}

BatchOutput generate_batch(const Model& model, const std::filesystem::path& input_file,
                           const std::filesystem::path& output_file, const DecodeConfig& cfg) {
  const auto sources = read_sequences(input_file);
  BatchOutput out;
  out.outputs = generate_all(model, sources, cfg, &out.scores);
  write_sequences(output_file, out.outputs);
  std::ofstream sc(output_file.string() + ".scores", std::ios::binary);
  if (!sc) throw std::runtime_error("cannot write " + output_file.string() + ".scores");
  sc << std::setprecision(17);
  for (Scalar s : out.scores) sc << s << '\n';
  return out;
}

}  // namespace styleswap
