#include "styleswap/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace styleswap {

namespace {

std::map<TokenIds, int> ngram_counts(std::span<const TokenId> seq, std::size_t n) {
  std::map<TokenIds, int> counts;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) ++counts[TokenIds(seq.begin() + i, seq.begin() + i + n)];
  return counts;
}

Scalar f1(Scalar overlap, Scalar cand_total, Scalar ref_total) {
  if (overlap <= 0.0 || cand_total <= 0.0 || ref_total <= 0.0) return 0.0;
  const Scalar p = overlap / cand_total;
  const Scalar r = overlap / ref_total;
  return 2.0 * p * r / (p + r);
}

}  // namespace

std::size_t lcs_length(std::span<const TokenId> a, std::span<const TokenId> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

Scalar rouge(std::span<const TokenId> candidate, std::span<const TokenId> reference, RougeVariant variant) {
  if (reference.empty()) throw std::invalid_argument("rouge: empty reference");
  if (variant == RougeVariant::L) {
    return f1(static_cast<Scalar>(lcs_length(candidate, reference)), static_cast<Scalar>(candidate.size()),
              static_cast<Scalar>(reference.size()));
  }
  const std::size_t n = variant == RougeVariant::One ? 1 : 2;
  const auto c = ngram_counts(candidate, n);
  const auto r = ngram_counts(reference, n);
  Scalar overlap = 0.0;
  for (const auto& [gram, count] : c) {
    auto it = r.find(gram);
    if (it != r.end()) overlap += std::min(count, it->second);
  }
  const auto total = [n](std::size_t len) { return len >= n ? static_cast<Scalar>(len - n + 1) : 0.0; };
  return f1(overlap, total(candidate.size()), total(reference.size()));
}

Scalar corpus_rouge(const std::vector<TokenIds>& candidates, const std::vector<TokenIds>& references,
                    RougeVariant variant) {
  if (candidates.size() != references.size())
    throw std::invalid_argument("corpus_rouge: " + std::to_string(candidates.size()) + " candidates vs " +
                                std::to_string(references.size()) + " references");
  if (candidates.empty()) throw std::invalid_argument("corpus_rouge: no pairs");
  Scalar sum = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) sum += rouge(candidates[i], references[i], variant);
  return sum / static_cast<Scalar>(candidates.size());
}

// ---------------------------------------------------------------------------

NgramLM::NgramLM(int order, Scalar k, Index vocab_size, std::string tag)
    : order_(order), k_(k), vocab_size_(vocab_size), tag_(std::move(tag)) {
  if (order < 1) throw std::invalid_argument("NgramLM: order must be >= 1");
  if (!(k > 0.0)) throw std::invalid_argument("NgramLM: smoothing constant must be positive");
  if (vocab_size < 1) throw std::invalid_argument("NgramLM: empty vocabulary");
}

TokenIds NgramLM::context_key(std::span<const TokenId> context) const {
  const std::size_t need = static_cast<std::size_t>(order_ - 1);
  TokenIds key(need, kBos);
  const std::size_t take = std::min(need, context.size());
  std::copy(context.end() - static_cast<std::ptrdiff_t>(take), context.end(),
            key.end() - static_cast<std::ptrdiff_t>(take));
  return key;
}

NgramLM NgramLM::train(const std::vector<TokenIds>& corpus, int order, Scalar k, Index vocab_size, std::string tag) {
  if (corpus.empty()) throw std::invalid_argument("NgramLM::train: empty corpus");
  NgramLM lm(order, k, vocab_size, std::move(tag));
  for (const auto& sentence : corpus) {
    TokenIds history;
    for (std::size_t i = 0; i <= sentence.size(); ++i) {
      const TokenId next = i < sentence.size() ? sentence[i] : kEos;
      auto& c = lm.counts_[lm.context_key(history)];
      c.total += 1.0;
      c.next[next] += 1.0;
      history.push_back(next);
    }
  }
  return lm;
}

Scalar NgramLM::prob(std::span<const TokenId> context, TokenId next) const {
  if (std::isinf(k_)) return 1.0 / static_cast<Scalar>(vocab_size_);
  const auto it = counts_.find(context_key(context));
  Scalar c = 0.0, total = 0.0;
  if (it != counts_.end()) {
    total = it->second.total;
    const auto jt = it->second.next.find(next);
    if (jt != it->second.next.end()) c = jt->second;
  }
  return (c + k_) / (total + k_ * static_cast<Scalar>(vocab_size_));
}

Scalar NgramLM::sentence_log_prob(std::span<const TokenId> sentence) const {
  Scalar lp = 0.0;
  for (std::size_t i = 0; i <= sentence.size(); ++i) {
    const TokenId next = i < sentence.size() ? sentence[i] : kEos;
    lp += std::log(prob(sentence.first(i), next));
  }
  return lp;
}

Scalar perplexity(const NgramLM& lm, const std::vector<TokenIds>& sequences) {
  if (sequences.empty()) throw std::invalid_argument("perplexity: no sequences");
  // Neumaier-compensated sum: keeps the result within a few ulp of exact
  // however long the corpus is
  Scalar nll = 0.0, carry = 0.0;
  std::size_t tokens = 0;
  for (const auto& s : sequences) {
    const Scalar x = -lm.sentence_log_prob(s);
    const Scalar t = nll + x;
    carry += std::abs(nll) >= std::abs(x) ? (nll - t) + x : (x - t) + nll;
    nll = t;
    tokens += s.size() + 1;
  }
  return std::exp((nll + carry) / static_cast<Scalar>(tokens));
}

Scalar style_marker_rate(const std::vector<TokenIds>& outputs, const StyleSpec& style, const Vocab& vocab) {
  if (outputs.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& line : outputs) {
    bool own = false, other = false;
    for (TokenId t : line) {
      const int s = vocab.marker_style(t);
      if (s == 0) continue;
      if (s == style.index) own = true;
      else other = true;
    }
    if (own && !other) ++hits;
  }
  return static_cast<Scalar>(hits) / static_cast<Scalar>(outputs.size());
}

// ---------------------------------------------------------------------------

void MetricsReport::validate() const {
  auto unit = [](Scalar v, const std::string& what) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::domain_error(what + " outside [0,1]");
  };
  unit(exact, "exact");
  unit(r1, "r1");
  unit(r2, "r2");
  unit(rl, "rl");
  if (bert_proxy && !(*bert_proxy >= -1.0 - 1e-12 && *bert_proxy <= 1.0 + 1e-12))
    throw std::domain_error("bert_proxy outside [-1,1]");
  if (!(ppl > 0.0)) throw std::domain_error("ppl must be positive");
  for (const auto& [s, v] : ppl_s)
    if (!(v > 0.0)) throw std::domain_error("ppl_s." + s + " must be positive");
  for (const auto& [s, v] : marker) unit(v, "marker." + s);
}

MetricsReport evaluate_run(const std::vector<TokenIds>& outputs, const std::vector<TokenIds>& references,
                           const MetricLMs& lms, const std::vector<StyleSpec>& styles, const Matrix* embeddings) {
  if (outputs.size() != references.size())
    throw std::invalid_argument("evaluate_run: " + std::to_string(outputs.size()) + " outputs vs " +
                                std::to_string(references.size()) + " references");
  if (lms.plain == nullptr) throw std::invalid_argument("evaluate_run: plain LM required");
  MetricsReport r;
  std::size_t same = 0;
  for (std::size_t i = 0; i < outputs.size(); ++i) same += outputs[i] == references[i];
  r.exact = outputs.empty() ? 0.0 : static_cast<Scalar>(same) / static_cast<Scalar>(outputs.size());
  r.r1 = corpus_rouge(outputs, references, RougeVariant::One);
  r.r2 = corpus_rouge(outputs, references, RougeVariant::Two);
  r.rl = corpus_rouge(outputs, references, RougeVariant::L);
  r.ppl = perplexity(*lms.plain, outputs);
  for (const auto& [id, lm] : lms.styles) r.ppl_s[id] = perplexity(*lm, outputs);
  for (const auto& s : styles)
    if (s.index > 0) r.marker[s.style_id] = style_marker_rate(outputs, s);
  if (embeddings) {
    auto pooled = [&](const TokenIds& t) {
      RowVector v = RowVector::Zero(embeddings->cols());
      for (TokenId id : t) v += embeddings->row(id);
      return v;
    };
    Scalar sum = 0.0;
    for (std::size_t i = 0; i < outputs.size(); ++i) {
      const RowVector a = pooled(outputs[i]);
      const RowVector b = pooled(references[i]);
      const Scalar denom = a.norm() * b.norm();
      sum += denom > 0.0 ? a.dot(b) / denom : 0.0;
    }
    r.bert_proxy = sum / static_cast<Scalar>(outputs.size());
  }
  r.validate();
  return r;
}

std::string format_report(const MetricsReport& report) {
  std::ostringstream os;
  os.precision(17);
  for (const auto& [k, v] : report.labels) os << "label." << k << '=' << v << '\n';
  os << "exact=" << report.exact << '\n';
  os << "r1=" << report.r1 << '\n' << "r2=" << report.r2 << '\n' << "rl=" << report.rl << '\n';
  if (report.bert_proxy) os << "bert_proxy=" << *report.bert_proxy << '\n';
  os << "ppl=" << report.ppl << '\n';
  for (const auto& [s, v] : report.ppl_s) os << "ppl_s." << s << '=' << v << '\n';
  for (const auto& [s, v] : report.marker) os << "marker." << s << '=' << v << '\n';
  return os.str();
}

MetricsReport parse_report(const std::string& text) {
  MetricsReport r;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool seen_ppl = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("report line " + std::to_string(lineno) + ": missing '='");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    auto num = [&] { return std::stod(value); };
    if (key == "exact") r.exact = num();
    else if (key == "r1") r.r1 = num();
    else if (key == "r2") r.r2 = num();
    else if (key == "rl") r.rl = num();
    else if (key == "bert_proxy") r.bert_proxy = num();
    else if (key == "ppl") r.ppl = num(), seen_ppl = true;
    else if (key.rfind("ppl_s.", 0) == 0) r.ppl_s[key.substr(6)] = num();
    else if (key.rfind("marker.", 0) == 0) r.marker[key.substr(7)] = num();
    else if (key.rfind("label.", 0) == 0) r.labels[key.substr(6)] = value;
    else throw std::runtime_error("report line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  if (!seen_ppl) throw std::runtime_error("report: missing ppl");
  return r;
}

void write_report(const std::filesystem::path& path, const MetricsReport& report) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << format_report(report);
  if (!out) throw std::runtime_error("cannot write report " + path.string());
}

MetricsReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read report " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_report(ss.str());
}

}  // namespace styleswap
