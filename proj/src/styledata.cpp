#include "styleswap/styledata.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace styleswap {

namespace fs = std::filesystem;

Vocab::Vocab() {
  for (const char* s : {"<pad>", "<s>", "</s>", "<mask>"}) names_.emplace_back(s);
  for (int i = 0; i < kKeywords; ++i) {
    keywords_.push_back(static_cast<TokenId>(names_.size()));
    names_.push_back("k" + std::to_string(i));
  }
  for (int i = 0; i < kFillers; ++i) {
    fillers_.push_back(static_cast<TokenId>(names_.size()));
    names_.push_back("f" + std::to_string(i));
  }
  markers_.resize(kStyles);
  for (int s = 0; s < kStyles; ++s) {
    for (int i = 0; i < kMarkersPerStyle; ++i) {
      markers_[static_cast<std::size_t>(s)].push_back(static_cast<TokenId>(names_.size()));
      names_.push_back("s" + std::to_string(s + 1) + "_" + std::to_string(i));
    }
  }
  for (std::size_t i = 0; i < names_.size(); ++i) ids_.emplace(names_[i], static_cast<TokenId>(i));
}

const Vocab& default_vocab() {
  static const Vocab vocab;
  return vocab;
}

const std::string& Vocab::name(TokenId id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  return names_[static_cast<std::size_t>(id)];
}

TokenId Vocab::id(std::string_view name) const {
  auto it = ids_.find(name);
  if (it == ids_.end()) throw std::out_of_range("unknown token '" + std::string(name) + "'");
  return it->second;
}

TokenClass Vocab::kind(TokenId id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  if (id < 4) return TokenClass::Special;
  if (id < 4 + kKeywords) return TokenClass::Keyword;
  if (id < 4 + kKeywords + kFillers) return TokenClass::Filler;
  return TokenClass::Marker;
}

int Vocab::marker_style(TokenId id) const {
  if (kind(id) != TokenClass::Marker) return 0;
  return 1 + (id - 4 - kKeywords - kFillers) / kMarkersPerStyle;
}

std::span<const TokenId> Vocab::markers(int style) const {
  if (style < 1 || style > kStyles) throw std::out_of_range("no marker set for style " + std::to_string(style));
  return markers_[static_cast<std::size_t>(style - 1)];
}

TokenIds Vocab::parse(std::string_view line) const {
  TokenIds out;
  std::size_t pos = 0;
  while (pos < line.size()) {
    while (pos < line.size() && (line[pos] == ' ' || line[pos] == '\t' || line[pos] == '\r')) ++pos;
    std::size_t end = pos;
    while (end < line.size() && line[end] != ' ' && line[end] != '\t' && line[end] != '\r') ++end;
    if (end > pos) out.push_back(id(line.substr(pos, end - pos)));
    pos = end;
  }
  return out;
}

std::string Vocab::format(std::span<const TokenId> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += name(ids[i]);
  }
  return out;
}

TokenIds keyword_subsequence(std::span<const TokenId> ids, const Vocab& vocab) {
  TokenIds out;
  for (TokenId t : ids)
    if (vocab.is_keyword(t)) out.push_back(t);
  return out;
}

TokenIds strip_markers(std::span<const TokenId> ids, const Vocab& vocab) {
  TokenIds out;
  for (TokenId t : ids)
    if (!vocab.is_marker(t)) out.push_back(t);
  return out;
}

// ---------------------------------------------------------------------------

StyleSpec style_spec(std::string_view style_id, const Vocab& vocab) {
  StyleSpec s;
  s.style_id = std::string(style_id);
  if (style_id == "s0") return s;
  if (style_id == "s1") s.rule = DecorationRule::Bracket;
  else if (style_id == "s2") s.rule = DecorationRule::EverySecond;
  else if (style_id == "s3") s.rule = DecorationRule::WrapDuplicate;
  else throw std::invalid_argument("unknown style '" + std::string(style_id) + "'");
  s.index = style_id[1] - '0';
  auto m = vocab.markers(s.index);
  s.markers.assign(m.begin(), m.end());
  return s;
}

std::vector<std::string> all_style_ids() { return {"s0", "s1", "s2", "s3"}; }
std::vector<std::string> marked_style_ids() { return {"s1", "s2", "s3"}; }

std::string_view to_string(TaskKind k) { return k == TaskKind::Headline ? "headline" : "story"; }

TaskKind parse_task(std::string_view text) {
  if (text == "headline") return TaskKind::Headline;
  if (text == "story") return TaskKind::Story;
  throw std::invalid_argument("unknown task '" + std::string(text) + "'");
}

std::string_view to_string(PretrainMode m) { return m == PretrainMode::InversePara ? "para" : "denoise"; }

PretrainMode parse_mode(std::string_view text) {
  if (text == "para" || text == "inverse-para") return PretrainMode::InversePara;
  if (text == "denoise") return PretrainMode::Denoise;
  throw std::invalid_argument("unknown adapter pretraining mode '" + std::string(text) + "'");
}

std::pair<std::size_t, std::size_t> split_bounds(std::size_t n) {
  const std::size_t train = n * 90 / 100;
  const std::size_t valid = train + n * 5 / 100;
  return {train, valid};
}

namespace {

std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

int uniform(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

TokenId pick(std::mt19937_64& rng, std::span<const TokenId> from) {
  return from[static_cast<std::size_t>(uniform(rng, 0, static_cast<int>(from.size()) - 1))];
}

TokenIds distinct_keywords(std::mt19937_64& rng, int n, const Vocab& vocab) {
  TokenIds pool(vocab.keywords().begin(), vocab.keywords().end());
  TokenIds out;
  for (int i = 0; i < n; ++i) {
    const int j = uniform(rng, i, static_cast<int>(pool.size()) - 1);
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
    out.push_back(pool[static_cast<std::size_t>(i)]);
  }
  return out;
}

// Places `extra` tokens at random gaps of `base`, keeping base order.
TokenIds interleave(const TokenIds& base, const TokenIds& extra, std::mt19937_64& rng) {
  std::vector<bool> is_extra(base.size() + extra.size(), false);
  for (std::size_t i = 0; i < extra.size(); ++i) is_extra[i] = true;
  std::shuffle(is_extra.begin(), is_extra.end(), rng);
  TokenIds out;
  std::size_t b = 0, e = 0;
  for (bool x : is_extra) out.push_back(x ? extra[e++] : base[b++]);
  return out;
}

}  // namespace

std::vector<TaskPair> gen_task_pairs(std::uint64_t seed, std::size_t n, TaskKind kind, const Vocab& vocab) {
  if (n == 0) throw std::invalid_argument("gen_task_pairs: n must be positive");
  auto rng = derived_rng(seed, kind == TaskKind::Headline ? 11 : 12);
  std::vector<TaskPair> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    TokenIds keys = distinct_keywords(rng, uniform(rng, 3, 6), vocab);
    TaskPair p;
    p.kind = kind;
    if (kind == TaskKind::Headline) {
      TokenIds fill(static_cast<std::size_t>(uniform(rng, 5, 15)));
      for (auto& f : fill) f = pick(rng, vocab.fillers());
      p.source = interleave(keys, fill, rng);
      p.target = keys;
    } else {
      p.source = keys;
      for (TokenId k : keys) p.target.insert(p.target.end(), {k, k});
    }
    out.push_back(std::move(p));
  }
  return out;
}

TokenIds plain_sentence(std::mt19937_64& rng, const Vocab& vocab) {
  TokenIds keys = distinct_keywords(rng, uniform(rng, 3, 6), vocab);
  TokenIds fill(static_cast<std::size_t>(uniform(rng, 0, 3)));
  for (auto& f : fill) f = pick(rng, vocab.fillers());
  return interleave(keys, fill, rng);
}

TokenIds general_sentence(std::mt19937_64& rng, const Vocab& vocab) {
  const int len = uniform(rng, 3, 20);
  std::uniform_real_distribution<Scalar> u(0.0, 1.0);
  TokenIds out;
  for (int i = 0; i < len; ++i) {
    const Scalar r = u(rng);
    if (r < 0.45) out.push_back(pick(rng, vocab.keywords()));
    else if (r < 0.9) out.push_back(pick(rng, vocab.fillers()));
    else out.push_back(pick(rng, vocab.markers(uniform(rng, 1, Vocab::kStyles))));
  }
  return out;
}

TokenIds stylize(std::span<const TokenId> plain, const StyleSpec& style, std::mt19937_64& rng, const Vocab& vocab) {
  for (TokenId t : plain)
    if (vocab.is_marker(t)) throw std::invalid_argument("stylize: input already contains marker " + vocab.name(t));
  auto marker = [&] { return pick(rng, style.markers); };
  TokenIds out;
  switch (style.rule) {
    case DecorationRule::None:
      out.assign(plain.begin(), plain.end());
      break;
    case DecorationRule::Bracket:
      out.push_back(marker());
      out.insert(out.end(), plain.begin(), plain.end());
      out.push_back(marker());
      out.push_back(marker());
      break;
    case DecorationRule::EverySecond:
      for (std::size_t i = 0; i < plain.size(); ++i) {
        out.push_back(plain[i]);
        if (i % 2 == 1) out.push_back(marker());
      }
      break;
    case DecorationRule::WrapDuplicate: {
      std::ptrdiff_t last_key = -1;
      for (std::size_t i = 0; i < plain.size(); ++i)
        if (vocab.is_keyword(plain[i])) last_key = static_cast<std::ptrdiff_t>(i);
      out.push_back(marker());
      for (std::size_t i = 0; i < plain.size(); ++i) {
        out.push_back(plain[i]);
        if (static_cast<std::ptrdiff_t>(i) == last_key) out.push_back(plain[i]);
      }
      out.push_back(marker());
      break;
    }
  }
  return out;
}

TokenIds noise_gn(std::span<const TokenId> t, NoiseRates rates, std::mt19937_64& rng) {
  if (rates.mask < 0.0 || rates.remove < 0.0 || rates.mask >= 1.0 || rates.remove >= 1.0 ||
      rates.mask + rates.remove >= 1.0)
    throw std::invalid_argument("noise_gn: rates must lie in [0,1) with mask + delete < 1");
  std::uniform_real_distribution<Scalar> u(0.0, 1.0);
  TokenIds out;
  out.reserve(t.size());
  for (TokenId tok : t) {
    const Scalar r = u(rng);
    if (r < rates.mask) out.push_back(kMask);
    else if (r < rates.mask + rates.remove) continue;
    else out.push_back(tok);
  }
  return out;
}

TokenIds strip_style_gp(std::span<const TokenId> t, std::mt19937_64& rng, const Vocab& vocab) {
  TokenIds out = strip_markers(t, vocab);

  std::ptrdiff_t last = -1;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (vocab.is_keyword(out[i])) last = static_cast<std::ptrdiff_t>(i);
  if (last > 0 && out[static_cast<std::size_t>(last - 1)] == out[static_cast<std::size_t>(last)])
    out.erase(out.begin() + last);

  for (auto& tok : out)
    if (vocab.is_filler(tok)) tok = pick(rng, vocab.fillers());

  std::bernoulli_distribution coin(0.5);
  for (std::size_t i = 0; i + 1 < out.size(); ++i) {
    if (vocab.is_filler(out[i]) && vocab.is_filler(out[i + 1]) && coin(rng)) {
      std::swap(out[i], out[i + 1]);
      ++i;
    }
  }
  return out;
}

StyleCorpus build_style_corpus(const StyleSpec& style, std::size_t n, std::uint64_t seed, NoiseRates rates,
                               const Vocab& vocab) {
  if (n == 0) throw std::invalid_argument("build_style_corpus: n must be positive");
  auto rng = derived_rng(seed, 100 + static_cast<std::uint64_t>(style.index));
  std::vector<StyleExample> items;
  items.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    StyleExample ex;
    ex.sentence = stylize(plain_sentence(rng, vocab), style, rng, vocab);
    ex.paraphrase = strip_style_gp(ex.sentence, rng, vocab);
    ex.noised = noise_gn(ex.sentence, rates, rng);
    items.push_back(std::move(ex));
  }
  return StyleCorpus{style, split_90_5_5(std::move(items))};
}

// ---------------------------------------------------------------------------

void write_sequences(const fs::path& path, std::span<const TokenIds> seqs, const Vocab& vocab) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& s : seqs) out << vocab.format(s) << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::vector<TokenIds> read_sequences(const fs::path& path, const Vocab& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<TokenIds> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    try {
      out.push_back(vocab.parse(line));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

fs::path DataPaths::task_src(const fs::path& dir, TaskKind k, std::string_view split) {
  return dir / (std::string(to_string(k)) + "." + std::string(split) + ".src");
}
fs::path DataPaths::task_tgt(const fs::path& dir, TaskKind k, std::string_view split) {
  return dir / (std::string(to_string(k)) + "." + std::string(split) + ".tgt");
}
fs::path DataPaths::style_txt(const fs::path& dir, std::string_view style, std::string_view split) {
  return dir / ("style." + std::string(style) + "." + std::string(split) + ".txt");
}
fs::path DataPaths::style_src(const fs::path& dir, std::string_view style, PretrainMode m, std::string_view split) {
  return dir / ("style." + std::string(style) + "." + std::string(to_string(m)) + "." + std::string(split) + ".src");
}
fs::path DataPaths::general(const fs::path& dir, std::string_view split) {
  return dir / ("general." + std::string(split) + ".txt");
}

namespace {

constexpr std::string_view kSplits[] = {"train", "valid", "test"};

template <typename T, typename F>
std::vector<TokenIds> column(const std::vector<T>& items, F f) {
  std::vector<TokenIds> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(f(it));
  return out;
}

template <typename T>
const std::vector<T>& split_of(const Splits<T>& s, std::string_view name) {
  if (name == "train") return s.train;
  if (name == "valid") return s.valid;
  return s.test;
}

}  // namespace

DataManifest write_corpora(const fs::path& dir, std::uint64_t seed, CorpusSizes sizes, NoiseRates rates,
                           const Vocab& vocab) {
  fs::create_directories(dir);
  DataManifest m;
  m.seed = seed;
  m.sizes = sizes;
  m.rates = rates;
  auto& e = m.entries;
  e["seed"] = std::to_string(seed);
  e["vocab_size"] = std::to_string(vocab.size());
  e["noise.mask"] = std::to_string(rates.mask);
  e["noise.delete"] = std::to_string(rates.remove);
  auto record_bounds = [&](const std::string& key, std::size_t n) {
    const auto [a, b] = split_bounds(n);
    e[key + ".size"] = std::to_string(n);
    e[key + ".train"] = "0-" + std::to_string(a);
    e[key + ".valid"] = std::to_string(a) + "-" + std::to_string(b);
    e[key + ".test"] = std::to_string(b) + "-" + std::to_string(n);
  };

  for (TaskKind kind : {TaskKind::Headline, TaskKind::Story}) {
    auto splits = split_90_5_5(gen_task_pairs(seed, sizes.task, kind, vocab));
    for (auto split : kSplits) {
      const auto& items = split_of(splits, split);
      write_sequences(DataPaths::task_src(dir, kind, split), column(items, [](const TaskPair& p) { return p.source; }), vocab);
      write_sequences(DataPaths::task_tgt(dir, kind, split), column(items, [](const TaskPair& p) { return p.target; }), vocab);
    }
    record_bounds(std::string(to_string(kind)), sizes.task);
  }

  for (const auto& id : all_style_ids()) {
    StyleCorpus corpus = build_style_corpus(style_spec(id, vocab), sizes.style, seed, rates, vocab);
    for (auto split : kSplits) {
      const auto& items = split_of(corpus.data, split);
      write_sequences(DataPaths::style_txt(dir, id, split), column(items, [](const StyleExample& x) { return x.sentence; }), vocab);
      write_sequences(DataPaths::style_src(dir, id, PretrainMode::InversePara, split),
                      column(items, [](const StyleExample& x) { return x.paraphrase; }), vocab);
      write_sequences(DataPaths::style_src(dir, id, PretrainMode::Denoise, split),
                      column(items, [](const StyleExample& x) { return x.noised; }), vocab);
    }
    record_bounds("style." + id, sizes.style);
  }

  {
    auto rng = derived_rng(seed, 200);
    std::vector<TokenIds> general;
    general.reserve(sizes.general);
    for (std::size_t i = 0; i < sizes.general; ++i) general.push_back(general_sentence(rng, vocab));
    auto splits = split_90_5_5(std::move(general));
    for (auto split : kSplits) write_sequences(DataPaths::general(dir, split), split_of(splits, split), vocab);
    record_bounds("general", sizes.general);
  }

  std::ofstream out(dir / "manifest.txt", std::ios::binary);
  for (const auto& [k, v] : e) out << k << '=' << v << '\n';
  if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
  return m;
}

DataManifest read_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.txt", std::ios::binary);
  if (!in) throw std::runtime_error("corpus manifest missing in " + dir.string());
  DataManifest m;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    m.entries[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = m.entries.find(k);
    if (it == m.entries.end()) throw std::runtime_error("manifest key '" + k + "' missing");
    return it->second;
  };
  m.seed = std::stoull(get("seed"));
  m.sizes.task = std::stoull(get("headline.size"));
  m.sizes.style = std::stoull(get("style.s0.size"));
  m.sizes.general = std::stoull(get("general.size"));
  m.rates.mask = std::stod(get("noise.mask"));
  m.rates.remove = std::stod(get("noise.delete"));
  return m;
}

std::vector<TaskPair> read_task_split(const fs::path& dir, TaskKind kind, std::string_view split, const Vocab& vocab) {
  auto src = read_sequences(DataPaths::task_src(dir, kind, split), vocab);
  auto tgt = read_sequences(DataPaths::task_tgt(dir, kind, split), vocab);
  if (src.size() != tgt.size()) throw std::runtime_error("task source/target line counts differ");
  std::vector<TaskPair> out;
  for (std::size_t i = 0; i < src.size(); ++i) out.push_back({std::move(src[i]), std::move(tgt[i]), kind});
  return out;
}

std::vector<std::pair<TokenIds, TokenIds>> read_style_pairs(const fs::path& dir, std::string_view style,
                                                             PretrainMode mode, std::string_view split,
                                                             const Vocab& vocab) {
  const auto src_path = DataPaths::style_src(dir, style, mode, split);
  if (!fs::exists(src_path)) throw std::runtime_error("style corpus missing: " + src_path.string());
  auto src = read_sequences(src_path, vocab);
  auto tgt = read_sequences(DataPaths::style_txt(dir, style, split), vocab);
  if (src.size() != tgt.size()) throw std::runtime_error("style source/target line counts differ");
  std::vector<std::pair<TokenIds, TokenIds>> out;
  for (std::size_t i = 0; i < src.size(); ++i) out.emplace_back(std::move(src[i]), std::move(tgt[i]));
  return out;
}

}  // namespace styleswap
