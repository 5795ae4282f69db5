#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "styleswap/model.hpp"
#include "styleswap/training.hpp"

using namespace styleswap;

namespace {

ModelConfig tiny_config(Index vocab = 12) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ffn = 12;
  c.n_enc_layers = 2;
  c.n_dec_layers = 2;
  c.adapter_bottleneck = 3;
  c.max_len = 10;
  c.seed = 4;
  return c;
}

TokenIds random_tokens(std::size_t n, Index vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<TokenId> d(0, static_cast<TokenId>(vocab - 1));
  TokenIds t(n);
  for (auto& x : t) x = d(rng);
  return t;
}

void perturb(const std::vector<NamedTensor>& params, Scalar scale, std::mt19937_64& rng) {
  std::normal_distribution<Scalar> n(0.0, scale);
  for (const auto& p : params) {
    Tensor t = p.tensor;
    for (Index i = 0; i < t.size(); ++i) t.mutable_value().data()[i] += n(rng);
  }
}

// --- straight-line reference forward pass ---------------------------------

Matrix ref_ln(const Matrix& z, const Matrix& g, const Matrix& b, Scalar eps) {
  Matrix out(z.rows(), z.cols());
  for (Index i = 0; i < z.rows(); ++i) {
    Scalar mean = 0, var = 0;
    for (Index j = 0; j < z.cols(); ++j) mean += z(i, j);
    mean /= static_cast<Scalar>(z.cols());
    for (Index j = 0; j < z.cols(); ++j) var += (z(i, j) - mean) * (z(i, j) - mean);
    var /= static_cast<Scalar>(z.cols());
    for (Index j = 0; j < z.cols(); ++j) out(i, j) = g(0, j) * (z(i, j) - mean) / std::sqrt(var + eps) + b(0, j);
  }
  return out;
}

Matrix ref_linear(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix out(x.rows(), w.cols());
  for (Index i = 0; i < x.rows(); ++i)
    for (Index j = 0; j < w.cols(); ++j) {
      Scalar s = b(0, j);
      for (Index k = 0; k < x.cols(); ++k) s += x(i, k) * w(k, j);
      out(i, j) = s;
    }
  return out;
}

Matrix ref_attention(const Matrix& q, const Matrix& k, const Matrix& v, Index heads, bool causal) {
  const Index d = q.cols() / heads;
  Matrix out = Matrix::Zero(q.rows(), q.cols());
  for (Index h = 0; h < heads; ++h)
    for (Index i = 0; i < q.rows(); ++i) {
      const Index n = causal ? i + 1 : k.rows();
      std::vector<Scalar> w(static_cast<std::size_t>(n));
      Scalar total = 0;
      for (Index j = 0; j < n; ++j) {
        Scalar dot = 0;
        for (Index c = 0; c < d; ++c) dot += q(i, h * d + c) * k(j, h * d + c);
        w[static_cast<std::size_t>(j)] = std::exp(dot / std::sqrt(static_cast<Scalar>(d)));
        total += w[static_cast<std::size_t>(j)];
      }
      for (Index j = 0; j < n; ++j)
        for (Index c = 0; c < d; ++c) out(i, h * d + c) += w[static_cast<std::size_t>(j)] / total * v(j, h * d + c);
    }
  return out;
}

struct Reference {
  const Model& m;
  const ModelConfig& c;
  const Matrix& P(const std::string& name) const { return m.registry().at(name).value(); }

  Matrix embed(const TokenIds& t, const std::string& ln) const {
    Matrix x(static_cast<Index>(t.size()), c.d_model);
    for (Index i = 0; i < x.rows(); ++i)
      for (Index j = 0; j < c.d_model; ++j) {
        const Scalar rate = std::pow(10000.0, -static_cast<Scalar>(2 * (j / 2)) / static_cast<Scalar>(c.d_model));
        const Scalar pos = j % 2 == 0 ? std::sin(static_cast<Scalar>(i) * rate) : std::cos(static_cast<Scalar>(i) * rate);
        x(i, j) = P("embed.tok")(t[static_cast<std::size_t>(i)], j) * std::sqrt(static_cast<Scalar>(c.d_model)) + pos;
      }
    return ref_ln(x, P(ln + ".g"), P(ln + ".b"), c.ln_eps);
  }
  Matrix attn(const Matrix& x, const Matrix& kv, const std::string& p, bool causal) const {
    const Matrix q = ref_linear(x, P(p + ".wq"), P(p + ".bq"));
    const Matrix k = ref_linear(kv, P(p + ".wk"), P(p + ".bk"));
    const Matrix v = ref_linear(kv, P(p + ".wv"), P(p + ".bv"));
    return ref_linear(ref_attention(q, k, v, c.n_heads, causal), P(p + ".wo"), P(p + ".bo"));
  }
  Matrix ffn(const Matrix& x, const std::string& p) const {
    const Matrix h = ref_linear(x, P(p + ".w1"), P(p + ".b1")).cwiseMax(0.0);
    return ref_linear(h, P(p + ".w2"), P(p + ".b2"));
  }
  Matrix encode(const TokenIds& src) const {
    Matrix x = embed(src, "enc.ln_emb");
    for (Index l = 0; l < c.n_enc_layers; ++l) {
      const std::string p = "enc." + std::to_string(l);
      x = ref_ln(x + attn(x, x, p + ".attn", false), P(p + ".ln1.g"), P(p + ".ln1.b"), c.ln_eps);
      x = ref_ln(x + ffn(x, p + ".ffn"), P(p + ".ln2.g"), P(p + ".ln2.b"), c.ln_eps);
    }
    return x;
  }
  Matrix logits(const TokenIds& src, const TokenIds& prefix) const {
    const Matrix enc = encode(src);
    Matrix x = embed(prefix, "dec.ln_emb");
    for (Index l = 0; l < c.n_dec_layers; ++l) {
      const std::string p = "dec." + std::to_string(l);
      x = ref_ln(x + attn(x, x, p + ".attn", true), P(p + ".ln1.g"), P(p + ".ln1.b"), c.ln_eps);
      x = ref_ln(x + attn(x, enc, p + ".catt", false), P(p + ".ln2.g"), P(p + ".ln2.b"), c.ln_eps);
      x = ref_ln(x + ffn(x, p + ".ffn"), P(p + ".ln3.g"), P(p + ".ln3.b"), c.ln_eps);
      const AdapterLayer& a = m.adapters().layer(l);
      const Matrix hidden = (ref_ln(x, a.ln_gain.value(), a.ln_bias.value(), c.ln_eps) * a.down.value()).cwiseMax(0.0);
      x = hidden * a.up.value() + x;
    }
    return x * P("embed.tok").transpose();
  }
};

Matrix run_decode(const Model& m, const TokenIds& src, const TokenIds& prefix, bool bypass = false) {
  NoTapeScope off;
  ForwardOptions o;
  o.bypass_adapters = bypass;
  return m.decode_step(m.encode(src), prefix, o).value();
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("config validation") {
  ModelConfig c = tiny_config();
  c.d_model = 64;
  c.n_heads = 3;
  CHECK_THROWS_AS(Model{c}, ConfigError);
  c = tiny_config();
  c.adapter_bottleneck = 0;
  CHECK_THROWS_AS(Model{c}, ConfigError);
}

TEST_CASE("same seed gives bit-identical parameters") {
  const Model a(tiny_config()), b(tiny_config());
  CHECK(params_bytes(a.base_params()) == params_bytes(b.base_params()));
  ModelConfig other = tiny_config();
  other.seed = 5;
  CHECK(params_bytes(Model(other).base_params()) != params_bytes(a.base_params()));
}

TEST_CASE("parameter count matches shape enumeration") {
  ModelConfig c;
  c.vocab_size = 140;
  c.d_model = 64;
  c.n_heads = 4;
  c.n_enc_layers = 2;
  c.n_dec_layers = 2;
  c.d_ffn = 128;
  const Model m(c);
  const Index h = 64, f = 128, V = 140, N = 2;
  const Index attn = 4 * (h * h + h), ln = 2 * h, ffn = h * f + f + f * h + h;
  const Index enc = ln + N * (attn + ln + ffn + ln);
  const Index dec = ln + N * (attn + ln + attn + ln + ffn + ln);
  CHECK(m.registry().scalar_count() == V * h + enc + dec);

  Index enc_group = 0;
  for (const auto& p : m.param_group(GroupSelector::Enc)) enc_group += p.tensor.size();
  CHECK(enc_group == enc);
}

TEST_CASE("groups partition the registry and nest") {
  Model m(tiny_config());
  std::set<std::string> seen;
  for (const auto& p : m.base_params()) CHECK(seen.insert(p.name).second);

  auto names = [](const std::vector<NamedTensor>& v) {
    std::set<std::string> s;
    for (const auto& p : v) s.insert(p.name);
    return s;
  };
  const auto enc = names(m.param_group(GroupSelector::Enc));
  const auto catt = names(m.param_group(GroupSelector::EncCatt));
  const auto all = names(m.param_group(GroupSelector::EncCattDec));
  CHECK(std::includes(catt.begin(), catt.end(), enc.begin(), enc.end()));
  CHECK(std::includes(all.begin(), all.end(), catt.begin(), catt.end()));
  CHECK(catt.size() > enc.size());
  CHECK(all.size() > catt.size());
  for (const auto& n : catt)
    if (!enc.count(n)) CHECK((n.find(".catt.") != std::string::npos || n.find(".ln2.") != std::string::npos));

  // enc+catt+dec plus embeddings is everything in the base.
  auto with_emb = names(m.param_group(GroupSelector::EncCattDec, true));
  CHECK(with_emb == seen);

  CHECK_THROWS(m.param_group(GroupSelector::Adapter));
  m.swap_adapters(AdapterSet::fresh(m.config(), "s1", 3));
  for (const auto& n : names(m.param_group(GroupSelector::Adapter))) {
    CHECK(n.rfind("adapter.", 0) == 0);
    CHECK_FALSE(seen.count(n));
  }
  CHECK_THROWS(parse_selector("decoder"));
}

TEST_CASE("adapter hand example") {
  AdapterLayer a{Tensor(Matrix::Ones(1, 2)), Tensor(Matrix::Zero(1, 2)), Tensor(Matrix(Matrix{{1.0}, {0.0}})),
                 Tensor(Matrix(Matrix{{2.0, 0.0}}))};
  const AdapterSet set("s1", {a});
  const Matrix y1 = adapter_forward(Tensor(Matrix{{-1.0, 1.0}}), set, 0, 1e-12).value();
  CHECK(y1(0, 0) == doctest::Approx(-1.0));
  CHECK(y1(0, 1) == doctest::Approx(1.0));
  const Matrix y2 = adapter_forward(Tensor(Matrix{{1.0, -1.0}}), set, 0, 1e-12).value();
  CHECK(y2(0, 0) == doctest::Approx(3.0));
  CHECK(y2(0, 1) == doctest::Approx(-1.0));
}

TEST_CASE("fresh adapter is exactly the identity") {
  const ModelConfig c = tiny_config();
  const AdapterSet set = AdapterSet::fresh(c, "s0", 9);
  std::mt19937_64 rng(1);
  std::normal_distribution<Scalar> n(0.0, 3.0);
  for (Index rows : {1, 3, 7}) {
    Matrix z(rows, c.d_model);
    for (Index i = 0; i < z.size(); ++i) z.data()[i] = n(rng);
    const Matrix y = adapter_forward(Tensor(z), set, 1, c.ln_eps).value();
    CHECK(y.rows() == z.rows());
    CHECK(y == z);
  }
  CHECK(set.layer(0).up.value().isZero(0.0));
  CHECK_THROWS(adapter_forward(Tensor(Matrix::Zero(2, 5)), set, 0, c.ln_eps));
}

TEST_CASE("identity adapters leave logits bitwise unchanged") {
  Model m(tiny_config());
  std::mt19937_64 rng(17);
  perturb(m.base_params(), 0.3, rng);
  m.swap_adapters(AdapterSet::fresh(m.config(), "s0", 2));
  for (int i = 0; i < 20; ++i) {
    const TokenIds src = random_tokens(1 + rng() % 8, 12, rng);
    const TokenIds pre = random_tokens(1 + rng() % 8, 12, rng);
    CHECK(run_decode(m, src, pre) == run_decode(m, src, pre, true));
  }
}

TEST_CASE("decode needs adapters unless bypassed") {
  Model m(tiny_config());
  const TokenIds s{1, 2}, p{1};
  CHECK_THROWS(run_decode(m, s, p));
  CHECK_NOTHROW(run_decode(m, s, p, true));
}

TEST_CASE("decoder matches the straight-line reference") {
  ModelConfig c = tiny_config(5);
  Model m(c);
  std::mt19937_64 rng(23);
  AdapterSet a = AdapterSet::fresh(c, "s1", 1);
  perturb(a.params(), 0.2, rng);
  perturb(m.base_params(), 0.2, rng);
  m.swap_adapters(a);
  const Reference ref{m, c};
  for (int i = 0; i < 5; ++i) {
    const TokenIds src = random_tokens(3, 5, rng);
    const TokenIds prefix = random_tokens(2, 5, rng);
    const Matrix got = run_decode(m, src, prefix);
    const Matrix want = ref.logits(src, prefix);
    REQUIRE(got.rows() == 2);
    REQUIRE(got.cols() == 5);
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-10);
    // Softmax of each position against a hand softmax.
    for (Index t = 0; t < 2; ++t) {
      const Vector lp = log_softmax(got.row(t));
      Scalar z = 0;
      for (Index v = 0; v < 5; ++v) z += std::exp(want(t, v));
      for (Index v = 0; v < 5; ++v) CHECK(std::exp(lp(v)) == doctest::Approx(std::exp(want(t, v)) / z).epsilon(1e-9));
    }
  }
}

TEST_CASE("zero attention and ffn weights reduce the encoder to embeddings through norms") {
  ModelConfig c = tiny_config();
  Model m(c);
  for (const auto& p : m.param_group(GroupSelector::Enc)) {
    const bool ln = p.name.find(".ln") != std::string::npos;
    if (!ln) m.set_param(p.name, Matrix::Zero(p.tensor.rows(), p.tensor.cols()));
  }
  const TokenIds src{3, 7, 1, 3};
  NoTapeScope off;
  const Matrix got = m.encode(src).value();
  const Reference ref{m, c};
  Matrix want = ref.embed(src, "enc.ln_emb");
  const Matrix ones = Matrix::Ones(1, c.d_model), zeros = Matrix::Zero(1, c.d_model);
  for (Index l = 0; l < 2 * c.n_enc_layers; ++l) want = ref_ln(want, ones, zeros, c.ln_eps);
  CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("encoder edge cases") {
  Model m(tiny_config());
  std::mt19937_64 rng(2);
  perturb(m.base_params(), 0.3, rng);
  NoTapeScope off;
  CHECK(m.encode(TokenIds{4}).rows() == 1);
  CHECK(m.encode(TokenIds{4}).cols() == 8);
  CHECK_THROWS_AS(m.encode(TokenIds(11, 4)), std::length_error);
  const Matrix a = m.encode(TokenIds{4, 5, 6, 7}).value();
  const Matrix b = m.encode(TokenIds{4, 6, 5, 7}).value();
  CHECK((a.row(1) - b.row(1)).norm() > 1e-6);
  CHECK((a.row(2) - b.row(2)).norm() > 1e-6);
}

TEST_CASE("causal decoder ignores later tokens") {
  Model m(tiny_config());
  std::mt19937_64 rng(31);
  perturb(m.base_params(), 0.3, rng);
  AdapterSet a = AdapterSet::fresh(m.config(), "s2", 4);
  perturb(a.params(), 0.3, rng);
  m.swap_adapters(a);
  const TokenIds src = random_tokens(5, 12, rng);
  for (int trial = 0; trial < 10; ++trial) {
    TokenIds p = random_tokens(6, 12, rng);
    const Matrix base = run_decode(m, src, p);
    const std::size_t t = rng() % 5;
    for (std::size_t j = t + 1; j < p.size(); ++j) p[j] = static_cast<TokenId>((p[j] + 1 + rng() % 10) % 12);
    const Matrix changed = run_decode(m, src, p);
    CHECK(base.topRows(static_cast<Index>(t + 1)) == changed.topRows(static_cast<Index>(t + 1)));
  }
}

TEST_CASE("packed decoding equals one-at-a-time decoding") {
  Model m(tiny_config());
  std::mt19937_64 rng(41);
  perturb(m.base_params(), 0.3, rng);
  m.swap_adapters(AdapterSet::fresh(m.config(), "s0", 1));
  const std::vector<TokenIds> src{random_tokens(3, 12, rng), random_tokens(6, 12, rng)};
  const std::vector<TokenIds> pre{random_tokens(4, 12, rng), random_tokens(2, 12, rng)};
  NoTapeScope off;
  const Matrix packed = m.decode(m.encode(src), pre).value();
  CHECK((packed.topRows(4) - run_decode(m, src[0], pre[0])).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((packed.bottomRows(2) - run_decode(m, src[1], pre[1])).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("swapping adapters is pure state replacement") {
  Model m(tiny_config());
  std::mt19937_64 rng(5);
  perturb(m.base_params(), 0.3, rng);
  AdapterSet s0 = AdapterSet::fresh(m.config(), "s0", 1), s1 = AdapterSet::fresh(m.config(), "s1", 2);
  perturb(s0.params(), 0.3, rng);
  perturb(s1.params(), 0.3, rng);
  const auto base_before = params_bytes(m.base_params());
  const TokenIds src{4, 5, 6}, pre{1, 7, 8};

  m.swap_adapters(s0);
  const Matrix first = run_decode(m, src, pre);
  auto prev = m.swap_adapters(s1);
  REQUIRE(prev.has_value());
  CHECK(prev->style_id() == "s0");
  const Matrix styled = run_decode(m, src, pre);
  m.swap_adapters(s0);
  CHECK(run_decode(m, src, pre) == first);
  CHECK(styled != first);
  CHECK(params_bytes(m.base_params()) == base_before);

  ModelConfig other = tiny_config();
  other.adapter_bottleneck = 5;
  CHECK_THROWS_AS(m.swap_adapters(AdapterSet::fresh(other, "s3", 1)), DimensionError);
}

TEST_CASE("clone is deep") {
  Model m(tiny_config());
  m.swap_adapters(AdapterSet::fresh(m.config(), "s0", 1));
  Model c = m.clone();
  c.set_param("embed.tok", Matrix::Zero(12, 8));
  CHECK_FALSE(m.registry().at("embed.tok").value().isZero());
  CHECK_THROWS_AS(c.set_param("embed.tok", Matrix::Zero(3, 3)), DimensionError);
}

}  // TEST_SUITE
