#include "styleswap/model.hpp"

#include <cmath>

namespace styleswap {

void ModelConfig::validate() const {
  auto positive = [](Index v, const char* what) {
    if (v < 1) throw ConfigError(std::string(what) + " must be >= 1, got " + std::to_string(v));
  };
  positive(vocab_size, "vocab_size");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(d_ffn, "d_ffn");
  positive(n_enc_layers, "n_enc_layers");
  positive(n_dec_layers, "n_dec_layers");
  positive(adapter_bottleneck, "adapter_bottleneck");
  positive(max_len, "max_len");
  if (d_model % n_heads != 0)
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                      std::to_string(n_heads));
  if (!(ln_eps > 0.0)) throw ConfigError("ln_eps must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0,1)");
}

std::string_view to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::Embed: return "embed";
    case ParamGroup::Enc: return "enc";
    case ParamGroup::DecSelf: return "dec-self";
    case ParamGroup::DecCross: return "dec-catt";
    case ParamGroup::DecOther: return "dec-other";
    case ParamGroup::Adapter: return "adapter";
  }
  return "?";
}

std::string_view to_string(GroupSelector s) {
  switch (s) {
    case GroupSelector::Enc: return "enc";
    case GroupSelector::EncCatt: return "enc+catt";
    case GroupSelector::EncCattDec: return "enc+catt+dec";
    case GroupSelector::Adapter: return "adapter";
  }
  return "?";
}

GroupSelector parse_selector(std::string_view text) {
  if (text == "enc") return GroupSelector::Enc;
  if (text == "enc+catt") return GroupSelector::EncCatt;
  if (text == "enc+catt+dec") return GroupSelector::EncCattDec;
  if (text == "adapter") return GroupSelector::Adapter;
  throw ConfigError("unknown parameter group selector '" + std::string(text) + "'");
}

// ---------------------------------------------------------------------------

void ParamRegistry::add(std::string name, ParamGroup group, Tensor t) {
  if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
  index_.emplace(name, params_.size());
  params_.push_back({std::move(name), std::move(t)});
  groups_.push_back(group);
}

const Tensor& ParamRegistry::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return params_[it->second].tensor;
}

ParamGroup ParamRegistry::group_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return groups_[it->second];
}

std::vector<NamedTensor> ParamRegistry::in_groups(std::initializer_list<ParamGroup> groups) const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < params_.size(); ++i)
    for (ParamGroup g : groups)
      if (groups_[i] == g) out.push_back(params_[i]);
  return out;
}

Index ParamRegistry::scalar_count() const {
  Index n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

ParamRegistry ParamRegistry::clone() const {
  ParamRegistry r;
  for (std::size_t i = 0; i < params_.size(); ++i) r.add(params_[i].name, groups_[i], params_[i].tensor.clone());
  return r;
}

// ---------------------------------------------------------------------------

AdapterSet::AdapterSet(std::string style_id, std::vector<AdapterLayer> layers)
    : style_id_(std::move(style_id)), layers_(std::move(layers)) {
  for (const auto& l : layers_) {
    const Index h = l.down.rows();
    const Index b = l.down.cols();
    if (l.ln_gain.rows() != 1 || l.ln_gain.cols() != h || l.ln_bias.rows() != 1 || l.ln_bias.cols() != h ||
        l.up.rows() != b || l.up.cols() != h)
      throw DimensionError("inconsistent adapter layer shapes");
  }
}

AdapterSet AdapterSet::fresh(const ModelConfig& config, std::string style_id, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<Scalar> normal(0.0, 0.02);
  const Index h = config.d_model;
  const Index b = config.adapter_bottleneck;
  std::vector<AdapterLayer> layers;
  for (Index l = 0; l < config.n_dec_layers; ++l) {
    Matrix down(h, b);
    for (Index i = 0; i < down.size(); ++i) down.data()[i] = normal(rng);
    layers.push_back({Tensor(Matrix::Ones(1, h)), Tensor(Matrix::Zero(1, h)), Tensor(std::move(down)),
                      Tensor(Matrix::Zero(b, h))});
  }
  return AdapterSet(std::move(style_id), std::move(layers));
}

Index AdapterSet::width() const { return layers_.empty() ? 0 : layers_.front().down.rows(); }
Index AdapterSet::bottleneck() const { return layers_.empty() ? 0 : layers_.front().down.cols(); }

const AdapterLayer& AdapterSet::layer(Index l) const {
  if (l < 0 || l >= n_layers())
    throw std::out_of_range("no adapter for decoder layer " + std::to_string(l));
  return layers_[static_cast<std::size_t>(l)];
}

std::vector<NamedTensor> AdapterSet::params() const {
  std::vector<NamedTensor> out;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string p = "adapter." + std::to_string(l) + ".";
    out.push_back({p + "ln.g", layers_[l].ln_gain});
    out.push_back({p + "ln.b", layers_[l].ln_bias});
    out.push_back({p + "down", layers_[l].down});
    out.push_back({p + "up", layers_[l].up});
  }
  return out;
}

AdapterSet AdapterSet::clone() const {
  std::vector<AdapterLayer> layers;
  for (const auto& l : layers_) layers.push_back({l.ln_gain.clone(), l.ln_bias.clone(), l.down.clone(), l.up.clone()});
  return AdapterSet(style_id_, std::move(layers));
}

Tensor adapter_forward(const Tensor& z, const AdapterSet& adapters, Index layer, Scalar ln_eps) {
  const AdapterLayer& a = adapters.layer(layer);
  if (z.cols() != a.down.rows())
    throw DimensionError("adapter input width " + std::to_string(z.cols()) + " vs adapter width " +
                         std::to_string(a.down.rows()));
  Tensor normed = ops::layer_norm(z, a.ln_gain, a.ln_bias, ln_eps);
  Tensor hidden = ops::relu(ops::matmul(normed, a.down));
  return ops::add(ops::matmul(hidden, a.up), z);
}

// ---------------------------------------------------------------------------

Matrix sinusoidal_positions(Index max_len, Index width) {
  Matrix pe(max_len, width);
  for (Index pos = 0; pos < max_len; ++pos) {
    for (Index i = 0; i < width; ++i) {
      const Scalar rate = std::pow(10000.0, -static_cast<Scalar>(2 * (i / 2)) / static_cast<Scalar>(width));
      pe(pos, i) = (i % 2 == 0) ? std::sin(pos * rate) : std::cos(pos * rate);
    }
  }
  return pe;
}

namespace {

struct Initializer {
  std::mt19937_64 rng;
  Tensor normal(Index rows, Index cols, Scalar std) {
    std::normal_distribution<Scalar> dist(0.0, std);
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return Tensor(std::move(m));
  }
};

void add_attention(ParamRegistry& reg, Initializer& init, const std::string& prefix, ParamGroup g, Index h) {
  const Scalar std = 1.0 / std::sqrt(static_cast<Scalar>(h));
  for (const char* w : {"q", "k", "v", "o"}) {
    reg.add(prefix + ".w" + w, g, init.normal(h, h, std));
    reg.add(prefix + ".b" + w, g, Tensor::zeros(1, h));
  }
}

void add_ln(ParamRegistry& reg, const std::string& prefix, ParamGroup g, Index h) {
  reg.add(prefix + ".g", g, Tensor(Matrix::Ones(1, h)));
  reg.add(prefix + ".b", g, Tensor::zeros(1, h));
}

void add_ffn(ParamRegistry& reg, Initializer& init, const std::string& prefix, ParamGroup g, Index h, Index f) {
  reg.add(prefix + ".w1", g, init.normal(h, f, 1.0 / std::sqrt(static_cast<Scalar>(h))));
  reg.add(prefix + ".b1", g, Tensor::zeros(1, f));
  reg.add(prefix + ".w2", g, init.normal(f, h, 1.0 / std::sqrt(static_cast<Scalar>(f))));
  reg.add(prefix + ".b2", g, Tensor::zeros(1, h));
}

std::vector<Segment> pack(std::span<const TokenIds> seqs, TokenIds& ids) {
  std::vector<Segment> segs;
  segs.reserve(seqs.size());
  ids.clear();
  for (const auto& s : seqs) {
    segs.push_back({static_cast<Index>(ids.size()), static_cast<Index>(s.size())});
    ids.insert(ids.end(), s.begin(), s.end());
  }
  return segs;
}

}  // namespace

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const Index h = config_.d_model;
  const Index f = config_.d_ffn;
  Initializer init{std::mt19937_64(config_.seed)};

  registry_.add("embed.tok", ParamGroup::Embed,
                init.normal(config_.vocab_size, h, 1.0 / std::sqrt(static_cast<Scalar>(h))));
  add_ln(registry_, "enc.ln_emb", ParamGroup::Enc, h);
  for (Index l = 0; l < config_.n_enc_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    add_attention(registry_, init, p + ".attn", ParamGroup::Enc, h);
    add_ln(registry_, p + ".ln1", ParamGroup::Enc, h);
    add_ffn(registry_, init, p + ".ffn", ParamGroup::Enc, h, f);
    add_ln(registry_, p + ".ln2", ParamGroup::Enc, h);
  }
  add_ln(registry_, "dec.ln_emb", ParamGroup::DecOther, h);
  for (Index l = 0; l < config_.n_dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    add_attention(registry_, init, p + ".attn", ParamGroup::DecSelf, h);
    add_ln(registry_, p + ".ln1", ParamGroup::DecSelf, h);
    add_attention(registry_, init, p + ".catt", ParamGroup::DecCross, h);
    add_ln(registry_, p + ".ln2", ParamGroup::DecCross, h);
    add_ffn(registry_, init, p + ".ffn", ParamGroup::DecOther, h, f);
    add_ln(registry_, p + ".ln3", ParamGroup::DecOther, h);
  }
  positions_ = sinusoidal_positions(config_.max_len, h);
}

Model::Model(ModelConfig config, ParamRegistry registry)
    : config_(std::move(config)), registry_(std::move(registry)) {
  positions_ = sinusoidal_positions(config_.max_len, config_.d_model);
}

Model build_model(const ModelConfig& config) { return Model(config); }

Model Model::clone() const {
  Model m(config_, registry_.clone());
  if (adapters_) m.adapters_ = adapters_->clone();
  return m;
}

const AdapterSet& Model::adapters() const {
  if (!adapters_) throw std::logic_error("no adapter set installed");
  return *adapters_;
}

std::optional<AdapterSet> Model::swap_adapters(AdapterSet a) {
  if (a.n_layers() != config_.n_dec_layers || a.width() != config_.d_model ||
      a.bottleneck() != config_.adapter_bottleneck)
    throw DimensionError("adapter set '" + a.style_id() + "' has " + std::to_string(a.n_layers()) + " layers, h=" +
                         std::to_string(a.width()) + ", b=" + std::to_string(a.bottleneck()) + "; model expects " +
                         std::to_string(config_.n_dec_layers) + " layers, h=" + std::to_string(config_.d_model) +
                         ", b=" + std::to_string(config_.adapter_bottleneck));
  std::optional<AdapterSet> previous = std::move(adapters_);
  adapters_ = std::move(a);
  return previous;
}

std::optional<AdapterSet> Model::remove_adapters() {
  std::optional<AdapterSet> previous = std::move(adapters_);
  adapters_.reset();
  return previous;
}

std::vector<NamedTensor> Model::param_group(GroupSelector selector, bool include_embeddings) const {
  std::vector<NamedTensor> out;
  auto append = [&](std::vector<NamedTensor> v) { out.insert(out.end(), v.begin(), v.end()); };
  switch (selector) {
    case GroupSelector::Adapter:
      if (!adapters_) throw std::logic_error("adapter group requested but no adapter set is installed");
      return adapters_->params();
    case GroupSelector::Enc: append(registry_.in_groups({ParamGroup::Enc})); break;
    case GroupSelector::EncCatt: append(registry_.in_groups({ParamGroup::Enc, ParamGroup::DecCross})); break;
    case GroupSelector::EncCattDec:
      append(registry_.in_groups({ParamGroup::Enc, ParamGroup::DecCross, ParamGroup::DecSelf, ParamGroup::DecOther}));
      break;
  }
  if (include_embeddings) append(registry_.in_groups({ParamGroup::Embed}));
  return out;
}

void Model::set_param(const std::string& name, const Matrix& value) {
  Tensor t = registry_.at(name);
  if (t.rows() != value.rows() || t.cols() != value.cols())
    throw DimensionError("parameter " + name + " is " + shape_string(t.rows(), t.cols()) + ", got " +
                         shape_string(value.rows(), value.cols()));
  t.mutable_value() = value;
}

// ---------------------------------------------------------------------------

Tensor Model::maybe_dropout(const Tensor& x, const ForwardOptions& opts) const {
  if (opts.dropout_rng == nullptr || config_.dropout <= 0.0) return x;
  return ops::dropout(x, config_.dropout, *opts.dropout_rng);
}

Tensor Model::embed(std::span<const TokenIds> seqs, const std::string& ln, std::vector<Segment>& segments,
                    const ForwardOptions& opts) const {
  TokenIds ids;
  segments = pack(seqs, ids);
  Matrix pe(static_cast<Index>(ids.size()), config_.d_model);
  for (const Segment& s : segments) {
    if (s.length > config_.max_len)
      throw std::length_error("sequence of length " + std::to_string(s.length) + " exceeds max_len " +
                              std::to_string(config_.max_len));
    pe.middleRows(s.offset, s.length) = positions_.topRows(s.length);
  }
  Tensor x = ops::scale(ops::embedding(p("embed.tok"), ids), std::sqrt(static_cast<Scalar>(config_.d_model)));
  x = ops::add(x, Tensor(std::move(pe)));
  return maybe_dropout(ops::layer_norm(x, p(ln + ".g"), p(ln + ".b"), config_.ln_eps), opts);
}

Tensor Model::self_attention(const Tensor& x, const std::string& prefix, std::span<const Segment> segs,
                             bool causal) const {
  Tensor q = ops::linear(x, p(prefix + ".wq"), p(prefix + ".bq"));
  Tensor k = ops::linear(x, p(prefix + ".wk"), p(prefix + ".bk"));
  Tensor v = ops::linear(x, p(prefix + ".wv"), p(prefix + ".bv"));
  Tensor a = ops::attention(q, k, v, config_.n_heads, segs, segs, causal);
  return ops::linear(a, p(prefix + ".wo"), p(prefix + ".bo"));
}

Tensor Model::cross_attention(const Tensor& x, const Encoded& enc, const std::string& prefix,
                              std::span<const Segment> segs) const {
  std::vector<Segment> kseg = enc.segments;
  if (kseg.size() == 1 && segs.size() > 1) kseg.assign(segs.size(), enc.segments.front());
  if (kseg.size() != segs.size())
    throw DimensionError("decode: " + std::to_string(segs.size()) + " prefixes for " +
                         std::to_string(enc.segments.size()) + " encoded sources");
  Tensor q = ops::linear(x, p(prefix + ".wq"), p(prefix + ".bq"));
  Tensor k = ops::linear(enc.states, p(prefix + ".wk"), p(prefix + ".bk"));
  Tensor v = ops::linear(enc.states, p(prefix + ".wv"), p(prefix + ".bv"));
  Tensor a = ops::attention(q, k, v, config_.n_heads, segs, kseg, false);
  return ops::linear(a, p(prefix + ".wo"), p(prefix + ".bo"));
}

Tensor Model::feed_forward(const Tensor& x, const std::string& prefix) const {
  Tensor hidden = ops::relu(ops::linear(x, p(prefix + ".w1"), p(prefix + ".b1")));
  return ops::linear(hidden, p(prefix + ".w2"), p(prefix + ".b2"));
}

Encoded Model::encode(std::span<const TokenIds> sources, const ForwardOptions& opts) const {
  Encoded enc;
  Tensor x = embed(sources, "enc.ln_emb", enc.segments, opts);
  const Scalar eps = config_.ln_eps;
  for (Index l = 0; l < config_.n_enc_layers; ++l) {
    const std::string pre = "enc." + std::to_string(l);
    Tensor a = maybe_dropout(self_attention(x, pre + ".attn", enc.segments, false), opts);
    x = ops::layer_norm(ops::add(x, a), p(pre + ".ln1.g"), p(pre + ".ln1.b"), eps);
    Tensor f = maybe_dropout(feed_forward(x, pre + ".ffn"), opts);
    x = ops::layer_norm(ops::add(x, f), p(pre + ".ln2.g"), p(pre + ".ln2.b"), eps);
  }
  enc.states = std::move(x);
  return enc;
}

Tensor Model::encode(const TokenIds& tokens) const {
  return encode(std::span<const TokenIds>(&tokens, 1)).states;
}

Tensor Model::decode(const Encoded& enc, std::span<const TokenIds> prefixes, const ForwardOptions& opts) const {
  if (!opts.bypass_adapters && !adapters_)
    throw std::logic_error("decode requires an installed adapter set (use the style-less adapters for plain output)");
  std::vector<Segment> segs;
  Tensor x = embed(prefixes, "dec.ln_emb", segs, opts);
  const Scalar eps = config_.ln_eps;
  for (Index l = 0; l < config_.n_dec_layers; ++l) {
    const std::string pre = "dec." + std::to_string(l);
    Tensor a = maybe_dropout(self_attention(x, pre + ".attn", segs, true), opts);
    x = ops::layer_norm(ops::add(x, a), p(pre + ".ln1.g"), p(pre + ".ln1.b"), eps);
    Tensor c = maybe_dropout(cross_attention(x, enc, pre + ".catt", segs), opts);
    x = ops::layer_norm(ops::add(x, c), p(pre + ".ln2.g"), p(pre + ".ln2.b"), eps);
    Tensor f = maybe_dropout(feed_forward(x, pre + ".ffn"), opts);
    x = ops::layer_norm(ops::add(x, f), p(pre + ".ln3.g"), p(pre + ".ln3.b"), eps);
    if (!opts.bypass_adapters) x = adapter_forward(x, *adapters_, l, eps);
  }
  return ops::matmul(x, ops::transpose(p("embed.tok")));
}

Tensor Model::decode_step(const Tensor& enc_states, const TokenIds& prefix, const ForwardOptions& opts) const {
  Encoded enc{enc_states, {Segment{0, enc_states.rows()}}};
  return decode(enc, std::span<const TokenIds>(&prefix, 1), opts);
}

}  // namespace styleswap
