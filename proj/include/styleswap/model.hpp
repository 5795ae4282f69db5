#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "styleswap/tensor.hpp"

namespace styleswap {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  Index vocab_size = 134;
  Index d_model = 64;
  Index n_heads = 4;
  Index d_ffn = 128;
  Index n_enc_layers = 2;
  Index n_dec_layers = 2;
  Index adapter_bottleneck = 16;
  Index max_len = 48;
  std::uint64_t seed = 1;
  Scalar ln_eps = 1e-5;
  Scalar dropout = 0.0;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class ParamGroup { Embed, Enc, DecSelf, DecCross, DecOther, Adapter };

// Trainable selections used by the freeze policies.
enum class GroupSelector { Enc, EncCatt, EncCattDec, Adapter };

std::string_view to_string(ParamGroup g);
std::string_view to_string(GroupSelector s);
GroupSelector parse_selector(std::string_view text);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Named base parameters with their group labels, in registration order.
class ParamRegistry {
 public:
  void add(std::string name, ParamGroup group, Tensor t);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  ParamGroup group_of(const std::string& name) const;

  const std::vector<NamedTensor>& params() const { return params_; }
  std::vector<NamedTensor> in_groups(std::initializer_list<ParamGroup> groups) const;
  Index scalar_count() const;

  ParamRegistry clone() const;

 private:
  std::vector<NamedTensor> params_;
  std::vector<ParamGroup> groups_;
  std::map<std::string, std::size_t> index_;
};

struct AdapterLayer {
  Tensor ln_gain;  // 1 x h
  Tensor ln_bias;  // 1 x h
  Tensor down;     // h x b
  Tensor up;       // b x h
};

/// Per-style adapter parameters for every decoder layer.
class AdapterSet {
 public:
  AdapterSet() = default;
  AdapterSet(std::string style_id, std::vector<AdapterLayer> layers);

  // LN gain 1 / bias 0, W_down ~ N(0, 0.02^2), W_up = 0: identity at start.
  static AdapterSet fresh(const ModelConfig& config, std::string style_id, std::uint64_t seed);

  const std::string& style_id() const { return style_id_; }
  void set_style_id(std::string id) { style_id_ = std::move(id); }

  Index n_layers() const { return static_cast<Index>(layers_.size()); }
  Index width() const;
  Index bottleneck() const;
  const AdapterLayer& layer(Index l) const;

  // adapter.<l>.ln.g, adapter.<l>.ln.b, adapter.<l>.down, adapter.<l>.up
  std::vector<NamedTensor> params() const;
  AdapterSet clone() const;

 private:
  std::string style_id_;
  std::vector<AdapterLayer> layers_;
};

/// W_up^T ReLU(W_down^T LN(z)) + z, row-wise over z.
Tensor adapter_forward(const Tensor& z, const AdapterSet& adapters, Index layer, Scalar ln_eps = 1e-5);

struct Encoded {
  Tensor states;
  std::vector<Segment> segments;
};

struct ForwardOptions {
  // Skips the adapter computation entirely (reference path for identity checks).
  bool bypass_adapters = false;
  // Dropout is applied only when a generator is supplied and config.dropout > 0.
  std::mt19937_64* dropout_rng = nullptr;
};

Matrix sinusoidal_positions(Index max_len, Index width);

/// Post-LN encoder-decoder transformer with an adapter slot after the FFN
/// block of each decoder layer. Output projection is tied to the token
/// embedding.
class Model {
 public:
  explicit Model(ModelConfig config);

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  Model clone() const;

  const ModelConfig& config() const { return config_; }
  const ParamRegistry& registry() const { return registry_; }

  Encoded encode(std::span<const TokenIds> sources, const ForwardOptions& opts = {}) const;
  Tensor encode(const TokenIds& tokens) const;

  // Next-token logits for every position of every prefix, rows packed in order.
  Tensor decode(const Encoded& enc, std::span<const TokenIds> prefixes, const ForwardOptions& opts = {}) const;
  Tensor decode_step(const Tensor& enc_states, const TokenIds& prefix, const ForwardOptions& opts = {}) const;

  bool has_adapters() const { return adapters_.has_value(); }
  const AdapterSet& adapters() const;
  // Installs `a`, returning whatever occupied the slot before.
  std::optional<AdapterSet> swap_adapters(AdapterSet a);
  std::optional<AdapterSet> remove_adapters();

  std::vector<NamedTensor> param_group(GroupSelector selector, bool include_embeddings = false) const;
  std::vector<NamedTensor> base_params() const { return registry_.params(); }

  // Replaces the value of a base parameter (used by checkpoint loading).
  void set_param(const std::string& name, const Matrix& value);

 private:
  Model(ModelConfig config, ParamRegistry registry);
  const Tensor& p(const std::string& name) const { return registry_.at(name); }
  Tensor embed(std::span<const TokenIds> seqs, const std::string& ln, std::vector<Segment>& segments,
               const ForwardOptions& opts) const;
  Tensor self_attention(const Tensor& x, const std::string& prefix, std::span<const Segment> segs,
                        bool causal) const;
  Tensor cross_attention(const Tensor& x, const Encoded& enc, const std::string& prefix,
                         std::span<const Segment> segs) const;
  Tensor feed_forward(const Tensor& x, const std::string& prefix) const;
  Tensor maybe_dropout(const Tensor& x, const ForwardOptions& opts) const;

  ModelConfig config_;
  ParamRegistry registry_;
  Matrix positions_;
  std::optional<AdapterSet> adapters_;
};

Model build_model(const ModelConfig& config);

}  // namespace styleswap
