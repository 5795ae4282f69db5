#include "styleswap/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include <zlib.h>

namespace styleswap {

void adamw_step(std::span<const NamedTensor> params, OptimState& state) {
  const OptimConfig& c = state.config;
  ++state.step;
  const Scalar bc1 = 1.0 - std::pow(c.beta1, static_cast<Scalar>(state.step));
  const Scalar bc2 = 1.0 - std::pow(c.beta2, static_cast<Scalar>(state.step));
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) throw std::logic_error("adamw_step: trainable parameter " + p.name + " has no gradient");
    const Matrix& g = p.tensor.grad();
    auto [it, fresh] = state.moments.try_emplace(p.name);
    auto& mom = it->second;
    if (fresh) {
      mom.m = Matrix::Zero(g.rows(), g.cols());
      mom.v = Matrix::Zero(g.rows(), g.cols());
    }
    mom.m = c.beta1 * mom.m + (1.0 - c.beta1) * g;
    mom.v = c.beta2 * mom.v + (1.0 - c.beta2) * g.cwiseAbs2();
    Tensor t = p.tensor;
    Matrix& w = t.mutable_value();
    if (c.weight_decay != 0.0) w *= (1.0 - c.lr * c.weight_decay);
    w.array() -= c.lr * (mom.m.array() / bc1) / ((mom.v.array() / bc2).sqrt() + c.eps);
  }
}

Tensor batch_loss(const Model& model, std::span<const Seq2SeqExample> batch, const ForwardOptions& opts) {
  std::vector<TokenIds> sources, prefixes;
  TokenIds targets;
  sources.reserve(batch.size());
  prefixes.reserve(batch.size());
  for (const auto& ex : batch) {
    sources.push_back(ex.source.empty() ? TokenIds{kMask} : ex.source);
    TokenIds in{kBos};
    in.insert(in.end(), ex.target.begin(), ex.target.end());
    prefixes.push_back(std::move(in));
    targets.insert(targets.end(), ex.target.begin(), ex.target.end());
    targets.push_back(kEos);
  }
  Encoded enc = model.encode(sources, opts);
  Tensor logits = model.decode(enc, prefixes, opts);
  return ops::cross_entropy(logits, targets, kPad);
}

Scalar mean_loss(const Model& model, std::span<const Seq2SeqExample> data, bool bypass_adapters,
                 std::size_t batch_size) {
  NoTapeScope no_tape;
  ForwardOptions opts;
  opts.bypass_adapters = bypass_adapters;
  Scalar total = 0.0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < data.size(); i += batch_size) {
    auto batch = data.subspan(i, std::min(batch_size, data.size() - i));
    std::size_t n = 0;
    for (const auto& ex : batch) n += ex.target.size() + 1;
    total += batch_loss(model, batch, opts).item() * static_cast<Scalar>(n);
    tokens += n;
  }
  return tokens ? total / static_cast<Scalar>(tokens) : 0.0;
}

namespace {

void set_trainable(const Model& model, const std::vector<NamedTensor>& trainable) {
  for (const auto& p : model.base_params()) {
    Tensor t = p.tensor;
    t.set_requires_grad(false);
  }
  if (model.has_adapters()) {
    for (const auto& p : model.adapters().params()) {
      Tensor t = p.tensor;
      t.set_requires_grad(false);
    }
  }
  for (const auto& p : trainable) {
    Tensor t = p.tensor;
    t.set_requires_grad(true);
  }
}

void clear_trainable(const std::vector<NamedTensor>& trainable) {
  for (const auto& p : trainable) {
    Tensor t = p.tensor;
    t.set_requires_grad(false);
  }
}

}  // namespace

StageReport train_seq2seq(Model& model, const std::vector<NamedTensor>& trainable,
                          const std::vector<Seq2SeqExample>& train, const std::vector<Seq2SeqExample>& valid,
                          const TrainConfig& cfg) {
  if (train.empty()) throw std::invalid_argument(cfg.stage + ": empty training set");
  if (cfg.batch_size == 0) throw std::invalid_argument(cfg.stage + ": batch size must be positive");
  set_trainable(model, trainable);

  StageReport report;
  OptimState state;
  state.config = cfg.optim;
  std::mt19937_64 rng(cfg.seed);
  ForwardOptions opts;
  opts.bypass_adapters = cfg.bypass_adapters;
  opts.dropout_rng = &rng;

  std::vector<Seq2SeqExample> epoch_data = train;
  std::vector<std::size_t> order(train.size());
  Scalar best = std::numeric_limits<Scalar>::infinity();
  std::vector<Matrix> best_values;
  std::size_t since_best = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.source_noise)
      for (std::size_t i = 0; i < train.size(); ++i) epoch_data[i].source = cfg.source_noise(train[i].source, rng);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<Seq2SeqExample> batch;
    for (std::size_t i = 0; i < order.size(); i += cfg.batch_size) {
      batch.clear();
      for (std::size_t j = i; j < std::min(i + cfg.batch_size, order.size()); ++j) batch.push_back(epoch_data[order[j]]);
      for (const auto& p : trainable) {
        Tensor t = p.tensor;
        t.zero_grad();
      }
      Tape tape;
      TapeScope scope(tape);
      Tensor loss = batch_loss(model, batch, opts);
      tape.backward(loss);
      adamw_step(trainable, state);
      report.step_losses.push_back(loss.item());
      ++report.steps;
      if (cfg.log && report.steps % cfg.log_every == 0)
        *cfg.log << "{\"stage\":\"" << cfg.stage << "\",\"step\":" << report.steps << ",\"epoch\":" << epoch
                 << ",\"loss\":" << loss.item() << ",\"lr\":" << cfg.optim.lr << "}\n";
    }

    const Scalar vloss = valid.empty() ? report.step_losses.back() : mean_loss(model, valid, cfg.bypass_adapters);
    report.valid_losses.push_back(vloss);
    if (cfg.log)
      *cfg.log << "{\"stage\":\"" << cfg.stage << "\",\"epoch\":" << epoch << ",\"valid_loss\":" << vloss << "}\n";
    if (vloss < best) {
      best = vloss;
      report.best_epoch = epoch;
      since_best = 0;
      best_values.clear();
      for (const auto& p : trainable) best_values.push_back(p.tensor.value());
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  for (std::size_t i = 0; i < trainable.size(); ++i) {
    Tensor t = trainable[i].tensor;
    t.mutable_value() = best_values[i];
    t.zero_grad();
  }
  clear_trainable(trainable);
  return report;
}

StageReport pretrain_base(Model& model, const std::vector<TokenIds>& train, const std::vector<TokenIds>& valid,
                          NoiseRates rates, TrainConfig cfg) {
  std::vector<Seq2SeqExample> tr, va;
  for (const auto& t : train) tr.push_back({t, t});
  std::mt19937_64 vrng(cfg.seed + 1);
  for (const auto& t : valid) va.push_back({noise_gn(t, rates, vrng), t});
  cfg.bypass_adapters = true;
  cfg.source_noise = [rates](const TokenIds& t, std::mt19937_64& rng) { return noise_gn(t, rates, rng); };
  if (cfg.stage == "train") cfg.stage = "pretrain";
  return train_seq2seq(model, model.base_params(), tr, va, cfg);
}

namespace {

std::vector<Seq2SeqExample> to_examples(const std::vector<std::pair<TokenIds, TokenIds>>& pairs) {
  std::vector<Seq2SeqExample> out;
  out.reserve(pairs.size());
  for (const auto& [s, t] : pairs) out.push_back({s, t});
  return out;
}

std::vector<Seq2SeqExample> to_examples(const std::vector<TaskPair>& pairs) {
  std::vector<Seq2SeqExample> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back({p.source, p.target});
  return out;
}

}  // namespace

AdapterResult train_style_adapter(Model& model, const std::string& style_id, PretrainMode mode,
                                  const std::vector<std::pair<TokenIds, TokenIds>>& train,
                                  const std::vector<std::pair<TokenIds, TokenIds>>& valid, const TrainConfig& cfg) {
  if (train.empty()) throw std::invalid_argument("style corpus for " + style_id + " is empty or missing");
  AdapterSet fresh = AdapterSet::fresh(model.config(), style_id, cfg.seed ^ 0xada9u);
  std::optional<AdapterSet> previous = model.swap_adapters(fresh);
  TrainConfig c = cfg;
  c.bypass_adapters = false;
  if (c.stage == "train") c.stage = "adapter." + style_id + "." + std::string(to_string(mode));
  AdapterResult result;
  result.mode = mode;
  try {
    result.report = train_seq2seq(model, model.adapters().params(), to_examples(train), to_examples(valid), c);
  } catch (...) {
    if (previous) model.swap_adapters(std::move(*previous));
    else model.remove_adapters();
    throw;
  }
  std::optional<AdapterSet> trained = previous ? model.swap_adapters(std::move(*previous)) : model.remove_adapters();
  result.adapters = std::move(*trained);
  return result;
}

AdapterResult train_stylefree_adapter(Model& model, PretrainMode mode,
                                      const std::vector<std::pair<TokenIds, TokenIds>>& train,
                                      const std::vector<std::pair<TokenIds, TokenIds>>& valid, const TrainConfig& cfg) {
  return train_style_adapter(model, "s0", mode, train, valid, cfg);
}

StageReport train_task(Model& model, const AdapterSet& adapters, const std::vector<TaskPair>& train,
                       const std::vector<TaskPair>& valid, GroupSelector trainable, bool include_embeddings,
                       const TrainConfig& cfg) {
  if (trainable == GroupSelector::Adapter)
    throw std::invalid_argument("train_task: adapters stay frozen during task fine-tuning");
  if (adapters.n_layers() == 0) throw std::invalid_argument("train_task: style-less adapters are required");
  model.swap_adapters(adapters);
  TrainConfig c = cfg;
  c.bypass_adapters = false;
  if (c.stage == "train") c.stage = "task." + std::string(to_string(trainable));
  return train_seq2seq(model, model.param_group(trainable, include_embeddings), to_examples(train),
                       to_examples(valid), c);
}

std::vector<unsigned char> params_bytes(std::span<const NamedTensor> params) {
  std::vector<unsigned char> out;
  for (const auto& p : params) {
    const auto* data = reinterpret_cast<const unsigned char*>(p.tensor.value().data());
    out.insert(out.end(), data, data + p.tensor.size() * static_cast<Index>(sizeof(Scalar)));
  }
  return out;
}

std::uint32_t params_checksum(std::span<const NamedTensor> params) {
  uLong crc = crc32(0L, Z_NULL, 0);
  for (const auto& p : params) {
    crc = crc32(crc, reinterpret_cast<const Bytef*>(p.name.data()), static_cast<uInt>(p.name.size()));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(p.tensor.value().data()),
                static_cast<uInt>(p.tensor.size() * static_cast<Index>(sizeof(Scalar))));
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace styleswap
