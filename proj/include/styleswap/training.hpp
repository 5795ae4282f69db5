#pragma once

#include <functional>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "styleswap/model.hpp"
#include "styleswap/styledata.hpp"

namespace styleswap {

struct OptimConfig {
  Scalar lr = 1e-3;
  Scalar beta1 = 0.9;
  Scalar beta2 = 0.999;
  Scalar eps = 1e-8;
  Scalar weight_decay = 0.0;
};

/// AdamW moments keyed by parameter name; only parameters that have been
/// stepped get an entry.
struct OptimState {
  struct Moments {
    Matrix m;
    Matrix v;
  };
  OptimConfig config;
  std::map<std::string, Moments> moments;
  std::int64_t step = 0;
};

/// One decoupled-weight-decay Adam update with bias correction. Every
/// parameter in `params` must carry a gradient.
void adamw_step(std::span<const NamedTensor> params, OptimState& state);

struct Seq2SeqExample {
  TokenIds source;
  TokenIds target;
};

using SourceNoise = std::function<TokenIds(const TokenIds&, std::mt19937_64&)>;

struct TrainConfig {
  std::size_t epochs = 5;
  std::size_t batch_size = 8;
  std::size_t patience = 2;
  std::uint64_t seed = 1;
  OptimConfig optim;
  // Skip the adapter slot (base pretraining runs the plain transformer).
  bool bypass_adapters = false;
  // Re-noises the source each epoch when set.
  SourceNoise source_noise;
  std::ostream* log = nullptr;
  std::size_t log_every = 50;
  std::string stage = "train";
};

struct StageReport {
  std::vector<Scalar> step_losses;
  std::vector<Scalar> valid_losses;  // one per epoch
  std::size_t best_epoch = 0;
  std::size_t steps = 0;
};

// Teacher-forced token-level loss over a batch: decoder reads <s> y, predicts y </s>.
Tensor batch_loss(const Model& model, std::span<const Seq2SeqExample> batch, const ForwardOptions& opts = {});
Scalar mean_loss(const Model& model, std::span<const Seq2SeqExample> data, bool bypass_adapters = false,
                 std::size_t batch_size = 32);

/// Trains exactly `trainable` on the teacher-forced objective; every other
/// parameter of the model (base and adapters) is frozen for the stage. Keeps
/// the epoch with the best validation loss (early stop after `patience`
/// epochs without improvement).
StageReport train_seq2seq(Model& model, const std::vector<NamedTensor>& trainable,
                          const std::vector<Seq2SeqExample>& train, const std::vector<Seq2SeqExample>& valid,
                          const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// The training stages.

/// Denoising pretraining of the plain transformer on general text; stands
/// in for the pretrained checkpoint the recipe starts from.
StageReport pretrain_base(Model& model, const std::vector<TokenIds>& train, const std::vector<TokenIds>& valid,
                          NoiseRates rates, TrainConfig cfg);

struct AdapterResult {
  AdapterSet adapters;
  PretrainMode mode = PretrainMode::InversePara;
  StageReport report;
};

/// Step 1: fresh identity adapters trained on (g(t), t) with the base frozen.
/// The model's adapter slot is restored afterwards.
AdapterResult train_style_adapter(Model& model, const std::string& style_id, PretrainMode mode,
                                  const std::vector<std::pair<TokenIds, TokenIds>>& train,
                                  const std::vector<std::pair<TokenIds, TokenIds>>& valid, const TrainConfig& cfg);

/// Step 1 for the style-less corpus T^{s_0}.
AdapterResult train_stylefree_adapter(Model& model, PretrainMode mode,
                                      const std::vector<std::pair<TokenIds, TokenIds>>& train,
                                      const std::vector<std::pair<TokenIds, TokenIds>>& valid, const TrainConfig& cfg);

/// Step 2: task fine-tuning with `adapters` installed and frozen; only the
/// selected base group trains. Leaves `adapters` installed.
StageReport train_task(Model& model, const AdapterSet& adapters, const std::vector<TaskPair>& train,
                       const std::vector<TaskPair>& valid, GroupSelector trainable, bool include_embeddings,
                       const TrainConfig& cfg);

std::uint32_t params_checksum(std::span<const NamedTensor> params);
// Bytes of every value, in order (for exact freeze comparisons).
std::vector<unsigned char> params_bytes(std::span<const NamedTensor> params);

}  // namespace styleswap
