#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "styleswap/decode.hpp"
#include "styleswap/model.hpp"
#include "styleswap/styledata.hpp"
#include "styleswap/training.hpp"

namespace styleswap {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kFormatVersion = 1;

// Flat key=value text for a model configuration (stable key order).
std::string model_config_block(const ModelConfig& config);
ModelConfig parse_model_config(const std::map<std::string, std::string>& kv);

/// 8 hex digits: CRC-32 over the model config block and the single-precision
/// bytes of every base parameter. Adapters are not included.
std::string base_fingerprint(const Model& model);

struct Checkpoint {
  Model model;
  // Fingerprints of the checkpoints this one was fine-tuned from, oldest first.
  std::vector<std::string> lineage;
};

/// Binary layout (little endian): magic "SSWPCKPT", u32 version, u32 length +
/// config text, u32 record count, records {u16 name length, name, u8 dtype
/// (1 = f32), u8 rank, u32 dims[rank], values}, u32 CRC-32 of all prior bytes.
void save_checkpoint(const Model& model, const std::filesystem::path& path,
                     const std::vector<std::string>& lineage = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct AdapterFile {
  AdapterSet adapters;
  PretrainMode mode = PretrainMode::InversePara;
  std::string base_fingerprint;
};

/// Same record layout as checkpoints under magic "SSWPADPT"; the text block
/// carries style_id, mode, base_fingerprint and the adapter shape.
void save_adapter(const AdapterSet& adapters, PretrainMode mode, const std::string& base_fp,
                  const std::filesystem::path& path);
AdapterFile read_adapter(const std::filesystem::path& path);

/// Reads the adapter file and installs it into the model. The file must have
/// been trained against this base or one of its `lineage` ancestors.
AdapterFile load_adapter(const std::filesystem::path& path, Model& model,
                         const std::vector<std::string>& lineage = {});

// ---------------------------------------------------------------------------

/// Every knob of a run. Text form is flat key=value; a `preset=` line selects
/// the defaults the remaining keys override.
struct RunConfig {
  std::string preset = "toy";
  std::uint64_t seed = 7;
  ModelConfig model;
  CorpusSizes corpus;
  NoiseRates noise;
  OptimConfig optim;
  std::size_t batch_size = 8;
  std::size_t patience = 2;
  std::size_t pretrain_epochs = 4;
  std::size_t adapter_epochs = 10;
  std::size_t task_epochs = 5;
  std::string task_trainable = "enc";
  bool task_train_embeddings = false;
  std::string adapter_mode = "para";
  DecodeConfig decode;
  std::vector<std::string> tasks{"headline", "story"};

  static RunConfig preset_defaults(const std::string& name);
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
  std::string to_text() const;
  void set(const std::string& key, const std::string& value);
};

}  // namespace styleswap
