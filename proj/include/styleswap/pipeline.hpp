#pragma once

#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "styleswap/eval.hpp"
#include "styleswap/store.hpp"

namespace styleswap {

/// Which Step 2 run a task checkpoint (and everything generated from it)
/// belongs to.
struct TaskVariant {
  GroupSelector trainable = GroupSelector::Enc;
  PretrainMode mode = PretrainMode::InversePara;
  // false: Step 2 runs with fresh identity adapters instead of the trained s0 set.
  bool stylefree_adapter = true;

  std::string tag() const;  // e.g. "enc.para", "enc.para.nos0"
  static TaskVariant from_config(const RunConfig& config);
};

/// Artifact layout of one run directory.
class Workspace {
 public:
  explicit Workspace(std::filesystem::path root) : root_(std::move(root)) {}

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path data() const { return root_ / "data"; }
  std::filesystem::path config_file() const { return root_ / "config.txt"; }
  std::filesystem::path base_checkpoint() const { return root_ / "base.ckpt"; }
  std::filesystem::path adapter(const std::string& style, PretrainMode mode) const;
  std::filesystem::path task_checkpoint(TaskKind task, const TaskVariant& v) const;
  std::filesystem::path output(TaskKind task, const TaskVariant& v, const std::string& style) const;
  std::filesystem::path report(TaskKind task, const TaskVariant& v, const std::string& style) const;
  std::filesystem::path ablation_table(TaskKind task) const;
  std::filesystem::path freeze_log() const { return root_ / "freeze.log"; }
  std::filesystem::path train_log() const { return root_ / "train.log"; }
  std::filesystem::path summary() const { return root_ / "pipeline.summary"; }

 private:
  std::filesystem::path root_;
};

/// Checksums of a parameter set that a stage must not touch.
struct FreezeRecord {
  std::string stage;
  std::string what;
  std::uint32_t before = 0;
  std::uint32_t after = 0;
  bool held() const { return before == after; }
};

std::string format_freeze(const FreezeRecord& r);
std::vector<FreezeRecord> read_freeze_log(const std::filesystem::path& path);

struct StageContext {
  RunConfig config;
  Workspace workspace;
  // Human-readable progress; training metrics go to the workspace train.log.
  std::ostream* log = nullptr;
};

/// Writes config.txt on first use; afterwards the workspace only accepts the
/// same configuration.
void prepare_workspace(const StageContext& ctx);

DataManifest ensure_data(const StageContext& ctx);

/// Denoising pretraining of the plain base; writes base.ckpt.
StageReport pretrain_stage(const StageContext& ctx);

/// Step 1 for one style (s0 is the style-less adapter). Loads base.ckpt,
/// trains the adapter and writes its file.
std::vector<FreezeRecord> adapter_stage(const StageContext& ctx, const std::string& style, PretrainMode mode);

/// Step 2: base.ckpt plus the s0 adapter of `variant.mode` (or a fresh
/// identity set), fine-tuned on the task and written as a task checkpoint.
std::vector<FreezeRecord> task_stage(const StageContext& ctx, TaskKind task, const TaskVariant& variant);

/// Step 3: task checkpoint with `style`'s adapter swapped in, beam search over
/// the test sources. Returns the base fingerprint the outputs were produced with.
std::string generate_stage(const StageContext& ctx, TaskKind task, const TaskVariant& variant,
                           const std::string& style);

/// Scores a generate_stage output file against the test targets.
MetricsReport evaluate_stage(const StageContext& ctx, TaskKind task, const TaskVariant& variant,
                             const std::string& style);

struct PipelineResult {
  std::map<std::string, MetricsReport> reports;  // "<task>.<style>"
  std::map<std::string, std::uint32_t> adapter_digest_after_step1;
  std::map<std::string, std::uint32_t> adapter_digest_final;
  std::vector<FreezeRecord> freezes;
  double seconds = 0.0;
};

/// Data, base, Step 1 for every style, then Step 2 and Step 3 per task.
/// Stages whose artifact already exists in the workspace are reused.
PipelineResult run_pipeline(const StageContext& ctx);

struct AblationRow {
  TaskVariant variant;
  MetricsReport stylefree;                     // generated with the s0 adapter
  std::map<std::string, MetricsReport> styled;  // s1..s3
};

/// The {para, denoise} x {enc, enc+catt, enc+catt+dec} grid plus the
/// no-s0 variant for one task. Writes the table and per-cell reports.
std::vector<AblationRow> run_ablation(const StageContext& ctx, TaskKind task);
std::string format_ablation(const std::vector<AblationRow>& rows);

// Adler-32 of the file bytes.
std::uint32_t file_digest(const std::filesystem::path& path);

struct GradcheckEntry {
  std::string name;
  Scalar error = 0.0;
};

/// Gradient checks of every op on random small tensors, then of one decoder
/// step loss w.r.t. `n_model_params` random scalar weights of a small model
/// (adapters included).
std::vector<GradcheckEntry> gradcheck_suite(std::uint64_t seed, std::size_t n_model_params = 20);

}  // namespace styleswap
