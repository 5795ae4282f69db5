#include "styleswap/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <iomanip>
#include <optional>

#include "styleswap/pipeline.hpp"

namespace styleswap {

namespace {

struct CommonOptions {
  std::string dir = "run";
  std::string config_file;
  std::string preset = "toy";
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  bool quiet = false;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--dir", o.dir, "Run directory")->capture_default_str();
  cmd->add_option("--config", o.config_file, "key=value config file")->check(CLI::ExistingFile);
  cmd->add_option("--preset", o.preset, "Defaults preset")->check(CLI::IsMember({"toy", "paper"}))->capture_default_str();
  cmd->add_option("--seed", o.seed, "Master seed");
  cmd->add_option("--set", o.overrides, "Override one config key (key=value)");
  cmd->add_flag("--quiet", o.quiet, "No progress output");
}

RunConfig resolve(const CommonOptions& o) {
  RunConfig c = o.config_file.empty() ? RunConfig::preset_defaults(o.preset) : RunConfig::load(o.config_file);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) c.set("seed", std::to_string(*o.seed));
  c.model.validate();
  return c;
}

struct VariantOptions {
  std::string trainable;
  std::string mode;
  bool no_s0 = false;
};

void add_variant(CLI::App* cmd, VariantOptions& v) {
  cmd->add_option("--trainable", v.trainable, "Step 2 trainable group (enc, enc+catt, enc+catt+dec)");
  cmd->add_option("--mode", v.mode, "Adapter pretraining mode (para, denoise)");
  cmd->add_flag("--no-s0", v.no_s0, "Step 2 with fresh identity adapters instead of the trained s0 set");
}

TaskVariant variant_of(const RunConfig& c, const VariantOptions& v) {
  TaskVariant t = TaskVariant::from_config(c);
  if (!v.trainable.empty()) t.trainable = parse_selector(v.trainable);
  if (!v.mode.empty()) t.mode = parse_mode(v.mode);
  t.stylefree_adapter = !v.no_s0;
  return t;
}

std::vector<std::string> styles_of(const std::string& s) {
  if (s == "all") return all_style_ids();
  style_spec(s);
  return {s};
}

std::vector<TaskKind> tasks_of(const RunConfig& c, const std::string& t) {
  std::vector<TaskKind> out;
  if (t.empty() || t == "all")
    for (const auto& name : c.tasks) out.push_back(parse_task(name));
  else
    out.push_back(parse_task(t));
  return out;
}

}  // namespace

int cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Adapter-based stylistic generation on synthetic corpora", "styleswap"};
  app.require_subcommand(1);
  CommonOptions common;
  VariantOptions variant;
  std::string style = "all", mode, task;
  std::optional<long> beam;
  std::size_t gradcheck_params = 20;

  auto* gen = app.add_subcommand("gen-data", "Write task, style and pretraining corpora");
  auto* pre = app.add_subcommand("pretrain", "Denoising pretraining of the base model");
  auto* adp = app.add_subcommand("train-adapter", "Step 1: train a style adapter against the frozen base");
  adp->add_option("--style", style, "s0..s3 or all")->capture_default_str();
  adp->add_option("--mode", mode, "para or denoise");
  auto* tsk = app.add_subcommand("train-task", "Step 2: fine-tune the base on a task with the s0 adapter frozen");
  tsk->add_option("--task", task, "headline, story or all");
  add_variant(tsk, variant);
  auto* genr = app.add_subcommand("generate", "Step 3: generate test outputs with a style adapter swapped in");
  genr->add_option("--task", task, "headline, story or all");
  genr->add_option("--style", style, "s0..s3 or all")->capture_default_str();
  genr->add_option("--beam", beam, "Beam size")->check(CLI::PositiveNumber);
  add_variant(genr, variant);
  auto* evl = app.add_subcommand("evaluate", "Score generated outputs and write reports");
  evl->add_option("--task", task, "headline, story or all");
  evl->add_option("--style", style, "s0..s3 or all")->capture_default_str();
  add_variant(evl, variant);
  auto* pipe = app.add_subcommand("pipeline", "Data, base, Step 1, Step 2 and Step 3 end to end");
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every op and a model loss");
  grad->add_option("--params", gradcheck_params, "Model weights to check")->capture_default_str();
  auto* abl = app.add_subcommand("ablate", "Adapter-mode x trainable-group grid plus the no-s0 variant");
  abl->add_option("--task", task, "headline, story or all");
  for (auto* c : {gen, pre, adp, tsk, genr, evl, pipe, grad, abl}) add_common(c, common);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    RunConfig config = resolve(common);
    if (beam) config.decode.beam_size = *beam;
    StageContext ctx{config, Workspace(common.dir), common.quiet ? nullptr : &out};

    if (gen->parsed()) {
      prepare_workspace(ctx);
      const DataManifest m = ensure_data(ctx);
      out << "corpora in " << ctx.workspace.data().string() << " (seed " << m.seed << ")\n";
    } else if (pre->parsed()) {
      prepare_workspace(ctx);
      ensure_data(ctx);
      const StageReport r = pretrain_stage(ctx);
      out << "base.ckpt written, best epoch " << r.best_epoch << '\n';
    } else if (adp->parsed()) {
      prepare_workspace(ctx);
      const PretrainMode m = mode.empty() ? parse_mode(config.adapter_mode) : parse_mode(mode);
      for (const auto& s : styles_of(style)) {
        for (const auto& f : adapter_stage(ctx, s, m)) out << format_freeze(f) << '\n';
      }
    } else if (tsk->parsed()) {
      prepare_workspace(ctx);
      const TaskVariant v = variant_of(config, variant);
      for (TaskKind t : tasks_of(config, task))
        for (const auto& f : task_stage(ctx, t, v)) out << format_freeze(f) << '\n';
    } else if (genr->parsed()) {
      const TaskVariant v = variant_of(config, variant);
      for (TaskKind t : tasks_of(config, task))
        for (const auto& s : styles_of(style)) {
          const std::string fp = generate_stage(ctx, t, v, s);
          if (common.quiet) out << "base checksum " << fp << '\n';
        }
    } else if (evl->parsed()) {
      const TaskVariant v = variant_of(config, variant);
      for (TaskKind t : tasks_of(config, task))
        for (const auto& s : styles_of(style)) out << format_report(evaluate_stage(ctx, t, v, s)) << '\n';
    } else if (pipe->parsed()) {
      const PipelineResult r = run_pipeline(ctx);
      out << std::fixed << std::setprecision(4);
      for (const auto& [k, rep] : r.reports) {
        out << k << " exact=" << rep.exact << " rl=" << rep.rl;
        for (const auto& [s, m] : rep.marker) out << " marker." << s << '=' << m;
        out << '\n';
      }
      out << "pipeline finished in " << std::setprecision(1) << r.seconds << " s\n";
    } else if (grad->parsed()) {
      const auto entries = gradcheck_suite(config.seed, gradcheck_params);
      Scalar worst = 0.0;
      out << std::scientific << std::setprecision(3);
      for (const auto& e : entries) {
        out << e.name << ' ' << e.error << '\n';
        worst = std::max(worst, e.error);
      }
      out << "max relative error " << worst << '\n';
      return worst < 1e-4 ? 0 : 1;
    } else if (abl->parsed()) {
      for (TaskKind t : tasks_of(config, task)) {
        const auto rows = run_ablation(ctx, t);
        out << "# " << to_string(t) << '\n' << format_ablation(rows);
      }
    }
  } catch (const ConfigError& e) {
    err << "styleswap: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "styleswap: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace styleswap
