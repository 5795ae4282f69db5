#include "styleswap/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

#include <zlib.h>

#include "styleswap/gradcheck.hpp"

namespace styleswap {

namespace fs = std::filesystem;

namespace {

std::uint64_t stage_seed(std::uint64_t seed, const std::string& stage) {
  const auto h = crc32(0L, reinterpret_cast<const Bytef*>(stage.data()), static_cast<uInt>(stage.size()));
  return seed * 0x9e3779b97f4a7c15ull ^ h;
}

std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(8) << std::setfill('0') << v;
  return os.str();
}

void say(const StageContext& ctx, const std::string& line) {
  if (ctx.log) *ctx.log << line << std::endl;
}

// Training metrics of every stage are appended to the workspace train.log.
struct TrainLog {
  explicit TrainLog(const Workspace& ws) : out(ws.train_log(), std::ios::app) {}
  std::ofstream out;
};

TrainConfig train_config(const RunConfig& rc, std::size_t epochs, const std::string& stage, std::ostream* log) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = rc.batch_size;
  tc.patience = rc.patience;
  tc.seed = stage_seed(rc.seed, stage);
  tc.optim = rc.optim;
  tc.log = log;
  tc.stage = stage;
  return tc;
}

void append_freeze(const Workspace& ws, const std::vector<FreezeRecord>& records) {
  std::ofstream out(ws.freeze_log(), std::ios::app);
  for (const auto& r : records) out << format_freeze(r) << '\n';
  if (!out) throw std::runtime_error("cannot append to " + ws.freeze_log().string());
}

std::vector<NamedTensor> minus(const std::vector<NamedTensor>& all, const std::vector<NamedTensor>& drop) {
  std::set<std::string> names;
  for (const auto& p : drop) names.insert(p.name);
  std::vector<NamedTensor> out;
  for (const auto& p : all)
    if (!names.count(p.name)) out.push_back(p);
  return out;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

std::string TaskVariant::tag() const {
  std::string t = std::string(to_string(trainable)) + "." + std::string(to_string(mode));
  if (!stylefree_adapter) t += ".nos0";
  return t;
}

TaskVariant TaskVariant::from_config(const RunConfig& config) {
  return TaskVariant{parse_selector(config.task_trainable), parse_mode(config.adapter_mode), true};
}

fs::path Workspace::adapter(const std::string& style, PretrainMode mode) const {
  return root_ / "adapters" / (style + "." + std::string(to_string(mode)) + ".adp");
}

fs::path Workspace::task_checkpoint(TaskKind task, const TaskVariant& v) const {
  return root_ / "tasks" / (std::string(to_string(task)) + "." + v.tag() + ".ckpt");
}

fs::path Workspace::output(TaskKind task, const TaskVariant& v, const std::string& style) const {
  return root_ / "outputs" / (std::string(to_string(task)) + "." + v.tag() + "." + style + ".txt");
}

fs::path Workspace::report(TaskKind task, const TaskVariant& v, const std::string& style) const {
  return root_ / "reports" / (std::string(to_string(task)) + "." + v.tag() + "." + style + ".report");
}

fs::path Workspace::ablation_table(TaskKind task) const {
  return root_ / ("ablation." + std::string(to_string(task)) + ".tsv");
}

std::string format_freeze(const FreezeRecord& r) {
  return "stage=" + r.stage + " frozen=" + r.what + " before=" + hex32(r.before) + " after=" + hex32(r.after) +
         " held=" + (r.held() ? "yes" : "no");
}

std::vector<FreezeRecord> read_freeze_log(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<FreezeRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::map<std::string, std::string> kv;
    std::string f;
    while (fields >> f) {
      const auto eq = f.find('=');
      if (eq != std::string::npos) kv[f.substr(0, eq)] = f.substr(eq + 1);
    }
    FreezeRecord r;
    r.stage = kv["stage"];
    r.what = kv["frozen"];
    r.before = static_cast<std::uint32_t>(std::stoul(kv.at("before"), nullptr, 16));
    r.after = static_cast<std::uint32_t>(std::stoul(kv.at("after"), nullptr, 16));
    out.push_back(r);
  }
  return out;
}

std::uint32_t file_digest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  // not CRC-32: our files end in a CRC of their own body, which makes the CRC
  // of the whole file the same constant for all of them
  return static_cast<std::uint32_t>(
      adler32(adler32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

// ---------------------------------------------------------------------------

void prepare_workspace(const StageContext& ctx) {
  const Workspace& ws = ctx.workspace;
  fs::create_directories(ws.root());
  const std::string text = ctx.config.to_text();
  if (fs::exists(ws.config_file())) {
    std::ifstream in(ws.config_file(), std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    if (ss.str() != text)
      throw std::runtime_error("workspace " + ws.root().string() +
                               " was created with a different configuration; use a fresh --dir");
    return;
  }
  std::ofstream out(ws.config_file(), std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + ws.config_file().string());
}

DataManifest ensure_data(const StageContext& ctx) {
  const fs::path dir = ctx.workspace.data();
  if (fs::exists(dir / "manifest.txt")) return read_manifest(dir);
  say(ctx, "generating corpora in " + dir.string());
  return write_corpora(dir, ctx.config.seed, ctx.config.corpus, ctx.config.noise);
}

StageReport pretrain_stage(const StageContext& ctx) {
  const auto& rc = ctx.config;
  const fs::path dir = ctx.workspace.data();
  Model model(rc.model);
  TrainLog tl(ctx.workspace);
  say(ctx, "pretraining base (" + std::to_string(rc.pretrain_epochs) + " epochs)");
  StageReport r = pretrain_base(model, read_sequences(DataPaths::general(dir, "train")),
                                read_sequences(DataPaths::general(dir, "valid")), rc.noise,
                                train_config(rc, rc.pretrain_epochs, "pretrain", &tl.out));
  save_checkpoint(model, ctx.workspace.base_checkpoint());
  say(ctx, "base fingerprint " + base_fingerprint(load_checkpoint(ctx.workspace.base_checkpoint()).model));
  return r;
}

std::vector<FreezeRecord> adapter_stage(const StageContext& ctx, const std::string& style, PretrainMode mode) {
  const auto& rc = ctx.config;
  const fs::path dir = ctx.workspace.data();
  Checkpoint base = load_checkpoint(ctx.workspace.base_checkpoint());
  const std::string fp = base_fingerprint(base.model);
  const std::string stage = "adapter." + style + "." + std::string(to_string(mode));

  auto train = read_style_pairs(dir, style, mode, "train");
  auto valid = read_style_pairs(dir, style, mode, "valid");
  TrainLog tl(ctx.workspace);
  say(ctx, "training " + stage);
  const std::uint32_t before = params_checksum(base.model.base_params());
  AdapterResult r = train_style_adapter(base.model, style, mode, train, valid,
                                        train_config(rc, rc.adapter_epochs, stage, &tl.out));
  const std::uint32_t after = params_checksum(base.model.base_params());
  save_adapter(r.adapters, mode, fp, ctx.workspace.adapter(style, mode));

  std::vector<FreezeRecord> records{{stage, "base", before, after}};
  append_freeze(ctx.workspace, records);
  return records;
}

std::vector<FreezeRecord> task_stage(const StageContext& ctx, TaskKind task, const TaskVariant& variant) {
  const auto& rc = ctx.config;
  const fs::path dir = ctx.workspace.data();
  Checkpoint base = load_checkpoint(ctx.workspace.base_checkpoint());
  std::vector<std::string> lineage = base.lineage;
  lineage.push_back(base_fingerprint(base.model));

  AdapterSet adapters;
  if (variant.stylefree_adapter) {
    adapters = load_adapter(ctx.workspace.adapter("s0", variant.mode), base.model, base.lineage).adapters;
  } else {
    adapters = AdapterSet::fresh(rc.model, "s0", stage_seed(rc.seed, "fresh-s0"));
  }
  Model& model = base.model;
  const std::string stage = "task." + std::string(to_string(task)) + "." + variant.tag();

  const auto trainable = model.param_group(variant.trainable, rc.task_train_embeddings);
  const auto& reg = model.registry();
  struct Watch {
    std::string what;
    std::vector<NamedTensor> params;
  };
  std::vector<Watch> watches;
  for (auto [g, name] : {std::pair{ParamGroup::Embed, "embed"}, {ParamGroup::Enc, "enc"},
                         {ParamGroup::DecSelf, "dec.self"}, {ParamGroup::DecCross, "dec.cross"},
                         {ParamGroup::DecOther, "dec.other"}}) {
    auto frozen = minus(reg.in_groups({g}), trainable);
    if (!frozen.empty()) watches.push_back({name, std::move(frozen)});
  }
  std::vector<std::uint32_t> before;
  for (const auto& w : watches) before.push_back(params_checksum(w.params));
  const std::uint32_t adapters_before = params_checksum(adapters.params());

  auto train = read_task_split(dir, task, "train");
  auto valid = read_task_split(dir, task, "valid");
  TrainLog tl(ctx.workspace);
  say(ctx, "fine-tuning " + stage);
  train_task(model, adapters, train, valid, variant.trainable, rc.task_train_embeddings,
             train_config(rc, rc.task_epochs, stage, &tl.out));

  std::vector<FreezeRecord> records;
  for (std::size_t i = 0; i < watches.size(); ++i)
    records.push_back({stage, watches[i].what, before[i], params_checksum(watches[i].params)});
  records.push_back({stage, "adapter.s0", adapters_before, params_checksum(model.adapters().params())});
  save_checkpoint(model, ctx.workspace.task_checkpoint(task, variant), lineage);
  append_freeze(ctx.workspace, records);
  return records;
}

std::string generate_stage(const StageContext& ctx, TaskKind task, const TaskVariant& variant,
                           const std::string& style) {
  Checkpoint ck = load_checkpoint(ctx.workspace.task_checkpoint(task, variant));
  load_adapter(ctx.workspace.adapter(style, variant.mode), ck.model, ck.lineage);
  const std::string fp = base_fingerprint(ck.model);
  say(ctx, "base checksum " + fp + " adapter " + style + " -> " +
               ctx.workspace.output(task, variant, style).filename().string());
  fs::create_directories(ctx.workspace.output(task, variant, style).parent_path());
  generate_batch(ck.model, DataPaths::task_src(ctx.workspace.data(), task, "test"),
                 ctx.workspace.output(task, variant, style), ctx.config.decode);
  return fp;
}

MetricsReport evaluate_stage(const StageContext& ctx, TaskKind task, const TaskVariant& variant,
                             const std::string& style) {
  const fs::path dir = ctx.workspace.data();
  const auto outputs = read_sequences(ctx.workspace.output(task, variant, style));
  const auto refs = read_sequences(DataPaths::task_tgt(dir, task, "test"));
  const Index V = default_vocab().size();

  const NgramLM plain = NgramLM::train(read_sequences(DataPaths::task_tgt(dir, task, "train")), 2, 0.1, V, "plain");
  std::map<std::string, NgramLM> style_lms;
  MetricLMs lms{&plain, {}};
  std::vector<StyleSpec> styles;
  for (const auto& s : marked_style_ids()) {
    style_lms.emplace(s, NgramLM::train(read_sequences(DataPaths::style_txt(dir, s, "train")), 2, 0.1, V, s));
    styles.push_back(style_spec(s));
  }
  for (const auto& [s, lm] : style_lms) lms.styles[s] = &lm;

  Checkpoint ck = load_checkpoint(ctx.workspace.task_checkpoint(task, variant));
  const Matrix embeddings = ck.model.registry().at("embed.tok").value();
  MetricsReport r = evaluate_run(outputs, refs, lms, styles, &embeddings);
  r.labels["task"] = std::string(to_string(task));
  r.labels["variant"] = variant.tag();
  r.labels["style"] = style;
  write_report(ctx.workspace.report(task, variant, style), r);
  return r;
}

// ---------------------------------------------------------------------------

PipelineResult run_pipeline(const StageContext& ctx) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& rc = ctx.config;
  const Workspace& ws = ctx.workspace;
  prepare_workspace(ctx);
  ensure_data(ctx);
  if (!fs::exists(ws.base_checkpoint())) pretrain_stage(ctx);

  PipelineResult result;
  const TaskVariant variant = TaskVariant::from_config(rc);
  for (const auto& s : all_style_ids()) {
    if (!fs::exists(ws.adapter(s, variant.mode))) {
      auto f = adapter_stage(ctx, s, variant.mode);
      result.freezes.insert(result.freezes.end(), f.begin(), f.end());
    }
    result.adapter_digest_after_step1[s] = file_digest(ws.adapter(s, variant.mode));
  }
  say(ctx, "step 1 done after " + std::to_string(seconds_since(t0)) + " s");

  for (const auto& t : rc.tasks) {
    const TaskKind task = parse_task(t);
    if (!fs::exists(ws.task_checkpoint(task, variant))) {
      auto f = task_stage(ctx, task, variant);
      result.freezes.insert(result.freezes.end(), f.begin(), f.end());
    }
    for (const auto& s : all_style_ids()) {
      generate_stage(ctx, task, variant, s);
      result.reports[t + "." + s] = evaluate_stage(ctx, task, variant, s);
    }
    say(ctx, "task " + t + " done after " + std::to_string(seconds_since(t0)) + " s");
  }
  for (const auto& s : all_style_ids()) result.adapter_digest_final[s] = file_digest(ws.adapter(s, variant.mode));
  result.seconds = seconds_since(t0);

  std::ofstream out(ws.summary(), std::ios::binary);
  out << std::setprecision(17);
  out << "seconds=" << result.seconds << '\n' << "variant=" << variant.tag() << '\n';
  for (const auto& [s, c] : result.adapter_digest_after_step1) out << "adapter." << s << ".step1=" << hex32(c) << '\n';
  for (const auto& [s, c] : result.adapter_digest_final) out << "adapter." << s << ".final=" << hex32(c) << '\n';
  for (const auto& [k, r] : result.reports)
    out << "report." << k << "=" << ws.report(parse_task(r.labels.at("task")), variant, r.labels.at("style")).string()
        << '\n';
  if (!out) throw std::runtime_error("cannot write " + ws.summary().string());
  return result;
}

std::vector<AblationRow> run_ablation(const StageContext& ctx, TaskKind task) {
  const Workspace& ws = ctx.workspace;
  prepare_workspace(ctx);
  ensure_data(ctx);
  if (!fs::exists(ws.base_checkpoint())) pretrain_stage(ctx);

  std::vector<TaskVariant> grid;
  for (PretrainMode m : {PretrainMode::InversePara, PretrainMode::Denoise})
    for (GroupSelector g : {GroupSelector::Enc, GroupSelector::EncCatt, GroupSelector::EncCattDec})
      grid.push_back({g, m, true});
  grid.push_back({GroupSelector::Enc, PretrainMode::InversePara, false});

  std::vector<AblationRow> rows;
  for (const auto& v : grid) {
    for (const auto& s : all_style_ids())
      if (!fs::exists(ws.adapter(s, v.mode))) adapter_stage(ctx, s, v.mode);
    if (!fs::exists(ws.task_checkpoint(task, v))) task_stage(ctx, task, v);
    AblationRow row;
    row.variant = v;
    for (const auto& s : all_style_ids()) {
      if (!fs::exists(ws.report(task, v, s))) {
        generate_stage(ctx, task, v, s);
        evaluate_stage(ctx, task, v, s);
      }
      MetricsReport r = read_report(ws.report(task, v, s));
      if (s == "s0") row.stylefree = r;
      else row.styled[s] = r;
    }
    rows.push_back(std::move(row));
  }
  std::ofstream out(ws.ablation_table(task), std::ios::binary);
  out << format_ablation(rows);
  if (!out) throw std::runtime_error("cannot write " + ws.ablation_table(task).string());
  return rows;
}

std::string format_ablation(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "variant\texact\tr1\tr2\trl\tppl";
  const auto styles = marked_style_ids();
  for (const auto& s : styles) os << "\tmarker." << s;
  for (const auto& s : styles) os << "\tppl_s." << s;
  os << '\n';
  for (const auto& row : rows) {
    const auto& r = row.stylefree;
    os << row.variant.tag() << '\t' << r.exact << '\t' << r.r1 << '\t' << r.r2 << '\t' << r.rl << '\t' << r.ppl;
    for (const auto& s : styles) os << '\t' << row.styled.at(s).marker.at(s);
    for (const auto& s : styles) os << '\t' << row.styled.at(s).ppl_s.at(s);
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------

namespace {

Matrix uniform(Index r, Index c, std::mt19937_64& rng) {
  std::uniform_real_distribution<Scalar> u(-2.0, 2.0);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

// Weighted sum so every output element carries a distinct gradient.
Tensor probe(const Tensor& out, const Matrix& weights) { return ops::sum(ops::mul(out, Tensor(weights))); }

}  // namespace

std::vector<GradcheckEntry> gradcheck_suite(std::uint64_t seed, std::size_t n_model_params) {
  std::mt19937_64 rng(seed);
  std::vector<GradcheckEntry> out;
  constexpr Scalar eps = 1e-6;
  auto check = [&](const std::string& name, const ScalarFn& f, const Tensor& w) {
    out.push_back({name, grad_check(f, w, eps)});
  };

  {
    Tensor a(uniform(3, 4, rng)), b(uniform(4, 5, rng));
    const Matrix c = uniform(3, 5, rng);
    check("matmul.a", [&](const Tensor& w) { return probe(ops::matmul(w, b), c); }, a);
    check("matmul.b", [&](const Tensor& w) { return probe(ops::matmul(a, w), c); }, b);
  }
  {
    Tensor a(uniform(3, 5, rng));
    const Matrix c = uniform(5, 3, rng);
    check("transpose", [&](const Tensor& w) { return probe(ops::transpose(w), c); }, a);
  }
  {
    Tensor a(uniform(4, 3, rng)), b(uniform(4, 3, rng)), row(uniform(1, 3, rng));
    const Matrix c = uniform(4, 3, rng);
    check("add", [&](const Tensor& w) { return probe(ops::add(w, b), c); }, a);
    check("add_row.matrix", [&](const Tensor& w) { return probe(ops::add_row(w, row), c); }, a);
    check("add_row.row", [&](const Tensor& w) { return probe(ops::add_row(a, w), c); }, row);
    check("scale", [&](const Tensor& w) { return probe(ops::scale(w, -1.7), c); }, a);
    check("mul.a", [&](const Tensor& w) { return probe(ops::mul(w, b), c); }, a);
    check("mul.b", [&](const Tensor& w) { return probe(ops::mul(a, w), c); }, b);
    check("relu", [&](const Tensor& w) { return probe(ops::relu(w), c); }, a);
    check("sum", [&](const Tensor& w) { return ops::scale(ops::sum(w), 0.5); }, a);
  }
  {
    Tensor z(uniform(5, 6, rng)), g(uniform(1, 6, rng)), b(uniform(1, 6, rng));
    const Matrix c = uniform(5, 6, rng);
    check("layer_norm.z", [&](const Tensor& w) { return probe(ops::layer_norm(w, g, b), c); }, z);
    check("layer_norm.gain", [&](const Tensor& w) { return probe(ops::layer_norm(z, w, b), c); }, g);
    check("layer_norm.bias", [&](const Tensor& w) { return probe(ops::layer_norm(z, g, w), c); }, b);
    check("softmax.rows", [&](const Tensor& w) { return probe(ops::softmax(w, 1), c); }, z);
    check("softmax.cols", [&](const Tensor& w) { return probe(ops::softmax(w, 0), c); }, z);
  }
  {
    Tensor table(uniform(7, 4, rng));
    const TokenIds ids{3, 0, 3, 6, 1};
    const Matrix c = uniform(5, 4, rng);
    check("embedding", [&](const Tensor& w) { return probe(ops::embedding(w, ids), c); }, table);
    Tensor logits(uniform(5, 7, rng));
    const TokenIds targets{2, 0, 6, 6, 4};
    check("cross_entropy", [&](const Tensor& w) { return ops::cross_entropy(w, targets, 0); }, logits);
  }
  {
    Tensor a(uniform(6, 5, rng));
    const Matrix c = uniform(6, 5, rng);
    check("dropout", [&](const Tensor& w) {
      std::mt19937_64 mask_rng(seed + 17);
      return probe(ops::dropout(w, 0.3, mask_rng), c);
    }, a);
  }
  {
    const std::vector<Segment> qs{{0, 3}, {3, 4}}, ks{{0, 2}, {2, 5}};
    Tensor q(uniform(7, 8, rng)), k(uniform(7, 8, rng)), v(uniform(7, 8, rng));
    const Matrix c = uniform(7, 8, rng);
    check("attention.q", [&](const Tensor& w) { return probe(ops::attention(w, k, v, 2, qs, ks, false), c); }, q);
    check("attention.k", [&](const Tensor& w) { return probe(ops::attention(q, w, v, 2, qs, ks, false), c); }, k);
    check("attention.v", [&](const Tensor& w) { return probe(ops::attention(q, k, w, 2, qs, ks, false), c); }, v);
    const std::vector<Segment> cs{{0, 3}, {3, 4}};
    check("attention.causal.q", [&](const Tensor& w) { return probe(ops::attention(w, k, v, 4, cs, cs, true), c); }, q);
    check("attention.causal.k", [&](const Tensor& w) { return probe(ops::attention(q, w, v, 4, cs, cs, true), c); }, k);
    check("attention.causal.v", [&](const Tensor& w) { return probe(ops::attention(q, k, w, 4, cs, cs, true), c); }, v);
  }
  {
    Tensor x(uniform(4, 6, rng)), w(uniform(6, 3, rng)), b(uniform(1, 3, rng));
    const Matrix c = uniform(4, 3, rng);
    check("linear.x", [&](const Tensor& t) { return probe(ops::linear(t, w, b), c); }, x);
    check("linear.w", [&](const Tensor& t) { return probe(ops::linear(x, t, b), c); }, w);
    check("linear.b", [&](const Tensor& t) { return probe(ops::linear(x, w, t), c); }, b);
  }

  // Full teacher-forced decoder loss of a small model with non-trivial adapters.
  ModelConfig mc;
  mc.d_model = 16;
  mc.n_heads = 2;
  mc.d_ffn = 32;
  mc.adapter_bottleneck = 4;
  mc.max_len = 16;
  mc.seed = seed;
  Model model(mc);
  AdapterSet adapters = AdapterSet::fresh(mc, "s1", seed + 1);
  std::normal_distribution<Scalar> noise(0.0, 0.1);
  for (const auto& p : adapters.params()) {
    Tensor t = p.tensor;
    for (Index i = 0; i < t.size(); ++i) t.mutable_value().data()[i] += noise(rng);
  }
  model.swap_adapters(adapters);
  std::uniform_int_distribution<TokenId> tok(4, static_cast<TokenId>(mc.vocab_size - 1));
  std::vector<Seq2SeqExample> batch(2);
  for (auto& ex : batch) {
    for (int i = 0; i < 6; ++i) ex.source.push_back(tok(rng));
    for (int i = 0; i < 4; ++i) ex.target.push_back(tok(rng));
  }
  const ScalarFn loss = [&](const Tensor&) { return batch_loss(model, batch); };

  std::vector<NamedTensor> all = model.base_params();
  for (const auto& p : model.adapters().params()) all.push_back(p);
  std::vector<Matrix> grads;
  {
    for (auto& p : all) p.tensor.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    tape.backward(loss(Tensor()));
    for (auto& p : all) grads.push_back(p.tensor.has_grad() ? p.tensor.grad() : Matrix::Zero(p.tensor.rows(), p.tensor.cols()));
    for (auto& p : all) p.tensor.set_requires_grad(false);
  }
  // Elements whose true gradient is (near) zero, e.g. attention key biases,
  // only measure rounding noise; they are not drawn.
  constexpr Scalar min_grad = 1e-4;
  std::vector<std::pair<std::size_t, Index>> pool_base, pool_adapter;
  for (std::size_t i = 0; i < all.size(); ++i)
    for (Index j = 0; j < grads[i].size(); ++j)
      if (std::abs(grads[i].data()[j]) >= min_grad)
        (all[i].name.rfind("adapter.", 0) == 0 ? pool_adapter : pool_base).push_back({i, j});
  if (pool_adapter.empty() || pool_base.empty()) throw std::logic_error("gradcheck: degenerate model gradients");
  const std::size_t n_adapter = std::max<std::size_t>(1, n_model_params / 4);
  for (std::size_t n = 0; n < n_model_params; ++n) {
    auto& pool = n < n_adapter ? pool_adapter : pool_base;
    const auto [i, j] = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    const Index elem[1] = {j};
    out.push_back({"model." + all[i].name + "[" + std::to_string(j) + "]", grad_check(loss, all[i].tensor, 1e-5, elem)});
  }
  return out;
}

}  // namespace styleswap
