#include "styleswap/store.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <zlib.h>

namespace styleswap {

namespace fs = std::filesystem;

namespace {

constexpr char kCheckpointMagic[8] = {'S', 'S', 'W', 'P', 'C', 'K', 'P', 'T'};
constexpr char kAdapterMagic[8] = {'S', 'S', 'W', 'P', 'A', 'D', 'P', 'T'};
constexpr std::uint8_t kDtypeF32 = 1;

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(std::string_view s) { buf_.append(s); }
  void text(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint16_t u16() {
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(u8()) << (8 * i);
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::string text() { return raw(u32()); }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw FormatError("truncated file");
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

std::uint32_t crc(std::string_view bytes, std::uint32_t seed = 0) {
  uLong c = seed == 0 ? crc32(0L, Z_NULL, 0) : seed;
  c = crc32(c, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(c);
}

std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(8) << std::setfill('0') << v;
  return os.str();
}

std::map<std::string, std::string> parse_kv(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("config line without '=': " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

void write_records(ByteWriter& w, const std::vector<NamedTensor>& params) {
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.u16(static_cast<std::uint16_t>(p.name.size()));
    w.raw(p.name);
    w.u8(kDtypeF32);
    w.u8(2);
    w.u32(static_cast<std::uint32_t>(p.tensor.rows()));
    w.u32(static_cast<std::uint32_t>(p.tensor.cols()));
    const Matrix& v = p.tensor.value();
    for (Index i = 0; i < v.size(); ++i) w.f32(static_cast<float>(v.data()[i]));
  }
}

std::map<std::string, Matrix> read_records(ByteReader& r) {
  std::map<std::string, Matrix> out;
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.raw(r.u16());
    if (r.u8() != kDtypeF32) throw FormatError("record " + name + ": unsupported dtype");
    const std::uint8_t rank = r.u8();
    if (rank != 2) throw FormatError("record " + name + ": unsupported rank " + std::to_string(rank));
    const Index rows = r.u32();
    const Index cols = r.u32();
    Matrix m(rows, cols);
    for (Index j = 0; j < m.size(); ++j) m.data()[j] = static_cast<Scalar>(r.f32());
    if (!out.emplace(std::move(name), std::move(m)).second) throw FormatError("duplicate record");
  }
  return out;
}

void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

// Reads the whole file and checks magic, trailing CRC and version.
std::string read_verified(const fs::path& path, const char (&magic)[8]) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  std::string bytes = ss.str();
  if (bytes.size() < 16) throw FormatError(path.string() + ": file too short");
  if (std::memcmp(bytes.data(), magic, 8) != 0) throw FormatError(path.string() + ": bad magic");
  const std::string_view body(bytes.data(), bytes.size() - 4);
  ByteReader tail(std::string_view(bytes).substr(bytes.size() - 4));
  if (tail.u32() != crc(body)) throw FormatError(path.string() + ": checksum mismatch");
  ByteReader head(std::string_view(bytes).substr(8, 4));
  const std::uint32_t version = head.u32();
  if (version != kFormatVersion)
    throw FormatError(path.string() + ": unsupported format version " + std::to_string(version));
  bytes.resize(bytes.size() - 4);
  return bytes.substr(12);
}

std::string fmt_real(Scalar v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::string join_csv(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

}  // namespace

std::string model_config_block(const ModelConfig& c) {
  std::ostringstream os;
  os << "vocab_size=" << c.vocab_size << '\n'
     << "d_model=" << c.d_model << '\n'
     << "n_heads=" << c.n_heads << '\n'
     << "d_ffn=" << c.d_ffn << '\n'
     << "n_enc_layers=" << c.n_enc_layers << '\n'
     << "n_dec_layers=" << c.n_dec_layers << '\n'
     << "adapter_bottleneck=" << c.adapter_bottleneck << '\n'
     << "max_len=" << c.max_len << '\n'
     << "seed=" << c.seed << '\n'
     << "ln_eps=" << fmt_real(c.ln_eps) << '\n'
     << "dropout=" << fmt_real(c.dropout) << '\n';
  return os.str();
}

ModelConfig parse_model_config(const std::map<std::string, std::string>& kv) {
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw FormatError("config block lacks '" + k + "'");
    return it->second;
  };
  ModelConfig c;
  c.vocab_size = std::stoll(get("vocab_size"));
  c.d_model = std::stoll(get("d_model"));
  c.n_heads = std::stoll(get("n_heads"));
  c.d_ffn = std::stoll(get("d_ffn"));
  c.n_enc_layers = std::stoll(get("n_enc_layers"));
  c.n_dec_layers = std::stoll(get("n_dec_layers"));
  c.adapter_bottleneck = std::stoll(get("adapter_bottleneck"));
  c.max_len = std::stoll(get("max_len"));
  c.seed = std::stoull(get("seed"));
  c.ln_eps = std::stod(get("ln_eps"));
  c.dropout = std::stod(get("dropout"));
  c.validate();
  return c;
}

std::string base_fingerprint(const Model& model) {
  ByteWriter w;
  w.raw(model_config_block(model.config()));
  write_records(w, model.base_params());
  return hex32(crc(w.bytes()));
}

void save_checkpoint(const Model& model, const fs::path& path, const std::vector<std::string>& lineage) {
  ByteWriter w;
  w.raw(std::string_view(kCheckpointMagic, 8));
  w.u32(kFormatVersion);
  std::string config = model_config_block(model.config());
  config += "lineage=" + join_csv(lineage) + '\n';
  w.text(config);
  write_records(w, model.base_params());
  w.u32(crc(w.bytes()));
  write_file(path, w.bytes());
}

Checkpoint load_checkpoint(const fs::path& path) {
  const std::string body = read_verified(path, kCheckpointMagic);
  ByteReader r(body);
  const auto kv = parse_kv(r.text());
  Model model(parse_model_config(kv));
  auto records = read_records(r);
  if (!r.done()) throw FormatError(path.string() + ": trailing bytes");
  for (const auto& p : model.base_params()) {
    auto it = records.find(p.name);
    if (it == records.end()) throw FormatError(path.string() + ": missing parameter " + p.name);
    model.set_param(p.name, it->second);
    records.erase(it);
  }
  if (!records.empty()) throw FormatError(path.string() + ": unexpected parameter " + records.begin()->first);
  std::vector<std::string> lineage;
  if (auto it = kv.find("lineage"); it != kv.end()) lineage = split_csv(it->second);
  return Checkpoint{std::move(model), std::move(lineage)};
}

void save_adapter(const AdapterSet& adapters, PretrainMode mode, const std::string& base_fp, const fs::path& path) {
  ByteWriter w;
  w.raw(std::string_view(kAdapterMagic, 8));
  w.u32(kFormatVersion);
  std::ostringstream meta;
  meta << "style_id=" << adapters.style_id() << '\n'
       << "mode=" << to_string(mode) << '\n'
       << "base_fingerprint=" << base_fp << '\n'
       << "n_layers=" << adapters.n_layers() << '\n'
       << "d_model=" << adapters.width() << '\n'
       << "bottleneck=" << adapters.bottleneck() << '\n';
  w.text(meta.str());
  write_records(w, adapters.params());
  w.u32(crc(w.bytes()));
  write_file(path, w.bytes());
}

AdapterFile read_adapter(const fs::path& path) {
  const std::string body = read_verified(path, kAdapterMagic);
  ByteReader r(body);
  const auto kv = parse_kv(r.text());
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw FormatError(path.string() + ": adapter header lacks '" + k + "'");
    return it->second;
  };
  auto records = read_records(r);
  if (!r.done()) throw FormatError(path.string() + ": trailing bytes");
  const Index n_layers = std::stoll(get("n_layers"));
  std::vector<AdapterLayer> layers;
  auto take = [&](const std::string& name) {
    auto it = records.find(name);
    if (it == records.end()) throw FormatError(path.string() + ": missing adapter parameter " + name);
    return Tensor(it->second);
  };
  for (Index l = 0; l < n_layers; ++l) {
    const std::string p = "adapter." + std::to_string(l) + ".";
    layers.push_back({take(p + "ln.g"), take(p + "ln.b"), take(p + "down"), take(p + "up")});
  }
  if (records.size() != static_cast<std::size_t>(4 * n_layers))
    throw FormatError(path.string() + ": unexpected adapter records");
  AdapterFile f;
  f.adapters = AdapterSet(get("style_id"), std::move(layers));
  f.mode = parse_mode(get("mode"));
  f.base_fingerprint = get("base_fingerprint");
  return f;
}

AdapterFile load_adapter(const fs::path& path, Model& model, const std::vector<std::string>& lineage) {
  AdapterFile f = read_adapter(path);
  const std::string fp = base_fingerprint(model);
  bool compatible = f.base_fingerprint == fp;
  for (const auto& a : lineage) compatible = compatible || f.base_fingerprint == a;
  if (!compatible)
    throw FormatError(path.string() + ": adapter was trained against base " + f.base_fingerprint +
                      ", which is neither this model (" + fp + ") nor one of its ancestors");
  model.swap_adapters(f.adapters);
  return f;
}

// ---------------------------------------------------------------------------

RunConfig RunConfig::preset_defaults(const std::string& name) {
  RunConfig c;
  c.preset = name;
  c.model.seed = c.seed;
  if (name == "toy") return c;
  if (name == "paper") {
    c.model.adapter_bottleneck = 64;
    c.optim.lr = 5e-5;
    c.batch_size = 8;
    c.decode.beam_size = 4;
    return c;
  }
  throw ConfigError("unknown preset '" + name + "'");
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto count = [&] { return static_cast<std::size_t>(std::stoull(value)); };
  auto index = [&] { return static_cast<Index>(std::stoll(value)); };
  auto real = [&] { return std::stod(value); };
  auto boolean = [&] {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("expected true/false for " + key);
  };
  try {
    if (key == "seed") seed = std::stoull(value), model.seed = seed;
    else if (key == "d_model") model.d_model = index();
    else if (key == "n_heads") model.n_heads = index();
    else if (key == "d_ffn") model.d_ffn = index();
    else if (key == "n_enc_layers") model.n_enc_layers = index();
    else if (key == "n_dec_layers") model.n_dec_layers = index();
    else if (key == "adapter_bottleneck") model.adapter_bottleneck = index();
    else if (key == "max_len") model.max_len = index();
    else if (key == "ln_eps") model.ln_eps = real();
    else if (key == "dropout") model.dropout = real();
    else if (key == "corpus.task") corpus.task = count();
    else if (key == "corpus.style") corpus.style = count();
    else if (key == "corpus.general") corpus.general = count();
    else if (key == "noise.mask") noise.mask = real();
    else if (key == "noise.delete") noise.remove = real();
    else if (key == "lr") optim.lr = real();
    else if (key == "beta1") optim.beta1 = real();
    else if (key == "beta2") optim.beta2 = real();
    else if (key == "adam_eps") optim.eps = real();
    else if (key == "weight_decay") optim.weight_decay = real();
    else if (key == "batch_size") batch_size = count();
    else if (key == "patience") patience = count();
    else if (key == "pretrain.epochs") pretrain_epochs = count();
    else if (key == "adapter.epochs") adapter_epochs = count();
    else if (key == "task.epochs") task_epochs = count();
    else if (key == "task.trainable") parse_selector(value), task_trainable = value;
    else if (key == "task.train_embeddings") task_train_embeddings = boolean();
    else if (key == "adapter.mode") parse_mode(value), adapter_mode = value;
    else if (key == "beam_size") decode.beam_size = index();
    else if (key == "decode.max_len") decode.max_len = index();
    else if (key == "length_penalty") decode.length_penalty = real();
    else if (key == "decode.min_len") decode.min_len = index();
    else if (key == "tasks") {
      tasks = split_csv(value);
      for (const auto& t : tasks) parse_task(t);
    } else throw ConfigError("unknown config key '" + key + "'");
  } catch (const std::invalid_argument& e) {
    if (dynamic_cast<const ConfigError*>(&e)) throw;
    throw ConfigError("bad value '" + value + "' for " + key);
  }
}

RunConfig RunConfig::parse(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream in(text);
  std::string line;
  std::string preset = "toy";
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line without '=': " + line);
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    if (key == "preset") preset = value;
    else entries.emplace_back(std::move(key), std::move(value));
  }
  RunConfig c = preset_defaults(preset);
  for (const auto& [k, v] : entries) c.set(k, v);
  c.model.validate();
  if (c.decode.beam_size < 1) throw ConfigError("beam_size must be >= 1");
  if (c.decode.min_len < 0) throw ConfigError("decode.min_len must be >= 0");
  if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os << "preset=" << preset << '\n'
     << "seed=" << seed << '\n'
     << "d_model=" << model.d_model << '\n'
     << "n_heads=" << model.n_heads << '\n'
     << "d_ffn=" << model.d_ffn << '\n'
     << "n_enc_layers=" << model.n_enc_layers << '\n'
     << "n_dec_layers=" << model.n_dec_layers << '\n'
     << "adapter_bottleneck=" << model.adapter_bottleneck << '\n'
     << "max_len=" << model.max_len << '\n'
     << "ln_eps=" << fmt_real(model.ln_eps) << '\n'
     << "dropout=" << fmt_real(model.dropout) << '\n'
     << "corpus.task=" << corpus.task << '\n'
     << "corpus.style=" << corpus.style << '\n'
     << "corpus.general=" << corpus.general << '\n'
     << "noise.mask=" << fmt_real(noise.mask) << '\n'
     << "noise.delete=" << fmt_real(noise.remove) << '\n'
     << "lr=" << fmt_real(optim.lr) << '\n'
     << "beta1=" << fmt_real(optim.beta1) << '\n'
     << "beta2=" << fmt_real(optim.beta2) << '\n'
     << "adam_eps=" << fmt_real(optim.eps) << '\n'
     << "weight_decay=" << fmt_real(optim.weight_decay) << '\n'
     << "batch_size=" << batch_size << '\n'
     << "patience=" << patience << '\n'
     << "pretrain.epochs=" << pretrain_epochs << '\n'
     << "adapter.epochs=" << adapter_epochs << '\n'
     << "task.epochs=" << task_epochs << '\n'
     << "task.trainable=" << task_trainable << '\n'
     << "task.train_embeddings=" << (task_train_embeddings ? "true" : "false") << '\n'
     << "adapter.mode=" << adapter_mode << '\n'
     << "beam_size=" << decode.beam_size << '\n'
     << "decode.max_len=" << decode.max_len << '\n'
     << "length_penalty=" << fmt_real(decode.length_penalty) << '\n'
     << "decode.min_len=" << decode.min_len << '\n'
     << "tasks=" << join_csv(tasks) << '\n';
  return os.str();
}

}  // namespace styleswap
