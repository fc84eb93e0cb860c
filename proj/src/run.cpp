#include "rfat/run.hpp"

#include <bit>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "rfat/checksum.hpp"
#include "rfat/errors.hpp"
#include "rfat/io.hpp"

namespace fs = std::filesystem;

namespace rfat {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// One table drives parsing and the snapshot so the two cannot drift apart.
struct Field {
  const char* key;
  std::function<void(RunConfig&, const std::string&)> set;  // throws std::string on bad value
  std::function<std::string(const RunConfig&)> get;
};

std::size_t to_size(const std::string& v) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw std::string("expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

double to_double(const std::string& v) {
  double out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw std::string("expected a number, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  throw std::string("expected true/false, got '" + v + "'");
}

std::string from_bool(bool b) { return b ? "true" : "false"; }

#define RFAT_SIZE(key, member)                                                   \
  Field{key, [](RunConfig& c, const std::string& v) { c.member = to_size(v); }, \
        [](const RunConfig& c) { return std::to_string(c.member); }}
#define RFAT_DOUBLE(key, member)                                                   \
  Field{key, [](RunConfig& c, const std::string& v) { c.member = to_double(v); }, \
        [](const RunConfig& c) { return fmt_double(c.member); }}
#define RFAT_BOOL(key, member)                                                   \
  Field{key, [](RunConfig& c, const std::string& v) { c.member = to_bool(v); }, \
        [](const RunConfig& c) { return from_bool(c.member); }}
#define RFAT_STRING(key, member)                                           \
  Field{key, [](RunConfig& c, const std::string& v) { c.member = v; }, \
        [](const RunConfig& c) { return c.member; }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      RFAT_SIZE("img_size", model.img_size),
      RFAT_SIZE("base_width", model.base_width),
      RFAT_SIZE("depth", model.depth),
      RFAT_BOOL("use_rfaconv", model.use_rfaconv),
      RFAT_BOOL("use_triplet", model.use_triplet),
      RFAT_BOOL("use_p2", model.use_p2),
      Field{"num_classes",
            [](RunConfig& c, const std::string& v) {
              const auto n = to_size(v);
              if (n > 1000) throw std::string("num_classes out of range: " + v);
              c.model.num_classes = static_cast<int>(n);
            },
            [](const RunConfig& c) { return std::to_string(c.model.num_classes); }},
      RFAT_SIZE("triplet_k", model.triplet_k),
      RFAT_BOOL("share_attention_across_channels", model.share_attention_across_channels),
      RFAT_BOOL("rfa_single_conv", model.rfa_single_conv),
      RFAT_SIZE("seed", model.seed),
      RFAT_SIZE("epochs", epochs),
      RFAT_SIZE("batch_size", batch_size),
      RFAT_DOUBLE("lr", lr),
      RFAT_DOUBLE("momentum", momentum),
      RFAT_DOUBLE("weight_decay", weight_decay),
      RFAT_SIZE("warmup_steps", warmup_steps),
      RFAT_DOUBLE("conf_thresh", conf_thresh),
      RFAT_DOUBLE("nms_iou", nms_iou),
      RFAT_STRING("data_dir", data_dir),
      RFAT_STRING("out_dir", out_dir),
      RFAT_SIZE("eval_every", eval_every),
  };
  return table;
}

#undef RFAT_SIZE
#undef RFAT_DOUBLE
#undef RFAT_BOOL
#undef RFAT_STRING

// --- little-endian byte plumbing ---------------------------------------------

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end, const std::string& source)
      : bytes_(bytes), end_(end), source_(source) {}

  std::uint32_t u32() {
    need(4, "integer");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }

  std::string str(std::size_t n) {
    need(n, "name");
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == end_; }

 private:
  void need(std::size_t n, const char* what) {
    if (end_ - pos_ < n) throw IoError(source_ + ": truncated checkpoint while reading " + what);
  }

  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
  const std::string& source_;
};

}  // namespace

void RunConfig::validate() const {
  model.validate();
  auto positive = [](bool ok, const char* key) {
    if (!ok) throw ConfigError(std::string("config: ") + key + " must be positive");
  };
  positive(epochs > 0, "epochs");
  positive(batch_size > 0, "batch_size");
  positive(lr > 0, "lr");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("config: momentum must be in [0, 1)");
  if (!(weight_decay >= 0)) throw ConfigError("config: weight_decay must be >= 0");
  if (!(conf_thresh >= 0 && conf_thresh <= 1)) {
    throw ConfigError("config: conf_thresh must be in [0, 1]");
  }
  if (!(nms_iou > 0 && nms_iou <= 1)) throw ConfigError("config: nms_iou must be in (0, 1]");
  if (data_dir.empty()) throw ConfigError("config: data_dir is empty");
  if (out_dir.empty()) throw ConfigError("config: out_dir is empty");
}

TrainOptions RunConfig::train_options() const {
  TrainOptions t;
  t.epochs = epochs;
  t.batch_size = batch_size;
  t.sgd.lr = lr;
  t.sgd.momentum = momentum;
  t.sgd.weight_decay = weight_decay;
  t.sgd.warmup_steps = warmup_steps;
  t.shuffle_seed = model.seed;
  return t;
}

EvalOptions RunConfig::eval_options() const {
  EvalOptions e;
  e.conf_thresh = conf_thresh;
  e.nms_iou = nms_iou;
  return e;
}

RunConfig parse_run_config(const std::string& text, const std::string& source) {
  std::map<std::string, const Field*> by_key;
  for (const auto& f : fields()) by_key[f.key] = &f;
  RunConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const auto it = by_key.find(key);
    if (it == by_key.end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    if (value.empty()) throw ConfigError(where + "missing value for '" + key + "'");
    try {
      it->second->set(cfg, value);
    } catch (const std::string& msg) {
      throw ConfigError(where + key + ": " + msg);
    }
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return cfg;
}

RunConfig load_run_config(const fs::path& file) {
  return parse_run_config(read_file(file), file.string());
}

std::string run_config_snapshot(const RunConfig& cfg) {
  std::string out = "# fully resolved run configuration\n";
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(cfg) + "\n";
  return out;
}

const std::vector<std::string>& run_config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.emplace_back(f.key);
    return k;
  }();
  return keys;
}

// --- checkpoints --------------------------------------------------------------

std::string encode_checkpoint(const ParamList<float>& params) {
  std::string out = "RFAT";
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    put_u32(out, static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t d : p.tensor.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : p.tensor.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  Fnv1a64 h;
  h.update(out);
  put_u64(out, h.digest());
  return out;
}

NamedTensors decode_checkpoint(const std::string& bytes, const std::string& source) {
  if (bytes.size() < 4 + 4 + 4 + 8 || bytes.compare(0, 4, "RFAT") != 0) {
    throw IoError(source + ": not a checkpoint (bad magic)");
  }
  const std::size_t body = bytes.size() - 8;
  Fnv1a64 h;
  h.update(bytes.data(), body);
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) {
    stored |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[body + i])) << (8 * i);
  }
  if (stored != h.digest()) {
    throw IoError(source + ": checkpoint checksum mismatch (stored " + Fnv1a64::hex(stored) +
                  ", computed " + Fnv1a64::hex(h.digest()) + ")");
  }
  Reader r(bytes, body, source);
  r.str(4);
  if (const auto version = r.u32(); version != kCheckpointVersion) {
    throw IoError(source + ": unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  NamedTensors out;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u32());
    if (!names.insert(name).second) throw IoError(source + ": duplicate tensor '" + name + "'");
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw IoError(source + ": tensor '" + name + "' has implausible rank");
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.u32());
    Tensor<float> t(shape);
    for (float& v : t.data()) v = std::bit_cast<float>(r.u32());
    out.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) throw IoError(source + ": trailing bytes after the last tensor");
  return out;
}

void save_checkpoint(const fs::path& file, const ParamList<float>& params) {
  write_file(file, encode_checkpoint(params));
}

NamedTensors load_checkpoint(const fs::path& file) {
  return decode_checkpoint(read_file(file), file.string());
}

void apply_checkpoint(const NamedTensors& ckpt, const ParamList<float>& params) {
  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& [name, t] : ckpt) by_name[name] = &t;
  std::vector<std::string> problems;
  for (const auto& p : params) {
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) {
      problems.push_back("missing " + p.name);
    } else if (it->second->shape() != p.tensor.shape()) {
      problems.push_back("shape " + p.name + ": checkpoint " + shape_str(it->second->shape()) +
                         " vs model " + shape_str(p.tensor.shape()));
    }
    if (it != by_name.end()) by_name.erase(it);
  }
  for (const auto& [name, t] : by_name) problems.push_back("unexpected " + name);
  if (!problems.empty()) {
    std::string msg = "checkpoint does not match the model config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
  for (const auto& [name, t] : ckpt) by_name[name] = &t;
  for (const auto& p : params) {
    Tensor<float> dst = p.tensor;  // shared handle
    const auto src = by_name.at(p.name)->data();
    std::memcpy(dst.data().data(), src.data(), src.size() * sizeof(float));
  }
}

}  // namespace rfat
