#include "rfat/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "rfat/checksum.hpp"
#include "rfat/errors.hpp"
#include "rfat/io.hpp"

namespace fs = std::filesystem;

namespace rfat {

std::string read_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& file, const std::string& bytes) {
  if (file.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(file.parent_path(), ec);
  }
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + file.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + file.string());
}

namespace {

// Val draws from its own stream so adding training images never changes it.
constexpr std::uint64_t kValStreamOffset = 0x9E3779B97F4A7C15ULL;

std::string encode_ppm(const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("ppm: expected (3, H, W) image, got " + shape_str(image.shape()));
  }
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  const auto d = image.data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = std::clamp(d[(c * h + y) * w + x], 0.0f, 1.0f);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
      }
  return out;
}

Tensor<float> decode_ppm(const std::string& bytes, const std::string& where) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  auto number = [&](const char* what) {
    const std::string t = token();
    try {
      std::size_t used = 0;
      const long v = std::stol(t, &used);
      if (used != t.size() || v <= 0) throw std::invalid_argument(t);
      return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      throw IoError(where + ": bad PPM " + what + " '" + t + "'");
    }
  };
  if (token() != "P6") throw IoError(where + ": not a binary PPM (P6)");
  const std::size_t w = number("width"), h = number("height");
  if (number("maxval") != 255) throw IoError(where + ": only 8-bit PPM is supported");
  ++pos;  // single whitespace byte before the raster
  if (bytes.size() - std::min(pos, bytes.size()) != 3 * w * h) {
    throw IoError(where + ": PPM raster is truncated or oversized");
  }
  Tensor<float> image(Shape{3, h, w});
  auto d = image.data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        d[(c * h + y) * w + x] =
            static_cast<float>(static_cast<unsigned char>(bytes[pos++])) / 255.0f;
  return image;
}

std::string stem(std::size_t i) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%06zu", i);
  return buf;
}

double intersection(const BBox& a, const BBox& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return iw > 0 && ih > 0 ? iw * ih : 0.0;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string encode_manifest(const Manifest& m) {
  std::ostringstream out;
  out << "format " << m.format << "\n"
      << "seed " << m.spec.seed << "\n"
      << "img_size " << m.spec.img_size << "\n"
      << "min_objects " << m.spec.min_objects << "\n"
      << "max_objects " << m.spec.max_objects << "\n"
      << "small_fraction " << format_double(m.spec.small_fraction) << "\n"
      << "noise " << format_double(m.spec.noise) << "\n"
      << "train " << m.n_train << "\n"
      << "val " << m.n_val << "\n"
      << "dropped " << m.dropped << "\n"
      << "checksum " << m.checksum << "\n";
  for (const auto& s : m.train) out << "member " << s << "\n";
  for (const auto& s : m.val) out << "member " << s << "\n";
  return out.str();
}

Manifest decode_manifest(const std::string& text, const std::string& where) {
  Manifest m;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& why) {
    throw IoError(where + ":" + std::to_string(lineno) + ": " + why);
  };
  auto as_size = [&](const std::string& v) {
    try {
      return static_cast<std::size_t>(std::stoull(v));
    } catch (const std::exception&) {
      fail("expected an unsigned integer, got '" + v + "'");
    }
    return std::size_t{0};
  };
  auto as_double = [&](const std::string& v) {
    try {
      return std::stod(v);
    } catch (const std::exception&) {
      fail("expected a number, got '" + v + "'");
    }
    return 0.0;
  };
  bool have_format = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto space = line.find(' ');
    if (space == std::string::npos) fail("expected 'key value'");
    const std::string key = line.substr(0, space), value = line.substr(space + 1);
    if (key == "format") {
      if (value != m.format) fail("unsupported format '" + value + "'");
      have_format = true;
    } else if (key == "seed") {
      m.spec.seed = as_size(value);
    } else if (key == "img_size") {
      m.spec.img_size = as_size(value);
    } else if (key == "min_objects") {
      m.spec.min_objects = as_size(value);
    } else if (key == "max_objects") {
      m.spec.max_objects = as_size(value);
    } else if (key == "small_fraction") {
      m.spec.small_fraction = as_double(value);
    } else if (key == "noise") {
      m.spec.noise = as_double(value);
    } else if (key == "train") {
      m.n_train = as_size(value);
    } else if (key == "val") {
      m.n_val = as_size(value);
    } else if (key == "dropped") {
      m.dropped = as_size(value);
    } else if (key == "checksum") {
      m.checksum = value;
    } else if (key == "member") {
      if (value.rfind("train/", 0) == 0) {
        m.train.push_back(value);
      } else if (value.rfind("val/", 0) == 0) {
        m.val.push_back(value);
      } else {
        fail("member outside train/ or val/: '" + value + "'");
      }
    } else {
      fail("unknown key '" + key + "'");
    }
  }
  if (!have_format) throw IoError(where + ": missing format line");
  if (m.train.size() != m.n_train || m.val.size() != m.n_val) {
    throw IoError(where + ": member list does not match the train/val counts");
  }
  return m;
}

}  // namespace

GroundTruth paint_object(Tensor<float>& image, const ObjectSpec& obj) {
  const std::size_t S = image.dim(1), W = image.dim(2);
  if (obj.x0 + obj.w > W || obj.y0 + obj.h > S) {
    throw ShapeError("paint_object: object extends past the image");
  }
  auto d = image.data();
  const double cx = obj.x0 + obj.w / 2.0, cy = obj.y0 + obj.h / 2.0;
  const double rx = obj.w / 2.0, ry = obj.h / 2.0;
  for (std::size_t y = obj.y0; y < obj.y0 + obj.h; ++y) {
    for (std::size_t x = obj.x0; x < obj.x0 + obj.w; ++x) {
      if (obj.class_id == kSign) {
        const double u = (x + 0.5 - cx) / rx, v = (y + 0.5 - cy) / ry;
        if (u * u + v * v > 1.0) continue;
      }
      for (std::size_t c = 0; c < 3; ++c) d[(c * S + y) * W + x] = obj.color[c];
    }
  }
  GroundTruth g;
  g.class_id = obj.class_id;
  g.box = BBox{double(obj.x0), double(obj.y0), double(obj.x0 + obj.w), double(obj.y0 + obj.h)};
  return g;
}

Sample generate_scene(Xoshiro256pp& rng, const SceneSpec& spec, SceneStats* stats) {
  const std::size_t S = spec.img_size;
  if (S < 8) throw ConfigError("scene: img_size must be at least 8");
  if (spec.min_objects > spec.max_objects) throw ConfigError("scene: min_objects > max_objects");
  Sample s;
  s.image = Tensor<float>(Shape{3, S, S});
  auto d = s.image.data();
  for (std::size_t c = 0; c < 3; ++c) {
    const double base = rng.uniform(0.3, 0.5);
    for (std::size_t i = 0; i < S * S; ++i)
      d[c * S * S + i] = static_cast<float>(base + rng.uniform(-spec.noise, spec.noise));
  }

  const auto count = static_cast<std::size_t>(rng.uniform_int(
      static_cast<std::int64_t>(spec.min_objects), static_cast<std::int64_t>(spec.max_objects)));
  const double scale = static_cast<double>(S) / 64.0;
  for (std::size_t n = 0; n < count; ++n) {
    ObjectSpec obj;
    obj.class_id = static_cast<int>(rng.uniform_int(0, kSceneClassCount - 1));
    const bool small = rng.uniform() < spec.small_fraction;
    const double t = small ? rng.uniform(6.0, 14.0) : rng.uniform(16.0, 36.0) * scale;
    double aspect = 1.0;  // width / height
    if (obj.class_id == kVehicle) aspect = rng.uniform(1.0, 2.0);
    if (obj.class_id == kPedestrian) aspect = rng.uniform(0.25, 0.45);
    auto side = [&](double v) {
      return std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(v)), 3, S);
    };
    obj.w = side(t * std::sqrt(aspect));
    obj.h = side(t / std::sqrt(aspect));
    for (std::size_t c = 0; c < 3; ++c) {
      obj.color[c] = static_cast<int>(c) == obj.class_id ? static_cast<float>(rng.uniform(0.9, 1.0))
                                                         : static_cast<float>(rng.uniform(0.0, 0.1));
    }

    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      obj.x0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(S - obj.w)));
      obj.y0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(S - obj.h)));
      const BBox box{double(obj.x0), double(obj.y0), double(obj.x0 + obj.w),
                     double(obj.y0 + obj.h)};
      placed = std::none_of(s.labels.begin(), s.labels.end(), [&](const GroundTruth& g) {
        return intersection(box, g.box) > 0.25 * std::min(box.area(), g.box.area());
      });
    }
    if (!placed) {
      if (stats) ++stats->dropped;
      continue;
    }
    s.labels.push_back(paint_object(s.image, obj));
    if (stats) ++stats->objects;
  }
  return s;
}

void write_ppm(const fs::path& file, const Tensor<float>& image) {
  write_file(file, encode_ppm(image));
}

Tensor<float> read_ppm(const fs::path& file) { return decode_ppm(read_file(file), file.string()); }

std::string format_labels(const std::vector<GroundTruth>& labels, std::size_t img_size) {
  std::string out;
  const double S = static_cast<double>(img_size);
  char buf[128];
  for (const auto& g : labels) {
    const BBox& b = g.box;
    std::snprintf(buf, sizeof buf, "%d %.9f %.9f %.9f %.9f\n", g.class_id,
                  (b.x1 + b.x2) / 2 / S, (b.y1 + b.y2) / 2 / S, b.width() / S, b.height() / S);
    out += buf;
  }
  return out;
}

std::vector<GroundTruth> parse_labels(const std::string& text, std::size_t img_size,
                                      const std::string& where) {
  std::vector<GroundTruth> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  const double S = static_cast<double>(img_size);
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream fields(line);
    int cls;
    double cx, cy, w, h;
    std::string extra;
    if (!(fields >> cls >> cx >> cy >> w >> h) || (fields >> extra)) {
      throw IoError(where + ":" + std::to_string(lineno) + ": expected 'class cx cy w h'");
    }
    if (cls < 0 || w < 0 || h < 0) {
      throw IoError(where + ":" + std::to_string(lineno) + ": negative class or size");
    }
    GroundTruth g;
    g.class_id = cls;
    g.box = BBox{(cx - w / 2) * S, (cy - h / 2) * S, (cx + w / 2) * S, (cy + h / 2) * S};
    out.push_back(g);
  }
  return out;
}

Manifest write_dataset(const fs::path& dir, const SceneSpec& spec, std::size_t n_train,
                       std::size_t n_val) {
  if (n_train == 0 && n_val == 0) throw ConfigError("gen-data: nothing to generate");
  std::error_code ec;
  for (const char* split : {"train", "val"}) {
    fs::create_directories(dir / split, ec);
    if (ec) throw IoError("cannot create " + (dir / split).string() + ": " + ec.message());
  }
  Manifest m;
  m.spec = spec;
  m.n_train = n_train;
  m.n_val = n_val;
  Fnv1a64 sum;
  auto emit = [&](const char* split, std::size_t count, std::uint64_t seed,
                  std::vector<std::string>& members) {
    Xoshiro256pp rng(seed);
    SceneStats stats;
    for (std::size_t i = 0; i < count; ++i) {
      const Sample s = generate_scene(rng, spec, &stats);
      const std::string name = std::string(split) + "/" + stem(i);
      const std::string ppm = encode_ppm(s.image), txt = format_labels(s.labels, spec.img_size);
      write_file(dir / (name + ".ppm"), ppm);
      write_file(dir / (name + ".txt"), txt);
      sum.update(ppm);
      sum.update(txt);
      members.push_back(name);
    }
    m.dropped += stats.dropped;
  };
  emit("train", n_train, spec.seed, m.train);
  emit("val", n_val, spec.seed + kValStreamOffset, m.val);
  m.checksum = Fnv1a64::hex(sum.digest());
  write_file(dir / "manifest.txt", encode_manifest(m));
  return m;
}

Dataset load_dataset(const fs::path& dir) {
  const fs::path manifest_file = dir / "manifest.txt";
  if (!fs::exists(manifest_file)) {
    throw IoError("no dataset at " + dir.string() + " (missing " + manifest_file.string() + ")");
  }
  Dataset ds;
  ds.manifest = decode_manifest(read_file(manifest_file), manifest_file.string());
  const std::size_t S = ds.manifest.spec.img_size;
  Fnv1a64 sum;
  auto load = [&](const std::vector<std::string>& members, std::vector<Sample>& out) {
    for (const auto& name : members) {
      const fs::path ppm_file = dir / (name + ".ppm"), txt_file = dir / (name + ".txt");
      const std::string ppm = read_file(ppm_file), txt = read_file(txt_file);
      sum.update(ppm);
      sum.update(txt);
      Sample s;
      s.image = decode_ppm(ppm, ppm_file.string());
      if (s.image.dim(1) != S || s.image.dim(2) != S) {
        throw IoError(ppm_file.string() + ": image is not " + std::to_string(S) + "x" +
                      std::to_string(S));
      }
      s.labels = parse_labels(txt, S, txt_file.string());
      out.push_back(std::move(s));
    }
  };
  load(ds.manifest.train, ds.train);
  load(ds.manifest.val, ds.val);
  const std::string actual = Fnv1a64::hex(sum.digest());
  if (actual != ds.manifest.checksum) {
    ds.checksum_ok = false;
    ds.warnings.push_back("dataset checksum mismatch: manifest " + ds.manifest.checksum +
                          ", files " + actual);
  }
  return ds;
}

}  // namespace rfat
