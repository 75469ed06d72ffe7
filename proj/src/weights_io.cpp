#include <cstdio>
#include <cstring>
#include <memory>
#include <sstream>

#include "esc/io.hpp"

namespace esc {

namespace {

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char(v >> 8));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) out.push_back(char((v >> s) & 0xff));
}

void put_f32(std::string& out, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  put_u32(out, u);
}

struct Reader {
  const std::string& b;
  const std::string& path;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > b.size()) throw IoError("truncated weight file '" + path + "'");
  }
  std::uint8_t u8() {
    need(1);
    return std::uint8_t(b[pos++]);
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = std::uint16_t(std::uint8_t(b[pos])) |
                      std::uint16_t(std::uint8_t(b[pos + 1])) << 8;
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= std::uint32_t(std::uint8_t(b[pos + size_t(i)])) << (8 * i);
    pos += 4;
    return v;
  }
  float f32() {
    const std::uint32_t u = u32();
    float f;
    std::memcpy(&f, &u, 4);
    return f;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s = b.substr(pos, n);
    pos += n;
    return s;
  }
};

std::string read_file(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError("cannot open '" + path + "' for reading");
  std::string buf;
  char chunk[65536];
  size_t got;
  while ((got = std::fread(chunk, 1, sizeof(chunk), f)) > 0) buf.append(chunk, got);
  std::fclose(f);
  return buf;
}

void write_file(const std::string& path, const std::string& bytes) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  const size_t wrote = std::fwrite(bytes.data(), 1, bytes.size(), f);
  const int rc = std::fclose(f);
  if (wrote != bytes.size() || rc != 0)
    throw IoError("failed writing '" + path + "'");
}

}  // namespace

void save_weights(const WeightStore& store, const std::string& path) {
  std::string out;
  out += "ESCW";
  put_u16(out, 1);
  if (store.size() > 0xffffffffu)
    throw IoError("weight store too large to serialize");
  put_u32(out, std::uint32_t(store.size()));
  for (const auto& [name, t] : store) {
    if (name.empty() || name.size() > 0xffff)
      throw IoError("tensor name length out of range: '" + name + "'");
    if (t.dims.size() > 0xff)
      throw IoError("tensor rank out of range for '" + name + "'");
    if (std::int64_t(t.data.size()) != t.count())
      throw IoError("tensor '" + name + "' payload does not match its dims");
    put_u16(out, std::uint16_t(name.size()));
    out += name;
    out.push_back(0);  // dtype f32
    out.push_back(char(t.dims.size()));
    for (std::int64_t d : t.dims) {
      if (d < 1 || d > 0xffffffffLL)
        throw IoError("tensor '" + name + "' dimension out of range");
      put_u32(out, std::uint32_t(d));
    }
    for (float f : t.data) put_f32(out, f);
  }
  write_file(path, out);
}

WeightStore load_weights(const std::string& path) {
  const std::string b = read_file(path);
  Reader r{b, path};
  if (r.bytes(4) != "ESCW")
    throw IoError("bad magic in '" + path + "': not an ESCW weight file");
  const std::uint16_t version = r.u16();
  if (version != 1)
    throw IoError("unsupported weight file version " + std::to_string(version) +
                  " in '" + path + "'");
  const std::uint32_t count = r.u32();
  WeightStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t nlen = r.u16();
    if (nlen == 0) throw IoError("empty tensor name in '" + path + "'");
    const std::string name = r.bytes(nlen);
    const std::uint8_t dtype = r.u8();
    if (dtype != 0)
      throw IoError("unsupported dtype code " + std::to_string(dtype) +
                    " for tensor '" + name + "' in '" + path + "'");
    const std::uint8_t rank = r.u8();
    NamedTensor t;
    std::int64_t n = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const std::int64_t dim = std::int64_t(r.u32());
      if (dim < 1) throw IoError("zero dimension for tensor '" + name + "'");
      t.dims.push_back(dim);
      n *= dim;
      if (n > (std::int64_t(1) << 31))
        throw IoError("implausibly large tensor '" + name + "' in '" + path + "'");
    }
    r.need(size_t(n) * 4);
    t.data.resize(size_t(n));
    for (std::int64_t k = 0; k < n; ++k) t.data[size_t(k)] = r.f32();
    if (!store.emplace(std::move(name), std::move(t)).second)
      throw IoError("duplicate tensor name in '" + path + "'");
  }
  if (r.pos != b.size())
    throw IoError("trailing bytes after tensor data in '" + path + "'");
  return store;
}

WeightStore load_weights(const std::string& path, const ModelConfig& cfg) {
  WeightStore store = load_weights(path);
  validate_weights(store, cfg);
  return store;
}

std::string backend_name(Backend b) {
  return b == Backend::naive ? "naive" : "tiled";
}

Backend parse_backend(const std::string& name) {
  if (name == "naive") return Backend::naive;
  if (name == "tiled") return Backend::tiled;
  throw IoError("unknown backend '" + name + "' (naive, tiled)");
}

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

long long parse_int(const std::string& v, const std::string& key) {
  try {
    size_t used = 0;
    const long long n = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return n;
  } catch (const std::exception&) {
    throw IoError("config: invalid value '" + v + "' for key '" + key + "'");
  }
}

double parse_real(const std::string& v, const std::string& key) {
  try {
    size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw IoError("config: invalid value '" + v + "' for key '" + key + "'");
  }
}

}  // namespace

ModelConfig RunConfig::to_model_config() const {
  ModelConfig m = ModelConfig::preset(variant, scale);
  m.window = window_size;
  m.heads = heads;
  m.ffn_expand = ffn_expand;
  m.validate();
  return m;
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig rc;
  std::istringstream in(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const size_t hash = raw.find('#');
    if (hash != std::string::npos) raw.erase(hash);
    const std::string line = trim(raw);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw IoError("config line " + std::to_string(lineno) +
                    ": expected key=value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty() || val.empty())
      throw IoError("config line " + std::to_string(lineno) +
                    ": empty key or value");

    if (key == "variant") {
      try {
        rc.variant = parse_variant(val);
      } catch (const ShapeError& e) {
        throw IoError(std::string("config: ") + e.what());
      }
    } else if (key == "scale") {
      rc.scale = int(parse_int(val, key));
    } else if (key == "window_size") {
      rc.window_size = int(parse_int(val, key));
    } else if (key == "backend") {
      rc.backend = parse_backend(val);
    } else if (key == "block_size") {
      rc.block_size = int(parse_int(val, key));
    } else if (key == "seed") {
      rc.seed = std::uint64_t(parse_int(val, key));
    } else if (key == "heads") {
      rc.heads = int(parse_int(val, key));
    } else if (key == "ffn_expand") {
      rc.ffn_expand = parse_real(val, key);
    } else {
      throw IoError("config: unknown key '" + key + "'");
    }
  }
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  return parse_run_config(read_file(path));
}

}  // namespace esc
