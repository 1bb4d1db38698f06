#include <openssl/evp.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "robustq/io.hpp"

namespace robustq {

namespace {

constexpr char kMagic[4] = {'R', 'Q', 'C', 'K'};
constexpr std::size_t kDigestBytes = 32;

enum class Tag : std::uint8_t { U64 = 1, F64 = 2, Str = 3, Ten = 4, Vec = 5 };

class Writer {
 public:
  void raw_u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void raw_bytes(const std::string& s) {
    raw_u64(s.size());
    buf_ += s;
  }
  void head(const std::string& name, Tag t) {
    raw_bytes(name);
    buf_.push_back(static_cast<char>(t));
  }
  void u64(const std::string& name, std::uint64_t v) {
    head(name, Tag::U64);
    raw_u64(v);
  }
  void f64(const std::string& name, double v) {
    head(name, Tag::F64);
    raw_u64(std::bit_cast<std::uint64_t>(v));
  }
  void str(const std::string& name, const std::string& v) {
    head(name, Tag::Str);
    raw_bytes(v);
  }
  void vec(const std::string& name, const std::vector<double>& v) {
    head(name, Tag::Vec);
    raw_u64(v.size());
    for (double x : v) raw_u64(std::bit_cast<std::uint64_t>(x));
  }
  void tensor(const std::string& name, const Tensor& t) {
    head(name, Tag::Ten);
    raw_u64(t.rank());
    for (auto d : t.shape()) raw_u64(d);
    for (double x : t.values()) raw_u64(std::bit_cast<std::uint64_t>(x));
  }
  std::string& bytes() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& buf, std::size_t begin, std::size_t end) : buf_(buf), pos_(begin), end_(end) {}

  std::uint64_t raw_u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string raw_bytes() {
    const std::uint64_t n = raw_u64();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void head(const std::string& name, Tag t) {
    const std::string got = raw_bytes();
    if (got != name) throw FormatError("checkpoint: expected record '" + name + "', found '" + got + "'");
    need(1);
    if (static_cast<Tag>(buf_[pos_++]) != t) throw FormatError("checkpoint: record '" + name + "' has the wrong type");
  }
  std::uint64_t u64(const std::string& name) {
    head(name, Tag::U64);
    return raw_u64();
  }
  double f64(const std::string& name) {
    head(name, Tag::F64);
    return std::bit_cast<double>(raw_u64());
  }
  std::string str(const std::string& name) {
    head(name, Tag::Str);
    return raw_bytes();
  }
  std::vector<double> vec(const std::string& name) {
    head(name, Tag::Vec);
    const std::uint64_t n = raw_u64();
    need_items(n);
    std::vector<double> v(n);
    for (auto& x : v) x = std::bit_cast<double>(raw_u64());
    return v;
  }
  Tensor tensor(const std::string& name) {
    head(name, Tag::Ten);
    const std::uint64_t rank = raw_u64();
    need_items(rank);
    Shape shape(rank);
    std::uint64_t numel = 1;
    for (auto& d : shape) {
      d = raw_u64();
      if (d != 0 && numel > (end_ - pos_) / d) throw FormatError("checkpoint: tensor '" + name + "' overruns the file");
      numel *= d;
    }
    need_items(numel);
    std::vector<double> data(numel);
    for (auto& x : data) x = std::bit_cast<double>(raw_u64());
    return Tensor(std::move(shape), std::move(data));
  }
  bool done() const { return pos_ == end_; }

 private:
  void need(std::uint64_t n) const {
    if (n > end_ - pos_) throw FormatError("checkpoint: truncated or corrupt record");
  }
  void need_items(std::uint64_t n) const {
    if (n > (end_ - pos_) / 8) throw FormatError("checkpoint: truncated or corrupt record");
  }

  const std::string& buf_;
  std::size_t pos_, end_;
};

std::string digest_raw(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw NumericError("sha256 failed");
  return std::string(reinterpret_cast<char*>(md), len);
}

std::string to_hex(const std::string& raw) {
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned char c : raw) {
    out.push_back(hex[c >> 4]);
    out.push_back(hex[c & 15]);
  }
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

std::vector<double> sizes_to_vec(const std::vector<std::size_t>& v) { return {v.begin(), v.end()}; }
std::vector<std::size_t> vec_to_sizes(const std::vector<double>& v) { return {v.begin(), v.end()}; }

}  // namespace

std::string sha256_hex(const std::string& bytes) { return to_hex(digest_raw(bytes)); }
std::string sha256_file(const std::string& path) { return sha256_hex(read_file(path)); }

void save_checkpoint(const std::string& path, const TrainState& st, const std::string& config_text) {
  Writer w;
  const NetworkSpec& s = st.net.spec();
  w.u64("spec.in_channels", s.in_channels);
  w.u64("spec.height", s.height);
  w.u64("spec.width", s.width);
  w.u64("spec.stem_stride", s.stem_stride);
  w.vec("spec.blocks", sizes_to_vec(s.blocks));
  w.vec("spec.widths", sizes_to_vec(s.widths));
  w.u64("spec.ensemble", s.ensemble);
  w.f64("spec.noise_sigma", s.noise_sigma);
  w.u64("spec.num_classes", s.num_classes);

  w.u64("params", st.net.params().size());
  for (const auto& p : st.net.params()) w.tensor(p.name, p.value);
  w.u64("bn", st.net.bn_states().size());
  for (const auto& b : st.net.bn_states()) {
    w.vec(b.name + ".mean", b.running_mean);
    w.vec(b.name + ".var", b.running_var);
  }

  const QuantState& q = st.quant;
  w.str("quant.variant", variant_name(q.scheme.variant));
  w.u64("quant.threshold", q.scheme.ternary_threshold);
  w.f64("quant.lambda", q.lambda);
  w.f64("quant.rho", q.rho);
  w.u64("quant.cutoff", q.cutoff);
  w.u64("quant.epoch", q.epoch);
  w.u64("quant.steps", q.steps);
  w.u64("quant.layers", q.layers.size());
  for (const auto& l : q.layers) {
    w.str("layer", l.name);
    w.u64("layer.param", l.param);
    w.u64("layer.quantized", l.quantized);
    w.f64("layer.scale", l.scale);
    w.tensor("layer.w", l.w);
    w.tensor("layer.u", l.u);
  }

  w.u64("velocity", st.velocity.size());
  for (const auto& v : st.velocity) w.tensor("v", v);
  w.str("rng", st.rng.state());
  w.vec("trace.m_t", st.trace.m_t);
  w.vec("trace.max", st.trace.running_max);

  w.u64("history", st.history.size());
  for (const auto& r : st.history) {
    w.vec("row", {static_cast<double>(r.epoch), r.loss, r.natural, r.a1.value_or(kMissing), r.a2.value_or(kMissing),
                  r.a3.value_or(kMissing), r.m_t, r.lambda, r.weight_sparsity, r.channel_sparsity, r.seconds});
  }
  w.u64("epochs_done", st.epochs_done);
  w.str("config", config_text);

  std::string out(kMagic, 4);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((kCheckpointVersion >> (8 * i)) & 0xff));
  out += w.bytes();
  out += digest_raw(out);
  write_atomic(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::string buf = read_file(path);
  if (buf.size() < 8 + kDigestBytes || std::memcmp(buf.data(), kMagic, 4) != 0)
    throw FormatError(path + ": not a checkpoint");
  std::uint32_t version = 0;
  for (int i = 0; i < 4; ++i) version |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[4 + i])) << (8 * i);
  if (version != kCheckpointVersion)
    throw FormatError(path + ": checkpoint version " + std::to_string(version) + " is not supported");
  const std::size_t body_end = buf.size() - kDigestBytes;
  if (digest_raw(buf.substr(0, body_end)) != buf.substr(body_end))
    throw FormatError(path + ": checksum mismatch, file is corrupt");

  Reader r(buf, 8, body_end);
  NetworkSpec s;
  s.in_channels = r.u64("spec.in_channels");
  s.height = r.u64("spec.height");
  s.width = r.u64("spec.width");
  s.stem_stride = r.u64("spec.stem_stride");
  s.blocks = vec_to_sizes(r.vec("spec.blocks"));
  s.widths = vec_to_sizes(r.vec("spec.widths"));
  s.ensemble = r.u64("spec.ensemble");
  s.noise_sigma = r.f64("spec.noise_sigma");
  s.num_classes = r.u64("spec.num_classes");

  Checkpoint ck{TrainState{build_network(s, 0), {}, {}, Rng(0), {}, {}, 0}, {}, {}};
  TrainState& st = ck.state;
  auto& params = st.net.params();
  if (r.u64("params") != params.size()) throw FormatError("checkpoint: parameter count does not match the spec");
  for (auto& p : params) p.value = r.tensor(p.name);
  auto& bn = st.net.bn_states();
  if (r.u64("bn") != bn.size()) throw FormatError("checkpoint: batch-norm count does not match the spec");
  for (auto& b : bn) {
    b.running_mean = r.vec(b.name + ".mean");
    b.running_var = r.vec(b.name + ".var");
  }
  try {
    st.net.check_structure();
  } catch (const ContractError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }

  QuantState& q = st.quant;
  q.scheme.variant = parse_variant(r.str("quant.variant"));
  q.scheme.ternary_threshold = r.u64("quant.threshold") != 0;
  q.lambda = r.f64("quant.lambda");
  q.rho = r.f64("quant.rho");
  q.cutoff = r.u64("quant.cutoff");
  q.epoch = r.u64("quant.epoch");
  q.steps = r.u64("quant.steps");
  const std::uint64_t nl = r.u64("quant.layers");
  if (nl > params.size()) throw FormatError("checkpoint: too many quantized layers");
  q.layers.resize(nl);
  for (auto& l : q.layers) {
    l.name = r.str("layer");
    l.param = r.u64("layer.param");
    l.quantized = r.u64("layer.quantized") != 0;
    l.scale = r.f64("layer.scale");
    l.w = r.tensor("layer.w");
    l.u = r.tensor("layer.u");
    if (l.param >= params.size() || params[l.param].name != l.name || l.w.shape() != params[l.param].value.shape() ||
        l.u.shape() != l.w.shape())
      throw FormatError("checkpoint: quantized layer '" + l.name + "' does not match the network");
  }

  const std::uint64_t nv = r.u64("velocity");
  if (nv != 0 && nv != params.size()) throw FormatError("checkpoint: velocity count mismatch");
  st.velocity.resize(nv);
  for (auto& v : st.velocity) v = r.tensor("v");
  st.rng.set_state(r.str("rng"));
  st.trace.m_t = r.vec("trace.m_t");
  st.trace.running_max = r.vec("trace.max");

  const std::uint64_t nh = r.u64("history");
  if (nh > body_end) throw FormatError("checkpoint: corrupt history length");
  for (std::uint64_t i = 0; i < nh; ++i) {
    const auto v = r.vec("row");
    if (v.size() != 11) throw FormatError("checkpoint: malformed metrics row");
    auto opt = [](double x) { return std::isnan(x) ? std::optional<double>() : std::optional<double>(x); };
    st.history.push_back(MetricsRow{static_cast<std::size_t>(v[0]), v[1], v[2], opt(v[3]), opt(v[4]), opt(v[5]), v[6],
                                    v[7], v[8], v[9], v[10]});
  }
  st.epochs_done = r.u64("epochs_done");
  ck.config_text = r.str("config");
  ck.config_digest = sha256_hex(ck.config_text);
  if (!r.done()) throw FormatError("checkpoint: trailing bytes");
  return ck;
}

void write_manifest(const std::string& path, const Manifest& m) {
  nlohmann::ordered_json j;
  j["command"] = m.command;
  j["seed"] = m.seed;
  j["config"] = nlohmann::json(m.config);
  j["config_sha256"] = sha256_hex(render_config(m.config));
  nlohmann::ordered_json arts = nlohmann::ordered_json::array();
  for (const auto& a : m.artifacts) {
    nlohmann::ordered_json e;
    e["path"] = a;
    e["sha256"] = std::filesystem::exists(a) ? sha256_file(a) : std::string();
    arts.push_back(e);
  }
  j["artifacts"] = arts;
  for (const auto& [k, v] : m.extra) j["extra"][k] = v;
  write_atomic(path, j.dump(2) + "\n");
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::string out = metrics_header() + "\n";
  for (const auto& r : rows) out += metrics_csv_line(r) + "\n";
  write_atomic(path, out);
}

}  // namespace robustq
