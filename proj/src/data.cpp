#include "robustq/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "robustq/rng.hpp"

namespace robustq {

void Dataset::validate() const {
  if (images.empty() != labels.empty()) throw ContractError("dataset " + name + ": images and labels disagree");
  if (empty()) return;
  if (images.rank() != sample_shape.size() + 1 || images.dim(0) != labels.size())
    throw ContractError("dataset " + name + ": image count " + std::to_string(images.dim(0)) + " vs " +
                        std::to_string(labels.size()) + " labels");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
      throw ContractError("dataset " + name + ": label " + std::to_string(y) + " out of range");
  for (double v : images.values())
    if (!(v >= 0.0 && v <= 1.0)) throw ContractError("dataset " + name + ": pixel outside [0, 1]");
}

Tensor Dataset::gather_images(std::span<const std::size_t> idx) const {
  if (idx.empty()) throw ContractError("dataset: empty gather");
  Shape s = sample_shape;
  s.insert(s.begin(), idx.size());
  Tensor out(s);
  const std::size_t per = shape_numel(sample_shape);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= size()) throw IndexError("dataset: sample index out of range");
    std::copy_n(images.data() + idx[i] * per, per, out.data() + i * per);
  }
  return out;
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> idx) const {
  std::vector<int> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > size()) throw IndexError("dataset: bad slice");
  Dataset d{name, sample_shape, {}, {}, num_classes};
  if (begin == end) return d;
  d.images = images.slice_rows(begin, end);
  d.labels.assign(labels.begin() + static_cast<long>(begin), labels.begin() + static_cast<long>(end));
  return d;
}

namespace {

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b) {
    gzFile gz = gzopen(path.c_str(), "rb");
    if (!gz) throw FormatError("cannot open " + path + " as gzip");
    std::vector<std::uint8_t> out;
    std::uint8_t buf[1 << 16];
    int got;
    while ((got = gzread(gz, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + got);
    int err = 0;
    const char* msg = gzerror(gz, &err);
    const std::string why = msg ? msg : "";
    gzclose(gz);
    if (got < 0 || (err != Z_OK && err != Z_STREAM_END)) throw FormatError(path + ": corrupt gzip stream: " + why);
    return out;
  }
  return bytes;
}

std::uint32_t be32(const std::uint8_t* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

}  // namespace

IdxArray read_idx(const std::string& path) {
  const auto bytes = read_bytes(path);
  if (bytes.size() < 4) throw FormatError(path + ": truncated header");
  if (bytes[0] != 0 || bytes[1] != 0) throw FormatError(path + ": bad IDX magic");
  if (bytes[2] != 0x08) throw FormatError(path + ": only unsigned-byte IDX data is supported");
  const std::size_t rank = bytes[3];
  if (rank == 0) throw FormatError(path + ": IDX rank 0");
  if (bytes.size() < 4 + 4 * rank) throw FormatError(path + ": truncated header");
  IdxArray a;
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    a.dims.push_back(be32(bytes.data() + 4 + 4 * i));
    count *= a.dims.back();
  }
  const std::size_t off = 4 + 4 * rank;
  if (bytes.size() - off != count)
    throw FormatError(path + ": payload has " + std::to_string(bytes.size() - off) + " bytes, header promises " +
                      std::to_string(count));
  a.data.assign(bytes.begin() + static_cast<long>(off), bytes.end());
  return a;
}

void write_idx(const std::string& path, const IdxArray& array) {
  std::size_t count = 1;
  for (auto d : array.dims) count *= d;
  if (array.dims.empty() || array.dims.size() > 255 || count != array.data.size())
    throw ContractError("write_idx: dims do not match payload");
  std::vector<std::uint8_t> out = {0, 0, 0x08, static_cast<std::uint8_t>(array.dims.size())};
  for (auto d : array.dims)
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>((d >> s) & 0xff));
  out.insert(out.end(), array.data.begin(), array.data.end());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw FormatError("cannot write " + path);
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path, const std::string& name) {
  const IdxArray im = read_idx(images_path);
  const IdxArray lb = read_idx(labels_path);
  if (im.dims.size() != 3) throw FormatError(images_path + ": expected magic 0x00000803 (rank-3 images)");
  if (lb.dims.size() != 1) throw FormatError(labels_path + ": expected magic 0x00000801 (rank-1 labels)");
  if (im.dims[0] != lb.dims[0])
    throw FormatError("IDX count mismatch: " + std::to_string(im.dims[0]) + " images, " + std::to_string(lb.dims[0]) +
                      " labels");
  Dataset d;
  d.name = name;
  d.sample_shape = {1, im.dims[1], im.dims[2]};
  if (im.dims[0] == 0) return d;
  d.images = Tensor({im.dims[0], 1, im.dims[1], im.dims[2]});
  for (std::size_t i = 0; i < im.data.size(); ++i) d.images[i] = im.data[i] / 255.0;
  int top = 0;
  for (auto v : lb.data) {
    d.labels.push_back(v);
    top = std::max<int>(top, v);
  }
  d.num_classes = std::max<std::size_t>(10, static_cast<std::size_t>(top) + 1);
  return d;
}

SyntheticKind parse_synthetic(const std::string& name) {
  if (name == "blobs") return SyntheticKind::Blobs;
  if (name == "moons") return SyntheticKind::Moons;
  throw ContractError("unknown synthetic dataset '" + name + "'");
}

Dataset gen_synthetic(SyntheticKind kind, std::size_t n, double noise, std::uint64_t seed, bool image_like) {
  if (!(noise >= 0.0)) throw ContractError("gen_synthetic: noise must be >= 0");
  Dataset d;
  d.name = kind == SyntheticKind::Blobs ? "blobs" : "moons";
  d.num_classes = 2;
  d.sample_shape = image_like ? Shape{2, 4, 4} : Shape{2};
  if (n == 0) return d;
  Rng rng(seed);
  std::vector<double> pts(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    double px, py;
    if (kind == SyntheticKind::Blobs) {
      px = y ? 0.7 : 0.3;
      py = y ? 0.7 : 0.3;
    } else {
      const double t = rng.uniform(0.0, std::numbers::pi);
      // outer and inner moon mapped from [-1, 2] x [-0.5, 1] into the unit square
      const double mx = y ? 1.0 - std::cos(t) : std::cos(t);
      const double my = y ? 0.5 - std::sin(t) : std::sin(t);
      px = (mx + 1.0) / 3.0;
      py = (my + 0.5) / 1.5;
    }
    pts[2 * i] = std::clamp(px + noise * rng.normal(), 0.0, 1.0);
    pts[2 * i + 1] = std::clamp(py + noise * rng.normal(), 0.0, 1.0);
    d.labels.push_back(y);
  }
  if (image_like) {
    d.images = Tensor({n, 2, 4, 4});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < 2; ++c) std::fill_n(d.images.data() + (i * 2 + c) * 16, 16, pts[2 * i + c]);
  } else {
    d.images = Tensor({n, 2}, pts);
  }
  return d;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& d, std::size_t first_count, std::uint64_t seed) {
  if (first_count > d.size()) throw ContractError("split_dataset: first part larger than dataset");
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  auto take = [&](std::size_t b, std::size_t e) {
    Dataset out{d.name, d.sample_shape, {}, {}, d.num_classes};
    if (b == e) return out;
    std::span<const std::size_t> idx(order.data() + b, e - b);
    out.images = d.gather_images(idx);
    out.labels = d.gather_labels(idx);
    return out;
  };
  return {take(0, first_count), take(first_count, d.size())};
}

}  // namespace robustq
