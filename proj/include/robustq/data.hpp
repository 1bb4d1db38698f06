#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "robustq/tensor.hpp"

namespace robustq {

/// Images in [0, 1] as [N x C x H x W] plus integer labels.
struct Dataset {
  std::string name;
  Shape sample_shape;  // C x H x W
  Tensor images;       // default-constructed when empty
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  void validate() const;

  Tensor gather_images(std::span<const std::size_t> idx) const;
  std::vector<int> gather_labels(std::span<const std::size_t> idx) const;
  /// Samples [begin, end).
  Dataset slice(std::size_t begin, std::size_t end) const;
};

/// Raw IDX payload for unsigned-byte arrays.
struct IdxArray {
  std::vector<std::size_t> dims;
  std::vector<std::uint8_t> data;
};

/// Reads an unsigned-byte IDX file; gzip-compressed files are detected by magic.
IdxArray read_idx(const std::string& path);
void write_idx(const std::string& path, const IdxArray& array);

/// Pairs an image file (magic 0x00000803) with a label file (0x00000801).
Dataset load_idx(const std::string& images_path, const std::string& labels_path, const std::string& name = "idx");

enum class SyntheticKind { Blobs, Moons };
SyntheticKind parse_synthetic(const std::string& name);

/// Two-class points in [0, 1]^2. Image-like output stores each coordinate as
/// a constant 4 x 4 plane ([N x 2 x 4 x 4]); flat output is [N x 2].
Dataset gen_synthetic(SyntheticKind kind, std::size_t n, double noise, std::uint64_t seed, bool image_like = true);

/// Deterministic disjoint split after a seeded shuffle.
std::pair<Dataset, Dataset> split_dataset(const Dataset& d, std::size_t first_count, std::uint64_t seed);

}  // namespace robustq
