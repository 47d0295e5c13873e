#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gdnsq/tensor.hpp"

namespace gdnsq {

enum class Split { train, val };

// In-memory labelled dataset. Inputs are stored flat, one sample after the
// other; `sample_shape` is the per-sample shape (e.g. {2} or {28, 28, 1}).
struct Dataset {
  std::string name;
  Split split = Split::train;
  Shape sample_shape;
  std::size_t num_classes = 0;
  std::vector<double> inputs;
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_size() const { return shape_numel(sample_shape); }

  // Stacks the selected samples into a [n, sample_shape...] tensor.
  Tensor batch_inputs(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> batch_labels(std::span<const std::size_t> indices) const;
  Tensor all_inputs() const;
};

enum class SyntheticKind { two_gaussians, concentric_rings };

SyntheticKind parse_synthetic_kind(std::string_view text);
std::string to_string(SyntheticKind kind);

// Two classes in the plane, labels alternate with the sample index.
//   two_gaussians:    means (-2, 0) and (2, 0), isotropic sigma 0.6
//   concentric_rings: radius 1 and 2, radial noise sigma 0.1
// Train and val splits draw from independent streams of the same seed.
Dataset make_synthetic(SyntheticKind kind, std::size_t n, std::uint64_t seed, Split split = Split::train);

// Raw unsigned-byte IDX array (magic 00 00 08 ndim, big-endian u32 dims).
struct IdxArray {
  std::vector<std::size_t> dims;
  std::vector<std::uint8_t> values;
};

IdxArray parse_idx(std::span<const std::uint8_t> bytes);
IdxArray read_idx(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_idx(const IdxArray& array);

// Images scaled to [0, 1] and shaped NHWC (a trailing channel axis is added
// to rank-3 image files). Labels must be a rank-1 file of the same length.
Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels,
                         std::size_t num_classes = 0);

// Splits off the last `val_fraction` of the samples as a validation set.
std::pair<Dataset, Dataset> split_dataset(const Dataset& all, double val_fraction);

// Mini-batch index lists over a permutation. Trailing batches with fewer than
// two samples are dropped (batch norm needs at least two rows).
std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> order, std::size_t batch_size);

}  // namespace gdnsq
