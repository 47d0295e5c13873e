#include "gdnsq/data.hpp"

#include <cmath>
#include <numbers>

#include "gdnsq/checkpoint.hpp"
#include "gdnsq/errors.hpp"
#include "gdnsq/rng.hpp"

namespace gdnsq {

Tensor Dataset::batch_inputs(std::span<const std::size_t> indices) const {
  const std::size_t d = sample_size();
  std::vector<double> out(indices.size() * d);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw DimensionError("sample index " + std::to_string(indices[i]) + " out of range");
    std::copy_n(inputs.begin() + static_cast<std::ptrdiff_t>(indices[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  Shape shape{indices.size()};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  return Tensor::from(std::move(out), std::move(shape));
}

std::vector<std::size_t> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<std::size_t> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) out[i] = labels.at(indices[i]);
  return out;
}

Tensor Dataset::all_inputs() const {
  Shape shape{size()};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  return Tensor::from(inputs, std::move(shape));
}

SyntheticKind parse_synthetic_kind(std::string_view text) {
  if (text == "two_gaussians") return SyntheticKind::two_gaussians;
  if (text == "concentric_rings") return SyntheticKind::concentric_rings;
  throw DomainError("unknown synthetic dataset '" + std::string(text) + "'");
}

std::string to_string(SyntheticKind kind) {
  return kind == SyntheticKind::two_gaussians ? "two_gaussians" : "concentric_rings";
}

Dataset make_synthetic(SyntheticKind kind, std::size_t n, std::uint64_t seed, Split split) {
  if (n == 0) throw DomainError("synthetic dataset needs at least one sample");
  Rng rng = Rng::derived(seed, split == Split::train ? 0x7472u : 0x76616cu);
  Dataset ds;
  ds.name = to_string(kind);
  ds.split = split;
  ds.sample_shape = {2};
  ds.num_classes = 2;
  ds.inputs.resize(2 * n);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % 2;
    ds.labels[i] = c;
    if (kind == SyntheticKind::two_gaussians) {
      ds.inputs[2 * i] = (c == 0 ? -2.0 : 2.0) + 0.6 * rng.normal();
      ds.inputs[2 * i + 1] = 0.6 * rng.normal();
    } else {
      const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double r = (c == 0 ? 1.0 : 2.0) + 0.1 * rng.normal();
      ds.inputs[2 * i] = r * std::cos(theta);
      ds.inputs[2 * i + 1] = r * std::sin(theta);
    }
  }
  return ds;
}

// ---- IDX ------------------------------------------------------------------

IdxArray parse_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw FormatError("IDX header truncated: need 4 bytes, have " + std::to_string(bytes.size()), bytes.size());
  if (bytes[0] != 0 || bytes[1] != 0) throw FormatError("bad IDX magic: first two bytes must be zero", bytes[0] != 0 ? 0 : 1);
  if (bytes[2] != 0x08) {
    throw FormatError("unsupported IDX element type 0x" + std::to_string(bytes[2]) + " (only unsigned byte 0x08)", 2);
  }
  const std::size_t ndim = bytes[3];
  if (ndim == 0) throw FormatError("IDX array has zero dimensions", 3);
  const std::size_t header = 4 + 4 * ndim;
  if (bytes.size() < header) throw FormatError("IDX dimension table truncated", bytes.size());
  IdxArray arr;
  std::size_t count = 1;
  for (std::size_t d = 0; d < ndim; ++d) {
    const std::size_t off = 4 + 4 * d;
    const std::size_t v = (std::size_t{bytes[off]} << 24) | (std::size_t{bytes[off + 1]} << 16) |
                          (std::size_t{bytes[off + 2]} << 8) | std::size_t{bytes[off + 3]};
    arr.dims.push_back(v);
    count *= v;
  }
  if (bytes.size() - header < count) {
    throw FormatError("IDX payload truncated: expected " + std::to_string(count) + " bytes, found " +
                          std::to_string(bytes.size() - header),
                      bytes.size());
  }
  if (bytes.size() - header > count) throw FormatError("trailing bytes after IDX payload", header + count);
  arr.values.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
  return arr;
}

IdxArray read_idx(const std::filesystem::path& path) { return parse_idx(read_file_bytes(path)); }

std::vector<std::uint8_t> encode_idx(const IdxArray& array) {
  std::vector<std::uint8_t> out{0, 0, 0x08, static_cast<std::uint8_t>(array.dims.size())};
  for (auto d : array.dims) {
    for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(d >> shift));
  }
  out.insert(out.end(), array.values.begin(), array.values.end());
  return out;
}

Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels,
                         std::size_t num_classes) {
  IdxArray img = read_idx(images);
  IdxArray lab = read_idx(labels);
  if (lab.dims.size() != 1) throw FormatError("IDX labels must be rank 1", 3);
  if (img.dims.empty() || img.dims[0] != lab.dims[0]) {
    throw DimensionError("IDX images and labels disagree on the sample count");
  }
  Dataset ds;
  ds.name = images.filename().string();
  ds.sample_shape.assign(img.dims.begin() + 1, img.dims.end());
  if (ds.sample_shape.size() == 2) ds.sample_shape.push_back(1);
  if (ds.sample_shape.empty()) ds.sample_shape = {1};
  ds.inputs.resize(img.values.size());
  for (std::size_t i = 0; i < img.values.size(); ++i) ds.inputs[i] = img.values[i] / 255.0;
  ds.labels.assign(lab.values.begin(), lab.values.end());
  std::size_t max_label = 0;
  for (auto l : ds.labels) max_label = std::max(max_label, l);
  ds.num_classes = num_classes == 0 ? max_label + 1 : num_classes;
  if (max_label >= ds.num_classes) throw DomainError("label " + std::to_string(max_label) + " exceeds class count");
  return ds;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& all, double val_fraction) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw DomainError("validation fraction must be in (0, 1)");
  const std::size_t n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(all.size())));
  if (n_val == 0 || n_val >= all.size()) throw DomainError("dataset too small to split");
  const std::size_t n_train = all.size() - n_val;
  const std::size_t d = all.sample_size();
  Dataset train = all, val = all;
  train.split = Split::train;
  val.split = Split::val;
  train.inputs.assign(all.inputs.begin(), all.inputs.begin() + static_cast<std::ptrdiff_t>(n_train * d));
  train.labels.assign(all.labels.begin(), all.labels.begin() + static_cast<std::ptrdiff_t>(n_train));
  val.inputs.assign(all.inputs.begin() + static_cast<std::ptrdiff_t>(n_train * d), all.inputs.end());
  val.labels.assign(all.labels.begin() + static_cast<std::ptrdiff_t>(n_train), all.labels.end());
  return {std::move(train), std::move(val)};
}

std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> order, std::size_t batch_size) {
  if (batch_size < 2) throw DomainError("batch size must be at least 2");
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    if (end - start < 2) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

}  // namespace gdnsq
