#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace gdnsq {

// Versioned binary container of named arrays.
//
// Layout (all integers little-endian):
//   magic "GDNSQCKP" (8 bytes) | u32 version | u32 section count
//   per section: u32 name length | name | u32 dtype | u32 ndim | u64 dims[ndim]
//                | u64 payload bytes | payload | u64 FNV-1a checksum of payload
// f64 and u64 payloads are 8-byte little-endian elements; u8 holds raw bytes
// (used for UTF-8 text such as JSON metadata).
enum class DType : std::uint32_t { f64 = 1, u64 = 2, u8 = 3 };

struct Section {
  std::string name;
  DType dtype = DType::f64;
  std::vector<std::uint64_t> dims;
  std::vector<std::uint8_t> payload;
};

class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;
  static constexpr char kMagic[9] = "GDNSQCKP";

  void put_f64(const std::string& name, std::span<const double> values, std::vector<std::uint64_t> dims = {});
  void put_u64(const std::string& name, std::span<const std::uint64_t> values);
  void put_text(const std::string& name, const std::string& text);
  void put_scalar(const std::string& name, double value) { put_f64(name, std::span<const double>(&value, 1)); }

  bool contains(const std::string& name) const;
  const Section& section(const std::string& name) const;
  std::vector<double> f64(const std::string& name) const;
  std::vector<std::uint64_t> u64(const std::string& name) const;
  std::string text(const std::string& name) const;
  double scalar(const std::string& name) const;

  const std::vector<Section>& sections() const { return sections_; }

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint parse(std::span<const std::uint8_t> bytes);

  // Writes to a temporary file next to `path`, then renames it into place.
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  void put(Section section);

  std::vector<Section> sections_;
};

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

// Helpers shared by the on-disk formats.
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace gdnsq
