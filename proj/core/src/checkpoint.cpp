#include "gdnsq/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "gdnsq/errors.hpp"

namespace gdnsq {

namespace {

void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::vector<std::uint8_t> encode_words(std::span<const std::uint64_t> words) {
  std::vector<std::uint8_t> out;
  out.reserve(words.size() * 8);
  for (auto w : words) put_le(out, w, 8);
  return out;
}

std::vector<std::uint64_t> decode_words(const std::vector<std::uint8_t>& payload) {
  std::vector<std::uint64_t> out(payload.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t w = 0;
    for (int b = 0; b < 8; ++b) w |= static_cast<std::uint64_t>(payload[i * 8 + b]) << (8 * b);
    out[i] = w;
  }
  return out;
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint64_t read(int width, const char* what) {
    need(static_cast<std::size_t>(width), what);
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  std::span<const std::uint8_t> take(std::uint64_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, static_cast<std::size_t>(n));
    pos_ += static_cast<std::size_t>(n);
    return s;
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::uint64_t n, const char* what) {
    if (n > bytes_.size() - pos_) {
      throw FormatError(std::string("truncated checkpoint while reading ") + what, pos_);
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::size_t element_size(DType t) { return t == DType::u8 ? 1 : 8; }

}  // namespace

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void Checkpoint::put(Section section) {
  for (auto& s : sections_) {
    if (s.name == section.name) {
      s = std::move(section);
      return;
    }
  }
  sections_.push_back(std::move(section));
}

void Checkpoint::put_f64(const std::string& name, std::span<const double> values, std::vector<std::uint64_t> dims) {
  if (dims.empty()) dims = {values.size()};
  std::uint64_t count = 1;
  for (auto d : dims) count *= d;
  if (count != values.size()) throw DimensionError("section '" + name + "': dims do not match " + std::to_string(values.size()) + " values");
  std::vector<std::uint64_t> words(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) words[i] = std::bit_cast<std::uint64_t>(values[i]);
  put({name, DType::f64, std::move(dims), encode_words(words)});
}

void Checkpoint::put_u64(const std::string& name, std::span<const std::uint64_t> values) {
  put({name, DType::u64, {values.size()}, encode_words(values)});
}

void Checkpoint::put_text(const std::string& name, const std::string& text) {
  put({name, DType::u8, {text.size()}, std::vector<std::uint8_t>(text.begin(), text.end())});
}

bool Checkpoint::contains(const std::string& name) const {
  for (const auto& s : sections_)
    if (s.name == name) return true;
  return false;
}

const Section& Checkpoint::section(const std::string& name) const {
  for (const auto& s : sections_)
    if (s.name == name) return s;
  throw FormatError("checkpoint has no section '" + name + "'", 0);
}

std::vector<double> Checkpoint::f64(const std::string& name) const {
  const auto& s = section(name);
  if (s.dtype != DType::f64) throw FormatError("section '" + name + "' is not f64", 0);
  auto words = decode_words(s.payload);
  std::vector<double> out(words.size());
  for (std::size_t i = 0; i < words.size(); ++i) out[i] = std::bit_cast<double>(words[i]);
  return out;
}

std::vector<std::uint64_t> Checkpoint::u64(const std::string& name) const {
  const auto& s = section(name);
  if (s.dtype != DType::u64) throw FormatError("section '" + name + "' is not u64", 0);
  return decode_words(s.payload);
}

std::string Checkpoint::text(const std::string& name) const {
  const auto& s = section(name);
  if (s.dtype != DType::u8) throw FormatError("section '" + name + "' is not text", 0);
  return std::string(s.payload.begin(), s.payload.end());
}

double Checkpoint::scalar(const std::string& name) const {
  auto v = f64(name);
  if (v.size() != 1) throw FormatError("section '" + name + "' is not a scalar", 0);
  return v[0];
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  put_le(out, kVersion, 4);
  put_le(out, sections_.size(), 4);
  for (const auto& s : sections_) {
    put_le(out, s.name.size(), 4);
    out.insert(out.end(), s.name.begin(), s.name.end());
    put_le(out, static_cast<std::uint32_t>(s.dtype), 4);
    put_le(out, s.dims.size(), 4);
    for (auto d : s.dims) put_le(out, d, 8);
    put_le(out, s.payload.size(), 8);
    out.insert(out.end(), s.payload.begin(), s.payload.end());
    put_le(out, fnv1a64(s.payload), 8);
  }
  return out;
}

Checkpoint Checkpoint::parse(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.take(8, "magic");
  if (std::memcmp(magic.data(), kMagic, 8) != 0) throw FormatError("bad checkpoint magic", 0);
  const auto version = r.read(4, "version");
  if (version != kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kVersion) + ")",
                      8);
  }
  const auto count = r.read(4, "section count");
  Checkpoint ckpt;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::size_t start = r.pos();
    Section s;
    const auto name_len = r.read(4, "section name length");
    auto name = r.take(name_len, "section name");
    s.name.assign(name.begin(), name.end());
    const auto dtype = r.read(4, "dtype");
    if (dtype < 1 || dtype > 3) throw FormatError("section '" + s.name + "' has unknown dtype " + std::to_string(dtype), start);
    s.dtype = static_cast<DType>(dtype);
    const auto ndim = r.read(4, "ndim");
    std::uint64_t elements = 1;
    for (std::uint64_t d = 0; d < ndim; ++d) {
      s.dims.push_back(r.read(8, "dims"));
      elements *= s.dims.back();
    }
    const auto payload_bytes = r.read(8, "payload size");
    if (payload_bytes != elements * element_size(s.dtype)) {
      throw FormatError("section '" + s.name + "' payload size does not match its dims", start);
    }
    auto payload = r.take(payload_bytes, "payload");
    s.payload.assign(payload.begin(), payload.end());
    const auto checksum = r.read(8, "checksum");
    if (checksum != fnv1a64(s.payload)) throw FormatError("section '" + s.name + "' is corrupt (checksum mismatch)", start);
    if (ckpt.contains(s.name)) throw FormatError("duplicate section '" + s.name + "'", start);
    ckpt.sections_.push_back(std::move(s));
  }
  if (!r.done()) throw FormatError("trailing bytes after last section", r.pos());
  return ckpt;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write to '" + tmp.string() + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

void Checkpoint::save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }

Checkpoint Checkpoint::load(const std::filesystem::path& path) { return parse(read_file_bytes(path)); }

}  // namespace gdnsq
