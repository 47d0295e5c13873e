#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "gdnsq/checkpoint.hpp"
#include "gdnsq/errors.hpp"

namespace gdnsq {
namespace {

Checkpoint sample() {
  Checkpoint c;
  std::vector<double> w{1.5, -0.25, 1e-300, 3.0, 0.0, -7.0};
  c.put_f64("layer/weight", w, {2, 3});
  std::vector<std::uint64_t> u{1, 2, ~0ull};
  c.put_u64("cursor", u);
  c.put_text("meta", "{\"a\": 1}");
  c.put_scalar("lr", 0.01);
  return c;
}

std::uint64_t format_offset(const std::vector<std::uint8_t>& bytes) {
  try {
    Checkpoint::parse(bytes);
  } catch (const FormatError& e) {
    return e.offset();
  }
  ADD_FAILURE() << "parse accepted malformed input";
  return ~0ull;
}

TEST(Fnv, ReferenceValues) {
  EXPECT_EQ(fnv1a64({}), 0xcbf29ce484222325ull);
  const std::uint8_t a[] = {'a'};
  EXPECT_EQ(fnv1a64(a), 0xaf63dc4c8601ec8cull);
}

TEST(Checkpoint, SerializeParseIsByteIdentical) {
  auto bytes = sample().serialize();
  auto back = Checkpoint::parse(bytes);
  EXPECT_EQ(back.serialize(), bytes);
  EXPECT_EQ(back.f64("layer/weight")[2], 1e-300);
  EXPECT_EQ(back.section("layer/weight").dims, (std::vector<std::uint64_t>{2, 3}));
  EXPECT_EQ(back.u64("cursor")[2], ~0ull);
  EXPECT_EQ(back.text("meta"), "{\"a\": 1}");
  EXPECT_EQ(back.scalar("lr"), 0.01);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  auto dir = std::filesystem::temp_directory_path() / "gdnsq_ckpt_test";
  std::filesystem::create_directories(dir);
  sample().save(dir / "a.ckpt");
  Checkpoint::load(dir / "a.ckpt").save(dir / "b.ckpt");
  EXPECT_EQ(read_file_bytes(dir / "a.ckpt"), read_file_bytes(dir / "b.ckpt"));
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, HeaderLayout) {
  auto bytes = sample().serialize();
  EXPECT_EQ(std::memcmp(bytes.data(), "GDNSQCKP", 8), 0);
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[12], 4);
}

TEST(Checkpoint, PutReplacesInPlace) {
  auto c = sample();
  c.put_scalar("cursor", 2.0);
  EXPECT_EQ(c.sections().size(), 4u);
  EXPECT_EQ(c.sections()[1].name, "cursor");
  EXPECT_EQ(c.scalar("cursor"), 2.0);
}

TEST(Checkpoint, TypedAccessorsCheckDtype) {
  auto c = sample();
  EXPECT_THROW(c.u64("lr"), FormatError);
  EXPECT_THROW(c.text("cursor"), FormatError);
  EXPECT_THROW(c.scalar("layer/weight"), FormatError);
  EXPECT_THROW(c.f64("missing"), FormatError);
  EXPECT_FALSE(c.contains("missing"));
}

TEST(Checkpoint, CorruptionIsDetected) {
  const auto good = sample().serialize();
  auto magic = good;
  magic[0] = 'X';
  EXPECT_EQ(format_offset(magic), 0u);
  auto version = good;
  version[8] = 2;
  EXPECT_EQ(format_offset(version), 8u);
  // last byte belongs to the last section's checksum
  auto checksum = good;
  checksum.back() ^= 0x01;
  EXPECT_NE(format_offset(checksum), ~0ull);
  auto payload = good;
  payload[good.size() - 9] ^= 0x40;
  EXPECT_NE(format_offset(payload), ~0ull);
  auto truncated = std::vector<std::uint8_t>(good.begin(), good.end() - 3);
  EXPECT_NE(format_offset(truncated), ~0ull);
  auto trailing = good;
  trailing.push_back(0);
  EXPECT_EQ(format_offset(trailing), good.size());
}

TEST(Checkpoint, DimsMustMatchPayload) {
  Checkpoint c;
  std::vector<double> v{1, 2, 3};
  EXPECT_THROW(c.put_f64("x", v, {2, 2}), DimensionError);
}

TEST(Checkpoint, SingleByteFlipsNeverAlterPayloads) {
  const auto good = sample().serialize();
  const auto original = Checkpoint::parse(good);
  std::size_t rejected = 0;
  for (std::size_t i = 0; i < good.size(); ++i) {
    auto bad = good;
    bad[i] ^= 0xFF;
    try {
      auto c = Checkpoint::parse(bad);
      // a flip inside a section name is the only undetected change
      ASSERT_EQ(c.sections().size(), original.sections().size());
      for (std::size_t k = 0; k < c.sections().size(); ++k) {
        EXPECT_EQ(c.sections()[k].payload, original.sections()[k].payload) << "byte " << i;
        EXPECT_EQ(c.sections()[k].dims, original.sections()[k].dims) << "byte " << i;
      }
    } catch (const FormatError&) {
      ++rejected;
    }
  }
  EXPECT_GT(rejected, good.size() / 2);
}

}  // namespace
}  // namespace gdnsq
