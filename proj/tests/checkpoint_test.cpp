#include <gtest/gtest.h>

#include <fstream>

#include <nlohmann/json.hpp>

#include "romlab/checkpoint.hpp"
#include "test_support.hpp"

namespace romlab {
namespace {

template <class T>
Parameters<T> sample_params(T) {
  auto c = testing::tiny_config(2, 2, 8, 16, 16, 10);
  c.precision = std::is_same_v<T, float> ? Precision::fast32 : Precision::check64;
  return Parameters<T>::initialize(c, 42);
}

TEST(Checkpoint, RoundTripIsBitwiseInBothPrecisions) {
  const auto dir = testing::scratch_dir("ckpt_rt");
  const auto p64 = sample_params(0.0);
  save_checkpoint(p64, dir / "f64");
  const auto b64 = load_checkpoint<double>(dir / "f64");
  for (std::size_t t = 0; t < p64.size(); ++t) EXPECT_EQ(b64.tensors[t], p64.tensors[t]) << p64.names[t];

  const auto p32 = sample_params(0.0f);
  save_checkpoint(p32, dir / "f32");
  const auto b32 = load_checkpoint<float>(dir / "f32");
  for (std::size_t t = 0; t < p32.size(); ++t) EXPECT_EQ(b32.tensors[t], p32.tensors[t]);
  EXPECT_EQ(read_checkpoint_config(dir / "f32").precision, Precision::fast32);

  const auto header = nlohmann::json::parse(testing::read_file(dir / "f32" / "header.json"));
  EXPECT_EQ(header["version"], 1);
  EXPECT_EQ(header["tensors"][0]["name"], "embeddings.token");
  EXPECT_EQ(header["tensors"][0]["dtype"], "f32");
  EXPECT_EQ(header["tensors"][0]["byte_offset"], 0);
}

TEST(Checkpoint, SavingTwiceIsByteIdentical) {
  const auto dir = testing::scratch_dir("ckpt_bytes");
  const auto p = sample_params(0.0);
  save_checkpoint(p, dir / "a");
  save_checkpoint(p, dir / "b");
  EXPECT_EQ(testing::read_file(dir / "a" / "params.bin"), testing::read_file(dir / "b" / "params.bin"));
  EXPECT_EQ(testing::read_file(dir / "a" / "header.json"), testing::read_file(dir / "b" / "header.json"));
}

TEST(Checkpoint, TruncatedBlobIsCorrupt) {
  const auto dir = testing::scratch_dir("ckpt_trunc");
  save_checkpoint(sample_params(0.0), dir);
  const auto size = std::filesystem::file_size(dir / "params.bin");
  std::filesystem::resize_file(dir / "params.bin", size - 8);
  EXPECT_THROW(load_checkpoint<double>(dir), CorruptCheckpoint);
}

void edit_header(const std::filesystem::path& dir, const std::function<void(nlohmann::json&)>& edit) {
  auto j = nlohmann::json::parse(testing::read_file(dir / "header.json"));
  edit(j);
  std::ofstream(dir / "header.json") << j.dump(2);
}

TEST(Checkpoint, HeaderEditsAreRejected) {
  const auto dir = testing::scratch_dir("ckpt_edit");
  const auto p = sample_params(0.0);

  save_checkpoint(p, dir);
  edit_header(dir, [](nlohmann::json& j) { j["tensors"][3]["shape"] = {1, 7}; });
  EXPECT_THROW(load_checkpoint<double>(dir), CorruptCheckpoint);

  save_checkpoint(p, dir);
  edit_header(dir, [](nlohmann::json& j) { j["tensors"][2]["byte_offset"] = 8; });
  EXPECT_THROW(load_checkpoint<double>(dir), CorruptCheckpoint);

  save_checkpoint(p, dir);
  edit_header(dir, [](nlohmann::json& j) { j["version"] = 99; });
  EXPECT_THROW(load_checkpoint<double>(dir), VersionError);

  save_checkpoint(p, dir);
  edit_header(dir, [](nlohmann::json& j) { j.erase("version"); });
  EXPECT_THROW(load_checkpoint<double>(dir), VersionError);

  EXPECT_THROW(load_checkpoint<double>(dir / "missing"), MissingInput);
}

TEST(Checkpoint, LoadsAcrossPrecisions) {
  const auto dir = testing::scratch_dir("ckpt_cross");
  const auto p = sample_params(0.0f);
  save_checkpoint(p, dir);
  const auto wide = load_checkpoint<double>(dir);
  for (std::size_t t = 0; t < p.size(); ++t) EXPECT_EQ(wide.tensors[t], p.tensors[t].cast<double>());
}

}  // namespace
}  // namespace romlab
