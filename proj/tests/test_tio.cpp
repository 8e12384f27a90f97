#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "aenet/tio.hpp"
#include "oracle.hpp"

using namespace aenet;
namespace fs = std::filesystem;

namespace {

class TioTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("aenet_tio_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                        "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::vector<unsigned char> bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
  }
  void put(const fs::path& p, const std::vector<unsigned char>& b) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  }

  fs::path dir_;
};

}  // namespace

TEST_F(TioTest, RoundTripTwoByThree) {
  const auto t = Tensor<double>::matrix(2, 3, {1.5, -2.25, 3.0, 1e-300, -0.0, 6.02e23});
  tio::write_tensor(dir_ / "t.ftns", t);
  const auto back = tio::read_tensor<double>(dir_ / "t.ftns");
  EXPECT_EQ(back.shape(), t.shape());
  EXPECT_EQ(std::memcmp(back.data(), t.data(), 6 * sizeof(double)), 0);
}

TEST_F(TioTest, HeaderLayoutIsLittleEndian) {
  tio::write_tensor(dir_ / "t.ftns", Tensor<float>({2, 258}));
  const auto b = bytes(dir_ / "t.ftns");
  ASSERT_GE(b.size(), 15u);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "FTNS");
  EXPECT_EQ(b[4], 1);  // version
  EXPECT_EQ(b[5], 0);  // f32
  EXPECT_EQ(b[6], 2);  // ndim
  EXPECT_EQ(b[7], 2);
  EXPECT_EQ(b[8], 0);
  EXPECT_EQ(b[11], 2);  // 258 = 0x0102
  EXPECT_EQ(b[12], 1);
  EXPECT_EQ(b.size(), 7u + 8u + 4u * 2u * 258u);
}

TEST_F(TioTest, PayloadBytesAreLittleEndian) {
  tio::write_tensor(dir_ / "one.ftns", Tensor<float>::vector({1.0f}));
  const auto b = bytes(dir_ / "one.ftns");
  // 1.0f = 0x3F800000
  EXPECT_EQ(b[11], 0x00);
  EXPECT_EQ(b[12], 0x00);
  EXPECT_EQ(b[13], 0x80);
  EXPECT_EQ(b[14], 0x3F);
}

TEST_F(TioTest, ScalarHasExactlyOneElement) {
  tio::write_tensor(dir_ / "s.ftns", Tensor<double>::scalar(2.5));
  EXPECT_EQ(bytes(dir_ / "s.ftns").size(), 7u + 8u);
  const auto back = tio::read_tensor<double>(dir_ / "s.ftns");
  EXPECT_EQ(back.ndim(), 0u);
  EXPECT_EQ(back.item(), 2.5);
}

TEST_F(TioTest, BadMagicIsAFormatError) {
  tio::write_tensor(dir_ / "t.ftns", Tensor<double>::vector({1, 2}));
  auto b = bytes(dir_ / "t.ftns");
  std::memcpy(b.data(), "XXXX", 4);
  put(dir_ / "t.ftns", b);
  EXPECT_THROW(tio::read_tensor<double>(dir_ / "t.ftns"), FormatError);
}

TEST_F(TioTest, TruncatedPayloadIsAFormatError) {
  tio::write_tensor(dir_ / "t.ftns", Tensor<double>::vector({1, 2, 3}));
  auto b = bytes(dir_ / "t.ftns");
  b.pop_back();
  put(dir_ / "t.ftns", b);
  EXPECT_THROW(tio::read_tensor<double>(dir_ / "t.ftns"), FormatError);
}

TEST_F(TioTest, UnknownDtypeIsAFormatError) {
  tio::write_tensor(dir_ / "t.ftns", Tensor<double>::vector({1}));
  auto b = bytes(dir_ / "t.ftns");
  b[5] = 2;
  put(dir_ / "t.ftns", b);
  EXPECT_THROW(tio::read_tensor<double>(dir_ / "t.ftns"), FormatError);
}

TEST_F(TioTest, MissingFileIsAFormatError) {
  EXPECT_THROW(tio::read_tensor<double>(dir_ / "absent.ftns"), FormatError);
}

TEST_F(TioTest, RandomRoundTripsAcrossDtypesAndRanks) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> dim(1, 5), rank(0, 4);
  std::normal_distribution<double> val(0, 100);
  for (int i = 0; i < 200; ++i) {
    Shape s(rank(rng));
    for (auto& d : s) d = dim(rng);
    const auto path = dir_ / ("r" + std::to_string(i) + ".ftns");
    if (i % 2 == 0) {
      Tensor<double> t(s);
      for (auto& v : t.values()) v = val(rng);
      tio::write_tensor(path, t);
      const auto back = tio::read_tensor_file(path);
      EXPECT_EQ(back.dtype, tio::DType::F64);
      EXPECT_TRUE(back.data == t);
    } else {
      Tensor<float> t(s);
      for (auto& v : t.values()) v = static_cast<float>(val(rng));
      tio::write_tensor(path, t);
      const auto back = tio::read_tensor_file(path);
      EXPECT_EQ(back.dtype, tio::DType::F32);
      EXPECT_TRUE(back.data.cast<float>() == t);
    }
  }
}

TEST_F(TioTest, PgmAllOnesAndAllZeros) {
  const auto ones = tio::encode_mask_pgm(Tensor<double>::full({2, 2}, 1.0));
  const auto zeros = tio::encode_mask_pgm(Tensor<double>::full({2, 2}, 0.0));
  const std::string head = "P5\n2 2\n255\n";
  ASSERT_EQ(ones.size(), head.size() + 4);
  EXPECT_EQ(std::string(ones.begin(), ones.begin() + static_cast<long>(head.size())), head);
  for (std::size_t i = head.size(); i < ones.size(); ++i) {
    EXPECT_EQ(static_cast<unsigned char>(ones[i]), 255);
    EXPECT_EQ(static_cast<unsigned char>(zeros[i]), 0);
  }
}

TEST_F(TioTest, PgmRoundsHalfUp) {
  EXPECT_EQ(tio::mask_byte(0.5), 128);
  EXPECT_EQ(tio::mask_byte(0.0), 0);
  EXPECT_EQ(tio::mask_byte(1.0), 255);
  EXPECT_EQ(tio::mask_byte(1.0 / 255.0), 1);
}

TEST_F(TioTest, PgmRejectsOutOfRangeValues) {
  EXPECT_THROW(tio::encode_mask_pgm(Tensor<double>::full({2, 2}, 1.5)), ContractError);
  EXPECT_THROW(tio::encode_mask_pgm(Tensor<double>::full({2, 2}, -0.1)), ContractError);
  EXPECT_THROW(tio::encode_mask_pgm(Tensor<double>::full({2, 2}, NAN)), ContractError);
}

TEST_F(TioTest, PgmIsMonotoneAndKeepsDimensions) {
  Tensor<double> m({3, 5});
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<double>(i) / 14.0;
  tio::write_mask_pgm(dir_ / "m.pgm", m);
  const auto back = tio::read_mask_pgm<double>(dir_ / "m.pgm");
  EXPECT_EQ(back.shape(), (Shape{3, 5}));
  for (std::size_t i = 1; i < back.size(); ++i) EXPECT_GE(back[i], back[i - 1]);
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_NEAR(back[i], m[i], 0.5 / 255 + 1e-12);
}

TEST_F(TioTest, MalformedPgmIsAFormatError) {
  put(dir_ / "bad.pgm", {'P', '2', '\n'});
  EXPECT_THROW(tio::read_mask_pgm<double>(dir_ / "bad.pgm"), FormatError);
  put(dir_ / "short.pgm", {'P', '5', '\n', '2', ' ', '2', '\n', '2', '5', '5', '\n', 0});
  EXPECT_THROW(tio::read_mask_pgm<double>(dir_ / "short.pgm"), FormatError);
}
