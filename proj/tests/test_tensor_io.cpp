#include <gtest/gtest.h>

#include <sstream>

#include "lodestar/ltsr.hpp"

using namespace lodestar;

TEST(Tensor, PlanarIndexing) {
  Tensor<double> t(2, 3, 4);
  t(1, 2, 3) = 7.0;
  EXPECT_EQ(t.values()[1 * 12 + 2 * 4 + 3], 7.0);
  EXPECT_EQ(t.plane(1)[11], 7.0);
  EXPECT_EQ(shape_string(t), "2x3x4");
}

TEST(Tensor, NegativeDimensionsRejected) { EXPECT_THROW(Tensor<double>(1, -1, 2), Error); }

TEST(Ltsr, RoundTripIsBitExact) {
  Tensor<double> t(2, 5, 3);
  for (std::size_t i = 0; i < t.size(); ++i) t.values()[i] = 0.25 * static_cast<double>(i) - 3.0;
  std::stringstream ss;
  ltsr::write(ss, ltsr::from_tensor(t));
  const auto back = ltsr::to_tensor<double>(ltsr::read(ss));
  EXPECT_EQ(back, t);
}

TEST(Ltsr, HeaderLayout) {
  Tensor<double> t(1, 2, 3, 1.5);
  std::stringstream ss;
  ltsr::write(ss, ltsr::from_tensor(t));
  const std::string bytes = ss.str();
  ASSERT_EQ(bytes.size(), 4u + 4u + 4u + 3u * 4u + 6u * 4u);
  EXPECT_EQ(bytes.substr(0, 4), "LTSR");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1u);  // version, little-endian
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 3u);  // ndim
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 2u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[16]), 3u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[20]), 1u);
}

TEST(Ltsr, ChannelsAreInterleaved) {
  Tensor<double> t(2, 1, 2);
  t(0, 0, 0) = 1;
  t(1, 0, 0) = 2;
  t(0, 0, 1) = 3;
  t(1, 0, 1) = 4;
  const auto a = ltsr::from_tensor(t);
  EXPECT_EQ(a.values, (std::vector<float>{1, 2, 3, 4}));
}

TEST(Ltsr, BadMagic) {
  std::stringstream ss("LTSX\x01\0\0\0");
  EXPECT_THROW(
      {
        try {
          ltsr::read(ss);
        } catch (const Error& e) {
          EXPECT_NE(std::string(e.what()).find("bad magic"), std::string::npos);
          throw;
        }
      },
      Error);
}

TEST(Ltsr, TruncatedPayload) {
  Tensor<double> t(1, 4, 4, 2.0);
  std::stringstream full;
  ltsr::write(full, ltsr::from_tensor(t));
  std::string bytes = full.str();
  bytes.resize(bytes.size() - 5);
  std::stringstream cut(bytes);
  try {
    ltsr::read(cut);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
}

TEST(Ltsr, UnsupportedVersion) {
  std::string bytes = "LTSR";
  bytes += std::string("\x02\0\0\0", 4);
  std::stringstream ss(bytes);
  EXPECT_THROW(ltsr::read(ss), Error);
}

TEST(Ltsr, StackAndIndex) {
  std::vector<Tensor<double>> frames;
  for (int f = 0; f < 3; ++f) frames.emplace_back(1, 2, 2, static_cast<double>(f));
  const auto a = ltsr::stack(frames);
  ASSERT_EQ(a.dims.size(), 4u);
  EXPECT_EQ(ltsr::frame_count(a), 3u);
  EXPECT_EQ(ltsr::to_tensor<double>(a, 2)(0, 1, 1), 2.0);
  EXPECT_THROW(ltsr::to_tensor<double>(a, 3), Error);
}
