#include <gtest/gtest.h>

#include <filesystem>

#include "dynaflow/image.hpp"
#include "dynaflow/rng.hpp"

using namespace dynaflow;

TEST(Image, PngRoundTrip) {
  Rng rng(1);
  Rgba img(13, 7);
  for (auto& v : img.data) v = static_cast<std::uint8_t>(rng.below(256));
  const auto bytes = encode_png(img);
  ASSERT_GT(bytes.size(), 8u);
  EXPECT_EQ(bytes[1], 'P');
  const auto back = decode_png(bytes);
  EXPECT_EQ(back.rows, 13);
  EXPECT_EQ(back.cols, 7);
  EXPECT_EQ(back.data, img.data);
}

TEST(Image, PngFileRoundTripIsDeterministic) {
  const auto dir = std::filesystem::temp_directory_path() / "dynaflow_image_test";
  std::filesystem::create_directories(dir);
  Rgba img(4, 4);
  img.set(1, 2, {10, 20, 30, 255});
  write_png((dir / "a.png").string(), img);
  write_png((dir / "b.png").string(), img);
  EXPECT_EQ(read_png((dir / "a.png").string()).data, img.data);
  EXPECT_EQ(std::filesystem::file_size(dir / "a.png"), std::filesystem::file_size(dir / "b.png"));
  EXPECT_THROW(read_png((dir / "missing.png").string()), FormatError);
  const std::vector<std::uint8_t> junk = {1, 2, 3};
  EXPECT_THROW(decode_png(junk), FormatError);
  std::filesystem::remove_all(dir);
}

TEST(Image, QuantizationRoundTrip) {
  Image img(3, 2, 2);
  img.at(0, 0, 0) = 0.5;
  img.at(1, 1, 1) = 1.0;
  img.at(2, 0, 1) = -0.2;  // clamped
  const auto q = rgb_image(to_rgba(img));
  EXPECT_NEAR(q.at(0, 0, 0), 128.0 / 255.0, 1e-15);
  EXPECT_EQ(q.at(1, 1, 1), 1.0);
  EXPECT_EQ(q.at(2, 0, 1), 0.0);
  // quantized images are fixed points
  EXPECT_EQ(rgb_image(to_rgba(q)), q);
}

TEST(Image, Crop) {
  Image img(1, 4, 4);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) img.at(0, r, c) = r * 4 + c;
  const auto c = img.crop(1, 2, 2, 2);
  EXPECT_EQ(c.at(0, 0, 0), 6);
  EXPECT_EQ(c.at(0, 1, 1), 11);
  EXPECT_THROW(img.crop(3, 3, 2, 2), BoundsError);
}
