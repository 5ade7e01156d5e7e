#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "ssd/rng.hpp"
#include "ssd/tensor.hpp"

using ssd::Tensor;

namespace {

std::vector<double> to_double(const Tensor& t) {
  return std::vector<double>(t.data(), t.data() + t.size());
}

std::filesystem::path temp_file(const char* name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("tensor shape/data invariants") {
  CHECK_THROWS_AS(Tensor({2, 3}, {1.0f}), ssd::Error);
  CHECK_THROWS_AS(Tensor({0, 3}), ssd::Error);
  Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.shape_str() == "2x3");
  CHECK_THROWS_AS(t.reshaped({4}), ssd::Error);
  CHECK(t.reshaped({3, 2}).extent(0) == 3);
}

TEST_CASE("conv2d identity kernel returns the input") {
  ssd::Rng rng(7);
  Tensor x = Tensor::randn({1, 1, 3, 3}, rng);
  Tensor k = Tensor::zeros({1, 1, 3, 3});
  k.at(0, 0, 1, 1) = 1.0f;
  Tensor y = ssd::conv2d(x, k, Tensor(), 1, 1);
  REQUIRE(y.same_shape(x));
  for (int64_t i = 0; i < x.size(); ++i) CHECK(y[i] == doctest::Approx(x[i]).epsilon(0));
}

TEST_CASE("conv2d all-zero kernel gives zeros") {
  ssd::Rng rng(3);
  Tensor x = Tensor::randn({2, 3, 5, 4}, rng);
  Tensor k = Tensor::zeros({4, 3, 3, 3});
  Tensor y = ssd::conv2d(x, k, Tensor(), 1, 1);
  for (int64_t i = 0; i < y.size(); ++i) CHECK(y[i] == 0.0f);
}

TEST_CASE("conv2d 1x1 kernel with bias, hand arithmetic") {
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor k({1, 1, 1, 1}, {2});
  Tensor b({1}, {1});
  Tensor y = ssd::conv2d(x, k, b, 1, 0);
  CHECK(y[0] == 3.0f);
  CHECK(y[1] == 5.0f);
  CHECK(y[2] == 7.0f);
  CHECK(y[3] == 9.0f);
}

TEST_CASE("conv2d matches the brute-force oracle over strides and pads") {
  ssd::Rng rng(11);
  for (int stride = 1; stride <= 2; ++stride) {
    for (int pad = 0; pad <= 2; ++pad) {
      Tensor x = Tensor::randn({2, 3, 7, 6}, rng);
      Tensor k = Tensor::randn({4, 3, 3, 3}, rng, 0.5f);
      Tensor b = Tensor::randn({4}, rng, 0.2f);
      Tensor y = ssd::conv2d(x, k, b, stride, pad);
      int ho = 0, wo = 0;
      const auto ref = oracle::conv2d_reference(to_double(x), 2, 3, 7, 6, to_double(k), 4, 3,
                                                3, to_double(b), stride, pad, ho, wo);
      REQUIRE(y.extent(2) == ho);
      REQUIRE(y.extent(3) == wo);
      for (int64_t i = 0; i < y.size(); ++i)
        CHECK(double(y[i]) == doctest::Approx(ref[size_t(i)]).epsilon(1e-5));
    }
  }
}

TEST_CASE("conv2d errors name both shapes") {
  Tensor x({1, 3, 4, 4});
  Tensor k({2, 4, 3, 3});
  try {
    ssd::conv2d(x, k, Tensor(), 1, 1);
    FAIL("expected error");
  } catch (const ssd::Error& e) {
    const std::string what = e.what();
    CHECK(what.find("1x3x4x4") != std::string::npos);
    CHECK(what.find("2x4x3x3") != std::string::npos);
  }
  CHECK_THROWS_AS(ssd::conv2d(x, Tensor({2, 3, 2, 2}), Tensor(), 1, 0), ssd::Error);
}

TEST_CASE("conv2d is linear over 50 random shape draws") {
  ssd::Rng rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = rng.uniform_int(1, 2), ci = rng.uniform_int(1, 4);
    const int h = rng.uniform_int(3, 8), w = rng.uniform_int(3, 8);
    const int co = rng.uniform_int(1, 4);
    Tensor a = Tensor::randn({n, ci, h, w}, rng);
    Tensor b = Tensor::randn({n, ci, h, w}, rng);
    Tensor k = Tensor::randn({co, ci, 3, 3}, rng, 0.4f);
    Tensor lhs = ssd::conv2d(ssd::add(a, b), k, Tensor(), 1, 1);
    Tensor rhs = ssd::add(ssd::conv2d(a, k, Tensor(), 1, 1), ssd::conv2d(b, k, Tensor(), 1, 1));
    for (int64_t i = 0; i < lhs.size(); ++i)
      CHECK(std::fabs(lhs[i] - rhs[i]) <= 1e-5f * std::max(1.0f, std::fabs(rhs[i])));
  }
}

TEST_CASE("elementwise basics") {
  Tensor z = Tensor::scalar(0.0f);
  CHECK(ssd::sigmoid(z)[0] == 0.5f);
  CHECK(double(ssd::sigmoid(Tensor::scalar(1.0f))[0]) ==
        doctest::Approx(0.7310585786300049).epsilon(1e-7));

  ssd::Rng rng(5);
  Tensor x = Tensor::randn({2, 2}, rng);
  Tensor y = ssd::add(x, Tensor::zeros({2, 2}));
  for (int64_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);
  CHECK_THROWS_AS(ssd::add(x, Tensor::zeros({3})), ssd::Error);
  CHECK_THROWS_AS(ssd::mul(x, Tensor::zeros({4, 1})), ssd::Error);
}

TEST_CASE("sigmoid stays strictly inside (0,1) for extreme finite inputs") {
  Tensor x({6}, {-1000.0f, -88.0f, -20.0f, 20.0f, 88.0f, 1000.0f});
  Tensor y = ssd::sigmoid(x);
  for (int64_t i = 0; i < y.size(); ++i) {
    CHECK(y[i] > 0.0f);
    CHECK(y[i] < 1.0f);
  }
}

TEST_CASE("pooling and resampling") {
  Tensor c = Tensor::full({1, 1, 3, 3}, 2.5f);
  CHECK(ssd::global_avg_pool(c)[0] == 2.5f);

  Tensor q({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(ssd::global_avg_pool(q)[0] == 2.5f);
  CHECK(ssd::global_max_pool(q)[0] == 4.0f);

  Tensor v = Tensor::full({1, 1, 1, 1}, 3.25f);
  Tensor up = ssd::upsample_nearest2x(v);
  REQUIRE(up.shape() == std::vector<int>({1, 1, 2, 2}));
  for (int64_t i = 0; i < 4; ++i) CHECK(up[i] == 3.25f);

  CHECK(ssd::avg_pool2(q)[0] == 2.5f);
  CHECK_THROWS_AS(ssd::avg_pool2(Tensor({1, 1, 3, 3})), ssd::Error);
}

TEST_CASE("channel statistics and slicing") {
  Tensor x({1, 2, 1, 2}, {1, 2, 5, 6});
  Tensor mean = ssd::channel_mean(x);
  CHECK(mean[0] == 3.0f);
  CHECK(mean[1] == 4.0f);
  Tensor mx = ssd::channel_max(x);
  CHECK(mx[0] == 5.0f);
  CHECK(mx[1] == 6.0f);

  Tensor a({1, 1, 1, 2}, {1, 2});
  Tensor b({1, 2, 1, 2}, {3, 4, 5, 6});
  Tensor cat = ssd::concat_channels(a, b);
  REQUIRE(cat.extent(1) == 3);
  Tensor back = ssd::slice_channels(cat, 1, 3);
  for (int64_t i = 0; i < 4; ++i) CHECK(back[i] == b[i]);
  CHECK_THROWS_AS(ssd::slice_channels(cat, 2, 2), ssd::Error);
}

TEST_CASE("tensor dump round trip and header layout") {
  ssd::Rng rng(17);
  Tensor t = Tensor::randn({2, 3, 4, 5}, rng);
  const auto path = temp_file("ssd_tensor_roundtrip.ssdt");
  ssd::save_tensor(path, t);

  std::ifstream is(path, std::ios::binary);
  char header[16];
  is.read(header, 16);
  CHECK(std::string(header, 4) == "SSDT");
  CHECK(uint8_t(header[4]) == 4);  // rank, little-endian u32
  CHECK(uint8_t(header[8]) == 2);  // extents as u16
  CHECK(uint8_t(header[10]) == 3);
  CHECK(uint8_t(header[12]) == 4);
  CHECK(uint8_t(header[14]) == 5);

  Tensor back = ssd::load_tensor(path);
  REQUIRE(back.shape() == t.shape());
  for (int64_t i = 0; i < t.size(); ++i) CHECK(back[i] == t[i]);

  const auto bogus = temp_file("ssd_tensor_bogus.ssdt");
  std::ofstream os(bogus, std::ios::binary);
  os << "NOPExxxxxxxxxxxxxxxx";
  os.close();
  CHECK_THROWS_AS(ssd::load_tensor(bogus), ssd::Error);
}
