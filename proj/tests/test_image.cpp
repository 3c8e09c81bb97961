// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>

#include "crowdrec/core.hpp"
#include "crowdrec/image.hpp"

using namespace crowdrec;

TEST_CASE("pfm round-trip preserves float32 payloads including infinities") {
  DepthImage img(7, 5);
  Rng rng(12);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 7; ++x)
      img.at(x, y) = rng.uniform(-10.0, 10.0);
  img.at(0, 0) = kNoDepth;
  img.at(6, 4) = 0.0;
  img.at(3, 2) = -1.25;  // exactly representable

  const std::string path = "crowdrec_test_depth.pfm";
  write_pfm(path, img);
  const DepthImage back = read_pfm(path);
  std::remove(path.c_str());

  REQUIRE(back.width == 7);
  REQUIRE(back.height == 5);
  CHECK(std::isinf(back.at(0, 0)));
  CHECK(back.at(3, 2) == -1.25);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 7; ++x)
      if (std::isfinite(img.at(x, y)))
        CHECK(back.at(x, y) == doctest::Approx(img.at(x, y)).epsilon(1e-7));
}

TEST_CASE("pfm rows are stored bottom to top with a little-endian marker") {
  DepthImage img(2, 2);
  img.at(0, 0) = 1;
  img.at(1, 0) = 2;
  img.at(0, 1) = 3;
  img.at(1, 1) = 4;
  const std::string path = "crowdrec_test_order.pfm";
  write_pfm(path, img);
  std::ifstream f(path, std::ios::binary);
  std::string header(11, '\0');
  f.read(header.data(), 11);
  CHECK(header == "Pf\n2 2\n-1.0");
  f.get();  // newline
  float raw[4];
  f.read(reinterpret_cast<char*>(raw), sizeof raw);
  std::remove(path.c_str());
  // Bottom row (y = 1) first.
  CHECK(raw[0] == 3.0f);
  CHECK(raw[1] == 4.0f);
  CHECK(raw[2] == 1.0f);
  CHECK(raw[3] == 2.0f);
}

TEST_CASE("pgm round-trip is byte exact and headers are validated") {
  InstanceMap img(5, 3);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 5; ++x)
      img.at(x, y) = std::uint8_t(y * 5 + x + 7);
  const std::string path = "crowdrec_test_ids.pgm";
  write_pgm(path, img);
  const InstanceMap back = read_pgm(path);
  REQUIRE(back.width == 5);
  REQUIRE(back.height == 3);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 5; ++x)
      CHECK(back.at(x, y) == img.at(x, y));
  std::remove(path.c_str());

  const std::string bad = "crowdrec_test_bad.pgm";
  {
    std::ofstream f(bad, std::ios::binary);
    f << "P5\n5 3\n65535\n";
  }
  CHECK_THROWS_AS((void)read_pgm(bad), std::runtime_error);
  std::remove(bad.c_str());
  CHECK_THROWS_AS((void)read_pgm("crowdrec_no_such_file.pgm"), std::runtime_error);
}

TEST_CASE("bilinear sampling: centers exact, ramps linear, borders clamped") {
  GrayImage img(6, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 6; ++x)
      img.at(x, y) = 2.0 * x - 3.0 * y + 0.25;

  // Exactness at pixel centers.
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 6; ++x)
      CHECK(bilinear_sample(img, x + 0.5, y + 0.5) ==
            doctest::Approx(img.at(x, y)).epsilon(1e-13));

  // A linear image is reproduced exactly between centers.
  CHECK(bilinear_sample(img, 2.0, 1.75) ==
        doctest::Approx(2.0 * 1.5 - 3.0 * 1.25 + 0.25).epsilon(1e-13));

  // Clamped beyond the border: gradient dies outside the center lattice.
  CHECK(bilinear_sample(img, 0.0, 1.5) == doctest::Approx(img.at(0, 1)).epsilon(1e-13));
  CHECK(bilinear_sample(img, 100.0, 100.0) == doctest::Approx(img.at(5, 3)).epsilon(1e-13));
}

TEST_CASE("gray quantization clamps and rounds") {
  GrayImage img(3, 1);
  img.at(0, 0) = -0.5;
  img.at(1, 0) = 0.5;
  img.at(2, 0) = 1.5;
  const MaskImage q = to_gray8(img);
  CHECK(q.at(0, 0) == 0);
  CHECK(q.at(1, 0) == 128);  // round half away from zero at 127.5
  CHECK(q.at(2, 0) == 255);
}
