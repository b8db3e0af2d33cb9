// Copyright 2026 The ctxssl Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <doctest.h>

#include "ctxssl/augment.hpp"
#include "ctxssl/error.hpp"
#include "support.hpp"

using namespace ctxssl;

namespace {

std::vector<float> random_patch(int side, Rng& rng) {
  std::vector<float> p(static_cast<std::size_t>(side) * side * side);
  for (auto& v : p) v = static_cast<float>(rng.normal());
  return p;
}

double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

AugmentConfig only_elastic() {
  AugmentConfig c;
  c.noise = false;
  c.contrast = false;
  return c;
}

}  // namespace

TEST_CASE("config validation") {
  AugmentConfig c;
  CHECK_NOTHROW(c.validate(16));
  c.gamma_min = 0.0;
  CHECK_THROWS_AS(c.validate(16), ConfigError);
  c = AugmentConfig{};
  c.elastic_max_displacement = 8.0;
  CHECK_THROWS_AS(c.validate(16), ConfigError);
  c = AugmentConfig{};
  c.noise_sigma = -1;
  CHECK_THROWS_AS(c.validate(16), ConfigError);
}

TEST_CASE("elastic: zero displacement is the identity") {
  Rng rng(1);
  const auto p = random_patch(16, rng);
  AugmentConfig c = only_elastic();
  c.elastic_max_displacement = 0.0;
  CHECK(elastic_deform(p, {16, 16, 16}, c, rng) == p);
}

TEST_CASE("elastic: constant patch stays constant, same stream gives same output") {
  const std::vector<float> k(16 * 16 * 16, 3.0F);
  Rng rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    const auto out = elastic_deform(k, {16, 16, 16}, only_elastic(), rng);
    for (float v : out) REQUIRE(v == doctest::Approx(3.0).epsilon(1e-6));
  }
  const auto p = random_patch(16, rng);
  Rng a(7), b(7);
  const auto pa = elastic_deform(p, {16, 16, 16}, only_elastic(), a);
  CHECK(pa == elastic_deform(p, {16, 16, 16}, only_elastic(), b));
  CHECK(pa != p);
  CHECK(pa.size() == p.size());
}

TEST_CASE("elastic: displacement stays within the configured bound") {
  // A linear ramp along x: the output value minus x is the sampled x-displacement.
  std::vector<float> ramp(16 * 16 * 16);
  for (int z = 0; z < 16; ++z)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) ramp[static_cast<std::size_t>(x + 16 * (y + 16 * z))] = static_cast<float>(x);
  Rng rng(3);
  const auto out = elastic_deform(ramp, {16, 16, 16}, only_elastic(), rng);
  double worst = 0;
  for (std::size_t i = 0; i < out.size(); ++i) worst = std::max<double>(worst, std::abs(out[i] - ramp[i]));
  CHECK(worst <= 2.0 + 1e-5);
  CHECK(worst > 0.05);
}

TEST_CASE("noise: sigma 0 is the identity; variance and mean follow the configured sigma") {
  Rng rng(4);
  const auto p = random_patch(32, rng);
  AugmentConfig c;
  c.noise_sigma = 0.0;
  CHECK(gaussian_noise(p, c, rng) == p);

  c.noise_sigma = 0.15;
  const auto out = gaussian_noise(p, c, rng);
  const double n = static_cast<double>(p.size());
  double mean = 0, var = 0;
  for (std::size_t i = 0; i < p.size(); ++i) mean += out[i] - p[i];
  mean /= n;
  for (std::size_t i = 0; i < p.size(); ++i) var += (out[i] - p[i] - mean) * (out[i] - p[i] - mean);
  var /= n - 1;
  CHECK(std::abs(var / (0.15 * 0.15) - 1) < 0.05);
  CHECK(std::abs(mean) < 3 * 0.15 / std::sqrt(n));
}

TEST_CASE("contrast: gamma examples, monotonicity, constant patches") {
  const std::vector<float> v{0.0F, 0.5F, 1.0F};
  CHECK(apply_gamma(v, 1.0) == v);
  const auto g2 = apply_gamma(v, 2.0);
  CHECK(g2[0] == 0.0F);
  CHECK(g2[1] == doctest::Approx(0.25));
  CHECK(g2[2] == 1.0F);

  Rng rng(5);
  const auto p = random_patch(8, rng);
  AugmentConfig c;
  for (int trial = 0; trial < 10; ++trial) {
    const auto out = contrast_adjust(p, c, rng);
    const auto [lo, hi] = std::minmax_element(p.begin(), p.end());
    for (std::size_t i = 0; i < p.size(); ++i)
      for (std::size_t j = 0; j < p.size(); j += 37) {
        if (p[i] < p[j]) REQUIRE(out[i] <= out[j]);
      }
    CHECK(*std::min_element(out.begin(), out.end()) == doctest::Approx(*lo));
    CHECK(*std::max_element(out.begin(), out.end()) == doctest::Approx(*hi));
  }
  const std::vector<float> k(27, 1.5F);
  CHECK(contrast_adjust(k, c, rng) == k);
}

TEST_CASE("random_view: disabled is the identity; streams decide the draw") {
  Rng rng(6);
  const auto p = random_patch(16, rng);
  CHECK(random_view(p, {16, 16, 16}, AugmentConfig::none(), Rng(1)) == p);

  const AugmentConfig c;
  const auto a = random_view(p, {16, 16, 16}, c, Rng(11));
  const auto b = random_view(p, {16, 16, 16}, c, Rng(11));
  const auto d = random_view(p, {16, 16, 16}, c, Rng(12));
  CHECK(a == b);
  CHECK(max_abs_diff(a, d) > 1e-3);
  CHECK(a.size() == p.size());
}

TEST_CASE("property: every augmentation preserves the patch shape") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Size3 s{4 + static_cast<int>(rng.index(10)), 4 + static_cast<int>(rng.index(10)),
                  4 + static_cast<int>(rng.index(10))};
    std::vector<float> p(static_cast<std::size_t>(s[0]) * s[1] * s[2]);
    for (auto& v : p) v = static_cast<float>(rng.uniform());
    const AugmentConfig c;
    CHECK(elastic_deform(p, s, c, rng).size() == p.size());
    CHECK(gaussian_noise(p, c, rng).size() == p.size());
    CHECK(contrast_adjust(p, c, rng).size() == p.size());
    CHECK(random_view(p, s, c, rng.split(static_cast<std::uint64_t>(trial))).size() == p.size());
  }
  CHECK_THROWS_AS(elastic_deform(std::vector<float>(10), {2, 2, 2}, AugmentConfig{}, rng), ContractError);
}
