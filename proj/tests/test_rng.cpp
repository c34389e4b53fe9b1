#include <cmath>

#include "doctest.h"
#include "iclebm/rng.hpp"

using namespace iclebm;

TEST_CASE("streams with the same seed are identical") {
  rng::Stream a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("derive separates streams by tag tuple") {
  CHECK(rng::derive(1, {2, 3}) != rng::derive(1, {3, 2}));
  CHECK(rng::derive(1, {2, 3}) != rng::derive(2, {2, 3}));
  CHECK(rng::derive(1, {2}) != rng::derive(1, {2, 0}));
  CHECK(rng::derive(7, {1, 2, 3}) == rng::derive(7, {1, 2, 3}));
}

TEST_CASE("uniform draws cover [0,1) with the right mean") {
  rng::Stream s(123);
  double sum = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = s.next_uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
  }
  CHECK(std::abs(sum / n - 0.5) < 0.005);
}

TEST_CASE("normal draws have unit moments") {
  rng::Stream s(7);
  double sum = 0.0, sq = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = s.next_normal();
    sum += z;
    sq += z * z;
  }
  CHECK(std::abs(sum / n) < 0.01);
  CHECK(std::abs(sq / n - 1.0) < 0.02);
}

TEST_CASE("truncated normal stays inside two sigma") {
  rng::Stream s(9);
  for (int i = 0; i < 10000; ++i) {
    const double z = s.next_normal_trunc2();
    REQUIRE(z >= -2.0);
    REQUIRE(z <= 2.0);
  }
}
