#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "kvlab/container.hpp"
#include "kvlab/error.hpp"

using namespace kvlab;

namespace {

Container sample() {
  Container c;
  c.kind = "test";
  c.meta = {{"answer", 42}};
  Eigen::MatrixXd m(2, 3);
  m << 1, 2, 3, 4, 5, 6.5;
  c.add("m", m);
  Eigen::MatrixXf f(1, 2);
  f << -1.25f, 3.0f;
  c.add("f", f);
  c.add("ids", std::vector<int>{3, -1, 7});
  return c;
}

}  // namespace

TEST_CASE("encode/decode roundtrip") {
  const Container c = sample();
  const auto bytes = encode(c);
  CHECK(std::memcmp(bytes.data(), kContainerMagic, 8) == 0);
  const Container d = decode(bytes);
  CHECK(d.kind == "test");
  CHECK(d.meta.at("answer") == 42);
  CHECK(d.matrix_f64("m")(1, 2) == 6.5);
  CHECK(d.matrix_f64("m")(0, 1) == 2.0);
  CHECK(d.matrix_f32("f")(0, 0) == -1.25f);
  CHECK(d.ints("ids") == std::vector<int>{3, -1, 7});
  CHECK(encode(d) == bytes);
}

TEST_CASE("payload layout is row-major little-endian") {
  Container c;
  c.kind = "layout";
  Eigen::MatrixXd m(2, 2);
  m << 1.0, 2.0, 3.0, 4.0;
  c.add("m", m);
  const auto bytes = encode(c);
  std::uint64_t header = 0;
  for (int i = 0; i < 8; ++i) header |= static_cast<std::uint64_t>(bytes[8 + i]) << (8 * i);
  const std::size_t payload = 16 + header;
  REQUIRE(bytes.size() == payload + 4 * sizeof(double));
  double second = 0.0;
  std::memcpy(&second, bytes.data() + payload + sizeof(double), sizeof(double));
  CHECK(second == 2.0);
}

TEST_CASE("malformed input") {
  auto bytes = encode(sample());
  SUBCASE("bad magic") {
    bytes[0] = 'X';
    CHECK_THROWS_AS(decode(bytes), ParseError);
  }
  SUBCASE("truncated payload") {
    bytes.pop_back();
    CHECK_THROWS_AS(decode(bytes), ParseError);
  }
  SUBCASE("trailing bytes") {
    bytes.push_back(0);
    CHECK_THROWS_AS(decode(bytes), ParseError);
  }
  SUBCASE("header length past the end") {
    bytes[8] = 0xff;
    bytes[9] = 0xff;
    CHECK_THROWS_AS(decode(bytes), ParseError);
  }
  SUBCASE("too short") {
    CHECK_THROWS_AS(decode(std::span<const std::uint8_t>(bytes.data(), 5)), ParseError);
  }
}

TEST_CASE("lookups") {
  const Container c = sample();
  CHECK(c.contains("m"));
  CHECK_FALSE(c.contains("nope"));
  CHECK_THROWS_AS(c.find("nope"), Error);
  CHECK_THROWS_AS(c.matrix_f32("m"), Error);
  CHECK_THROWS_AS(c.ints("m"), Error);
}

TEST_CASE("files") {
  const auto path = std::filesystem::temp_directory_path() / "kvlab_test_container.kvl";
  write_container(sample(), path);
  CHECK(read_container(path, "test").ints("ids").size() == 3);
  CHECK_THROWS_AS(read_container(path, "weights"), Error);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_container(path), Error);
  CHECK_THROWS_AS(write_container(sample(), "/nonexistent-dir/x.kvl"), Error);
}
