#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "hsi/hsio.hpp"
#include "hsi/rng.hpp"

using namespace hsi;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "hsi_io_tests";
  fs::create_directories(dir);
  return dir / name;
}

HsiCube random_cube(Index rows, Index cols, Index channels, std::uint64_t seed) {
  Rng rng(seed);
  HsiCube cube(rows, cols, channels);
  for (Index i = 0; i < cube.data.size(); ++i) cube.data.data()[i] = static_cast<float>(rng.normal());
  return cube;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

}  // namespace

TEST_CASE("cube round trip is bit exact") {
  auto cube = random_cube(5, 7, 3, 1);
  cube.resolution_m = 2.5;
  cube.name = "roundtrip";
  const auto stem = scratch("cube_rt");
  write_cube(cube, stem);
  const auto back = read_cube(fs::path(stem.string() + ".hsc.json"));
  CHECK(back.rows == 5);
  CHECK(back.cols == 7);
  CHECK(back.channels() == 3);
  CHECK(back.data == cube.data);
  REQUIRE(back.resolution_m);
  CHECK(*back.resolution_m == 2.5);
  CHECK(back.name == "roundtrip");
}

TEST_CASE("raw layout is band sequential") {
  HsiCube cube(2, 3, 2);
  for (Index c = 0; c < 2; ++c) {
    for (Index r = 0; r < 2; ++r) {
      for (Index k = 0; k < 3; ++k) cube.at(r, k, c) = static_cast<float>(100 * c + 10 * r + k);
    }
  }
  const auto stem = scratch("cube_bsq");
  write_cube(cube, stem);
  const auto raw = read_f32le(fs::path(stem.string() + ".hsc.raw"));
  REQUIRE(raw.size() == 12);
  for (Index c = 0; c < 2; ++c) {
    for (Index r = 0; r < 2; ++r) {
      for (Index k = 0; k < 3; ++k) CHECK(raw[static_cast<std::size_t>(c * 6 + r * 3 + k)] == 100 * c + 10 * r + k);
    }
  }
}

TEST_CASE("cube header and raster are validated") {
  const auto stem = scratch("cube_bad");
  write_cube(random_cube(4, 4, 2, 2), stem);
  const fs::path header(stem.string() + ".hsc.json");
  const fs::path raw(stem.string() + ".hsc.raw");

  SUBCASE("truncated raster") {
    fs::resize_file(raw, 4 * 4 * 2 * 4 - 4);
    CHECK_THROWS_AS(read_cube(stem), DataError);
  }
  SUBCASE("wrong dimensions") {
    write_file(header, R"({"rows": 4, "cols": 5, "channels": 2})");
    CHECK_THROWS_AS(read_cube(stem), DataError);
  }
  SUBCASE("missing field") {
    write_file(header, R"({"rows": 4, "channels": 2})");
    CHECK_THROWS_AS(read_cube(stem), DataError);
  }
  SUBCASE("unsupported dtype") {
    write_file(header, R"({"rows": 4, "cols": 4, "channels": 2, "dtype": "f64le"})");
    CHECK_THROWS_AS(read_cube(stem), DataError);
  }
  SUBCASE("malformed json") {
    write_file(header, "{rows: 4");
    CHECK_THROWS_AS(read_cube(stem), DataError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(read_cube(scratch("nope")), DataError); }
}

TEST_CASE("non-finite samples fail or are flagged") {
  auto cube = random_cube(3, 3, 3, 4);
  cube.at(1, 1, 2) = std::numeric_limits<float>::quiet_NaN();
  const auto stem = scratch("cube_nan");
  write_cube(cube, stem);
  CHECK_THROWS_AS(read_cube(stem), DataError);
  const auto flagged = read_cube(stem, {.allow_nonfinite = true});
  CHECK(flagged.flagged_channels == std::vector<Index>{2});
  CHECK(flagged.at(1, 1, 2) == 0.0f);
  CHECK(flagged.band(0) == cube.band(0));
}

TEST_CASE("mask round trip and pgm decoding") {
  LabelMask mask(3, 4);
  mask << 0, 1, 1, 0, 1, 0, 0, 0, 0, 0, 1, 1;
  const auto path = scratch("mask.pgm");
  write_mask(mask, path);
  CHECK(read_mask(path) == mask);

  const auto bytes = read_bytes(path);
  const std::string text(bytes.begin(), bytes.end());
  CHECK(text.rfind("P5", 0) == 0);
  CHECK(static_cast<unsigned char>(text.back()) == 255);

  // Hand-written file with a comment and intermediate grey levels.
  std::string pgm = "P5\n# comment\n3 1\n255\n";
  pgm.push_back(static_cast<char>(127));
  pgm.push_back(static_cast<char>(128));
  pgm.push_back(static_cast<char>(200));
  write_file(scratch("grey.pgm"), pgm);
  const auto grey = read_mask(scratch("grey.pgm"));
  CHECK(grey(0, 0) == 0);
  CHECK(grey(0, 1) == 1);
  CHECK(grey(0, 2) == 1);

  write_file(scratch("ascii.pgm"), "P2\n1 1\n255\n0\n");
  CHECK_THROWS_AS(read_mask(scratch("ascii.pgm")), DataError);
  write_file(scratch("short.pgm"), "P5\n4 4\n255\nab");
  CHECK_THROWS_AS(read_mask(scratch("short.pgm")), DataError);
}

TEST_CASE("pairing requires matching spatial dims") {
  const auto cube = random_cube(4, 5, 2, 6);
  CHECK_NOTHROW(check_pairing(cube, LabelMask::Zero(4, 5)));
  CHECK_THROWS_AS(check_pairing(cube, LabelMask::Zero(5, 4)), DataError);
}

TEST_CASE("probability maps round trip and reject out-of-range values") {
  ProbabilityMap map(2, 3);
  map << 0.0f, 0.25f, 0.5f, 0.75f, 1.0f, 0.125f;
  const auto stem = scratch("map");
  write_probmap(map, stem);
  CHECK(read_probmap(fs::path(stem.string() + ".pmap.raw")) == map);

  ProbabilityMap bad = map;
  bad(0, 0) = 1.5f;
  CHECK_THROWS_AS(write_probmap(bad, scratch("bad_map")), DataError);

  write_probmap_pgm(map, scratch("map.pgm"));
  const auto bytes = read_bytes(scratch("map.pgm"));
  // round(p * 255) for the last three pixels: 191, 255, 32.
  REQUIRE(bytes.size() >= 3);
  CHECK(bytes[bytes.size() - 3] == 191);
  CHECK(bytes[bytes.size() - 2] == 255);
  CHECK(bytes[bytes.size() - 1] == 32);
}

TEST_CASE("file hash is stable and content sensitive") {
  write_file(scratch("h1"), "abc");
  write_file(scratch("h2"), "abd");
  CHECK(file_hash(scratch("h1")) == file_hash(scratch("h1")));
  CHECK(file_hash(scratch("h1")) != file_hash(scratch("h2")));
  // FNV-1a 64 of "a".
  write_file(scratch("h3"), "a");
  CHECK(file_hash(scratch("h3")) == "af63dc4c8601ec8c");
}
