#include "hsi/hsio.hpp"

#include <bit>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little, "raster I/O assumes a little-endian host");

namespace hsi {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& text) {
  if (text == "train") return Split::Train;
  if (text == "val") return Split::Val;
  if (text == "test") return Split::Test;
  throw DataError("unknown split tag '" + text + "'");
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

fs::path with_suffix(const fs::path& stem, const char* suffix) {
  return fs::path(stem.string() + suffix);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("malformed header " + path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed: " + path.string());
}

Index header_count(const json& header, const char* key, const fs::path& path) {
  if (!header.contains(key) || !header[key].is_number_integer()) {
    throw DataError(path.string() + ": missing or non-integer '" + key + "'");
  }
  const auto value = header[key].get<std::int64_t>();
  if (value < 1) throw DataError(path.string() + ": '" + key + "' must be >= 1");
  return static_cast<Index>(value);
}

void expect_string(const json& header, const char* key, const char* value, const fs::path& path) {
  if (header.contains(key) && header[key] != value) {
    throw DataError(path.string() + ": unsupported " + key + " " + header[key].dump());
  }
}

}  // namespace

fs::path strip_suffix(const fs::path& path) {
  std::string s = path.string();
  for (const char* suffix : {".hsc.json", ".hsc.raw", ".pmap.json", ".pmap.raw"}) {
    if (ends_with(s, suffix)) return fs::path(s.substr(0, s.size() - std::char_traits<char>::length(suffix)));
  }
  return path;
}

void write_bytes(const fs::path& path, const std::uint8_t* bytes, std::size_t count) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes), static_cast<std::streamsize>(count));
  if (!out) throw DataError("write failed: " + path.string());
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const std::streamoff size = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(size));
  if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), size)) {
    throw DataError("read failed: " + path.string());
  }
  return bytes;
}

void write_f32le(const fs::path& path, const float* values, std::size_t count) {
  write_bytes(path, reinterpret_cast<const std::uint8_t*>(values), count * sizeof(float));
}

std::vector<float> read_f32le(const fs::path& path) {
  const auto bytes = read_bytes(path);
  if (bytes.size() % sizeof(float) != 0) {
    throw DataError(path.string() + ": byte length " + std::to_string(bytes.size()) + " is not a multiple of 4");
  }
  std::vector<float> values(bytes.size() / sizeof(float));
  std::memcpy(values.data(), bytes.data(), bytes.size());
  return values;
}

std::string file_hash(const fs::path& path) {
  const auto bytes = read_bytes(path);
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001B3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

HsiCube read_cube(const fs::path& path, const CubeReadOptions& options) {
  const fs::path stem = strip_suffix(path);
  const fs::path header_path = with_suffix(stem, ".hsc.json");
  const fs::path raw_path = with_suffix(stem, ".hsc.raw");
  const json header = read_json(header_path);
  if (!header.is_object()) throw DataError(header_path.string() + ": header must be an object");

  HsiCube cube;
  cube.rows = header_count(header, "rows", header_path);
  cube.cols = header_count(header, "cols", header_path);
  const Index channels = header_count(header, "channels", header_path);
  expect_string(header, "dtype", "f32le", header_path);
  expect_string(header, "layout", "bsq", header_path);
  if (header.contains("resolution_m") && !header["resolution_m"].is_null()) {
    cube.resolution_m = header["resolution_m"].get<double>();
  }
  cube.name = header.value("name", stem.filename().string());

  const auto values = read_f32le(raw_path);
  const auto expected = static_cast<std::size_t>(cube.rows * cube.cols * channels);
  if (values.size() != expected) {
    throw DataError(raw_path.string() + ": dimension mismatch, header declares " + std::to_string(expected * 4) +
                    " bytes but raster has " + std::to_string(values.size() * 4));
  }
  cube.data = Eigen::Map<const Eigen::MatrixXf>(values.data(), cube.rows * cube.cols, channels);

  for (Index c = 0; c < channels; ++c) {
    auto band = cube.data.col(c);
    if (band.allFinite()) continue;
    if (!options.allow_nonfinite) {
      throw DataError(raw_path.string() + ": non-finite value in channel " + std::to_string(c));
    }
    band = band.unaryExpr([](float v) { return std::isfinite(v) ? v : 0.0f; });
    cube.flagged_channels.push_back(c);
  }
  return cube;
}

void write_cube(const HsiCube& cube, const fs::path& path) {
  if (cube.rows < 1 || cube.cols < 1 || cube.channels() < 1 || cube.data.rows() != cube.rows * cube.cols) {
    throw DataError("write_cube: invalid cube shape");
  }
  const fs::path stem = strip_suffix(path);
  json header = {{"rows", cube.rows},    {"cols", cube.cols},   {"channels", cube.channels()},
                 {"dtype", "f32le"},     {"layout", "bsq"},     {"name", cube.name}};
  if (cube.resolution_m) header["resolution_m"] = *cube.resolution_m;
  write_text(with_suffix(stem, ".hsc.json"), header.dump(2) + "\n");
  write_f32le(with_suffix(stem, ".hsc.raw"), cube.data.data(), static_cast<std::size_t>(cube.data.size()));
}

namespace {

// Next whitespace-delimited PGM header token, skipping '#' comments.
std::string pgm_token(const std::vector<std::uint8_t>& bytes, std::size_t& pos, const fs::path& path) {
  for (;;) {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    if (pos < bytes.size() && bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  std::string token;
  while (pos < bytes.size() && !std::isspace(bytes[pos])) token.push_back(static_cast<char>(bytes[pos++]));
  if (token.empty()) throw DataError(path.string() + ": truncated PGM header");
  return token;
}

long pgm_number(const std::vector<std::uint8_t>& bytes, std::size_t& pos, const fs::path& path) {
  const std::string token = pgm_token(bytes, pos, path);
  char* end = nullptr;
  const long value = std::strtol(token.c_str(), &end, 10);
  if (*end != '\0' || value < 1) throw DataError(path.string() + ": bad PGM header field '" + token + "'");
  return value;
}

void write_pgm(const RowMajorMatrix<std::uint8_t>& pixels, const fs::path& path) {
  std::ostringstream head;
  head << "P5\n" << pixels.cols() << ' ' << pixels.rows() << "\n255\n";
  const std::string h = head.str();
  std::vector<std::uint8_t> bytes(h.begin(), h.end());
  bytes.insert(bytes.end(), pixels.data(), pixels.data() + pixels.size());
  write_bytes(path, bytes.data(), bytes.size());
}

}  // namespace

LabelMask read_mask(const fs::path& path) {
  const auto bytes = read_bytes(path);
  std::size_t pos = 0;
  if (pgm_token(bytes, pos, path) != "P5") throw DataError(path.string() + ": not a binary PGM (P5)");
  const long width = pgm_number(bytes, pos, path);
  const long height = pgm_number(bytes, pos, path);
  const long maxval = pgm_number(bytes, pos, path);
  if (maxval > 255) throw DataError(path.string() + ": 16-bit PGM masks are not supported");
  ++pos;  // single whitespace byte after maxval
  const auto count = static_cast<std::size_t>(width * height);
  if (bytes.size() < pos || bytes.size() - pos != count) {
    throw DataError(path.string() + ": PGM raster length does not match " + std::to_string(width) + "x" +
                    std::to_string(height));
  }
  LabelMask mask(height, width);
  for (std::size_t i = 0; i < count; ++i) mask.data()[i] = bytes[pos + i] >= 128 ? 1 : 0;
  return mask;
}

void write_mask(const LabelMask& mask, const fs::path& path) {
  RowMajorMatrix<std::uint8_t> pixels = mask;
  for (Index i = 0; i < pixels.size(); ++i) {
    const auto v = pixels.data()[i];
    if (v > 1) throw DataError("write_mask: label values must be 0 or 1");
    pixels.data()[i] = v ? 255 : 0;
  }
  write_pgm(pixels, path);
}

void check_pairing(const HsiCube& cube, const LabelMask& mask) {
  if (mask.rows() != cube.rows || mask.cols() != cube.cols) {
    throw DataError("mask " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                    " does not match cube '" + cube.name + "' " + std::to_string(cube.rows) + "x" +
                    std::to_string(cube.cols));
  }
}

ProbabilityMap read_probmap(const fs::path& path) {
  const fs::path stem = strip_suffix(path);
  const fs::path header_path = with_suffix(stem, ".pmap.json");
  const json header = read_json(header_path);
  if (!header.is_object()) throw DataError(header_path.string() + ": header must be an object");
  const Index rows = header_count(header, "rows", header_path);
  const Index cols = header_count(header, "cols", header_path);
  expect_string(header, "dtype", "f32le", header_path);
  const auto values = read_f32le(with_suffix(stem, ".pmap.raw"));
  if (values.size() != static_cast<std::size_t>(rows * cols)) {
    throw DataError(stem.string() + ".pmap.raw: dimension mismatch with header");
  }
  ProbabilityMap map = Eigen::Map<const ProbabilityMap>(values.data(), rows, cols);
  if (!((map.array() >= 0.0f) && (map.array() <= 1.0f)).all()) {
    throw DataError(stem.string() + ".pmap.raw: probability outside [0,1]");
  }
  return map;
}

void write_probmap(const ProbabilityMap& map, const fs::path& path) {
  if (map.size() == 0) throw DataError("write_probmap: empty map");
  // NaN fails both comparisons, so it is rejected here as well.
  if (!((map.array() >= 0.0f) && (map.array() <= 1.0f)).all()) {
    throw DataError("write_probmap: probability outside [0,1]");
  }
  const fs::path stem = strip_suffix(path);
  const json header = {{"rows", map.rows()}, {"cols", map.cols()}, {"dtype", "f32le"}};
  write_text(with_suffix(stem, ".pmap.json"), header.dump(2) + "\n");
  write_f32le(with_suffix(stem, ".pmap.raw"), map.data(), static_cast<std::size_t>(map.size()));
}

void write_probmap_pgm(const ProbabilityMap& map, const fs::path& path) {
  RowMajorMatrix<std::uint8_t> pixels =
      (map.array().max(0.0f).min(1.0f) * 255.0f).round().cast<std::uint8_t>().matrix();
  write_pgm(pixels, path);
}

}  // namespace hsi
