#pragma once

#include <filesystem>

#include "hsi/types.hpp"

namespace hsi {

struct CubeReadOptions {
  /// Replace NaN/Inf with 0 and record the channel in `flagged_channels`
  /// instead of failing.
  bool allow_nonfinite = false;
};

// Cubes: `<stem>.hsc.json` header plus `<stem>.hsc.raw` little-endian f32
// band-sequential raster. Paths may name either file or the bare stem.
HsiCube read_cube(const std::filesystem::path& path, const CubeReadOptions& options = {});
void write_cube(const HsiCube& cube, const std::filesystem::path& path);

// Masks: binary PGM (P5). Bytes >= 128 decode to 1; writes 1 -> 255.
LabelMask read_mask(const std::filesystem::path& path);
void write_mask(const LabelMask& mask, const std::filesystem::path& path);

/// Throws DataError unless mask dims equal the cube's spatial dims.
void check_pairing(const HsiCube& cube, const LabelMask& mask);

// Probability maps: `<stem>.pmap.json` plus `<stem>.pmap.raw`, row-major f32le.
ProbabilityMap read_probmap(const std::filesystem::path& path);
void write_probmap(const ProbabilityMap& map, const std::filesystem::path& path);

/// Grayscale rendering (round(p*255)); display only.
void write_probmap_pgm(const ProbabilityMap& map, const std::filesystem::path& path);

/// Stem with any `.hsc.json` / `.hsc.raw` / `.pmap.json` / `.pmap.raw` suffix removed.
std::filesystem::path strip_suffix(const std::filesystem::path& path);

// Raw little-endian f32 buffers, shared by the tile archive and model blobs.
void write_f32le(const std::filesystem::path& path, const float* values, std::size_t count);
std::vector<float> read_f32le(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, const std::uint8_t* bytes, std::size_t count);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);

/// 64-bit FNV-1a of a file's bytes, as 16 hex digits.
std::string file_hash(const std::filesystem::path& path);

}  // namespace hsi
