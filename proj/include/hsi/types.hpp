#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace hsi {

using Index = Eigen::Index;

/// Malformed or inconsistent input data (files, shapes, labels).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration values.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Numerical breakdown (NaN loss, degenerate decomposition).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Scalar>
using RowMajorMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Per-pixel {0,1} labels, 0 = water, 1 = oil.
using LabelMask = RowMajorMatrix<std::uint8_t>;

/// Per-pixel oil probability in [0, 1].
using ProbabilityMap = RowMajorMatrix<float>;

/// Hyperspectral cube. `data` is (rows*cols) x channels in column-major
/// order, so column c is band c stored row-major: the flat buffer is exactly
/// band-sequential, index = c*rows*cols + r*cols + col.
template <typename Scalar>
struct Cube {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  Index rows = 0;
  Index cols = 0;
  Matrix data;
  std::optional<double> resolution_m;
  std::string name;
  /// Channels whose non-finite samples were replaced by zero on ingestion.
  std::vector<Index> flagged_channels;

  Cube() = default;
  Cube(Index r, Index c, Index channels) : rows(r), cols(c), data(Matrix::Zero(r * c, channels)) {}

  Index channels() const { return data.cols(); }
  Index pixels() const { return rows * cols; }

  Scalar& at(Index r, Index c, Index band) { return data(r * cols + c, band); }
  Scalar at(Index r, Index c, Index band) const { return data(r * cols + c, band); }

  /// Band `c` as a rows x cols image.
  Eigen::Map<const RowMajorMatrix<Scalar>> band(Index c) const {
    return Eigen::Map<const RowMajorMatrix<Scalar>>(data.col(c).data(), rows, cols);
  }
  Eigen::Map<RowMajorMatrix<Scalar>> band(Index c) {
    return Eigen::Map<RowMajorMatrix<Scalar>>(data.col(c).data(), rows, cols);
  }

  template <typename Other>
  Cube<Other> cast() const {
    Cube<Other> out;
    out.rows = rows;
    out.cols = cols;
    out.data = data.template cast<Other>();
    out.resolution_m = resolution_m;
    out.name = name;
    out.flagged_channels = flagged_channels;
    return out;
  }
};

using HsiCube = Cube<float>;

enum class Split : std::uint8_t { Train, Val, Test };

const char* to_string(Split split);
Split split_from_string(const std::string& text);

/// One square tile cut from a cube, with labels and padding bookkeeping.
/// `features` is (side*side) x K, column-major, i.e. channel-major on disk.
struct TileRecord {
  std::int64_t tile_id = 0;
  std::string source_image;
  Index origin_row = 0;
  Index origin_col = 0;
  Eigen::MatrixXf features;
  LabelMask labels;
  LabelMask pad_mask;
  Split split = Split::Train;
  bool augmented = false;

  Index side() const { return labels.rows(); }
  Index channels() const { return features.cols(); }
  bool has_oil() const { return (labels.array() != 0).any(); }
};

}  // namespace hsi
