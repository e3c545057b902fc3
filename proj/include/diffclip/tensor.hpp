#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "diffclip/errors.hpp"

namespace diffclip {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major tensor of doubles. Plain value type: copies are deep.
/// Gradient bookkeeping lives on the tape (see autodiff.hpp), not here.
class Tensor {
 public:
  Tensor() : shape_{1}, data_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
    return Tensor(Shape{rows, cols}, std::vector<double>(values));
  }

  static Tensor vector(std::initializer_list<double> values) {
    return Tensor(Shape{values.size()}, std::vector<double>(values));
  }

  static Tensor identity(std::size_t n) {
    Tensor t(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t extent(std::size_t axis) const {
    if (axis >= shape_.size()) {
      throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
    }
    return shape_[axis];
  }
  std::size_t rows() const { return require_matrix().first; }
  std::size_t cols() const { return require_matrix().second; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }

  double item() const {
    if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor rank must be at least 1");
    for (std::size_t e : shape) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
  }

  std::pair<std::size_t, std::size_t> require_matrix() const {
    if (shape_.size() != 2) throw DimensionError("expected a matrix, got " + shape_str(shape_));
    return {shape_[0], shape_[1]};
  }

  Shape shape_;
  std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff shapes differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---------------------------------------------------------------------------
// DTNS record: "DTNS", 0x01, u8 rank, rank x u32 LE extents, LE f64 payload.

namespace detail {

inline void put_le(std::ostream& os, std::uint64_t v, int bytes) {
  std::array<char, 8> buf{};
  for (int i = 0; i < bytes; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(buf.data(), bytes);
}

inline std::uint64_t get_le(std::istream& is, int bytes) {
  std::array<unsigned char, 8> buf{};
  is.read(reinterpret_cast<char*>(buf.data()), bytes);
  if (!is) throw IoError("unexpected end of stream");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= std::uint64_t{buf[i]} << (8 * i);
  return v;
}

}  // namespace detail

inline constexpr std::array<char, 4> kTensorMagic = {'D', 'T', 'N', 'S'};
inline constexpr std::uint8_t kTensorVersion = 0x01;

inline void write_tensor(std::ostream& os, const Tensor& t) {
  if (t.rank() > 255) throw DimensionError("rank too large for DTNS record");
  os.write(kTensorMagic.data(), 4);
  detail::put_le(os, kTensorVersion, 1);
  detail::put_le(os, t.rank(), 1);
  for (std::size_t e : t.shape()) {
    if (e > 0xFFFFFFFFu) throw DimensionError("extent too large for DTNS record");
    detail::put_le(os, e, 4);
  }
  for (double v : t.data()) detail::put_le(os, std::bit_cast<std::uint64_t>(v), 8);
  if (!os) throw IoError("failed writing tensor record");
}

inline Tensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (!is || magic != kTensorMagic) throw IoError("bad DTNS magic");
  if (detail::get_le(is, 1) != kTensorVersion) throw IoError("unsupported DTNS version");
  const auto rank = static_cast<std::size_t>(detail::get_le(is, 1));
  if (rank == 0) throw IoError("DTNS record with rank 0");
  Shape shape(rank);
  for (auto& e : shape) e = static_cast<std::size_t>(detail::get_le(is, 4));
  for (std::size_t e : shape) {
    if (e == 0) throw IoError("DTNS record with zero extent");
  }
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = std::bit_cast<double>(detail::get_le(is, 8));
  return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_tensor(is);
}

// FNV-1a, used for manifest and checkpoint fingerprints.
inline std::uint64_t fnv1a(std::span<const char> bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t file_hash(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return fnv1a(bytes);
}

}  // namespace diffclip
