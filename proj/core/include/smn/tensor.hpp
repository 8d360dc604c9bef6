#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace smn {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles. Rank-3 tensors are laid out H x W x C.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  // Negative axes count from the back.
  int dim(int axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const double> values() const noexcept { return data_; }
  std::span<double> values() noexcept { return data_; }
  const double* data() const noexcept { return data_.data(); }
  double* data() noexcept { return data_.data(); }
  const std::vector<double>& vec() const noexcept { return data_; }

  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double& operator[](std::size_t i) noexcept { return data_[i]; }

  double at(int y, int x, int c) const noexcept {
    return data_[(static_cast<std::size_t>(y) * shape_[1] + x) * shape_[2] + c];
  }
  double& at(int y, int x, int c) noexcept {
    return data_[(static_cast<std::size_t>(y) * shape_[1] + x) * shape_[2] + c];
  }

  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  void fill(double v);
  bool all_finite() const noexcept;
  double sum() const noexcept;
  double max_abs() const noexcept;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Payload precision for serialization. Values are always double in memory.
enum class Precision : std::uint32_t { f32 = 4, f64 = 8 };

// Layout: "SMNT", u32 rank, rank x u32 extents, u32 element width (4|8), payload.
// All integers and floats little-endian.
void write_tensor(std::ostream& out, const Tensor& t, Precision precision = Precision::f64);
Tensor read_tensor(std::istream& in);
void save_tensor(const std::filesystem::path& path, const Tensor& t,
                 Precision precision = Precision::f64);
Tensor load_tensor(const std::filesystem::path& path);

/// FNV-1a over the shape and raw payload bytes. Bit-level, so -0.0 != 0.0.
std::uint64_t digest(const Tensor& t);
std::uint64_t fnv1a(const void* bytes, std::size_t n, std::uint64_t seed = 1469598103934665603ULL);
std::string hex64(std::uint64_t v);

// Little-endian primitive I/O shared by the binary formats.
namespace io {
void put_u32(std::ostream& out, std::uint32_t v);
void put_u64(std::ostream& out, std::uint64_t v);
void put_f64(std::ostream& out, double v);
void put_f32(std::ostream& out, float v);
void put_str(std::ostream& out, const std::string& s);
std::uint32_t get_u32(std::istream& in);
std::uint64_t get_u64(std::istream& in);
double get_f64(std::istream& in);
float get_f32(std::istream& in);
std::string get_str(std::istream& in, std::size_t max_len = 1u << 20);
}  // namespace io

}  // namespace smn
