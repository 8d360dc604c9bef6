#include "smn/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "smn/error.hpp"

namespace smn {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int e : shape) {
    if (e < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("value count " + std::to_string(data_.size()) +
                     " does not match shape " + shape_str(shape_));
  }
}

int Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(shape_));
  }
  return shape_[axis];
}

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor t = *this;
  return std::move(t).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  shape_ = std::move(shape);
  return std::move(*this);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Tensor::sum() const noexcept {
  double s = 0.0;
  for (double v : data_) s += v;
  return s;
}

double Tensor::max_abs() const noexcept {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

namespace io {

namespace {
void need(std::istream& in, const char* what) {
  if (!in) throw FormatError(std::string("unexpected end of stream while reading ") + what);
}
}  // namespace

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }
void put_f64(std::ostream& out, double v) { out.write(reinterpret_cast<const char*>(&v), 8); }
void put_f32(std::ostream& out, float v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void put_str(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  need(in, "u32");
  return v;
}
std::uint64_t get_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 8);
  need(in, "u64");
  return v;
}
double get_f64(std::istream& in) {
  double v = 0;
  in.read(reinterpret_cast<char*>(&v), 8);
  need(in, "f64");
  return v;
}
float get_f32(std::istream& in) {
  float v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  need(in, "f32");
  return v;
}
std::string get_str(std::istream& in, std::size_t max_len) {
  const std::uint32_t n = get_u32(in);
  if (n > max_len) throw FormatError("string length " + std::to_string(n) + " exceeds limit");
  std::string s(n, '\0');
  in.read(s.data(), n);
  need(in, "string");
  return s;
}

}  // namespace io

namespace {
constexpr char kTensorMagic[4] = {'S', 'M', 'N', 'T'};
constexpr std::uint32_t kMaxRank = 8;
constexpr std::size_t kMaxElements = std::size_t{1} << 32;
}  // namespace

void write_tensor(std::ostream& out, const Tensor& t, Precision precision) {
  out.write(kTensorMagic, 4);
  io::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (int e : t.shape()) io::put_u32(out, static_cast<std::uint32_t>(e));
  io::put_u32(out, static_cast<std::uint32_t>(precision));
  if (precision == Precision::f64) {
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  } else {
    std::vector<float> buf(t.values().begin(), t.values().end());
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
}

Tensor read_tensor(std::istream& in) {
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kTensorMagic, 4) != 0) throw FormatError("bad tensor magic");
  const std::uint32_t rank = io::get_u32(in);
  if (rank > kMaxRank) throw FormatError("tensor rank " + std::to_string(rank) + " too large");
  Shape shape(rank);
  std::size_t n = 1;
  for (auto& e : shape) {
    const std::uint32_t v = io::get_u32(in);
    if (v > (1u << 30)) throw FormatError("tensor extent too large");
    e = static_cast<int>(v);
    n *= v;
    if (n > kMaxElements) throw FormatError("tensor too large");
  }
  const std::uint32_t width = io::get_u32(in);
  std::vector<double> values(n);
  if (width == 8) {
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * 8));
  } else if (width == 4) {
    std::vector<float> buf(n);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 4));
    std::copy(buf.begin(), buf.end(), values.begin());
  } else {
    throw FormatError("unsupported element width " + std::to_string(width));
  }
  if (!in) throw FormatError("truncated tensor payload");
  return Tensor(std::move(shape), std::move(values));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t, Precision precision) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingArtifact("cannot open " + path.string() + " for writing");
  write_tensor(out, t, precision);
  if (!out) throw Error("write failed: " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("tensor file not found: " + path.string());
  return read_tensor(in);
}

std::uint64_t fnv1a(const void* bytes, std::size_t n, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t digest(const Tensor& t) {
  std::uint64_t h = 1469598103934665603ULL;
  for (int e : t.shape()) h = fnv1a(&e, sizeof e, h);
  return fnv1a(t.data(), t.size() * sizeof(double), h);
}

std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = kDigits[v & 0xf];
  return s;
}

}  // namespace smn
