#include "mvc/tensor.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "mvc/errors.hpp"

namespace mvc {

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_to_string(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << ")";
  return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)) {
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor extent must be positive, got " + shape_to_string(shape));
  }
  data.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_to_string(shape));
  }
}

int Tensor::dim(int i) const {
  if (i < 0 || i >= static_cast<int>(shape.size())) {
    throw ShapeError("dim index " + std::to_string(i) + " out of range for " + shape_to_string(shape));
  }
  return shape[static_cast<std::size_t>(i)];
}

std::int64_t Tensor::index4(int b, int c, int y, int x) const {
  const int C = shape[1], H = shape[2], W = shape[3];
  return ((static_cast<std::int64_t>(b) * C + c) * H + y) * W + x;
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double Tensor::min_value() const {
  double m = std::numeric_limits<double>::infinity();
  for (double v : data) m = std::min(m, v);
  return m;
}

double Tensor::max_value() const {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : data) m = std::max(m, v);
  return m;
}

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

}  // namespace

Rng::Rng(std::uint64_t seed) {
  std::uint64_t x = seed;
  for (auto& s : state_) s = splitmix64(x);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
  const std::uint64_t t = state_[1] << 17;
  state_[2] ^= state_[0];
  state_[3] ^= state_[1];
  state_[1] ^= state_[2];
  state_[0] ^= state_[3];
  state_[2] ^= t;
  state_[3] = rotl(state_[3], 45);
  return result;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (has_cached_normal_) {
    has_cached_normal_ = false;
    return cached_normal_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * 3.14159265358979323846 * u2;
  cached_normal_ = r * std::sin(theta);
  has_cached_normal_ = true;
  return r * std::cos(theta);
}

int Rng::uniform_int(int n) {
  if (n <= 0) throw ShapeError("uniform_int requires n > 0");
  // Rejection sampling keeps the distribution exactly uniform.
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return static_cast<int>(v % bound);
}

std::uint64_t Rng::derive(std::uint64_t base, std::initializer_list<std::uint64_t> salts) {
  std::uint64_t x = base;
  std::uint64_t acc = splitmix64(x);
  for (std::uint64_t s : salts) {
    x ^= s + 0x9e3779b97f4a7c15ULL + (acc << 6) + (acc >> 2);
    acc = splitmix64(x);
  }
  return acc;
}

}  // namespace mvc
