#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mvc {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& s);
std::string shape_to_string(const Shape& s);
bool same_shape(const Shape& a, const Shape& b);

/// Dense n-dimensional array of doubles. Images use NCHW layout. `grad` is
/// empty unless a backward pass populated it; when populated it has the same
/// length as `data`.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);

  static Tensor zeros(const Shape& s) { return Tensor(s, 0.0); }
  static Tensor full(const Shape& s, double v) { return Tensor(s, v); }

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  int dim(int i) const;

  std::int64_t index4(int b, int c, int y, int x) const;
  double& at4(int b, int c, int y, int x) { return data[index4(b, c, y, x)]; }
  double at4(int b, int c, int y, int x) const { return data[index4(b, c, y, x)]; }

  bool all_finite() const;
  double min_value() const;
  double max_value() const;
};

/// xoshiro256++ with explicit distribution code so that identical seeds give
/// identical streams regardless of the standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  /// Standard normal via Box-Muller (second value cached).
  double normal();
  /// Uniform integer in [0, n).
  int uniform_int(int n);

  /// Deterministic stream derivation: mixes salts into a base seed.
  static std::uint64_t derive(std::uint64_t base, std::initializer_list<std::uint64_t> salts);

 private:
  std::uint64_t state_[4];
  bool has_cached_normal_ = false;
  double cached_normal_ = 0.0;
};

}  // namespace mvc
