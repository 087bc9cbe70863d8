#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace abc {

// Dense row-major f64 array. Rank 1 and 2 cover everything the encoder needs;
// scalars are shape {1}. Training math stays in f64, the f32 path exists only
// for checkpoint storage.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor full(std::vector<std::size_t> shape, double v);
  static Tensor from(std::vector<std::size_t> shape, std::vector<double> values);
  static Tensor scalar(double v);
  static Tensor vec(std::initializer_list<double> values);

  std::size_t numel() const;
  std::size_t rank() const { return shape.size(); }
  // Row/col accessors require rank 2.
  std::size_t rows() const;
  std::size_t cols() const;
  bool is_scalar() const { return rank() == 1 && shape[0] == 1; }

  double& at(std::size_t i) { return data[i]; }
  double at(std::size_t i) const { return data[i]; }
  double& at(std::size_t r, std::size_t c);
  double at(std::size_t r, std::size_t c) const;

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
};

std::string shape_str(const std::vector<std::size_t>& shape);

// Every element squeezed through f32 and widened again (checkpoint precision).
Tensor round_to_f32(const Tensor& t);

bool bitwise_equal(const Tensor& a, const Tensor& b);

}  // namespace abc
