#pragma once

#include <cstddef>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "isg/errors.hpp"
#include "isg/rng.hpp"

namespace isg {

// Dense row-major tensor. Scalar type is a template parameter; double is the
// default precision everywhere, float instantiations exist for speed-sensitive
// callers and for checkpoint IO.
template <class S>
struct TensorT {
  std::vector<int> shape;
  std::vector<S> data;

  TensorT() = default;

  explicit TensorT(std::vector<int> sh) : shape(std::move(sh)) {
    data.assign(numel_of(shape), S(0));
  }

  TensorT(std::vector<int> sh, std::vector<S> d) : shape(std::move(sh)), data(std::move(d)) {
    require(data.size() == numel_of(shape), Err::ShapeMismatch,
            "data length does not match shape " + shape_str(shape));
  }

  static std::size_t numel_of(const std::vector<int>& sh) {
    std::size_t n = 1;
    for (int e : sh) {
      require(e >= 1, Err::ShapeMismatch, "extent must be >= 1");
      n *= static_cast<std::size_t>(e);
    }
    return n;
  }

  static TensorT full(std::vector<int> sh, S v) {
    TensorT t(std::move(sh));
    for (auto& x : t.data) x = v;
    return t;
  }

  static TensorT zeros(std::vector<int> sh) { return TensorT(std::move(sh)); }

  // i.i.d. normal entries, seeded
  static TensorT randn(std::vector<int> sh, Rng& rng, double sigma = 1.0) {
    TensorT t(std::move(sh));
    for (auto& x : t.data) x = static_cast<S>(rng.normal(0.0, sigma));
    return t;
  }

  int rank() const { return static_cast<int>(shape.size()); }
  std::size_t numel() const { return data.size(); }
  int extent(int i) const { return shape[static_cast<std::size_t>(i)]; }

  S* ptr() { return data.data(); }
  const S* ptr() const { return data.data(); }

  void fill(S v) {
    for (auto& x : data) x = v;
  }

  static std::string shape_str(const std::vector<int>& sh) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < sh.size(); ++i) os << (i ? "," : "") << sh[i];
    os << ")";
    return os.str();
  }

  std::string shape_str() const { return shape_str(shape); }
};

using Tensor = TensorT<double>;

template <class S>
inline bool same_shape(const TensorT<S>& a, const TensorT<S>& b) {
  return a.shape == b.shape;
}

}  // namespace isg
