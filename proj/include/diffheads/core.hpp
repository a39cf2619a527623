#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace dh {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Bad input from the caller (exit code 2 at the CLI).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Failure while doing otherwise valid work (exit code 3 at the CLI).
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ValidationError(message);
}

// A batch of multi-channel images. Storage is channels x (batch*height*width),
// row-major so every channel plane is contiguous; column index is
// (b*height + y)*width + x.
template <typename Scalar>
struct Tensor {
  Index batch = 0;
  Index channels = 0;
  Index height = 0;
  Index width = 0;
  RowMatrix<Scalar> data;

  Tensor() = default;
  Tensor(Index b, Index c, Index h, Index w)
      : batch(b), channels(c), height(h), width(w), data(RowMatrix<Scalar>::Zero(c, b * h * w)) {}

  static Tensor zeros(Index b, Index c, Index h, Index w) { return Tensor(b, c, h, w); }
  static Tensor constant(Index b, Index c, Index h, Index w, Scalar v) {
    Tensor t(b, c, h, w);
    t.data.setConstant(v);
    return t;
  }

  Index plane() const { return height * width; }
  Index size() const { return data.size(); }
  bool same_shape(const Tensor& o) const {
    return batch == o.batch && channels == o.channels && height == o.height && width == o.width;
  }
  bool same_spatial(const Tensor& o) const { return height == o.height && width == o.width; }

  Scalar& at(Index b, Index c, Index y, Index x) { return data(c, (b * height + y) * width + x); }
  Scalar at(Index b, Index c, Index y, Index x) const { return data(c, (b * height + y) * width + x); }

  // Columns belonging to one batch item.
  auto item(Index b) { return data.middleCols(b * plane(), plane()); }
  auto item(Index b) const { return data.middleCols(b * plane(), plane()); }

  Tensor slice(Index b) const {
    Tensor out(1, channels, height, width);
    out.data = item(b);
    return out;
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out;
    out.batch = batch;
    out.channels = channels;
    out.height = height;
    out.width = width;
    out.data = data.template cast<Other>();
    return out;
  }
};

template <typename Scalar>
Tensor<Scalar> stack_batch(const std::vector<Tensor<Scalar>>& items) {
  require(!items.empty(), "stack_batch: no items");
  const auto& first = items.front();
  Index total = 0;
  for (const auto& it : items) {
    require(it.channels == first.channels && it.same_spatial(first), "stack_batch: shape mismatch");
    total += it.batch;
  }
  Tensor<Scalar> out(total, first.channels, first.height, first.width);
  Index col = 0;
  for (const auto& it : items) {
    out.data.middleCols(col, it.data.cols()) = it.data;
    col += it.data.cols();
  }
  return out;
}

// Channel concatenation in argument order.
template <typename Scalar>
Tensor<Scalar> concat_channels(const std::vector<const Tensor<Scalar>*>& parts) {
  require(!parts.empty(), "concat_channels: no inputs");
  const auto& first = *parts.front();
  Index channels = 0;
  for (const auto* p : parts) {
    require(p->batch == first.batch && p->same_spatial(first), "concat_channels: spatial mismatch");
    channels += p->channels;
  }
  Tensor<Scalar> out(first.batch, channels, first.height, first.width);
  Index row = 0;
  for (const auto* p : parts) {
    out.data.middleRows(row, p->channels) = p->data;
    row += p->channels;
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> standard_normal_like(const Tensor<Scalar>& like, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor<Scalar> out(like.batch, like.channels, like.height, like.width);
  for (Index i = 0; i < out.data.size(); ++i) out.data.data()[i] = static_cast<Scalar>(normal(rng));
  return out;
}

// splitmix64 finalizer; used to derive independent per-item seeds.
inline std::uint64_t split_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace dh
