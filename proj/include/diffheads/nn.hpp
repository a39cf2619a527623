#pragma once

// Minimal layer set for the denoiser. Every layer has a const forward that
// records what it needs into a caller-owned cache, and a backward that
// accumulates parameter gradients and returns the input gradient.

#include "diffheads/core.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace dh::nn {

template <typename Scalar>
struct Parameter {
  Matrix<Scalar> value;
  Matrix<Scalar> grad;

  void resize(Index rows, Index cols) {
    value = Matrix<Scalar>::Zero(rows, cols);
    grad = Matrix<Scalar>::Zero(rows, cols);
  }
};

template <typename Scalar>
using ParameterVisitor = std::function<void(const std::string&, Parameter<Scalar>&)>;

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), or zeros for output layers that
// should start as the identity / no-op.
struct Init {
  std::mt19937_64* rng = nullptr;
  bool zero_outputs = true;

  template <typename Scalar>
  void fill(Parameter<Scalar>& p, Index fan_in, bool is_output = false) const {
    if (is_output && zero_outputs) {
      p.value.setZero();
      return;
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<Scalar>(u(*rng));
  }
};

// At most 32 groups with at least 4 channels each. One-channel groups would
// strip every channel's spatial mean and leave no path for a global offset.
inline Index group_count(Index channels) {
  for (Index g = std::min<Index>(32, channels / 4); g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

// ---------------------------------------------------------------- Conv2d

template <typename Scalar>
class Conv2d {
 public:
  struct Cache {
    Tensor<Scalar> input;
  };

  Conv2d() = default;
  Conv2d(Index in, Index out, int kernel, int stride, const Init& init, bool is_output = false)
      : in_(in), out_(out), kernel_(kernel), stride_(stride) {
    require(kernel == 1 || kernel == 3, "Conv2d: kernel must be 1 or 3");
    weight_.resize(out, in * kernel * kernel);
    bias_.resize(out, 1);
    init.fill(weight_, in * kernel * kernel, is_output);
    init.fill(bias_, in * kernel * kernel, is_output);
  }

  Index in_channels() const { return in_; }
  Index out_channels() const { return out_; }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Cache& cache) const {
    require(x.channels == in_, "Conv2d: expected " + std::to_string(in_) + " channels, got " +
                                   std::to_string(x.channels));
    cache.input = x;
    const Index ho = out_size(x.height), wo = out_size(x.width);
    Tensor<Scalar> y(x.batch, out_, ho, wo);
    if (kernel_ == 1 && stride_ == 1) {
      for (Index b = 0; b < x.batch; ++b) y.item(b).noalias() = weight_.value * x.item(b);
    } else if (stride_ == 1) {
      // Rows of the unfolded matrix are contiguous windows of a zero-padded
      // plane; outputs land on a padded-width grid and are cropped.
      const Index pw = x.width + 2, span = x.height * pw;
      RowMatrix<Scalar> padded(in_, (x.height + 2) * pw + 2);
      RowMatrix<Scalar> cols(in_ * 9, span);
      RowMatrix<Scalar> out(out_, span);
      for (Index b = 0; b < x.batch; ++b) {
        pad_item(x, b, padded);
        for (Index c = 0; c < in_; ++c)
          for (int k = 0; k < 9; ++k)
            cols.row(c * 9 + k) = padded.row(c).segment((k / 3) * pw + (k % 3), span);
        out.noalias() = weight_.value * cols;
        for (Index c = 0; c < out_; ++c)
          for (Index iy = 0; iy < x.height; ++iy)
            y.data.row(c).segment(b * y.plane() + iy * x.width, x.width) = out.row(c).segment(iy * pw, x.width);
      }
    } else {
      // Per-item tiles keep the unfolded patches cache resident.
      RowMatrix<Scalar> cols(in_ * kernel_ * kernel_, ho * wo);
      for (Index b = 0; b < x.batch; ++b) {
        im2col(x, b, ho, wo, cols);
        y.item(b).noalias() = weight_.value * cols;
      }
    }
    y.data.colwise() += bias_.value.col(0);
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy, const Cache& cache) {
    const Tensor<Scalar>& x = cache.input;
    Tensor<Scalar> dx(x.batch, x.channels, x.height, x.width);
    bias_.grad.col(0) += dy.data.rowwise().sum();
    if (kernel_ == 1 && stride_ == 1) {
      for (Index b = 0; b < x.batch; ++b) {
        weight_.grad.noalias() += dy.item(b) * x.item(b).transpose();
        dx.item(b).noalias() = weight_.value.transpose() * dy.item(b);
      }
    } else if (stride_ == 1) {
      const Index pw = x.width + 2, span = x.height * pw;
      RowMatrix<Scalar> padded(in_, (x.height + 2) * pw + 2);
      RowMatrix<Scalar> dpadded(in_, (x.height + 2) * pw + 2);
      RowMatrix<Scalar> cols(in_ * 9, span), dcols(in_ * 9, span);
      RowMatrix<Scalar> dout = RowMatrix<Scalar>::Zero(out_, span);
      for (Index b = 0; b < x.batch; ++b) {
        pad_item(x, b, padded);
        for (Index c = 0; c < in_; ++c)
          for (int k = 0; k < 9; ++k)
            cols.row(c * 9 + k) = padded.row(c).segment((k / 3) * pw + (k % 3), span);
        for (Index c = 0; c < out_; ++c)
          for (Index iy = 0; iy < x.height; ++iy)
            dout.row(c).segment(iy * pw, x.width) = dy.data.row(c).segment(b * dy.plane() + iy * x.width, x.width);
        weight_.grad.noalias() += dout * cols.transpose();
        dcols.noalias() = weight_.value.transpose() * dout;
        dpadded.setZero();
        for (Index c = 0; c < in_; ++c)
          for (int k = 0; k < 9; ++k)
            dpadded.row(c).segment((k / 3) * pw + (k % 3), span) += dcols.row(c * 9 + k);
        for (Index c = 0; c < in_; ++c)
          for (Index iy = 0; iy < x.height; ++iy)
            dx.data.row(c).segment(b * dx.plane() + iy * x.width, x.width) =
                dpadded.row(c).segment((iy + 1) * pw + 1, x.width);
      }
    } else {
      RowMatrix<Scalar> cols(in_ * kernel_ * kernel_, dy.plane());
      RowMatrix<Scalar> dcols(in_ * kernel_ * kernel_, dy.plane());
      for (Index b = 0; b < x.batch; ++b) {
        im2col(x, b, dy.height, dy.width, cols);
        weight_.grad.noalias() += dy.item(b) * cols.transpose();
        dcols.noalias() = weight_.value.transpose() * dy.item(b);
        col2im(dcols, dx, b, dy.height, dy.width);
      }
    }
    return dx;
  }

  void visit(const ParameterVisitor<Scalar>& f, const std::string& prefix) {
    f(prefix + ".weight", weight_);
    f(prefix + ".bias", bias_);
  }

 private:
  // Copies item b into a plane with a one-pixel zero border (row pitch width+2).
  static void pad_item(const Tensor<Scalar>& x, Index b, RowMatrix<Scalar>& padded) {
    const Index pw = x.width + 2;
    padded.setZero();
    for (Index c = 0; c < x.channels; ++c)
      for (Index iy = 0; iy < x.height; ++iy)
        padded.row(c).segment((iy + 1) * pw + 1, x.width) = x.data.row(c).segment(b * x.plane() + iy * x.width, x.width);
  }

  Index out_size(Index n) const { return kernel_ == 1 ? (n - 1) / stride_ + 1 : (n + 2 - 3) / stride_ + 1; }

  // Valid output columns [lo, hi) for a kernel column offset.
  std::pair<Index, Index> valid_range(int kx, Index wo, Index width) const {
    const int pad = kernel_ / 2;
    Index lo = 0, hi = wo;
    while (lo < hi && lo * stride_ + kx - pad < 0) ++lo;
    while (hi > lo && (hi - 1) * stride_ + kx - pad >= width) --hi;
    return {lo, hi};
  }

  void im2col(const Tensor<Scalar>& x, Index b, Index ho, Index wo, RowMatrix<Scalar>& cols) const {
    const int pad = kernel_ / 2;
    const Index kk = kernel_ * kernel_;
    for (Index c = 0; c < x.channels; ++c) {
      const Scalar* src = x.data.row(c).data() + b * x.plane();
      for (int ky = 0; ky < kernel_; ++ky) {
        for (int kx = 0; kx < kernel_; ++kx) {
          Scalar* dst = cols.row(c * kk + ky * kernel_ + kx).data();
          const auto [lo, hi] = valid_range(kx, wo, x.width);
          for (Index oy = 0; oy < ho; ++oy) {
            const Index iy = oy * stride_ + ky - pad;
            Scalar* row = dst + oy * wo;
            if (iy < 0 || iy >= x.height) {
              std::fill(row, row + wo, Scalar(0));
              continue;
            }
            std::fill(row, row + lo, Scalar(0));
            std::fill(row + hi, row + wo, Scalar(0));
            const Scalar* line = src + iy * x.width + kx - pad;
            if (stride_ == 1) {
              std::copy(line + lo, line + hi, row + lo);
            } else {
              for (Index ox = lo; ox < hi; ++ox) row[ox] = line[ox * stride_];
            }
          }
        }
      }
    }
  }

  void col2im(const RowMatrix<Scalar>& cols, Tensor<Scalar>& dx, Index b, Index ho, Index wo) const {
    const int pad = kernel_ / 2;
    const Index kk = kernel_ * kernel_;
    for (Index c = 0; c < dx.channels; ++c) {
      Scalar* dst = dx.data.row(c).data() + b * dx.plane();
      for (int ky = 0; ky < kernel_; ++ky) {
        for (int kx = 0; kx < kernel_; ++kx) {
          const Scalar* src = cols.row(c * kk + ky * kernel_ + kx).data();
          const auto [lo, hi] = valid_range(kx, wo, dx.width);
          for (Index oy = 0; oy < ho; ++oy) {
            const Index iy = oy * stride_ + ky - pad;
            if (iy < 0 || iy >= dx.height) continue;
            const Scalar* row = src + oy * wo;
            Scalar* line = dst + iy * dx.width + kx - pad;
            for (Index ox = lo; ox < hi; ++ox) line[ox * stride_] += row[ox];
          }
        }
      }
    }
  }

  Index in_ = 0, out_ = 0;
  int kernel_ = 3, stride_ = 1;
  Parameter<Scalar> weight_, bias_;
};

// ---------------------------------------------------------------- Linear

// Column-batched affine map: input is features x batch.
template <typename Scalar>
class Linear {
 public:
  struct Cache {
    Matrix<Scalar> input;
  };

  Linear() = default;
  Linear(Index in, Index out, const Init& init, bool is_output = false) {
    weight_.resize(out, in);
    bias_.resize(out, 1);
    init.fill(weight_, in, is_output);
    init.fill(bias_, in, is_output);
  }

  Matrix<Scalar> forward(const Matrix<Scalar>& x, Cache& cache) const {
    require(x.rows() == weight_.value.cols(), "Linear: input width mismatch");
    cache.input = x;
    Matrix<Scalar> y = weight_.value * x;
    y.colwise() += bias_.value.col(0);
    return y;
  }

  Matrix<Scalar> backward(const Matrix<Scalar>& dy, const Cache& cache) {
    weight_.grad.noalias() += dy * cache.input.transpose();
    bias_.grad.col(0) += dy.rowwise().sum();
    return weight_.value.transpose() * dy;
  }

  void visit(const ParameterVisitor<Scalar>& f, const std::string& prefix) {
    f(prefix + ".weight", weight_);
    f(prefix + ".bias", bias_);
  }

 private:
  Parameter<Scalar> weight_, bias_;
};

// ---------------------------------------------------------------- SiLU

template <typename Mat>
Mat silu(const Mat& x) {
  using S = typename Mat::Scalar;
  Mat y = x;
  y.array() /= (S(1) + (-x.array()).exp());
  return y;
}

template <typename Mat>
Mat silu_backward(const Mat& dy, const Mat& x) {
  using S = typename Mat::Scalar;
  const auto s = (S(1) + (-x.array()).exp()).inverse();
  Mat dx = dy;
  dx.array() *= s * (S(1) + x.array() * (S(1) - s));
  return dx;
}

// ---------------------------------------------------------------- GroupNorm

template <typename Scalar>
class GroupNorm {
 public:
  struct Cache {
    Tensor<Scalar> normalized;
    Matrix<Scalar> inv_std;  // groups x batch
  };

  static constexpr double kEpsilon = 1e-5;

  GroupNorm() = default;
  GroupNorm(Index channels, bool affine) : channels_(channels), groups_(group_count(channels)), affine_(affine) {
    if (affine_) {
      gamma_.resize(channels, 1);
      gamma_.value.setOnes();
      beta_.resize(channels, 1);
    }
  }

  // Plain normalization without the affine part.
  static Tensor<Scalar> normalize(const Tensor<Scalar>& x, Index groups, Cache& cache) {
    const Index cpg = x.channels / groups, p = x.plane();
    cache.normalized = x;
    cache.inv_std.resize(groups, x.batch);
    for (Index b = 0; b < x.batch; ++b) {
      for (Index g = 0; g < groups; ++g) {
        auto blk = cache.normalized.data.block(g * cpg, b * p, cpg, p);
        const Scalar mean = blk.mean();
        blk.array() -= mean;
        const Scalar var = blk.squaredNorm() / static_cast<Scalar>(blk.size());
        const Scalar inv = Scalar(1) / std::sqrt(var + static_cast<Scalar>(kEpsilon));
        blk *= inv;
        cache.inv_std(g, b) = inv;
      }
    }
    return cache.normalized;
  }

  static Tensor<Scalar> normalize_backward(const Tensor<Scalar>& dxhat, Index groups, const Cache& cache) {
    const Index cpg = dxhat.channels / groups, p = dxhat.plane();
    Tensor<Scalar> dx = dxhat;
    for (Index b = 0; b < dxhat.batch; ++b) {
      for (Index g = 0; g < groups; ++g) {
        auto d = dx.data.block(g * cpg, b * p, cpg, p);
        const auto xh = cache.normalized.data.block(g * cpg, b * p, cpg, p);
        const Scalar m = static_cast<Scalar>(d.size());
        const Scalar sum_d = d.sum();
        const Scalar sum_dx = d.cwiseProduct(xh).sum();
        d = (cache.inv_std(g, b) / m) * (m * d - RowMatrix<Scalar>::Constant(cpg, p, sum_d) - sum_dx * xh);
      }
    }
    return dx;
  }

  Index groups() const { return groups_; }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Cache& cache) const {
    require(x.channels == channels_, "GroupNorm: channel mismatch");
    Tensor<Scalar> y = normalize(x, groups_, cache);
    if (affine_) {
      y.data.array().colwise() *= gamma_.value.col(0).array();
      y.data.colwise() += beta_.value.col(0);
    }
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy, const Cache& cache) {
    Tensor<Scalar> dxhat = dy;
    if (affine_) {
      gamma_.grad.col(0) += dy.data.cwiseProduct(cache.normalized.data).rowwise().sum();
      beta_.grad.col(0) += dy.data.rowwise().sum();
      dxhat.data.array().colwise() *= gamma_.value.col(0).array();
    }
    return normalize_backward(dxhat, groups_, cache);
  }

  void visit(const ParameterVisitor<Scalar>& f, const std::string& prefix) {
    if (!affine_) return;
    f(prefix + ".gamma", gamma_);
    f(prefix + ".beta", beta_);
  }

 private:
  Index channels_ = 0, groups_ = 1;
  bool affine_ = true;
  Parameter<Scalar> gamma_, beta_;
};

// ---------------------------------------------------------------- FiLM

// Per-item modulation vectors, each channels x batch.
template <typename Scalar>
struct Modulation {
  Matrix<Scalar> time_scale, time_shift, audio_scale, audio_shift;
};

// h' = audio_scale * (time_scale * GN(h) + time_shift) + audio_shift, channelwise.
template <typename Scalar>
Tensor<Scalar> film_condition(const Tensor<Scalar>& h, const Modulation<Scalar>& m,
                              typename GroupNorm<Scalar>::Cache& cache) {
  for (const auto* v : {&m.time_scale, &m.time_shift, &m.audio_scale, &m.audio_shift}) {
    require(v->rows() == h.channels && v->cols() == h.batch, "film_condition: projection/channel mismatch");
  }
  Tensor<Scalar> out = GroupNorm<Scalar>::normalize(h, group_count(h.channels), cache);
  for (Index b = 0; b < h.batch; ++b) {
    auto blk = out.item(b);
    const auto ts = m.time_scale.col(b).array(), tb = m.time_shift.col(b).array();
    const auto ys = m.audio_scale.col(b).array(), yb = m.audio_shift.col(b).array();
    blk.array().colwise() *= (ys * ts);
    blk.colwise() += (ys * tb + yb).matrix();
  }
  return out;
}

template <typename Scalar>
struct FilmGrad {
  Tensor<Scalar> input;
  Modulation<Scalar> modulation;
};

template <typename Scalar>
FilmGrad<Scalar> film_condition_backward(const Tensor<Scalar>& dy, const Modulation<Scalar>& m,
                                         const typename GroupNorm<Scalar>::Cache& cache) {
  const Index c = dy.channels, batch = dy.batch;
  FilmGrad<Scalar> g;
  g.modulation.time_scale.resize(c, batch);
  g.modulation.time_shift.resize(c, batch);
  g.modulation.audio_scale.resize(c, batch);
  g.modulation.audio_shift.resize(c, batch);
  Tensor<Scalar> dn = dy;
  for (Index b = 0; b < batch; ++b) {
    const auto d = dy.item(b);
    const auto n = cache.normalized.item(b);
    const Matrix<Scalar> dn_sum = d.cwiseProduct(n).rowwise().sum();
    const Matrix<Scalar> d_sum = d.rowwise().sum();
    const auto ts = m.time_scale.col(b).array(), tb = m.time_shift.col(b).array();
    const auto ys = m.audio_scale.col(b).array();
    g.modulation.audio_shift.col(b) = d_sum;
    g.modulation.audio_scale.col(b) = (ts * dn_sum.col(0).array() + tb * d_sum.col(0).array()).matrix();
    g.modulation.time_shift.col(b) = (ys * d_sum.col(0).array()).matrix();
    g.modulation.time_scale.col(b) = (ys * dn_sum.col(0).array()).matrix();
    dn.item(b).array().colwise() *= (ys * ts);
  }
  g.input = GroupNorm<Scalar>::normalize_backward(dn, group_count(c), cache);
  return g;
}

// ---------------------------------------------------------------- MLP

// Two affine layers with SiLU between; the output layer starts at zero.
template <typename Scalar>
class Projection {
 public:
  struct Cache {
    typename Linear<Scalar>::Cache first, second;
    Matrix<Scalar> hidden;
  };

  Projection() = default;
  Projection(Index in, Index hidden, Index out, const Init& init)
      : first_(in, hidden, init), second_(hidden, out, init, /*is_output=*/true) {}

  Matrix<Scalar> forward(const Matrix<Scalar>& x, Cache& c) const {
    c.hidden = first_.forward(x, c.first);
    return second_.forward(silu(c.hidden), c.second);
  }

  void backward(const Matrix<Scalar>& dy, const Cache& c) {
    const Matrix<Scalar> dh = second_.backward(dy, c.second);
    first_.backward(silu_backward(dh, c.hidden), c.first);
  }

  void visit(const ParameterVisitor<Scalar>& f, const std::string& prefix) {
    first_.visit(f, prefix + ".0");
    second_.visit(f, prefix + ".1");
  }

 private:
  Linear<Scalar> first_, second_;
};

// ---------------------------------------------------------------- ResBlock

template <typename Scalar>
class ResBlock {
 public:
  struct Cache {
    typename GroupNorm<Scalar>::Cache in_norm, out_norm;
    Tensor<Scalar> in_norm_out, film_out;
    typename Conv2d<Scalar>::Cache conv1, conv2, skip;
    typename Projection<Scalar>::Cache time_proj, audio_proj;
    Modulation<Scalar> modulation;
  };

  ResBlock() = default;
  ResBlock(Index in, Index out, Index time_dim, Index audio_dim, bool use_audio, const Init& init)
      : in_(in),
        out_(out),
        use_audio_(use_audio),
        in_norm_(in, true),
        conv1_(in, out, 3, 1, init),
        conv2_(out, out, 3, 1, init, /*is_output=*/true),
        time_proj_(time_dim, out, 2 * out, init) {
    if (use_audio_) audio_proj_ = Projection<Scalar>(audio_dim, out, 2 * out, init);
    if (in != out) skip_ = Conv2d<Scalar>(in, out, 1, 1, init);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, const Matrix<Scalar>& time_emb, const Matrix<Scalar>& audio,
                         Cache& c) const {
    c.in_norm_out = in_norm_.forward(x, c.in_norm);
    Tensor<Scalar> h = c.in_norm_out;
    h.data = silu(h.data);
    h = conv1_.forward(h, c.conv1);

    const Matrix<Scalar> t = time_proj_.forward(time_emb, c.time_proj);
    c.modulation.time_scale = (t.topRows(out_).array() + Scalar(1)).matrix();
    c.modulation.time_shift = t.bottomRows(out_);
    if (use_audio_) {
      const Matrix<Scalar> y = audio_proj_.forward(audio, c.audio_proj);
      c.modulation.audio_scale = (y.topRows(out_).array() + Scalar(1)).matrix();
      c.modulation.audio_shift = y.bottomRows(out_);
    } else {
      c.modulation.audio_scale = Matrix<Scalar>::Ones(out_, x.batch);
      c.modulation.audio_shift = Matrix<Scalar>::Zero(out_, x.batch);
    }
    c.film_out = film_condition(h, c.modulation, c.out_norm);
    h = c.film_out;
    h.data = silu(h.data);
    h = conv2_.forward(h, c.conv2);
    if (in_ != out_) {
      h.data += skip_.forward(x, c.skip).data;
    } else {
      h.data += x.data;
    }
    return h;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy, const Cache& c) {
    Tensor<Scalar> dx = in_ != out_ ? skip_.backward(dy, c.skip) : dy;
    Tensor<Scalar> dh = conv2_.backward(dy, c.conv2);
    dh.data = silu_backward(dh.data, c.film_out.data);
    FilmGrad<Scalar> fg = film_condition_backward(dh, c.modulation, c.out_norm);

    Matrix<Scalar> dt(2 * out_, dy.batch);
    dt << fg.modulation.time_scale, fg.modulation.time_shift;
    time_proj_.backward(dt, c.time_proj);
    if (use_audio_) {
      Matrix<Scalar> da(2 * out_, dy.batch);
      da << fg.modulation.audio_scale, fg.modulation.audio_shift;
      audio_proj_.backward(da, c.audio_proj);
    }
    dh = conv1_.backward(fg.input, c.conv1);
    dh.data = silu_backward(dh.data, c.in_norm_out.data);
    dx.data += in_norm_.backward(dh, c.in_norm).data;
    return dx;
  }

  void visit(const ParameterVisitor<Scalar>& f, const std::string& prefix) {
    in_norm_.visit(f, prefix + ".in_norm");
    conv1_.visit(f, prefix + ".conv1");
    conv2_.visit(f, prefix + ".conv2");
    time_proj_.visit(f, prefix + ".time_proj");
    if (use_audio_) audio_proj_.visit(f, prefix + ".audio_proj");
    if (in_ != out_) skip_.visit(f, prefix + ".skip");
  }

 private:
  Index in_ = 0, out_ = 0;
  bool use_audio_ = true;
  GroupNorm<Scalar> in_norm_;
  Conv2d<Scalar> conv1_, conv2_, skip_;
  Projection<Scalar> time_proj_, audio_proj_;
};

// ---------------------------------------------------------------- Attention

// Multi-head self-attention over spatial positions with a residual path.
template <typename Scalar>
class AttentionBlock {
 public:
  struct Cache {
    typename GroupNorm<Scalar>::Cache norm;
    typename Conv2d<Scalar>::Cache qkv, proj;
    Tensor<Scalar> qkv_out;
    std::vector<Matrix<Scalar>> weights;  // per (batch, head): keys x queries, softmaxed per column
  };

  AttentionBlock() = default;
  AttentionBlock(Index channels, Index heads, Index head_channels, const Init& init)
      : heads_(heads),
        head_channels_(head_channels),
        norm_(channels, true),
        qkv_(channels, 3 * heads * head_channels, 1, 1, init),
        proj_(heads * head_channels, channels, 1, 1, init, /*is_output=*/true) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Cache& c) const {
    c.qkv_out = qkv_.forward(norm_.forward(x, c.norm), c.qkv);
    const Index p = x.plane(), hc = head_channels_, inner = heads_ * hc;
    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(hc));
    Tensor<Scalar> attended(x.batch, inner, x.height, x.width);
    c.weights.assign(static_cast<std::size_t>(x.batch * heads_), {});
    for (Index b = 0; b < x.batch; ++b) {
      for (Index h = 0; h < heads_; ++h) {
        const auto q = c.qkv_out.data.block(h * hc, b * p, hc, p);
        const auto k = c.qkv_out.data.block(inner + h * hc, b * p, hc, p);
        const auto v = c.qkv_out.data.block(2 * inner + h * hc, b * p, hc, p);
        Matrix<Scalar> w = scale * (k.transpose() * q);
        for (Index i = 0; i < p; ++i) {
          const Scalar mx = w.col(i).maxCoeff();
          w.col(i) = (w.col(i).array() - mx).exp().matrix();
          w.col(i) /= w.col(i).sum();
        }
        attended.data.block(h * hc, b * p, hc, p).noalias() = v * w;
        c.weights[static_cast<std::size_t>(b * heads_ + h)] = std::move(w);
      }
    }
    Tensor<Scalar> y = proj_.forward(attended, c.proj);
    y.data += x.data;
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy, const Cache& c) {
    const Tensor<Scalar> dattended = proj_.backward(dy, c.proj);
    const Index p = dy.plane(), hc = head_channels_, inner = heads_ * hc;
    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(hc));
    Tensor<Scalar> dqkv(dy.batch, 3 * inner, dy.height, dy.width);
    for (Index b = 0; b < dy.batch; ++b) {
      for (Index h = 0; h < heads_; ++h) {
        const Matrix<Scalar>& w = c.weights[static_cast<std::size_t>(b * heads_ + h)];
        const auto q = c.qkv_out.data.block(h * hc, b * p, hc, p);
        const auto k = c.qkv_out.data.block(inner + h * hc, b * p, hc, p);
        const auto v = c.qkv_out.data.block(2 * inner + h * hc, b * p, hc, p);
        const auto d_out = dattended.data.block(h * hc, b * p, hc, p);
        dqkv.data.block(2 * inner + h * hc, b * p, hc, p).noalias() = d_out * w.transpose();
        Matrix<Scalar> ds = v.transpose() * d_out;
        const auto col_dot = ds.cwiseProduct(w).colwise().sum().eval();
        ds = w.cwiseProduct(ds - col_dot.replicate(p, 1));
        dqkv.data.block(h * hc, b * p, hc, p).noalias() = scale * (k * ds);
        dqkv.data.block(inner + h * hc, b * p, hc, p).noalias() = scale * (q * ds.transpose());
      }
    }
    Tensor<Scalar> dx = norm_.backward(qkv_.backward(dqkv, c.qkv), c.norm);
    dx.data += dy.data;
    return dx;
  }

  void visit(const ParameterVisitor<Scalar>& f, const std::string& prefix) {
    norm_.visit(f, prefix + ".norm");
    qkv_.visit(f, prefix + ".qkv");
    proj_.visit(f, prefix + ".proj");
  }

 private:
  Index heads_ = 1, head_channels_ = 1;
  GroupNorm<Scalar> norm_;
  Conv2d<Scalar> qkv_, proj_;
};

// ---------------------------------------------------------------- resampling

template <typename Scalar>
Tensor<Scalar> upsample_nearest(const Tensor<Scalar>& x) {
  Tensor<Scalar> y(x.batch, x.channels, 2 * x.height, 2 * x.width);
  for (Index c = 0; c < x.channels; ++c)
    for (Index b = 0; b < x.batch; ++b)
      for (Index iy = 0; iy < y.height; ++iy)
        for (Index ix = 0; ix < y.width; ++ix) y.at(b, c, iy, ix) = x.at(b, c, iy / 2, ix / 2);
  return y;
}

template <typename Scalar>
Tensor<Scalar> upsample_nearest_backward(const Tensor<Scalar>& dy) {
  Tensor<Scalar> dx(dy.batch, dy.channels, dy.height / 2, dy.width / 2);
  for (Index c = 0; c < dy.channels; ++c)
    for (Index b = 0; b < dy.batch; ++b)
      for (Index iy = 0; iy < dy.height; ++iy)
        for (Index ix = 0; ix < dy.width; ++ix) dx.at(b, c, iy / 2, ix / 2) += dy.at(b, c, iy, ix);
  return dx;
}

}  // namespace dh::nn
