#pragma once

#include "diffheads/core.hpp"
#include "diffheads/nn.hpp"
#include "diffheads/schedule.hpp"

#include "json.hpp"

#include <cmath>
#include <memory>
#include <string>
#include <vector>

namespace dh {

struct DenoiserConfig {
  std::vector<Index> channel_widths{32, 64};
  int resnet_blocks_per_level = 2;
  Index attention_heads = 4;
  Index attention_head_channels = 16;
  Index time_embed_dim = 64;
  Index audio_embed_dim = 8;       // D
  int motion_audio_radius = 2;     // m_y, fixes the audio conditioning width
  Index image_channels = 3;        // C of the target frame
  Index input_channels = 8;        // C_in after stacking
  Index image_size = 32;
  bool audio_conditioning = true;  // false pins audio scale to 1 and shift to 0

  Index motion_audio_size() const { return (2 * motion_audio_radius + 1) * audio_embed_dim; }
  void validate() const;

  // 256-512-768, two ResNet blocks per level, 4x64 attention, 128x128 input.
  static DenoiserConfig full_scale(Index input_channels, Index audio_embed_dim, int motion_audio_radius);
  static DenoiserConfig desk_scale(Index input_channels, Index audio_embed_dim, int motion_audio_radius);
};

void to_json(nlohmann::json& j, const DenoiserConfig& c);
void from_json(const nlohmann::json& j, DenoiserConfig& c);

// Sinusoidal embedding: cos(t f_i) for the first half, sin(t f_i) for the
// second, f_i = 10000^(-i/half).
template <typename Scalar>
Vector<Scalar> time_embedding(int t, Index dim) {
  require(dim >= 2 && dim % 2 == 0, "time_embedding: dimension must be even and >= 2");
  require(t >= 1, "time_embedding: timestep must be >= 1");
  const Index half = dim / 2;
  Vector<Scalar> out(dim);
  for (Index i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    out[i] = static_cast<Scalar>(std::cos(t * freq));
    out[half + i] = static_cast<Scalar>(std::sin(t * freq));
  }
  return out;
}

template <typename Scalar>
struct ModelInput {
  Tensor<Scalar> x_in;            // batch x C_in x H x W
  Matrix<Scalar> motion_audio;    // (2 m_y + 1) D x batch
  std::vector<int> timesteps;     // one per batch item, in the network's step numbering
};

template <typename Scalar>
struct DenoiserOutput {
  Tensor<Scalar> eps_pred;
  Tensor<Scalar> nu;       // in [0, 1]
  Tensor<Scalar> nu_raw;   // pre-squash head output
};

// UNet noise/variance predictor with FiLM conditioning in every ResNet block
// and attention only in the middle block.
template <typename Scalar>
class Denoiser {
 public:
  struct Cache {
    typename nn::Conv2d<Scalar>::Cache in_conv, out_conv;
    std::vector<typename nn::ResBlock<Scalar>::Cache> down_res, mid_res, up_res;
    std::vector<typename nn::Conv2d<Scalar>::Cache> down_sample, up_sample;
    typename nn::AttentionBlock<Scalar>::Cache attention;
    typename nn::GroupNorm<Scalar>::Cache out_norm;
    Tensor<Scalar> out_norm_out, head;
    std::vector<Index> skip_channels;
  };

  Denoiser(const DenoiserConfig& cfg, std::uint64_t seed, bool zero_init_outputs = true) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const nn::Init init{&rng, zero_init_outputs};
    const Index temb = cfg_.time_embed_dim, adim = cfg_.motion_audio_size();
    const bool audio = cfg_.audio_conditioning;
    const auto& widths = cfg_.channel_widths;
    const int levels = static_cast<int>(widths.size());

    Index ch = widths.front();
    in_conv_ = nn::Conv2d<Scalar>(cfg_.input_channels, ch, 3, 1, init);
    std::vector<Index> skips{ch};
    for (int l = 0; l < levels; ++l) {
      for (int r = 0; r < cfg_.resnet_blocks_per_level; ++r) {
        down_res_.emplace_back(ch, widths[static_cast<std::size_t>(l)], temb, adim, audio, init);
        ch = widths[static_cast<std::size_t>(l)];
        skips.push_back(ch);
      }
      if (l + 1 < levels) {
        down_sample_.emplace_back(ch, ch, 3, 2, init);
        skips.push_back(ch);
      }
    }
    mid_res_.emplace_back(ch, ch, temb, adim, audio, init);
    attention_ = nn::AttentionBlock<Scalar>(ch, cfg_.attention_heads, cfg_.attention_head_channels, init);
    mid_res_.emplace_back(ch, ch, temb, adim, audio, init);
    for (int l = levels - 1; l >= 0; --l) {
      for (int r = 0; r <= cfg_.resnet_blocks_per_level; ++r) {
        const Index skip = skips.back();
        skips.pop_back();
        up_res_.emplace_back(ch + skip, widths[static_cast<std::size_t>(l)], temb, adim, audio, init);
        ch = widths[static_cast<std::size_t>(l)];
      }
      if (l > 0) up_sample_.emplace_back(ch, ch, 3, 1, init);
    }
    out_norm_ = nn::GroupNorm<Scalar>(ch, true);
    out_conv_ = nn::Conv2d<Scalar>(ch, 2 * cfg_.image_channels, 3, 1, init, /*is_output=*/true);
  }

  const DenoiserConfig& config() const { return cfg_; }

  DenoiserOutput<Scalar> forward(const ModelInput<Scalar>& in, Cache& c) const {
    const Tensor<Scalar>& x = in.x_in;
    require(x.channels == cfg_.input_channels, "denoiser: expected " + std::to_string(cfg_.input_channels) +
                                                   " input channels, got " + std::to_string(x.channels));
    require(x.height == cfg_.image_size && x.width == cfg_.image_size,
            "denoiser: input is " + std::to_string(x.height) + "x" + std::to_string(x.width) + ", model expects " +
                std::to_string(cfg_.image_size));
    require(static_cast<Index>(in.timesteps.size()) == x.batch, "denoiser: one timestep per batch item required");
    require(in.motion_audio.rows() == cfg_.motion_audio_size() && in.motion_audio.cols() == x.batch,
            "denoiser: motion audio must be " + std::to_string(cfg_.motion_audio_size()) + " x batch");

    Matrix<Scalar> temb(cfg_.time_embed_dim, x.batch);
    for (Index b = 0; b < x.batch; ++b) {
      temb.col(b) = time_embedding<Scalar>(in.timesteps[static_cast<std::size_t>(b)], cfg_.time_embed_dim);
    }
    const Matrix<Scalar>& audio = in.motion_audio;

    c.down_res.assign(down_res_.size(), {});
    c.down_sample.assign(down_sample_.size(), {});
    c.mid_res.assign(mid_res_.size(), {});
    c.up_res.assign(up_res_.size(), {});
    c.up_sample.assign(up_sample_.size(), {});

    std::vector<Tensor<Scalar>> skips;
    Tensor<Scalar> h = in_conv_.forward(x, c.in_conv);
    skips.push_back(h);
    const int levels = static_cast<int>(cfg_.channel_widths.size());
    std::size_t ri = 0, si = 0;
    for (int l = 0; l < levels; ++l) {
      for (int r = 0; r < cfg_.resnet_blocks_per_level; ++r, ++ri) {
        h = down_res_[ri].forward(h, temb, audio, c.down_res[ri]);
        skips.push_back(h);
      }
      if (l + 1 < levels) {
        h = down_sample_[si].forward(h, c.down_sample[si]);
        ++si;
        skips.push_back(h);
      }
    }
    h = mid_res_[0].forward(h, temb, audio, c.mid_res[0]);
    h = attention_.forward(h, c.attention);
    h = mid_res_[1].forward(h, temb, audio, c.mid_res[1]);

    c.skip_channels.clear();
    ri = 0;
    si = 0;
    for (int l = levels - 1; l >= 0; --l) {
      for (int r = 0; r <= cfg_.resnet_blocks_per_level; ++r, ++ri) {
        const Tensor<Scalar> skip = std::move(skips.back());
        skips.pop_back();
        c.skip_channels.push_back(skip.channels);
        h = up_res_[ri].forward(concat_channels<Scalar>({&h, &skip}), temb, audio, c.up_res[ri]);
      }
      if (l > 0) {
        h = up_sample_[si].forward(nn::upsample_nearest(h), c.up_sample[si]);
        ++si;
      }
    }
    c.out_norm_out = out_norm_.forward(h, c.out_norm);
    Tensor<Scalar> act = c.out_norm_out;
    act.data = nn::silu(act.data);
    c.head = out_conv_.forward(act, c.out_conv);

    const Index ic = cfg_.image_channels;
    DenoiserOutput<Scalar> out;
    out.eps_pred = Tensor<Scalar>(x.batch, ic, x.height, x.width);
    out.eps_pred.data = c.head.data.topRows(ic);
    out.nu_raw = out.eps_pred;
    out.nu_raw.data = c.head.data.bottomRows(ic);
    out.nu = out.nu_raw;
    out.nu.data = ((out.nu_raw.data.array().tanh() + Scalar(1)) * Scalar(0.5)).matrix();
    return out;
  }

  DenoiserOutput<Scalar> forward(const ModelInput<Scalar>& in) const {
    Cache c;
    return forward(in, c);
  }

  // Accumulates parameter gradients given dLoss/d eps_pred and dLoss/d nu.
  void backward(const Tensor<Scalar>& d_eps, const Tensor<Scalar>& d_nu, const DenoiserOutput<Scalar>& out,
                const Cache& c) {
    const Index ic = cfg_.image_channels;
    Tensor<Scalar> dhead(c.head.batch, 2 * ic, c.head.height, c.head.width);
    dhead.data.topRows(ic) = d_eps.data;
    const auto th = out.nu_raw.data.array().tanh();
    dhead.data.bottomRows(ic) = (d_nu.data.array() * Scalar(0.5) * (Scalar(1) - th * th)).matrix();

    Tensor<Scalar> dh = out_conv_.backward(dhead, c.out_conv);
    dh.data = nn::silu_backward(dh.data, c.out_norm_out.data);
    dh = out_norm_.backward(dh, c.out_norm);

    const int levels = static_cast<int>(cfg_.channel_widths.size());
    // Gradients flowing back into each stored skip tensor, in push order.
    std::vector<Tensor<Scalar>> dskips;
    std::size_t ri = up_res_.size(), si = up_sample_.size(), ki = c.skip_channels.size();
    const std::size_t skip_count = c.skip_channels.size();
    dskips.resize(skip_count);
    for (int l = 0; l < levels; ++l) {
      if (l > 0) {
        --si;
        dh = nn::upsample_nearest_backward(up_sample_[si].backward(dh, c.up_sample[si]));
      }
      for (int r = 0; r <= cfg_.resnet_blocks_per_level; ++r) {
        --ri;
        --ki;
        Tensor<Scalar> dcat = up_res_[ri].backward(dh, c.up_res[ri]);
        const Index skip_ch = c.skip_channels[ki];
        const Index h_ch = dcat.channels - skip_ch;
        Tensor<Scalar> dskip(dcat.batch, skip_ch, dcat.height, dcat.width);
        dskip.data = dcat.data.bottomRows(skip_ch);
        // Skip popped k-th in the up pass was pushed (skip_count-1-k)-th.
        dskips[skip_count - 1 - ki] = std::move(dskip);
        dh = Tensor<Scalar>(dcat.batch, h_ch, dcat.height, dcat.width);
        dh.data = dcat.data.topRows(h_ch);
      }
    }
    dh = mid_res_[1].backward(dh, c.mid_res[1]);
    dh = attention_.backward(dh, c.attention);
    dh = mid_res_[0].backward(dh, c.mid_res[0]);

    std::size_t push = skip_count - 1;
    ri = down_res_.size();
    si = down_sample_.size();
    for (int l = levels - 1; l >= 0; --l) {
      if (l + 1 < levels) {
        dh.data += dskips[push--].data;
        --si;
        dh = down_sample_[si].backward(dh, c.down_sample[si]);
      }
      for (int r = 0; r < cfg_.resnet_blocks_per_level; ++r) {
        dh.data += dskips[push--].data;
        --ri;
        dh = down_res_[ri].backward(dh, c.down_res[ri]);
      }
    }
    dh.data += dskips[push].data;
    in_conv_.backward(dh, c.in_conv);
  }

  void visit(const nn::ParameterVisitor<Scalar>& f) {
    in_conv_.visit(f, "in_conv");
    for (std::size_t i = 0; i < down_res_.size(); ++i) down_res_[i].visit(f, "down_res." + std::to_string(i));
    for (std::size_t i = 0; i < down_sample_.size(); ++i) down_sample_[i].visit(f, "down_sample." + std::to_string(i));
    for (std::size_t i = 0; i < mid_res_.size(); ++i) mid_res_[i].visit(f, "mid_res." + std::to_string(i));
    attention_.visit(f, "mid_attention");
    for (std::size_t i = 0; i < up_res_.size(); ++i) up_res_[i].visit(f, "up_res." + std::to_string(i));
    for (std::size_t i = 0; i < up_sample_.size(); ++i) up_sample_[i].visit(f, "up_sample." + std::to_string(i));
    out_norm_.visit(f, "out_norm");
    out_conv_.visit(f, "out_conv");
  }

  std::vector<std::pair<std::string, nn::Parameter<Scalar>*>> parameters() {
    std::vector<std::pair<std::string, nn::Parameter<Scalar>*>> out;
    visit([&](const std::string& name, nn::Parameter<Scalar>& p) { out.emplace_back(name, &p); });
    return out;
  }

  void zero_grad() {
    visit([](const std::string&, nn::Parameter<Scalar>& p) { p.grad.setZero(); });
  }

  Index parameter_count() {
    Index n = 0;
    visit([&](const std::string&, nn::Parameter<Scalar>& p) { n += p.value.size(); });
    return n;
  }

 private:
  DenoiserConfig cfg_;
  nn::Conv2d<Scalar> in_conv_, out_conv_;
  std::vector<nn::ResBlock<Scalar>> down_res_, mid_res_, up_res_;
  std::vector<nn::Conv2d<Scalar>> down_sample_, up_sample_;
  nn::AttentionBlock<Scalar> attention_;
  nn::GroupNorm<Scalar> out_norm_;
};

template <typename Scalar>
struct ModelMoments {
  Tensor<Scalar> mean;
  Tensor<Scalar> variance;
  Tensor<Scalar> log_variance;
};

// mu = (x_t - beta_t / sqrt(1 - abar_t) eps) / sqrt(alpha_t);
// log Sigma = nu log beta_t + (1 - nu) log beta~_t, with beta~_1 floored to beta~_2.
template <typename Scalar>
ModelMoments<Scalar> model_mean_variance(const NoiseSchedule& s, const Tensor<Scalar>& eps_pred,
                                         const Tensor<Scalar>& nu, const Tensor<Scalar>& xt, int t) {
  s.check(t);
  require(eps_pred.same_shape(xt) && nu.same_shape(xt), "model_mean_variance: shape mismatch");
  const double coef = s.beta(t) / std::sqrt(1.0 - s.alpha_bar(t));
  const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha(t));
  const double log_beta = std::log(s.beta(t));
  const double log_tilde = s.posterior_log_variance_clipped(t);
  ModelMoments<Scalar> m;
  m.mean = xt;
  m.mean.data = static_cast<Scalar>(inv_sqrt_alpha) * (xt.data - static_cast<Scalar>(coef) * eps_pred.data);
  m.log_variance = nu;
  m.log_variance.data =
      (nu.data.array() * static_cast<Scalar>(log_beta) + (Scalar(1) - nu.data.array()) * static_cast<Scalar>(log_tilde))
          .matrix();
  m.variance = m.log_variance;
  m.variance.data = m.log_variance.data.array().exp().matrix();
  return m;
}

}  // namespace dh
