#pragma once

#include "diffheads/conditioning.hpp"
#include "diffheads/denoiser.hpp"
#include "diffheads/schedule.hpp"

#include <functional>
#include <random>
#include <vector>

namespace dh {

struct SamplerConfig {
  int respaced_steps = 200;
  bool clip_x0 = true;
  std::uint64_t seed = 0;
  // Video v of a call uses stream split_seed(seed, first_stream + v), so
  // results do not depend on how videos are grouped into calls.
  std::uint64_t first_stream = 0;
  ConditioningConfig conditioning;
};

// Called after each reverse step with (respaced step index, predicted x0).
template <typename Scalar>
using StepObserver = std::function<void(int, const Tensor<Scalar>&)>;
// Called before frame k is generated with the motion buffer it will use.
template <typename Scalar>
using BufferObserver = std::function<void(Index, const std::vector<Tensor<Scalar>>&)>;

// Reverse diffusion for one frame per batch item. `rngs` holds one stream per
// batch item so items stay independent of how they are grouped.
template <typename Scalar>
Tensor<Scalar> sample_frame(const Denoiser<Scalar>& model, const RespacedSchedule& schedule,
                            const Tensor<Scalar>& identity, const std::vector<Tensor<Scalar>>& motion_frames,
                            const Matrix<Scalar>& motion_audio, std::vector<std::mt19937_64>& rngs, bool clip_x0,
                            const StepObserver<Scalar>& observer = {}) {
  const DenoiserConfig& mc = model.config();
  const Index batch = identity.batch;
  require(static_cast<Index>(rngs.size()) == batch, "sample_frame: one rng per batch item required");
  require(identity.channels == mc.image_channels, "sample_frame: identity channel count differs from the model");
  Index stacked = 2 * identity.channels;
  for (const auto& m : motion_frames) stacked += m.channels;
  require(stacked == mc.input_channels, "sample_frame: motion buffer size does not match the model's input channels");
  require(motion_audio.rows() == mc.motion_audio_size() && motion_audio.cols() == batch,
          "sample_frame: motion audio length " + std::to_string(motion_audio.rows()) + " does not match " +
              std::to_string(mc.motion_audio_size()));

  const NoiseSchedule& eff = schedule.effective;
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw = [&](Tensor<Scalar>& t) {
    for (Index b = 0; b < batch; ++b) {
      auto item = t.item(b);
      for (Index c = 0; c < item.rows(); ++c)
        for (Index p = 0; p < item.cols(); ++p) item(c, p) = static_cast<Scalar>(normal(rngs[static_cast<std::size_t>(b)]));
    }
  };

  Tensor<Scalar> x(batch, identity.channels, identity.height, identity.width);
  draw(x);
  ModelInput<Scalar> in;
  in.motion_audio = motion_audio;
  for (int i = schedule.steps(); i >= 1; --i) {
    in.x_in = assemble_input(x, identity, motion_frames);
    in.timesteps.assign(static_cast<std::size_t>(batch), schedule.base_step(i));
    const DenoiserOutput<Scalar> out = model.forward(in);
    Tensor<Scalar> x0 = predict_x0_from_eps(eff, x, i, out.eps_pred);
    if (clip_x0) x0.data = x0.data.cwiseMax(Scalar(-1)).cwiseMin(Scalar(1));
    if (observer) observer(i, x0);
    const auto post = posterior_mean_variance(eff, x0, x, i);
    if (i > 1) {
      const auto moments = model_mean_variance(eff, out.eps_pred, out.nu, x, i);
      Tensor<Scalar> z(batch, x.channels, x.height, x.width);
      draw(z);
      x.data = post.mean.data + (moments.log_variance.data.array() * Scalar(0.5)).exp().matrix().cwiseProduct(z.data);
    } else {
      x = post.mean;
    }
  }
  x.data = x.data.cwiseMax(Scalar(-1)).cwiseMin(Scalar(1));
  return x;
}

// Generates one frame per audio embedding for several videos in lockstep.
// Each video draws from its own stream (see SamplerConfig::first_stream).
template <typename Scalar>
std::vector<std::vector<Tensor<Scalar>>> sample_videos(const Denoiser<Scalar>& model, const NoiseSchedule& base,
                                                       const std::vector<Tensor<Scalar>>& identities,
                                                       const std::vector<std::vector<Eigen::VectorXf>>& embeddings,
                                                       const SamplerConfig& cfg,
                                                       const BufferObserver<Scalar>& buffers = {},
                                                       const StepObserver<Scalar>& steps = {}) {
  require(!identities.empty() && identities.size() == embeddings.size(), "sample_videos: one identity per video");
  const std::size_t frames = embeddings.front().size();
  require(frames >= 1, "sample_videos: empty embedding list");
  for (const auto& e : embeddings) require(e.size() == frames, "sample_videos: videos must have equal length");
  const DenoiserConfig& mc = model.config();
  for (const auto& id : identities) {
    require(id.batch == 1 && id.height == mc.image_size && id.width == mc.image_size,
            "sample_videos: identity resolution " + std::to_string(id.height) + "x" + std::to_string(id.width) +
                " does not match the model's " + std::to_string(mc.image_size));
  }
  const ConditioningConfig& cc = cfg.conditioning;
  const RespacedSchedule schedule = respace(base, cfg.respaced_steps);
  const Index videos = static_cast<Index>(identities.size());

  std::vector<std::mt19937_64> rngs;
  for (Index v = 0; v < videos; ++v) rngs.emplace_back(split_seed(cfg.seed, cfg.first_stream + static_cast<std::uint64_t>(v)));
  const Tensor<Scalar> identity = stack_batch(identities);
  auto motion_view = [&](const Tensor<Scalar>& f) { return cc.grayscale_motion ? to_grayscale(f) : f; };
  std::vector<Tensor<Scalar>> buffer(static_cast<std::size_t>(cc.motion_frames), motion_view(identity));

  std::vector<std::vector<Tensor<Scalar>>> out(static_cast<std::size_t>(videos));
  Matrix<Scalar> audio(mc.motion_audio_size(), videos);
  for (std::size_t k = 0; k < frames; ++k) {
    for (Index v = 0; v < videos; ++v) {
      const Eigen::VectorXf window =
          build_motion_audio(embeddings[static_cast<std::size_t>(v)], static_cast<Index>(k), cc.motion_audio_radius);
      require(window.size() == audio.rows(), "sample_videos: embedding dimension does not match the model");
      audio.col(v) = window.cast<Scalar>();
    }
    if (buffers) buffers(static_cast<Index>(k), buffer);
    const Tensor<Scalar> frame = sample_frame(model, schedule, identity, buffer, audio, rngs, cfg.clip_x0, steps);
    for (Index v = 0; v < videos; ++v) out[static_cast<std::size_t>(v)].push_back(frame.slice(v));
    if (!buffer.empty()) {
      buffer.erase(buffer.begin());
      buffer.push_back(motion_view(frame));
    }
  }
  return out;
}

template <typename Scalar>
std::vector<Tensor<Scalar>> sample_video(const Denoiser<Scalar>& model, const NoiseSchedule& base,
                                         const Tensor<Scalar>& identity,
                                         const std::vector<Eigen::VectorXf>& embeddings, const SamplerConfig& cfg,
                                         const BufferObserver<Scalar>& buffers = {}) {
  require(!embeddings.empty(), "sample_video: empty embedding list");
  return sample_videos<Scalar>(model, base, {identity}, {embeddings}, cfg, buffers).front();
}

}  // namespace dh
