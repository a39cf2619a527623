#pragma once

#include "diffheads/core.hpp"

#include <random>
#include <string>
#include <vector>

namespace dh {

struct Box {
  int x = 0, y = 0, w = 0, h = 0;
  bool operator==(const Box&) const = default;
  bool inside(Index height, Index width) const {
    return w > 0 && h > 0 && x >= 0 && y >= 0 && x + w <= width && y + h <= height;
  }
};

// One clip. Frames are single-item tensors in [-1, 1]; frame k uses
// audio_embeddings[k] and mouth_boxes[k] (0-based throughout the API).
struct VideoSample {
  std::string clip_id;
  std::vector<Tensor<float>> frames;
  std::vector<Eigen::VectorXf> audio_embeddings;
  std::vector<Box> mouth_boxes;

  Index size() const { return static_cast<Index>(frames.size()); }
  // Throws ValidationError naming the clip when an invariant is broken.
  void validate() const;
};

struct ConditioningConfig {
  int motion_frames = 2;        // m_x
  int motion_audio_radius = 2;  // m_y, one-sided
  bool grayscale_motion = true;

  Index motion_channels(Index image_channels) const { return grayscale_motion ? 1 : image_channels; }
  Index input_channels(Index image_channels) const {
    return 2 * image_channels + motion_frames * motion_channels(image_channels);
  }
  Index motion_audio_size(Index embed_dim) const { return (2 * motion_audio_radius + 1) * embed_dim; }
};

struct IdentityChoice {
  Tensor<float> frame;
  Index index = 0;
};

IdentityChoice select_identity_frame(const VideoSample& video, std::mt19937_64& rng);

// BT.601 luma. Input is 3-channel in [-1, 1]; output is 1-channel in [-1, 1].
template <typename Scalar>
Tensor<Scalar> to_grayscale(const Tensor<Scalar>& frame) {
  require(frame.channels == 3, "to_grayscale: expected 3 channels, got " + std::to_string(frame.channels));
  Tensor<Scalar> out(frame.batch, 1, frame.height, frame.width);
  // The weights sum to one, so mapping to [0, 1] and back is the identity.
  out.data = Scalar(0.299) * frame.data.row(0) + Scalar(0.587) * frame.data.row(1) + Scalar(0.114) * frame.data.row(2);
  return out;
}

// Frames k-m_x .. k-1, oldest first; slots before the clip start hold the
// identity frame. Never touches frames at index >= k.
std::vector<Tensor<float>> build_motion_frames(const VideoSample& video, Index k, const Tensor<float>& identity,
                                               const ConditioningConfig& cfg);

// Channel order: noisy target, identity, motion frames oldest to newest.
template <typename Scalar>
Tensor<Scalar> assemble_input(const Tensor<Scalar>& noisy_target, const Tensor<Scalar>& identity,
                              const std::vector<Tensor<Scalar>>& motion_frames) {
  std::vector<const Tensor<Scalar>*> parts{&noisy_target, &identity};
  for (const auto& m : motion_frames) parts.push_back(&m);
  for (const auto* p : parts) {
    require(p->same_spatial(noisy_target) && p->batch == noisy_target.batch, "assemble_input: spatial mismatch");
  }
  return concat_channels(parts);
}

// Concatenation of embeddings k-m_y .. k+m_y with indices clamped to the clip.
Eigen::VectorXf build_motion_audio(const std::vector<Eigen::VectorXf>& embeddings, Index k, int radius);

}  // namespace dh
