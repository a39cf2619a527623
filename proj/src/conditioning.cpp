#include "diffheads/conditioning.hpp"

#include <algorithm>

namespace dh {

void VideoSample::validate() const {
  const std::string where = "clip '" + clip_id + "': ";
  require(!frames.empty(), where + "no frames");
  require(audio_embeddings.size() == frames.size(), where + "embedding count differs from frame count");
  require(mouth_boxes.size() == frames.size(), where + "box count differs from frame count");
  const auto& first = frames.front();
  for (std::size_t k = 0; k < frames.size(); ++k) {
    require(frames[k].batch == 1 && frames[k].channels == first.channels && frames[k].same_spatial(first),
            where + "frame " + std::to_string(k) + " has inconsistent shape");
    require(mouth_boxes[k].inside(first.height, first.width),
            where + "mouth box " + std::to_string(k) + " lies outside the frame");
    require(audio_embeddings[k].size() == audio_embeddings.front().size(),
            where + "ragged embedding at " + std::to_string(k));
  }
}

IdentityChoice select_identity_frame(const VideoSample& video, std::mt19937_64& rng) {
  require(!video.frames.empty(), "select_identity_frame: empty clip '" + video.clip_id + "'");
  std::uniform_int_distribution<Index> pick(0, video.size() - 1);
  const Index index = pick(rng);
  return {video.frames[static_cast<std::size_t>(index)], index};
}

std::vector<Tensor<float>> build_motion_frames(const VideoSample& video, Index k, const Tensor<float>& identity,
                                               const ConditioningConfig& cfg) {
  require(k >= 0 && k < video.size(), "build_motion_frames: target index " + std::to_string(k) + " out of range");
  std::vector<Tensor<float>> out;
  out.reserve(static_cast<std::size_t>(cfg.motion_frames));
  for (Index j = k - cfg.motion_frames; j < k; ++j) {
    const Tensor<float>& src = j < 0 ? identity : video.frames[static_cast<std::size_t>(j)];
    out.push_back(cfg.grayscale_motion ? to_grayscale(src) : src);
  }
  return out;
}

Eigen::VectorXf build_motion_audio(const std::vector<Eigen::VectorXf>& embeddings, Index k, int radius) {
  const Index n = static_cast<Index>(embeddings.size());
  require(k >= 0 && k < n, "build_motion_audio: index " + std::to_string(k) + " out of range");
  require(radius >= 0, "build_motion_audio: negative radius");
  const Index dim = embeddings.front().size();
  for (const auto& e : embeddings) require(e.size() == dim, "build_motion_audio: ragged embedding dimensions");
  Eigen::VectorXf out(dim * (2 * radius + 1));
  for (Index j = -radius; j <= radius; ++j) {
    const Index src = std::clamp<Index>(k + j, 0, n - 1);
    out.segment((j + radius) * dim, dim) = embeddings[static_cast<std::size_t>(src)];
  }
  return out;
}

}  // namespace dh
