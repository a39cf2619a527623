#pragma once

#include "diffheads/conditioning.hpp"
#include "json.hpp"

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace dh {

// ---------------------------------------------------------------- audio

// n_frames contiguous chunks of floor(len / n_frames) samples; any remainder
// at the end is dropped with a warning.
std::vector<Eigen::VectorXf> chunk_audio(const Eigen::VectorXf& waveform, Index n_frames);

class AudioEncoder {
 public:
  virtual ~AudioEncoder() = default;
  virtual std::string id() const = 0;
  virtual Index embed_dim() const = 0;
  virtual Eigen::VectorXf encode(const Eigen::VectorXf& chunk) const = 0;
};

// Hand-made features: mean |x|, mean square over four equal sub-windows,
// mean square over the chunk, and the centroid and spread of the power
// spectrum as fractions of the Nyquist band.
class SyntheticEncoder : public AudioEncoder {
 public:
  static constexpr const char* kId = "synthetic-v1";
  static constexpr Index kDim = 8;
  std::string id() const override { return kId; }
  Index embed_dim() const override { return kDim; }
  Eigen::VectorXf encode(const Eigen::VectorXf& chunk) const override;
};

// Throws ValidationError for unknown ids.
std::unique_ptr<AudioEncoder> make_encoder(const std::string& id);

std::vector<Eigen::VectorXf> encode_chunks(const AudioEncoder& encoder, const std::vector<Eigen::VectorXf>& chunks);

// ---------------------------------------------------------------- image I/O

// 8-bit RGB PNG; pixel values map linearly [0, 255] <-> [-1, 1].
Tensor<float> read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Tensor<float>& frame);

// ---------------------------------------------------------------- corpus files

void write_waveform(const std::filesystem::path& path, const Eigen::VectorXf& samples);
Eigen::VectorXf read_waveform(const std::filesystem::path& path);
void write_embeddings(const std::filesystem::path& path, const std::vector<Eigen::VectorXf>& embeddings);
std::vector<Eigen::VectorXf> read_embeddings(const std::filesystem::path& path);
void write_boxes(const std::filesystem::path& path, const std::vector<Box>& boxes);
std::vector<Box> read_boxes(const std::filesystem::path& path);

// ---------------------------------------------------------------- synthetic corpus

struct SyntheticConfig {
  int image_size = 32;
  int min_frames = 25;
  int max_frames = 25;
  int sample_rate = 16000;
  int fps = 25;
  std::uint64_t palette_seed = 0;
  int palette_size = 6;
  std::string envelope = "speech";  // speech | sine | silent
  double blink_probability = 0.0;   // per frame
  double sway_amplitude = 0.0;      // pixels
  double aperture_jitter = 0.0;     // pixels, std of additive noise
  double max_aperture = 6.0;        // pixels at envelope 1
  double audio_noise = 0.0;         // std of additive waveform noise

  void validate() const;
  int samples_per_frame() const { return sample_rate / fps; }
};

nlohmann::json to_json(const SyntheticConfig& cfg);
// Strict: unknown keys are rejected by name.
SyntheticConfig synthetic_config_from_json(const nlohmann::json& j);

// Face colors in [-1, 1] RGB, evenly spaced in hue.
std::vector<Eigen::Vector3f> make_palette(const SyntheticConfig& cfg);
// Smallest pairwise Euclidean distance between palette colors.
double palette_spacing(const std::vector<Eigen::Vector3f>& palette);

// Everything needed to re-derive a synthetic clip's ground truth.
struct SyntheticClip {
  std::string clip_id;
  std::vector<Tensor<float>> frames;
  Eigen::VectorXf waveform;
  std::vector<Eigen::VectorXf> embeddings;
  std::vector<Box> mouth_boxes;
  std::vector<double> envelope;  // per frame, in [0, 1]
  std::vector<double> aperture;  // rendered mouth height in pixels
  int palette_index = 0;
  Eigen::Vector3f face_color;
  double palette_spacing = 0;
  double face_cx = 0, face_cy = 0, face_rx = 0, face_ry = 0;
  double eye_dx = 0, eye_y = 0, eye_radius = 0;
  double mouth_cy = 0, mouth_width = 0;
  std::vector<double> sway;  // horizontal head offset per frame
  std::vector<bool> blinks;

  nlohmann::json synthetic_meta() const;
};

inline constexpr float kMouthLevel = -0.9f;
inline constexpr float kEyeLevel = -0.8f;
inline constexpr float kBackgroundLevel = -0.3f;
// Luma below this counts as mouth interior when measuring aperture.
inline constexpr float kDarknessThreshold = -0.5f;

SyntheticClip make_synthetic_clip(const SyntheticConfig& cfg, std::uint64_t seed, Index index);

// Writes `count` clips under `root` (created if needed). Clip i is generated
// from split_seed(seed, i) so clips are independent of each other and of the
// order they are produced in.
void make_synthetic_corpus(const SyntheticConfig& cfg, std::uint64_t seed, Index count,
                           const std::filesystem::path& root, int threads = 1);

void write_clip(const std::filesystem::path& dir, const SyntheticClip& clip, const SyntheticConfig& cfg,
                const std::string& encoder_id);

// Dark pixel count inside the box, divided by the box width.
double measured_aperture(const Tensor<float>& frame, const Box& box);

// Pixels (x, y) well inside the face and away from the eyes and the mouth box,
// from the "synthetic" section of a clip's meta.json.
std::vector<std::pair<int, int>> face_region(const nlohmann::json& synthetic_meta, Index frame, const Box& mouth_box);

// ---------------------------------------------------------------- loading

struct CorpusError {
  std::string clip_id;
  std::string message;
};

struct ClipMeta {
  Index n_frames = 0;
  int fps = 0;
  int image_size = 0;
  int channels = 3;
  int sample_rate = 0;
  std::string encoder;
  Index embed_dim = 0;
  nlohmann::json raw;
};

class Corpus {
 public:
  // Scans clip directories in name order without reading them. An empty or
  // clip-less directory yields an empty corpus and a warning.
  static Corpus open(const std::filesystem::path& root);

  const std::filesystem::path& root() const { return root_; }
  const std::vector<std::string>& clip_ids() const { return ids_; }
  Index size() const { return static_cast<Index>(ids_.size()); }

  ClipMeta meta(const std::string& clip_id) const;
  // Reads and validates one clip. Errors name the clip.
  VideoSample load(const std::string& clip_id) const;
  // Frames only; enough for metrics on generated clips.
  std::vector<Tensor<float>> load_frames(const std::string& clip_id) const;
  Eigen::VectorXf waveform(const std::string& clip_id) const;
  // Loads every clip, skipping corrupt ones. Each skip is logged and, when
  // `errors` is given, recorded there.
  std::vector<VideoSample> load_all(std::vector<CorpusError>* errors = nullptr) const;

 private:
  std::filesystem::path root_;
  std::vector<std::string> ids_;
};

std::string clip_name(Index index);

}  // namespace dh
