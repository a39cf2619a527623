#include "diffheads/trainer.hpp"

#include "diffheads/json_util.hpp"

#include <array>
#include <fstream>

namespace dh {

namespace {

constexpr std::array<char, 8> kMagic{'D', 'H', 'C', 'K', 'P', 'T', '0', '1'};

std::uint64_t fnv1a(const char* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

void TrainConfig::validate() const {
  require(batch_size >= 1, "train: batch_size must be positive");
  require(total_steps >= 1, "train: total_steps must be positive");
  require(learning_rate > 0.0, "train: learning_rate must be positive");
  require(ema_decay >= 0.0 && ema_decay < 1.0, "train: ema_decay must lie in [0, 1)");
  require(checkpoint_interval >= 1 && log_interval >= 1, "train: intervals must be positive");
  require(conditioning.motion_frames >= 0 && conditioning.motion_audio_radius >= 0,
          "train: conditioning counts must be nonnegative");
  require(schedule.steps >= 1, "train: schedule steps must be positive");
  weights.validate();
  model.validate();
  require(model.input_channels == conditioning.input_channels(model.image_channels),
          "train: model.input_channels disagrees with the conditioning layout");
  require(model.motion_audio_radius == conditioning.motion_audio_radius,
          "train: model.motion_audio_radius disagrees with conditioning.motion_audio_radius");
}

nlohmann::json to_json(const ConditioningConfig& c) {
  return {{"motion_frames", c.motion_frames},
          {"motion_audio_radius", c.motion_audio_radius},
          {"grayscale_motion", c.grayscale_motion}};
}

ConditioningConfig conditioning_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"motion_frames", "motion_audio_radius", "grayscale_motion"}, "conditioning");
  ConditioningConfig c;
  read_opt(j, "motion_frames", c.motion_frames);
  read_opt(j, "motion_audio_radius", c.motion_audio_radius);
  read_opt(j, "grayscale_motion", c.grayscale_motion);
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json model = c.model;
  return {{"batch_size", c.batch_size},
          {"total_steps", c.total_steps},
          {"learning_rate", c.learning_rate},
          {"ema_decay", c.ema_decay},
          {"grad_clip", c.grad_clip},
          {"weights", {{"lambda_vlb", c.weights.lambda_vlb}, {"lambda_ls", c.weights.lambda_ls}}},
          {"conditioning", to_json(c.conditioning)},
          {"schedule", {{"kind", to_string(c.schedule.kind)}, {"steps", c.schedule.steps}}},
          {"model", model},
          {"seed", c.seed},
          {"checkpoint_interval", c.checkpoint_interval},
          {"log_interval", c.log_interval}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"batch_size", "total_steps", "learning_rate", "ema_decay", "grad_clip", "weights", "conditioning",
                     "schedule", "model", "seed", "checkpoint_interval", "log_interval"},
                 "");
  TrainConfig c;
  try {
    read_opt(j, "batch_size", c.batch_size);
    read_opt(j, "total_steps", c.total_steps);
    read_opt(j, "learning_rate", c.learning_rate);
    read_opt(j, "ema_decay", c.ema_decay);
    read_opt(j, "grad_clip", c.grad_clip);
    read_opt(j, "seed", c.seed);
    read_opt(j, "checkpoint_interval", c.checkpoint_interval);
    read_opt(j, "log_interval", c.log_interval);
    if (j.contains("weights")) {
      const auto& w = j.at("weights");
      reject_unknown(w, {"lambda_vlb", "lambda_ls"}, "weights");
      read_opt(w, "lambda_vlb", c.weights.lambda_vlb);
      read_opt(w, "lambda_ls", c.weights.lambda_ls);
    }
    if (j.contains("conditioning")) c.conditioning = conditioning_from_json(j.at("conditioning"));
    if (j.contains("schedule")) {
      const auto& s = j.at("schedule");
      reject_unknown(s, {"kind", "steps"}, "schedule");
      if (s.contains("kind")) c.schedule.kind = schedule_kind_from_string(s.at("kind").get<std::string>());
      read_opt(s, "steps", c.schedule.steps);
    }
    // Derived model fields follow the conditioning unless given explicitly.
    c.model.motion_audio_radius = c.conditioning.motion_audio_radius;
    c.model.input_channels = c.conditioning.input_channels(c.model.image_channels);
    if (j.contains("model")) {
      const auto& m = j.at("model");
      reject_unknown(m, {"channel_widths", "resnet_blocks_per_level", "attention_heads", "attention_head_channels",
                         "time_embed_dim", "audio_embed_dim", "motion_audio_radius", "image_channels",
                         "input_channels", "image_size", "audio_conditioning"},
                     "model");
      read_opt(m, "channel_widths", c.model.channel_widths);
      read_opt(m, "resnet_blocks_per_level", c.model.resnet_blocks_per_level);
      read_opt(m, "attention_heads", c.model.attention_heads);
      read_opt(m, "attention_head_channels", c.model.attention_head_channels);
      read_opt(m, "time_embed_dim", c.model.time_embed_dim);
      read_opt(m, "audio_embed_dim", c.model.audio_embed_dim);
      read_opt(m, "image_channels", c.model.image_channels);
      read_opt(m, "image_size", c.model.image_size);
      read_opt(m, "audio_conditioning", c.model.audio_conditioning);
      c.model.input_channels = c.conditioning.input_channels(c.model.image_channels);
      read_opt(m, "motion_audio_radius", c.model.motion_audio_radius);
      read_opt(m, "input_channels", c.model.input_channels);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed training config: ") + e.what());
  }
  c.validate();
  return c;
}

void write_checkpoint_file(const std::filesystem::path& path, const nlohmann::json& header,
                           const std::vector<const void*>& blobs, const std::vector<std::size_t>& sizes) {
  std::string body;
  const std::string text = header.dump();
  const std::uint64_t header_len = text.size();
  body.append(kMagic.data(), kMagic.size());
  const std::uint32_t version = kCheckpointVersion;
  body.append(reinterpret_cast<const char*>(&version), sizeof version);
  body.append(reinterpret_cast<const char*>(&header_len), sizeof header_len);
  body += text;
  for (std::size_t i = 0; i < blobs.size(); ++i) body.append(static_cast<const char*>(blobs[i]), sizes[i]);
  const std::uint64_t sum = fnv1a(body.data(), body.size());
  body.append(reinterpret_cast<const char*>(&sum), sizeof sum);

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeFailure("cannot write checkpoint " + tmp.string());
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    if (!out) throw RuntimeFailure("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::pair<nlohmann::json, std::vector<char>> read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "cannot open checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t fixed = kMagic.size() + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  require(bytes.size() >= fixed + sizeof(std::uint64_t), "checkpoint " + path.string() + " is truncated");
  require(std::equal(kMagic.begin(), kMagic.end(), bytes.begin()), path.string() + " is not a checkpoint");
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + kMagic.size(), sizeof version);
  require(version == kCheckpointVersion, "checkpoint " + path.string() + " has version " + std::to_string(version) +
                                             ", expected " + std::to_string(kCheckpointVersion));
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - sizeof stored, sizeof stored);
  require(fnv1a(bytes.data(), bytes.size() - sizeof stored) == stored,
          "checkpoint " + path.string() + " is corrupt (checksum mismatch)");
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data() + kMagic.size() + sizeof version, sizeof header_len);
  require(fixed + header_len + sizeof stored <= bytes.size(), "checkpoint " + path.string() + " is truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(fixed),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(fixed + header_len));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("checkpoint " + path.string() + " has a malformed header: " + e.what());
  }
  std::vector<char> payload(bytes.begin() + static_cast<std::ptrdiff_t>(fixed + header_len),
                            bytes.end() - static_cast<std::ptrdiff_t>(sizeof stored));
  return {std::move(header), std::move(payload)};
}

void check_sampling_compatible(const TrainConfig& trained, const ConditioningConfig& requested) {
  const auto& t = trained.conditioning;
  require(t.grayscale_motion == requested.grayscale_motion,
          std::string("checkpoint was trained with ") + (t.grayscale_motion ? "grayscale" : "RGB") +
              " motion frames; refusing to sample with " + (requested.grayscale_motion ? "grayscale" : "RGB"));
  require(t.motion_frames == requested.motion_frames, "checkpoint was trained with m_x = " +
                                                          std::to_string(t.motion_frames) + ", requested " +
                                                          std::to_string(requested.motion_frames));
  require(t.motion_audio_radius == requested.motion_audio_radius,
          "checkpoint was trained with m_y = " + std::to_string(t.motion_audio_radius) + ", requested " +
              std::to_string(requested.motion_audio_radius));
}

}  // namespace dh
