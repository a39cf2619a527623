#include "diffheads/denoiser.hpp"

namespace dh {

void DenoiserConfig::validate() const {
  require(!channel_widths.empty(), "denoiser: channel_widths is empty");
  for (Index w : channel_widths) require(w > 0, "denoiser: channel widths must be positive");
  require(resnet_blocks_per_level >= 1, "denoiser: resnet_blocks_per_level must be >= 1");
  require(attention_heads >= 1 && attention_head_channels >= 1, "denoiser: attention sizes must be positive");
  require(time_embed_dim >= 2 && time_embed_dim % 2 == 0, "denoiser: time_embed_dim must be even");
  require(audio_embed_dim >= 1 && motion_audio_radius >= 0, "denoiser: invalid audio conditioning size");
  require(image_channels >= 1 && input_channels >= image_channels, "denoiser: invalid channel counts");
  const Index factor = Index{1} << (channel_widths.size() - 1);
  require(image_size >= factor && image_size % factor == 0,
          "denoiser: image_size must be divisible by 2^(levels-1)");
}

DenoiserConfig DenoiserConfig::full_scale(Index input_channels, Index audio_embed_dim, int motion_audio_radius) {
  DenoiserConfig c;
  c.channel_widths = {256, 512, 768};
  c.resnet_blocks_per_level = 2;
  c.attention_heads = 4;
  c.attention_head_channels = 64;
  c.time_embed_dim = 256;
  c.audio_embed_dim = audio_embed_dim;
  c.motion_audio_radius = motion_audio_radius;
  c.input_channels = input_channels;
  c.image_size = 128;
  return c;
}

DenoiserConfig DenoiserConfig::desk_scale(Index input_channels, Index audio_embed_dim, int motion_audio_radius) {
  DenoiserConfig c;
  c.audio_embed_dim = audio_embed_dim;
  c.motion_audio_radius = motion_audio_radius;
  c.input_channels = input_channels;
  return c;
}

void to_json(nlohmann::json& j, const DenoiserConfig& c) {
  j = nlohmann::json{{"channel_widths", c.channel_widths},
                     {"resnet_blocks_per_level", c.resnet_blocks_per_level},
                     {"attention_heads", c.attention_heads},
                     {"attention_head_channels", c.attention_head_channels},
                     {"time_embed_dim", c.time_embed_dim},
                     {"audio_embed_dim", c.audio_embed_dim},
                     {"motion_audio_radius", c.motion_audio_radius},
                     {"image_channels", c.image_channels},
                     {"input_channels", c.input_channels},
                     {"image_size", c.image_size},
                     {"audio_conditioning", c.audio_conditioning}};
}

void from_json(const nlohmann::json& j, DenoiserConfig& c) {
  j.at("channel_widths").get_to(c.channel_widths);
  j.at("resnet_blocks_per_level").get_to(c.resnet_blocks_per_level);
  j.at("attention_heads").get_to(c.attention_heads);
  j.at("attention_head_channels").get_to(c.attention_head_channels);
  j.at("time_embed_dim").get_to(c.time_embed_dim);
  j.at("audio_embed_dim").get_to(c.audio_embed_dim);
  j.at("motion_audio_radius").get_to(c.motion_audio_radius);
  j.at("image_channels").get_to(c.image_channels);
  j.at("input_channels").get_to(c.input_channels);
  j.at("image_size").get_to(c.image_size);
  j.at("audio_conditioning").get_to(c.audio_conditioning);
}

}  // namespace dh
