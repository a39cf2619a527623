#include "diffheads/data.hpp"

#include "diffheads/json_util.hpp"
#include "diffheads/log.hpp"

#include <png.h>
#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <complex>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>
#include <thread>

namespace dh {

namespace fs = std::filesystem;

namespace {

constexpr char kEmbeddingMagic[4] = {'D', 'H', 'E', 'M'};

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  return out;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("missing or unreadable file " + path.string());
  return in;
}

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const fs::path& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ValidationError("truncated file " + path.string());
  return v;
}

float to_unit(std::uint8_t v) { return static_cast<float>(v) / 127.5f - 1.0f; }

std::uint8_t to_byte(float v) {
  const float scaled = std::round((std::clamp(v, -1.0f, 1.0f) + 1.0f) * 127.5f);
  return static_cast<std::uint8_t>(std::clamp(scaled, 0.0f, 255.0f));
}

// Length of [a0, a1] intersected with [b0, b1].
double overlap(double a0, double a1, double b0, double b1) { return std::max(0.0, std::min(a1, b1) - std::max(a0, b0)); }

Eigen::Vector3f hsv_to_signed_rgb(double h, double s, double v) {
  const double c = v * s;
  const double hp = std::fmod(h, 1.0) * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp)) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  const double m = v - c;
  return Eigen::Vector3f(static_cast<float>(2 * (r + m) - 1), static_cast<float>(2 * (g + m) - 1),
                         static_cast<float>(2 * (b + m) - 1));
}

std::vector<double> make_envelope(const std::string& kind, Index n, int fps, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> env(static_cast<std::size_t>(n), 0.0);
  if (kind == "sine") {
    const double freq = 1.0 + 2.0 * u(rng);
    const double phase = 2.0 * std::numbers::pi * u(rng);
    for (Index k = 0; k < n; ++k) {
      env[static_cast<std::size_t>(k)] =
          0.5 * (1.0 + std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(k) / fps + phase));
    }
  } else if (kind == "speech") {
    // Syllable-like segments: ramps between random levels, with pauses.
    std::uniform_int_distribution<int> seg_len(2, 6);
    double level = 0.0;
    Index k = 0;
    while (k < n) {
      const int len = seg_len(rng);
      const double target = u(rng) < 0.25 ? 0.0 : 0.2 + 0.8 * u(rng);
      for (int i = 1; i <= len && k < n; ++i, ++k) {
        env[static_cast<std::size_t>(k)] = level + (target - level) * static_cast<double>(i) / len;
      }
      level = target;
    }
  }
  return env;
}

}  // namespace

// ---------------------------------------------------------------- audio

std::vector<Eigen::VectorXf> chunk_audio(const Eigen::VectorXf& waveform, Index n_frames) {
  require(n_frames >= 1, "chunk_audio: frame count must be positive");
  require(waveform.size() >= n_frames, "chunk_audio: waveform has " + std::to_string(waveform.size()) +
                                           " samples, fewer than the " + std::to_string(n_frames) + " frames");
  const Index len = waveform.size() / n_frames;
  const Index dropped = waveform.size() - len * n_frames;
  if (dropped > 0) {
    log_warning("chunk_audio: dropping " + std::to_string(dropped) + " trailing samples (" +
                std::to_string(waveform.size()) + " samples, " + std::to_string(n_frames) + " frames)");
  }
  std::vector<Eigen::VectorXf> chunks;
  chunks.reserve(static_cast<std::size_t>(n_frames));
  for (Index k = 0; k < n_frames; ++k) chunks.emplace_back(waveform.segment(k * len, len));
  return chunks;
}

Eigen::VectorXf SyntheticEncoder::encode(const Eigen::VectorXf& chunk) const {
  require(chunk.size() > 0, "synthetic encoder: empty chunk");
  const Index n = chunk.size();
  Eigen::VectorXf f = Eigen::VectorXf::Zero(kDim);
  f(0) = chunk.cwiseAbs().mean();
  for (Index w = 0; w < 4; ++w) {
    const Index a = w * n / 4, b = (w + 1) * n / 4;
    if (b > a) f(1 + w) = chunk.segment(a, b - a).squaredNorm() / static_cast<float>(b - a);
  }
  f(5) = chunk.squaredNorm() / static_cast<float>(n);
  if (n >= 2) {
    Eigen::FFT<float> fft;
    std::vector<float> in(chunk.data(), chunk.data() + n);
    std::vector<std::complex<float>> spec;
    fft.fwd(spec, in);
    const Index half = n / 2;
    double total = 0, first = 0, second = 0;
    for (Index j = 1; j <= half; ++j) {
      const double p = std::norm(spec[static_cast<std::size_t>(j)]);
      const double freq = static_cast<double>(j) / static_cast<double>(half);
      total += p;
      first += p * freq;
      second += p * freq * freq;
    }
    if (total > 0) {
      const double centroid = first / total;
      f(6) = static_cast<float>(centroid);
      f(7) = static_cast<float>(std::sqrt(std::max(0.0, second / total - centroid * centroid)));
    }
  }
  return f;
}

std::unique_ptr<AudioEncoder> make_encoder(const std::string& id) {
  if (id == SyntheticEncoder::kId) return std::make_unique<SyntheticEncoder>();
  throw ValidationError("unknown audio encoder '" + id + "'");
}

std::vector<Eigen::VectorXf> encode_chunks(const AudioEncoder& encoder, const std::vector<Eigen::VectorXf>& chunks) {
  std::vector<Eigen::VectorXf> out;
  out.reserve(chunks.size());
  for (const auto& c : chunks) out.push_back(encoder.encode(c));
  return out;
}

// ---------------------------------------------------------------- image I/O

Tensor<float> read_png(const fs::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw ValidationError("cannot read image " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw ValidationError("cannot decode image " + path.string() + ": " + image.message);
  }
  const Index h = image.height, w = image.width;
  Tensor<float> t(1, 3, h, w);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index c = 0; c < 3; ++c) t.at(0, c, y, x) = to_unit(buf[static_cast<std::size_t>((y * w + x) * 3 + c)]);
  return t;
}

void write_png(const fs::path& path, const Tensor<float>& frame) {
  require(frame.batch == 1 && (frame.channels == 3 || frame.channels == 1), "write_png: expected one 1- or 3-channel frame");
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(frame.width);
  image.height = static_cast<png_uint_32>(frame.height);
  image.format = frame.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
  const Index ch = frame.channels;
  for (Index y = 0; y < frame.height; ++y)
    for (Index x = 0; x < frame.width; ++x)
      for (Index c = 0; c < ch; ++c)
        buf[static_cast<std::size_t>((y * frame.width + x) * ch + c)] = to_byte(frame.at(0, c, y, x));
  if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw RuntimeFailure("cannot write image " + path.string() + ": " + image.message);
  }
}

// ---------------------------------------------------------------- corpus files

void write_waveform(const fs::path& path, const Eigen::VectorXf& samples) {
  std::ofstream out = open_out(path);
  for (Index i = 0; i < samples.size(); ++i) {
    const float v = std::round(std::clamp(samples(i), -1.0f, 1.0f) * 32767.0f);
    const auto s = static_cast<std::int16_t>(v);
    const unsigned char le[2] = {static_cast<unsigned char>(s & 0xff), static_cast<unsigned char>((s >> 8) & 0xff)};
    out.write(reinterpret_cast<const char*>(le), 2);
  }
  if (!out) throw RuntimeFailure("cannot write " + path.string());
}

Eigen::VectorXf read_waveform(const fs::path& path) {
  std::ifstream in = open_in(path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  require(bytes.size() % 2 == 0, "odd byte count in 16-bit waveform " + path.string());
  Eigen::VectorXf out(static_cast<Index>(bytes.size() / 2));
  for (Index i = 0; i < out.size(); ++i) {
    const auto lo = static_cast<unsigned char>(bytes[static_cast<std::size_t>(2 * i)]);
    const auto hi = static_cast<unsigned char>(bytes[static_cast<std::size_t>(2 * i + 1)]);
    out(i) = static_cast<float>(static_cast<std::int16_t>(lo | (hi << 8))) / 32767.0f;
  }
  return out;
}

void write_embeddings(const fs::path& path, const std::vector<Eigen::VectorXf>& embeddings) {
  require(!embeddings.empty(), "write_embeddings: nothing to write");
  const Index d = embeddings.front().size();
  std::ofstream out = open_out(path);
  out.write(kEmbeddingMagic, 4);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(embeddings.size()));
  for (const auto& e : embeddings) {
    require(e.size() == d, "write_embeddings: ragged embedding dimensions");
    for (Index i = 0; i < d; ++i) put<float>(out, e(i));
  }
  if (!out) throw RuntimeFailure("cannot write " + path.string());
}

std::vector<Eigen::VectorXf> read_embeddings(const fs::path& path) {
  std::ifstream in = open_in(path);
  char magic[4];
  in.read(magic, 4);
  require(in && std::memcmp(magic, kEmbeddingMagic, 4) == 0, "bad embedding file magic in " + path.string());
  const auto d = get<std::uint32_t>(in, path);
  const auto n = get<std::uint32_t>(in, path);
  require(d >= 1, "zero embedding dimension in " + path.string());
  std::vector<Eigen::VectorXf> out(n, Eigen::VectorXf(d));
  for (auto& e : out)
    for (Index i = 0; i < static_cast<Index>(d); ++i) e(i) = get<float>(in, path);
  in.peek();
  require(in.eof(), "trailing bytes in " + path.string());
  return out;
}

void write_boxes(const fs::path& path, const std::vector<Box>& boxes) {
  std::ofstream out = open_out(path);
  for (std::size_t k = 0; k < boxes.size(); ++k) {
    const Box& b = boxes[k];
    out << (k + 1) << ' ' << b.x << ' ' << b.y << ' ' << b.w << ' ' << b.h << '\n';
  }
  if (!out) throw RuntimeFailure("cannot write " + path.string());
}

std::vector<Box> read_boxes(const fs::path& path) {
  std::ifstream in = open_in(path);
  std::vector<Box> boxes;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    long k = 0;
    Box b;
    std::string extra;
    if (!(ls >> k >> b.x >> b.y >> b.w >> b.h) || (ls >> extra)) {
      throw ValidationError("malformed box line '" + line + "' in " + path.string());
    }
    require(k == static_cast<long>(boxes.size()) + 1,
            "box lines out of order in " + path.string() + " (expected frame " + std::to_string(boxes.size() + 1) + ")");
    boxes.push_back(b);
  }
  return boxes;
}

// ---------------------------------------------------------------- synthetic corpus

void SyntheticConfig::validate() const {
  require(image_size >= 16, "synthetic: image_size must be at least 16");
  require(min_frames >= 1 && max_frames >= min_frames, "synthetic: need 1 <= min_frames <= max_frames");
  require(sample_rate >= 1 && fps >= 1 && sample_rate >= fps, "synthetic: sample_rate must be at least fps");
  require(palette_size >= 2, "synthetic: palette_size must be at least 2");
  require(envelope == "speech" || envelope == "sine" || envelope == "silent",
          "synthetic: envelope must be speech, sine or silent");
  require(blink_probability >= 0 && blink_probability <= 1, "synthetic: blink_probability must lie in [0, 1]");
  require(sway_amplitude >= 0 && sway_amplitude <= image_size / 8.0, "synthetic: sway_amplitude out of range");
  require(aperture_jitter >= 0 && audio_noise >= 0, "synthetic: noise levels must be nonnegative");
  require(max_aperture > 0 && max_aperture <= image_size / 4.0, "synthetic: max_aperture out of range");
}

nlohmann::json to_json(const SyntheticConfig& c) {
  return {{"image_size", c.image_size},
          {"min_frames", c.min_frames},
          {"max_frames", c.max_frames},
          {"sample_rate", c.sample_rate},
          {"fps", c.fps},
          {"palette_seed", c.palette_seed},
          {"palette_size", c.palette_size},
          {"envelope", c.envelope},
          {"blink_probability", c.blink_probability},
          {"sway_amplitude", c.sway_amplitude},
          {"aperture_jitter", c.aperture_jitter},
          {"max_aperture", c.max_aperture},
          {"audio_noise", c.audio_noise}};
}

SyntheticConfig synthetic_config_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"image_size", "min_frames", "max_frames", "sample_rate", "fps", "palette_seed", "palette_size",
                     "envelope", "blink_probability", "sway_amplitude", "aperture_jitter", "max_aperture",
                     "audio_noise"},
                 "");
  SyntheticConfig c;
  try {
    read_opt(j, "image_size", c.image_size);
    read_opt(j, "min_frames", c.min_frames);
    read_opt(j, "max_frames", c.max_frames);
    read_opt(j, "sample_rate", c.sample_rate);
    read_opt(j, "fps", c.fps);
    read_opt(j, "palette_seed", c.palette_seed);
    read_opt(j, "palette_size", c.palette_size);
    read_opt(j, "envelope", c.envelope);
    read_opt(j, "blink_probability", c.blink_probability);
    read_opt(j, "sway_amplitude", c.sway_amplitude);
    read_opt(j, "aperture_jitter", c.aperture_jitter);
    read_opt(j, "max_aperture", c.max_aperture);
    read_opt(j, "audio_noise", c.audio_noise);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed synthetic config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<Eigen::Vector3f> make_palette(const SyntheticConfig& cfg) {
  std::mt19937_64 rng(cfg.palette_seed);
  const double offset = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  std::vector<Eigen::Vector3f> palette;
  for (int j = 0; j < cfg.palette_size; ++j) {
    palette.push_back(hsv_to_signed_rgb(offset + static_cast<double>(j) / cfg.palette_size, 0.55, 0.9));
  }
  return palette;
}

double palette_spacing(const std::vector<Eigen::Vector3f>& palette) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < palette.size(); ++a)
    for (std::size_t b = a + 1; b < palette.size(); ++b) best = std::min(best, static_cast<double>((palette[a] - palette[b]).norm()));
  return best;
}

std::string clip_name(Index index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "clip_%05ld", static_cast<long>(index));
  return buf;
}

SyntheticClip make_synthetic_clip(const SyntheticConfig& cfg, std::uint64_t seed, Index index) {
  cfg.validate();
  std::mt19937_64 rng(split_seed(seed, static_cast<std::uint64_t>(index)));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double s = cfg.image_size;
  const auto palette = make_palette(cfg);

  SyntheticClip clip;
  clip.clip_id = clip_name(index);
  const Index n = std::uniform_int_distribution<Index>(cfg.min_frames, cfg.max_frames)(rng);
  clip.palette_index = std::uniform_int_distribution<int>(0, cfg.palette_size - 1)(rng);
  clip.face_color = palette[static_cast<std::size_t>(clip.palette_index)];
  clip.palette_spacing = palette_spacing(palette);
  clip.face_cx = s / 2 + (2 * u(rng) - 1);
  clip.face_cy = s / 2 + 0.5 * (2 * u(rng) - 1);
  clip.face_rx = s * (0.30 + 0.06 * u(rng));
  clip.face_ry = s * (0.36 + 0.06 * u(rng));
  clip.eye_dx = 0.42 * clip.face_rx;
  clip.eye_y = clip.face_cy - 0.3 * clip.face_ry;
  clip.eye_radius = s / 24.0;
  clip.mouth_cy = clip.face_cy + 0.45 * clip.face_ry;
  clip.mouth_width = std::round(clip.face_rx);
  const double pitch = 120.0 + 120.0 * u(rng);
  const double harmonic_phase = 2.0 * std::numbers::pi * u(rng);
  const double sway_freq = 0.3 + 0.5 * u(rng);
  const double sway_phase = 2.0 * std::numbers::pi * u(rng);
  clip.envelope = make_envelope(cfg.envelope, n, cfg.fps, rng);

  for (Index k = 0; k < n; ++k) {
    const double e = clip.envelope[static_cast<std::size_t>(k)];
    double a = cfg.max_aperture * e;
    if (cfg.aperture_jitter > 0) a = std::clamp(a + cfg.aperture_jitter * normal(rng), 0.0, cfg.max_aperture);
    clip.aperture.push_back(a);
    clip.blinks.push_back(cfg.blink_probability > 0 && u(rng) < cfg.blink_probability);
    clip.sway.push_back(cfg.sway_amplitude *
                        std::sin(2.0 * std::numbers::pi * sway_freq * static_cast<double>(k) / cfg.fps + sway_phase));
  }

  // Frames: supersampled face and eyes, exact-area mouth so the dark mass
  // inside the box is proportional to the aperture.
  const int ss = 4;
  const Eigen::Vector3f background = Eigen::Vector3f::Constant(kBackgroundLevel);
  const Eigen::Vector3f eye = Eigen::Vector3f::Constant(kEyeLevel);
  const Eigen::Vector3f mouth = Eigen::Vector3f::Constant(kMouthLevel);
  for (Index k = 0; k < n; ++k) {
    const auto ks = static_cast<std::size_t>(k);
    const double cx = clip.face_cx + clip.sway[ks];
    const double eye_ry = clip.blinks[ks] ? 0.25 * clip.eye_radius : clip.eye_radius;
    const double a = clip.aperture[ks];
    const double mx0 = cx - clip.mouth_width / 2, mx1 = cx + clip.mouth_width / 2;
    const double my0 = clip.mouth_cy - a / 2, my1 = clip.mouth_cy + a / 2;
    Tensor<float> frame(1, 3, cfg.image_size, cfg.image_size);
    for (int y = 0; y < cfg.image_size; ++y) {
      for (int x = 0; x < cfg.image_size; ++x) {
        Eigen::Vector3f acc = Eigen::Vector3f::Zero();
        for (int sy = 0; sy < ss; ++sy) {
          for (int sx = 0; sx < ss; ++sx) {
            const double px = x + (sx + 0.5) / ss, py = y + (sy + 0.5) / ss;
            const double fx = (px - cx) / clip.face_rx, fy = (py - clip.face_cy) / clip.face_ry;
            Eigen::Vector3f c = fx * fx + fy * fy <= 1.0 ? clip.face_color : background;
            for (double side : {-1.0, 1.0}) {
              const double ex = (px - (cx + side * clip.eye_dx)) / clip.eye_radius, ey = (py - clip.eye_y) / eye_ry;
              if (ex * ex + ey * ey <= 1.0) c = eye;
            }
            acc += c;
          }
        }
        acc /= static_cast<float>(ss * ss);
        const double cover = overlap(x, x + 1, mx0, mx1) * overlap(y, y + 1, my0, my1);
        if (cover > 0) acc = (1.0f - static_cast<float>(cover)) * acc + static_cast<float>(cover) * mouth;
        for (int c = 0; c < 3; ++c) frame.at(0, c, y, x) = acc(c);
      }
    }
    clip.frames.push_back(std::move(frame));
    const double full0 = clip.mouth_cy - cfg.max_aperture / 2, full1 = clip.mouth_cy + cfg.max_aperture / 2;
    Box box;
    box.x = static_cast<int>(std::floor(mx0));
    box.y = static_cast<int>(std::floor(full0));
    box.w = static_cast<int>(std::ceil(mx1)) - box.x;
    box.h = static_cast<int>(std::ceil(full1)) - box.y;
    clip.mouth_boxes.push_back(box);
  }

  // Audio: a two-partial tone whose amplitude follows the envelope frame by
  // frame, quantized to 16 bits before encoding so stored embeddings match a
  // re-encode of audio.raw.
  const Index spf = cfg.samples_per_frame();
  Eigen::VectorXf wave(n * spf);
  for (Index i = 0; i < wave.size(); ++i) {
    const double t = static_cast<double>(i) / cfg.sample_rate;
    const double carrier = (std::sin(2.0 * std::numbers::pi * pitch * t) +
                            0.5 * std::sin(2.0 * std::numbers::pi * 2.0 * pitch * t + harmonic_phase)) /
                           1.5;
    double v = 0.8 * clip.envelope[static_cast<std::size_t>(i / spf)] * carrier;
    if (cfg.audio_noise > 0) v += cfg.audio_noise * normal(rng);
    const float q = std::round(std::clamp(static_cast<float>(v), -1.0f, 1.0f) * 32767.0f);
    wave(i) = q / 32767.0f;
  }
  clip.waveform = wave;
  clip.embeddings = encode_chunks(SyntheticEncoder(), chunk_audio(wave, n));
  return clip;
}

nlohmann::json SyntheticClip::synthetic_meta() const {
  return {{"envelope", envelope},
          {"aperture", aperture},
          {"sway", sway},
          {"blinks", blinks},
          {"palette_index", palette_index},
          {"face_color", {face_color(0), face_color(1), face_color(2)}},
          {"palette_spacing", palette_spacing},
          {"face", {{"cx", face_cx}, {"cy", face_cy}, {"rx", face_rx}, {"ry", face_ry}}},
          {"eyes", {{"dx", eye_dx}, {"y", eye_y}, {"radius", eye_radius}}},
          {"mouth", {{"cy", mouth_cy}, {"width", mouth_width}}},
          {"darkness_threshold", kDarknessThreshold}};
}

void write_clip(const fs::path& dir, const SyntheticClip& clip, const SyntheticConfig& cfg,
                const std::string& encoder_id) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw RuntimeFailure("cannot create " + dir.string() + ": " + ec.message());
  char name[32];
  for (std::size_t k = 0; k < clip.frames.size(); ++k) {
    std::snprintf(name, sizeof(name), "frame_%05zu.png", k + 1);
    write_png(dir / name, clip.frames[k]);
  }
  write_waveform(dir / "audio.raw", clip.waveform);
  write_embeddings(dir / "embeddings.bin", clip.embeddings);
  write_boxes(dir / "boxes.txt", clip.mouth_boxes);
  const nlohmann::json meta = {{"clip_id", clip.clip_id},
                               {"n_frames", clip.frames.size()},
                               {"fps", cfg.fps},
                               {"image_size", cfg.image_size},
                               {"channels", 3},
                               {"sample_rate", cfg.sample_rate},
                               {"encoder", encoder_id},
                               {"embed_dim", clip.embeddings.front().size()},
                               {"synthetic", clip.synthetic_meta()}};
  std::ofstream out = open_out(dir / "meta.json");
  out << meta.dump(2) << '\n';
}

void make_synthetic_corpus(const SyntheticConfig& cfg, std::uint64_t seed, Index count, const fs::path& root,
                           int threads) {
  cfg.validate();
  require(count >= 1, "synth-data: count must be positive");
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw RuntimeFailure("cannot create corpus directory " + root.string() + ": " + ec.message());
  std::atomic<Index> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (Index i = next++; i < count; i = next++) {
      try {
        const SyntheticClip clip = make_synthetic_clip(cfg, seed, i);
        write_clip(root / clip.clip_id, clip, cfg, SyntheticEncoder::kId);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = count;
      }
    }
  };
  const int n_threads = std::max(1, std::min<int>(threads, static_cast<int>(count)));
  std::vector<std::thread> pool;
  for (int t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

double measured_aperture(const Tensor<float>& frame, const Box& box) {
  require(box.inside(frame.height, frame.width), "measured_aperture: box outside the frame");
  const Tensor<float> luma = to_grayscale(frame);
  int dark = 0;
  for (int y = box.y; y < box.y + box.h; ++y)
    for (int x = box.x; x < box.x + box.w; ++x) dark += luma.at(0, 0, y, x) < kDarknessThreshold;
  return static_cast<double>(dark) / box.w;
}

std::vector<std::pair<int, int>> face_region(const nlohmann::json& m, Index frame, const Box& mouth_box) {
  const auto& face = m.at("face");
  const auto& eyes = m.at("eyes");
  const double cx = face.at("cx").get<double>() + m.at("sway").at(static_cast<std::size_t>(frame)).get<double>();
  const double cy = face.at("cy").get<double>(), rx = face.at("rx").get<double>(), ry = face.at("ry").get<double>();
  const double edx = eyes.at("dx").get<double>(), ey = eyes.at("y").get<double>();
  const double keep_out = eyes.at("radius").get<double>() + 1.5;
  const int size = static_cast<int>(std::ceil(2 * (cy + ry)));
  std::vector<std::pair<int, int>> px;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double fx = (x + 0.5 - cx) / rx, fy = (y + 0.5 - cy) / ry;
      if (fx * fx + fy * fy > 0.7 * 0.7) continue;
      bool skip = false;
      for (double side : {-1.0, 1.0}) {
        if (std::hypot(x + 0.5 - (cx + side * edx), y + 0.5 - ey) < keep_out) skip = true;
      }
      if (x >= mouth_box.x - 1 && x <= mouth_box.x + mouth_box.w && y >= mouth_box.y - 1 &&
          y <= mouth_box.y + mouth_box.h) {
        skip = true;
      }
      if (!skip) px.emplace_back(x, y);
    }
  }
  return px;
}

// ---------------------------------------------------------------- loading

Corpus Corpus::open(const fs::path& root) {
  require(fs::is_directory(root), "corpus directory " + root.string() + " does not exist");
  Corpus c;
  c.root_ = root;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory() && fs::exists(entry.path() / "meta.json")) c.ids_.push_back(entry.path().filename().string());
  }
  std::sort(c.ids_.begin(), c.ids_.end());
  if (c.ids_.empty()) log_warning("corpus " + root.string() + " contains no clips");
  return c;
}

ClipMeta Corpus::meta(const std::string& clip_id) const {
  const fs::path path = root_ / clip_id / "meta.json";
  std::ifstream in = open_in(path);
  ClipMeta m;
  try {
    m.raw = nlohmann::json::parse(in);
    m.n_frames = m.raw.at("n_frames").get<Index>();
    m.fps = m.raw.at("fps").get<int>();
    m.image_size = m.raw.at("image_size").get<int>();
    m.channels = m.raw.value("channels", 3);
    m.sample_rate = m.raw.at("sample_rate").get<int>();
    m.encoder = m.raw.at("encoder").get<std::string>();
    m.embed_dim = m.raw.at("embed_dim").get<Index>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(clip_id + ": malformed meta.json: " + e.what());
  }
  require(m.n_frames >= 1 && m.image_size >= 1 && m.embed_dim >= 1, clip_id + ": meta.json has nonpositive sizes");
  require(m.channels == 3, clip_id + ": only 3-channel clips are supported");
  return m;
}

Eigen::VectorXf Corpus::waveform(const std::string& clip_id) const { return read_waveform(root_ / clip_id / "audio.raw"); }

namespace {

std::vector<Tensor<float>> read_frames(const fs::path& dir, const ClipMeta& m) {
  std::vector<Tensor<float>> frames;
  char name[32];
  for (Index k = 0; k < m.n_frames; ++k) {
    std::snprintf(name, sizeof(name), "frame_%05ld.png", static_cast<long>(k + 1));
    Tensor<float> f = read_png(dir / name);
    require(f.height == m.image_size && f.width == m.image_size,
            std::string(name) + " is " + std::to_string(f.height) + "x" + std::to_string(f.width) + ", expected " +
                std::to_string(m.image_size));
    frames.push_back(std::move(f));
  }
  std::snprintf(name, sizeof(name), "frame_%05ld.png", static_cast<long>(m.n_frames + 1));
  require(!fs::exists(dir / name), "more frames on disk than meta.json n_frames");
  return frames;
}

ValidationError with_clip(const std::string& clip_id, const ValidationError& e) {
  const std::string what = e.what();
  if (what.find(clip_id) != std::string::npos) return e;
  return ValidationError(clip_id + ": " + what);
}

}  // namespace

std::vector<Tensor<float>> Corpus::load_frames(const std::string& clip_id) const {
  try {
    return read_frames(root_ / clip_id, meta(clip_id));
  } catch (const ValidationError& e) {
    throw with_clip(clip_id, e);
  }
}

VideoSample Corpus::load(const std::string& clip_id) const {
  try {
    const ClipMeta m = meta(clip_id);
    const fs::path dir = root_ / clip_id;
    VideoSample v;
    v.clip_id = clip_id;
    v.frames = read_frames(dir, m);
    v.audio_embeddings = read_embeddings(dir / "embeddings.bin");
    require(static_cast<Index>(v.audio_embeddings.size()) == m.n_frames,
            "embeddings.bin has " + std::to_string(v.audio_embeddings.size()) + " records for " +
                std::to_string(m.n_frames) + " frames");
    require(v.audio_embeddings.front().size() == m.embed_dim, "embedding dimension differs from meta.json");
    v.mouth_boxes = read_boxes(dir / "boxes.txt");
    const Index samples = read_waveform(dir / "audio.raw").size();
    require(samples >= m.n_frames, "audio.raw has fewer samples than frames");
    v.validate();
    return v;
  } catch (const ValidationError& e) {
    throw with_clip(clip_id, e);
  }
}

std::vector<VideoSample> Corpus::load_all(std::vector<CorpusError>* errors) const {
  std::vector<VideoSample> out;
  for (const auto& id : ids_) {
    try {
      out.push_back(load(id));
    } catch (const ValidationError& e) {
      log_error("skipping clip: " + std::string(e.what()));
      if (errors) errors->push_back({id, e.what()});
    }
  }
  return out;
}

}  // namespace dh
