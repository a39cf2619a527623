#pragma once

#include "diffheads/conditioning.hpp"
#include "diffheads/denoiser.hpp"
#include "diffheads/losses.hpp"
#include "diffheads/schedule.hpp"

#include "json.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <sstream>
#include <random>
#include <string>
#include <vector>

namespace dh {

struct TrainConfig {
  int batch_size = 8;
  long total_steps = 2000;
  double learning_rate = 1e-4;
  double ema_decay = 0.9999;
  double grad_clip = 1.0;
  LossWeights weights;
  ConditioningConfig conditioning;
  ScheduleDescriptor schedule;
  DenoiserConfig model;
  std::uint64_t seed = 0;
  long checkpoint_interval = 1000;
  long log_interval = 50;

  void validate() const;
};

// Strict: unknown keys raise a ValidationError naming the key.
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const ConditioningConfig& c);
ConditioningConfig conditioning_from_json(const nlohmann::json& j);

// ema <- decay * ema + (1 - decay) * params
template <typename Scalar>
void ema_update(const std::vector<Matrix<Scalar>>& params, std::vector<Matrix<Scalar>>& ema, double decay) {
  require(params.size() == ema.size(), "ema_update: parameter count mismatch");
  require(decay >= 0.0 && decay <= 1.0, "ema_update: decay outside [0, 1]");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(params[i].rows() == ema[i].rows() && params[i].cols() == ema[i].cols(), "ema_update: shape mismatch");
    if (decay == 1.0) continue;
    ema[i] = static_cast<Scalar>(decay) * ema[i] + static_cast<Scalar>(1.0 - decay) * params[i];
  }
}

// One training item after sampling (clip, k, identity, t, eps).
template <typename Scalar>
struct TrainingBatch {
  ModelInput<Scalar> input;
  Tensor<Scalar> x0, xt, eps;
  std::vector<Box> boxes;
  std::vector<std::string> clip_ids;
  std::vector<Index> target_index, identity_index;
};

template <typename Scalar>
struct LossResult {
  LossParts parts;
  Tensor<Scalar> d_eps, d_nu;
};

template <typename Scalar>
TrainingBatch<Scalar> assemble_batch(const std::vector<VideoSample>& clips, const NoiseSchedule& schedule,
                                     const ConditioningConfig& cc, int batch_size, std::mt19937_64& rng) {
  require(!clips.empty(), "assemble_batch: no training clips");
  TrainingBatch<Scalar> batch;
  std::vector<Tensor<Scalar>> targets, identities, noises;
  std::vector<std::vector<Tensor<Scalar>>> motion;
  std::vector<int> steps;
  std::uniform_int_distribution<std::size_t> pick_clip(0, clips.size() - 1);
  std::uniform_int_distribution<int> pick_t(1, schedule.steps());
  const Index audio_size = cc.motion_audio_size(clips.front().audio_embeddings.front().size());
  batch.input.motion_audio.resize(audio_size, batch_size);
  for (int b = 0; b < batch_size; ++b) {
    const VideoSample& clip = clips[pick_clip(rng)];
    std::uniform_int_distribution<Index> pick_k(0, clip.size() - 1);
    const Index k = pick_k(rng);
    const IdentityChoice id = select_identity_frame(clip, rng);
    const int t = pick_t(rng);
    const Tensor<Scalar> x0 = clip.frames[static_cast<std::size_t>(k)].template cast<Scalar>();
    Tensor<Scalar> eps = standard_normal_like(x0, rng);
    targets.push_back(x0);
    identities.push_back(id.frame.template cast<Scalar>());
    std::vector<Tensor<Scalar>> m;
    for (const auto& f : build_motion_frames(clip, k, id.frame, cc)) m.push_back(f.template cast<Scalar>());
    motion.push_back(std::move(m));
    noises.push_back(std::move(eps));
    steps.push_back(t);
    const Eigen::VectorXf window = build_motion_audio(clip.audio_embeddings, k, cc.motion_audio_radius);
    require(window.size() == audio_size, "assemble_batch: clip '" + clip.clip_id + "' has a different embedding size");
    batch.input.motion_audio.col(b) = window.cast<Scalar>();
    batch.boxes.push_back(clip.mouth_boxes[static_cast<std::size_t>(k)]);
    batch.clip_ids.push_back(clip.clip_id);
    batch.target_index.push_back(k);
    batch.identity_index.push_back(id.index);
  }
  batch.x0 = stack_batch(targets);
  batch.eps = stack_batch(noises);
  batch.xt = batch.x0;
  for (int b = 0; b < batch_size; ++b) {
    batch.xt.item(b) = q_sample(schedule, targets[static_cast<std::size_t>(b)], steps[static_cast<std::size_t>(b)],
                                noises[static_cast<std::size_t>(b)])
                           .data;
  }
  std::vector<Tensor<Scalar>> stacked_motion;
  for (int m = 0; m < cc.motion_frames; ++m) {
    std::vector<Tensor<Scalar>> column;
    for (int b = 0; b < batch_size; ++b) column.push_back(motion[static_cast<std::size_t>(b)][static_cast<std::size_t>(m)]);
    stacked_motion.push_back(stack_batch(column));
  }
  batch.input.x_in = assemble_input(batch.xt, stack_batch(identities), stacked_motion);
  batch.input.timesteps = steps;
  return batch;
}

// Hybrid objective over a batch: simple and lip-sync terms are means over
// the batch, the bound term is a per-item mean averaged over items.
template <typename Scalar>
LossResult<Scalar> compute_losses(const NoiseSchedule& schedule, const TrainingBatch<Scalar>& batch,
                                  const DenoiserOutput<Scalar>& out, const LossWeights& w) {
  w.validate();
  const Index n = batch.x0.batch;
  LossResult<Scalar> r;
  auto simple = l_simple(batch.eps, out.eps_pred);
  r.parts.simple = simple.value;
  r.d_eps = std::move(simple.grad);
  r.d_nu = Tensor<Scalar>(n, out.nu.channels, out.nu.height, out.nu.width);
  std::vector<double> item_totals(static_cast<std::size_t>(n), 0.0);
  for (Index b = 0; b < n; ++b) {
    if (w.lambda_ls > 0.0) {
      const auto lip = l_lip_sync(batch.eps, out.eps_pred, batch.boxes[static_cast<std::size_t>(b)], b);
      r.parts.lip_sync += lip.value / static_cast<double>(n);
      r.d_eps.data += lip.grad.data * static_cast<Scalar>(w.lambda_ls / static_cast<double>(n));
      item_totals[static_cast<std::size_t>(b)] += lip.value;
    }
    if (w.lambda_vlb > 0.0) {
      const auto vlb = l_vlb(schedule, batch.x0.slice(b), batch.xt.slice(b), batch.input.timesteps[static_cast<std::size_t>(b)],
                             out.eps_pred.slice(b), out.nu.slice(b));
      r.parts.vlb += vlb.value / static_cast<double>(n);
      r.d_nu.item(b) = vlb.grad.data * static_cast<Scalar>(w.lambda_vlb / static_cast<double>(n));
      item_totals[static_cast<std::size_t>(b)] += vlb.value;
    }
  }
  r.parts.total = total_loss(r.parts, w);
  if (!std::isfinite(r.parts.total)) {
    std::string culprit = batch.clip_ids.empty() ? "?" : batch.clip_ids.front();
    for (Index b = 0; b < n; ++b) {
      const auto item = out.eps_pred.item(b);
      if (!item.allFinite() || !std::isfinite(item_totals[static_cast<std::size_t>(b)])) {
        culprit = batch.clip_ids[static_cast<std::size_t>(b)];
        break;
      }
    }
    throw RuntimeFailure("non-finite training loss on clip '" + culprit + "'");
  }
  return r;
}

// Adam with bias correction.
template <typename Scalar>
struct AdamState {
  std::vector<Matrix<Scalar>> first, second;
  long step = 0;
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
};

template <typename Scalar>
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const std::vector<VideoSample>& clips)
      : cfg_(cfg), clips_(&clips), schedule_(cfg.schedule.build()), model_(cfg.model, cfg.seed), rng_(split_seed(cfg.seed, 1)) {
    cfg_.validate();
    require(!clips.empty(), "trainer: no training clips");
    for (const auto& c : clips) c.validate();
    const auto& first = clips.front();
    require(first.frames.front().height == cfg_.model.image_size, "trainer: corpus resolution differs from model image_size");
    require(cfg_.conditioning.input_channels(first.frames.front().channels) == cfg_.model.input_channels,
            "trainer: model input_channels does not match the conditioning layout");
    require(first.audio_embeddings.front().size() == cfg_.model.audio_embed_dim,
            "trainer: corpus embedding dimension differs from model audio_embed_dim");
    require(cfg_.conditioning.motion_audio_radius == cfg_.model.motion_audio_radius,
            "trainer: model and conditioning disagree on the motion audio radius");
    for (auto& [name, p] : model_.parameters()) {
      ema_.push_back(p->value);
      adam_.first.push_back(Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
      adam_.second.push_back(Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  const TrainConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  Denoiser<Scalar>& model() { return model_; }
  const Denoiser<Scalar>& model() const { return model_; }
  std::vector<Matrix<Scalar>>& ema() { return ema_; }
  AdamState<Scalar>& adam() { return adam_; }
  long step() const { return step_; }
  void set_step(long s) { step_ = s; }
  std::mt19937_64& rng() { return rng_; }

  TrainingBatch<Scalar> next_batch() {
    return assemble_batch<Scalar>(*clips_, schedule_, cfg_.conditioning, cfg_.batch_size, rng_);
  }

  LossParts training_step() { return training_step(next_batch()); }

  LossParts training_step(const TrainingBatch<Scalar>& batch) {
    typename Denoiser<Scalar>::Cache cache;
    const DenoiserOutput<Scalar> out = model_.forward(batch.input, cache);
    const LossResult<Scalar> loss = compute_losses(schedule_, batch, out, cfg_.weights);
    model_.zero_grad();
    model_.backward(loss.d_eps, loss.d_nu, out, cache);
    apply_update();
    ++step_;
    return loss.parts;
  }

  // Copies EMA (or live) weights into a fresh model for sampling.
  Denoiser<Scalar> sampling_model(bool use_ema = true) const {
    Denoiser<Scalar> m = model_;
    if (use_ema) {
      std::size_t i = 0;
      for (auto& [name, p] : m.parameters()) p->value = ema_[i++];
    }
    return m;
  }

 private:
  void apply_update() {
    auto params = model_.parameters();
    double norm2 = 0.0;
    for (auto& [name, p] : params) norm2 += static_cast<double>(p->grad.squaredNorm());
    const double norm = std::sqrt(norm2);
    const double scale = (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;
    ++adam_.step;
    const double bc1 = 1.0 - std::pow(adam_.beta1, static_cast<double>(adam_.step));
    const double bc2 = 1.0 - std::pow(adam_.beta2, static_cast<double>(adam_.step));
    const Scalar b1 = static_cast<Scalar>(adam_.beta1), b2 = static_cast<Scalar>(adam_.beta2);
    const Scalar lr = static_cast<Scalar>(cfg_.learning_rate / bc1);
    const Scalar inv_bc2 = static_cast<Scalar>(1.0 / bc2);
    const Scalar eps = static_cast<Scalar>(adam_.epsilon);
    std::vector<Matrix<Scalar>> values;
    values.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      nn::Parameter<Scalar>& p = *params[i].second;
      const Matrix<Scalar> g = p.grad * static_cast<Scalar>(scale);
      adam_.first[i] = b1 * adam_.first[i] + (Scalar(1) - b1) * g;
      adam_.second[i] = b2 * adam_.second[i] + (Scalar(1) - b2) * g.cwiseProduct(g);
      p.value.array() -= lr * adam_.first[i].array() / ((adam_.second[i].array() * inv_bc2).sqrt() + eps);
      values.push_back(p.value);
    }
    ema_update(values, ema_, cfg_.ema_decay);
  }

  TrainConfig cfg_;
  const std::vector<VideoSample>* clips_;
  NoiseSchedule schedule_;
  Denoiser<Scalar> model_;
  std::vector<Matrix<Scalar>> ema_;
  AdamState<Scalar> adam_;
  std::mt19937_64 rng_;
  long step_ = 0;
};

// ---------------------------------------------------------------- checkpoints

struct CheckpointMeta {
  int version = 1;
  int scalar_bytes = 4;
  TrainConfig train;
  long step = 0;
  std::string encoder_id;
  std::vector<std::string> names;
  std::vector<std::pair<Index, Index>> shapes;
};

template <typename Scalar>
struct Checkpoint {
  CheckpointMeta meta;
  std::vector<Matrix<Scalar>> values, ema, adam_first, adam_second;
  std::string rng_state;  // textual mt19937_64 state
  long adam_step = 0;
};

void write_checkpoint_file(const std::filesystem::path& path, const nlohmann::json& header,
                           const std::vector<const void*>& blobs, const std::vector<std::size_t>& sizes);
// Returns the header and the raw payload; validates magic, version and checksum.
std::pair<nlohmann::json, std::vector<char>> read_checkpoint_file(const std::filesystem::path& path);
constexpr int kCheckpointVersion = 1;

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, Trainer<Scalar>& trainer, const std::string& encoder_id) {
  nlohmann::json header;
  header["version"] = kCheckpointVersion;
  header["scalar_bytes"] = static_cast<int>(sizeof(Scalar));
  header["train_config"] = to_json(trainer.config());
  header["step"] = trainer.step();
  header["adam_step"] = trainer.adam().step;
  header["encoder_id"] = encoder_id;
  std::ostringstream rng_text;
  rng_text << trainer.rng();
  header["rng"] = rng_text.str();
  std::vector<const void*> blobs;
  std::vector<std::size_t> sizes;
  auto params = trainer.model().parameters();
  nlohmann::json plist = nlohmann::json::array();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = *params[i].second;
    plist.push_back({{"name", params[i].first}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
    const std::array<const Matrix<Scalar>*, 4> parts{&p.value, &trainer.ema()[i], &trainer.adam().first[i],
                                                     &trainer.adam().second[i]};
    for (const Matrix<Scalar>* m : parts) {
      blobs.push_back(m->data());
      sizes.push_back(static_cast<std::size_t>(m->size()) * sizeof(Scalar));
    }
  }
  header["parameters"] = plist;
  write_checkpoint_file(path, header, blobs, sizes);
}

template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(const std::filesystem::path& path) {
  auto [header, payload] = read_checkpoint_file(path);
  Checkpoint<Scalar> ck;
  ck.meta.version = header.at("version").get<int>();
  ck.meta.scalar_bytes = header.at("scalar_bytes").get<int>();
  require(ck.meta.scalar_bytes == static_cast<int>(sizeof(Scalar)),
          "checkpoint " + path.string() + " stores " + std::to_string(ck.meta.scalar_bytes) + "-byte scalars");
  ck.meta.train = train_config_from_json(header.at("train_config"));
  ck.meta.step = header.at("step").get<long>();
  ck.meta.encoder_id = header.at("encoder_id").get<std::string>();
  ck.rng_state = header.value("rng", std::string{});
  ck.adam_step = header.value("adam_step", ck.meta.step);
  std::size_t offset = 0;
  auto take = [&](Index rows, Index cols) {
    Matrix<Scalar> m(rows, cols);
    const std::size_t bytes = static_cast<std::size_t>(m.size()) * sizeof(Scalar);
    require(offset + bytes <= payload.size(), "checkpoint " + path.string() + " is truncated");
    std::memcpy(m.data(), payload.data() + offset, bytes);
    offset += bytes;
    return m;
  };
  for (const auto& p : header.at("parameters")) {
    const Index rows = p.at("rows").get<Index>(), cols = p.at("cols").get<Index>();
    ck.meta.names.push_back(p.at("name").get<std::string>());
    ck.meta.shapes.emplace_back(rows, cols);
    ck.values.push_back(take(rows, cols));
    ck.ema.push_back(take(rows, cols));
    ck.adam_first.push_back(take(rows, cols));
    ck.adam_second.push_back(take(rows, cols));
  }
  require(offset == payload.size(), "checkpoint " + path.string() + " has trailing bytes");
  return ck;
}

// Rebuilds a model from a checkpoint, with EMA or live weights.
template <typename Scalar>
Denoiser<Scalar> model_from_checkpoint(const Checkpoint<Scalar>& ck, bool use_ema = true) {
  Denoiser<Scalar> model(ck.meta.train.model, ck.meta.train.seed);
  auto params = model.parameters();
  require(params.size() == ck.values.size(), "checkpoint parameter count does not match the model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(params[i].first == ck.meta.names[i], "checkpoint parameter '" + ck.meta.names[i] + "' out of place");
    params[i].second->value = use_ema ? ck.ema[i] : ck.values[i];
  }
  return model;
}

// Restores parameters, EMA, optimizer state and step counter into a trainer
// built from the same configuration.
template <typename Scalar>
void restore_trainer(Trainer<Scalar>& trainer, const Checkpoint<Scalar>& ck) {
  auto params = trainer.model().parameters();
  require(params.size() == ck.values.size(), "checkpoint parameter count does not match the trainer's model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(params[i].first == ck.meta.names[i], "checkpoint parameter '" + ck.meta.names[i] + "' out of place");
    params[i].second->value = ck.values[i];
  }
  trainer.ema() = ck.ema;
  trainer.adam().first = ck.adam_first;
  trainer.adam().second = ck.adam_second;
  trainer.adam().step = ck.adam_step;
  trainer.set_step(ck.meta.step);
  if (!ck.rng_state.empty()) {
    std::istringstream in(ck.rng_state);
    in >> trainer.rng();
  }
}

// Sampling must use the motion-frame layout the model was trained with.
void check_sampling_compatible(const TrainConfig& trained, const ConditioningConfig& requested);

}  // namespace dh
