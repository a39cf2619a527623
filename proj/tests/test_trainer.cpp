#include "diffheads/data.hpp"
#include "diffheads/trainer.hpp"
#include "doctest.h"
#include "test_util.hpp"

#include <fstream>
#include <numeric>

using namespace dh;

namespace {

std::vector<VideoSample> tiny_clips(int count, int frames = 5) {
  SyntheticConfig sc;
  sc.image_size = 16;
  sc.min_frames = sc.max_frames = frames;
  sc.max_aperture = 3;
  std::vector<VideoSample> clips;
  for (int i = 0; i < count; ++i) {
    const SyntheticClip c = make_synthetic_clip(sc, 77, i);
    clips.push_back(VideoSample{c.clip_id, c.frames, c.embeddings, c.mouth_boxes});
  }
  return clips;
}

TrainConfig tiny_train_config() {
  TrainConfig t;
  t.batch_size = 4;
  t.learning_rate = 2e-3;
  t.ema_decay = 0.9;
  t.schedule = {ScheduleKind::cosine, 50};
  t.conditioning = {2, 1, true};
  t.model.channel_widths = {4, 8};
  t.model.resnet_blocks_per_level = 1;
  t.model.attention_heads = 1;
  t.model.attention_head_channels = 4;
  t.model.time_embed_dim = 8;
  t.model.audio_embed_dim = SyntheticEncoder::kDim;
  t.model.motion_audio_radius = 1;
  t.model.input_channels = 8;
  t.model.image_size = 16;
  t.seed = 3;
  return t;
}

template <typename Scalar>
std::vector<Matrix<Scalar>> values_of(Denoiser<Scalar>& m) {
  std::vector<Matrix<Scalar>> out;
  for (auto& [name, p] : m.parameters()) out.push_back(p->value);
  return out;
}

template <typename Scalar>
bool same_values(const std::vector<Matrix<Scalar>>& a, const std::vector<Matrix<Scalar>>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size() ||
        std::memcmp(a[i].data(), b[i].data(), sizeof(Scalar) * static_cast<std::size_t>(a[i].size())) != 0)
      return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("EMA update arithmetic") {
    std::vector<Matrix<double>> params{Matrix<double>::Constant(2, 2, 2.0)};
    std::vector<Matrix<double>> ema{Matrix<double>::Zero(2, 2)};
    ema_update(params, ema, 0.5);
    CHECK(ema[0](1, 1) == 1.0);
    ema_update(params, ema, 1.0);
    CHECK(ema[0](0, 0) == 1.0);
    ema_update(params, ema, 0.0);
    CHECK(ema[0] == params[0]);
    CHECK_THROWS_AS(ema_update(params, ema, 1.5), ValidationError);
  }

  TEST_CASE("timesteps are uniform over 1..T") {
    const auto clips = tiny_clips(3);
    const NoiseSchedule s = make_schedule(ScheduleKind::cosine, 10);
    std::mt19937_64 rng(4);
    std::vector<int> counts(10, 0);
    const int batches = 1000, per = 10;
    for (int i = 0; i < batches; ++i) {
      const auto b = assemble_batch<float>(clips, s, ConditioningConfig{2, 1, true}, per, rng);
      for (int t : b.input.timesteps) ++counts[static_cast<std::size_t>(t - 1)];
    }
    const double expected = batches * per / 10.0;
    double chi2 = 0;
    for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
    CHECK(chi2 < 21.666);  // chi-square, 9 degrees of freedom, alpha = 0.01
  }

  TEST_CASE("identity and target indices are drawn independently") {
    const auto clips = tiny_clips(1, 5);
    const NoiseSchedule s = make_schedule(ScheduleKind::cosine, 10);
    std::mt19937_64 rng(5);
    std::vector<std::vector<int>> table(5, std::vector<int>(5, 0));
    const int batches = 2000, per = 5;
    for (int i = 0; i < batches; ++i) {
      const auto b = assemble_batch<float>(clips, s, ConditioningConfig{2, 1, true}, per, rng);
      for (int j = 0; j < per; ++j) ++table[b.target_index[j]][b.identity_index[j]];
    }
    const double expected = batches * per / 25.0;
    double chi2 = 0;
    for (const auto& row : table)
      for (int c : row) chi2 += (c - expected) * (c - expected) / expected;
    CHECK(chi2 < 42.98);  // chi-square, 24 degrees of freedom, alpha = 0.01
  }

  TEST_CASE("batch assembly follows the conditioning layout") {
    const auto clips = tiny_clips(2);
    const NoiseSchedule s = make_schedule(ScheduleKind::cosine, 10);
    std::mt19937_64 rng(6);
    const auto b = assemble_batch<double>(clips, s, ConditioningConfig{2, 1, true}, 3, rng);
    CHECK(b.input.x_in.channels == 8);
    CHECK(b.input.motion_audio.rows() == 3 * SyntheticEncoder::kDim);
    for (Index i = 0; i < 3; ++i) {
      const int t = b.input.timesteps[i];
      const auto xt = q_sample(s, b.x0.slice(i), t, b.eps.slice(i));
      CHECK((xt.data - b.xt.slice(i).data).cwiseAbs().maxCoeff() <= 1e-12);
      CHECK(b.input.x_in.item(i).topRows(3) == b.xt.item(i));
    }
  }

  TEST_CASE("a perfect noise prediction has zero simple loss") {
    const auto clips = tiny_clips(2);
    const NoiseSchedule s = make_schedule(ScheduleKind::cosine, 10);
    std::mt19937_64 rng(7);
    const auto b = assemble_batch<double>(clips, s, ConditioningConfig{2, 1, true}, 4, rng);
    DenoiserOutput<double> out;
    out.eps_pred = b.eps;
    out.nu = Tensor<double>::constant(b.eps.batch, 3, 16, 16, 0.5);
    const auto r = compute_losses(s, b, out, LossWeights{});
    CHECK(r.parts.simple == 0.0);
    CHECK(r.parts.lip_sync == 0.0);
    out.eps_pred.data.setZero();
    const auto only = compute_losses(s, b, out, LossWeights{0.0, 0.0});
    CHECK(only.parts.total == only.parts.simple);
    CHECK(only.parts.simple > 0.0);
  }

  TEST_CASE("overfitting a fixed batch lowers the loss") {
    const auto clips = tiny_clips(2);
    Trainer<float> trainer(tiny_train_config(), clips);
    const auto batch = trainer.next_batch();
    const double first = trainer.training_step(batch).total;
    double last = first;
    for (int i = 1; i < 200; ++i) last = trainer.training_step(batch).total;
    INFO("step 0 total " << first << ", step 199 total " << last);
    CHECK(last < first);
    CHECK(trainer.step() == 200);
  }

  TEST_CASE("desk config halves the initial loss on a five-clip corpus within 2000 steps") {
    std::ifstream in(std::string(DH_SOURCE_DIR) + "/configs/train_desk.json");
    REQUIRE(in.good());
    const TrainConfig cfg = train_config_from_json(nlohmann::json::parse(in));
    std::vector<VideoSample> clips;
    for (int i = 0; i < 5; ++i) {
      const SyntheticClip c = make_synthetic_clip(SyntheticConfig{}, 12, i);
      clips.push_back(VideoSample{c.clip_id, c.frames, c.embeddings, c.mouth_boxes});
    }
    Trainer<float> trainer(cfg, clips);
    const double initial = trainer.training_step().total;
    std::vector<double> recent;
    double window_mean = initial;
    while (trainer.step() < 2000) {
      recent.push_back(trainer.training_step().total);
      if (recent.size() > 25) recent.erase(recent.begin());
      window_mean = std::accumulate(recent.begin(), recent.end(), 0.0) / static_cast<double>(recent.size());
      if (recent.size() == 25 && window_mean <= 0.5 * initial) break;
    }
    INFO("initial " << initial << ", 25-step mean " << window_mean << " at step " << trainer.step());
    CHECK(window_mean <= 0.5 * initial);
  }

  TEST_CASE("double-precision training is reproducible bit for bit") {
    const auto clips = tiny_clips(3);
    TrainConfig cfg = tiny_train_config();
    Trainer<double> a(cfg, clips), b(cfg, clips);
    for (int i = 0; i < 5; ++i) {
      const auto pa = a.training_step(), pb = b.training_step();
      CHECK(pa.total == pb.total);
    }
    CHECK(same_values(values_of(a.model()), values_of(b.model())));
    CHECK(same_values(a.ema(), b.ema()));
  }

  TEST_CASE("checkpoint round trip and resume") {
    const auto clips = tiny_clips(3);
    const TrainConfig cfg = tiny_train_config();
    const auto dir = dh::test::temp_dir("ckpt");
    Trainer<float> straight(cfg, clips);
    for (int i = 0; i < 6; ++i) straight.training_step();

    Trainer<float> first(cfg, clips);
    for (int i = 0; i < 3; ++i) first.training_step();
    save_checkpoint(dir / "a.ckpt", first, SyntheticEncoder::kId);

    const auto ck = load_checkpoint<float>(dir / "a.ckpt");
    CHECK(ck.meta.step == 3);
    CHECK(ck.meta.encoder_id == SyntheticEncoder::kId);
    CHECK(same_values(ck.values, values_of(first.model())));
    CHECK(same_values(ck.ema, first.ema()));
    CHECK(to_json(ck.meta.train) == to_json(cfg));

    Trainer<float> resumed(cfg, clips);
    restore_trainer(resumed, ck);
    for (int i = 0; i < 3; ++i) resumed.training_step();
    CHECK(resumed.step() == 6);
    CHECK(same_values(values_of(resumed.model()), values_of(straight.model())));
    CHECK(same_values(resumed.ema(), straight.ema()));

    auto ema_model = model_from_checkpoint(ck, true);
    CHECK(same_values(values_of(ema_model), first.ema()));
  }

  TEST_CASE("corrupted checkpoints are rejected") {
    const auto clips = tiny_clips(2);
    Trainer<float> t(tiny_train_config(), clips);
    const auto dir = dh::test::temp_dir("ckpt_bad");
    save_checkpoint(dir / "c.ckpt", t, SyntheticEncoder::kId);
    std::fstream f(dir / "c.ckpt", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(200);
    char byte = 0;
    f.read(&byte, 1);
    f.seekp(200);
    byte = static_cast<char>(byte ^ 0x5a);
    f.write(&byte, 1);
    f.close();
    CHECK_THROWS_AS(load_checkpoint<float>(dir / "c.ckpt"), ValidationError);
    CHECK_THROWS_AS(load_checkpoint<double>(dir / "missing.ckpt"), std::exception);
  }

  TEST_CASE("grayscale checkpoints refuse RGB sampling") {
    const TrainConfig gray = tiny_train_config();
    CHECK_NOTHROW(check_sampling_compatible(gray, ConditioningConfig{2, 1, true}));
    CHECK_THROWS_AS(check_sampling_compatible(gray, ConditioningConfig{2, 1, false}), ValidationError);
    CHECK_THROWS_AS(check_sampling_compatible(gray, ConditioningConfig{1, 1, true}), ValidationError);
  }

  TEST_CASE("config parsing is strict") {
    nlohmann::json j = to_json(tiny_train_config());
    CHECK(to_json(train_config_from_json(j)) == j);
    j["bogus"] = 1;
    try {
      train_config_from_json(j);
      FAIL("expected rejection");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("bogus") != std::string::npos);
    }
    nlohmann::json k = to_json(tiny_train_config());
    k["model"]["widths"] = 3;
    CHECK_THROWS_WITH_AS(train_config_from_json(k), doctest::Contains("model.widths"), ValidationError);
  }

  TEST_CASE("trainer validates the corpus against the model") {
    const auto clips = tiny_clips(1);
    TrainConfig cfg = tiny_train_config();
    cfg.model.image_size = 32;
    CHECK_THROWS_AS(Trainer<float>(cfg, clips), ValidationError);
  }
}
