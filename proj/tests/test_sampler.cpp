#include "diffheads/sampler.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace dh;

namespace {

DenoiserConfig tiny_config(const ConditioningConfig& cc) {
  DenoiserConfig c;
  c.channel_widths = {4, 8};
  c.resnet_blocks_per_level = 1;
  c.attention_heads = 1;
  c.attention_head_channels = 4;
  c.time_embed_dim = 8;
  c.audio_embed_dim = 2;
  c.motion_audio_radius = cc.motion_audio_radius;
  c.input_channels = cc.input_channels(3);
  c.image_size = 8;
  return c;
}

std::vector<Eigen::VectorXf> random_embeddings(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0, 1);
  std::vector<Eigen::VectorXf> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(Eigen::VectorXf::NullaryExpr(2, [&] { return u(rng); }));
  return out;
}

struct Fixture {
  ConditioningConfig cc{2, 1, true};
  Denoiser<float> model{tiny_config(cc), 31, /*zero_init_outputs=*/false};
  NoiseSchedule schedule = make_schedule(ScheduleKind::cosine, 10);
  std::mt19937_64 rng{32};
  Tensor<float> identity = dh::test::random_tensor<float>(1, 3, 8, 8, rng);
  SamplerConfig cfg() const {
    SamplerConfig s;
    s.respaced_steps = 10;
    s.seed = 5;
    s.conditioning = cc;
    return s;
  }
};

}  // namespace

TEST_SUITE("sampler") {
  TEST_CASE("one frame per embedding, bitwise reproducible") {
    Fixture f;
    const auto emb = random_embeddings(6, f.rng);
    const auto a = sample_video(f.model, f.schedule, f.identity, emb, f.cfg());
    const auto b = sample_video(f.model, f.schedule, f.identity, emb, f.cfg());
    REQUIRE(a.size() == 6);
    for (std::size_t k = 0; k < a.size(); ++k) {
      CHECK(a[k].same_shape(f.identity));
      CHECK(dh::test::bitwise_equal(a[k].data, b[k].data));
      CHECK(a[k].data.cwiseAbs().maxCoeff() <= 1.0f);
    }
    SamplerConfig other = f.cfg();
    other.seed = 6;
    CHECK(!dh::test::bitwise_equal(sample_video(f.model, f.schedule, f.identity, emb, other)[0].data, a[0].data));
  }

  TEST_CASE("sample_frame is reproducible under a seeded stream") {
    Fixture f;
    const RespacedSchedule r = respace(f.schedule, 10);
    const std::vector<Tensor<float>> motion(2, to_grayscale(f.identity));
    const Matrix<float> audio = Matrix<float>::Random(f.model.config().motion_audio_size(), 1);
    std::vector<std::mt19937_64> r1{std::mt19937_64(7)}, r2{std::mt19937_64(7)};
    const auto a = sample_frame(f.model, r, f.identity, motion, audio, r1, true);
    const auto b = sample_frame(f.model, r, f.identity, motion, audio, r2, true);
    CHECK(dh::test::bitwise_equal(a.data, b.data));
  }

  TEST_CASE("predicted x0 stays clipped on an untrained model") {
    Fixture f;
    const auto emb = random_embeddings(2, f.rng);
    int calls = 0;
    float worst = 0;
    const StepObserver<float> observe = [&](int, const Tensor<float>& x0) {
      ++calls;
      worst = std::max(worst, x0.data.cwiseAbs().maxCoeff());
    };
    sample_videos<float>(f.model, f.schedule, {f.identity}, {emb}, f.cfg(), {}, observe);
    CHECK(calls == 20);
    CHECK(worst <= 1.0f);
  }

  TEST_CASE("identity respacing visits every step once, in reverse") {
    Fixture f;
    std::vector<int> seen;
    const StepObserver<float> observe = [&](int i, const Tensor<float>&) { seen.push_back(i); };
    sample_videos<float>(f.model, f.schedule, {f.identity}, {random_embeddings(1, f.rng)}, f.cfg(), {}, observe);
    std::vector<int> expected;
    for (int i = 10; i >= 1; --i) expected.push_back(i);
    CHECK(seen == expected);
  }

  TEST_CASE("respaced sampling runs the requested step count") {
    Fixture f;
    SamplerConfig cfg = f.cfg();
    cfg.respaced_steps = 5;
    int calls = 0;
    const StepObserver<float> observe = [&](int, const Tensor<float>&) { ++calls; };
    sample_videos<float>(f.model, f.schedule, {f.identity}, {random_embeddings(1, f.rng)}, cfg, {}, observe);
    CHECK(calls == 5);
  }

  TEST_CASE("motion buffer starts as identity copies and holds only earlier frames") {
    Fixture f;
    const auto emb = random_embeddings(5, f.rng);
    std::vector<std::vector<Tensor<float>>> buffers;
    const BufferObserver<float> observe = [&](Index, const std::vector<Tensor<float>>& b) { buffers.push_back(b); };
    const auto frames = sample_video(f.model, f.schedule, f.identity, emb, f.cfg(), observe);
    REQUIRE(buffers.size() == 5);
    const Tensor<float> gray_id = to_grayscale(f.identity);
    for (std::size_t k = 0; k < 5; ++k) {
      REQUIRE(buffers[k].size() == 2);
      for (std::size_t s = 0; s < 2; ++s) {
        const long src = static_cast<long>(k) - 2 + static_cast<long>(s);
        const Tensor<float>& expect = src < 0 ? gray_id : to_grayscale(frames[static_cast<std::size_t>(src)]);
        CHECK(buffers[k][s].data == expect.data);
      }
    }
  }

  TEST_CASE("RGB motion buffers keep three channels") {
    Fixture f;
    f.cc.grayscale_motion = false;
    Denoiser<float> model(tiny_config(f.cc), 3, false);
    std::vector<std::vector<Tensor<float>>> buffers;
    const BufferObserver<float> observe = [&](Index, const std::vector<Tensor<float>>& b) { buffers.push_back(b); };
    sample_video(model, f.schedule, f.identity, random_embeddings(3, f.rng), f.cfg(), observe);
    CHECK(buffers.front()[0].channels == 3);
    CHECK(buffers.front()[0].data == f.identity.data);
  }

  TEST_CASE("frames are reproducible prefix-wise") {
    Fixture f;
    const auto emb = random_embeddings(7, f.rng);
    auto changed = emb;
    const std::size_t k = 3;  // frames 0..k-1 only see embeddings up to k-1+m_y
    for (std::size_t j = k + 1; j < changed.size(); ++j) changed[j].setConstant(9.0f);
    const auto a = sample_video(f.model, f.schedule, f.identity, emb, f.cfg());
    const auto b = sample_video(f.model, f.schedule, f.identity, changed, f.cfg());
    for (std::size_t j = 0; j < k; ++j) CHECK(dh::test::bitwise_equal(a[j].data, b[j].data));
    CHECK(!dh::test::bitwise_equal(a.back().data, b.back().data));
  }

  TEST_CASE("batched videos follow their own streams") {
    Fixture f;
    const auto e0 = random_embeddings(3, f.rng), e1 = random_embeddings(3, f.rng);
    const auto id1 = dh::test::random_tensor<float>(1, 3, 8, 8, f.rng);
    const auto both = sample_videos<float>(f.model, f.schedule, {f.identity, id1}, {e0, e1}, f.cfg());
    SamplerConfig second = f.cfg();
    second.first_stream = 1;
    const auto alone = sample_video(f.model, f.schedule, id1, e1, second);
    for (std::size_t k = 0; k < 3; ++k) CHECK((both[1][k].data - alone[k].data).cwiseAbs().maxCoeff() <= 1e-5f);
  }

  TEST_CASE("mismatched inputs are rejected") {
    Fixture f;
    const auto emb = random_embeddings(2, f.rng);
    CHECK_THROWS_AS(sample_video(f.model, f.schedule, Tensor<float>(1, 3, 16, 16), emb, f.cfg()), ValidationError);
    SamplerConfig rgb = f.cfg();
    rgb.conditioning.grayscale_motion = false;
    CHECK_THROWS_AS(sample_video(f.model, f.schedule, f.identity, emb, rgb), ValidationError);
    std::vector<Eigen::VectorXf> wide(2, Eigen::VectorXf::Zero(3));
    CHECK_THROWS_AS(sample_video(f.model, f.schedule, f.identity, wide, f.cfg()), ValidationError);
  }
}
