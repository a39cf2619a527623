#include "diffheads/conditioning.hpp"
#include "doctest.h"
#include "test_util.hpp"

#include <cmath>

using namespace dh;

namespace {

// Clip of n RGB 2x2 frames; frame j is constant (j+1)/10 in every channel.
VideoSample numbered_clip(Index n, Index dim = 2) {
  VideoSample v;
  v.clip_id = "numbered";
  for (Index j = 0; j < n; ++j) {
    v.frames.push_back(Tensor<float>::constant(1, 3, 2, 2, static_cast<float>(j + 1) / 10.0f));
    v.audio_embeddings.push_back(Eigen::VectorXf::Constant(dim, static_cast<float>(j + 1)));
    v.mouth_boxes.push_back(Box{0, 0, 1, 1});
  }
  return v;
}

Eigen::VectorXf concat(std::initializer_list<float> labels, Index dim) {
  Eigen::VectorXf out(static_cast<Index>(labels.size()) * dim);
  Index i = 0;
  for (float l : labels) out.segment((i++) * dim, dim).setConstant(l);
  return out;
}

}  // namespace

TEST_SUITE("conditioning") {
  TEST_CASE("identity selection with one frame") {
    const VideoSample v = numbered_clip(1);
    std::mt19937_64 rng(1);
    for (int i = 0; i < 20; ++i) CHECK(select_identity_frame(v, rng).index == 0);
  }

  TEST_CASE("identity selection is deterministic per seed") {
    const VideoSample v = numbered_clip(30);
    std::mt19937_64 a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(select_identity_frame(v, a).index == select_identity_frame(v, b).index);
  }

  TEST_CASE("identity selection is uniform") {
    const VideoSample v = numbered_clip(100, 1);
    std::mt19937_64 rng(2024);
    const int draws = 10000;
    std::vector<int> counts(100, 0);
    for (int i = 0; i < draws; ++i) {
      const auto choice = select_identity_frame(v, rng);
      ++counts[static_cast<std::size_t>(choice.index)];
      REQUIRE(choice.frame.data(0, 0) == v.frames[static_cast<std::size_t>(choice.index)].data(0, 0));
    }
    const double p = 0.01, sigma = std::sqrt(p * (1 - p) / draws);
    // 4 sigma per bin keeps the family-wise false alarm rate below 1% over 100 bins.
    for (int c : counts) CHECK(std::abs(c / static_cast<double>(draws) - p) <= 4 * sigma);
  }

  TEST_CASE("grayscale conversion") {
    Tensor<float> gray(1, 3, 1, 1);
    gray.data << 0.25f, 0.25f, 0.25f;
    CHECK(to_grayscale(gray).data(0, 0) == doctest::Approx(0.25f));
    // Pure red in [0, 1] is (1, -1, -1) in the stored domain.
    Tensor<double> red(1, 3, 1, 1);
    red.data << 1.0, -1.0, -1.0;
    CHECK((to_grayscale(red).data(0, 0) + 1.0) / 2.0 == doctest::Approx(0.299).epsilon(1e-12));
    CHECK(to_grayscale(red).channels == 1);
  }

  TEST_CASE("grayscale motion frames carry no chroma") {
    // Same luma, different hue.
    Tensor<double> a(1, 3, 1, 1), b(1, 3, 1, 1);
    a.data << 0.5, 0.0, 0.0;
    const double luma = 0.299 * 0.5;
    b.data << 0.0, luma / 0.587, 0.0;
    CHECK(to_grayscale(a).data(0, 0) == doctest::Approx(to_grayscale(b).data(0, 0)).epsilon(1e-12));
    VideoSample v = numbered_clip(3);
    VideoSample w = v;
    v.frames[0].data.col(0) << 0.5f, 0.0f, 0.0f;
    w.frames[0].data.col(0) << 0.0f, static_cast<float>(luma / 0.587), 0.0f;
    const ConditioningConfig cfg{2, 0, true};
    const auto ma = build_motion_frames(v, 2, v.frames[1], cfg);
    const auto mb = build_motion_frames(w, 2, v.frames[1], cfg);
    CHECK((ma[0].data - mb[0].data).cwiseAbs().maxCoeff() <= 1e-7f);
  }

  TEST_CASE("motion frames at the clip start are identity copies") {
    const VideoSample v = numbered_clip(5);
    const Tensor<float> id = Tensor<float>::constant(1, 3, 2, 2, -0.5f);
    const ConditioningConfig cfg{2, 0, false};
    const auto m = build_motion_frames(v, 0, id, cfg);
    REQUIRE(m.size() == 2);
    CHECK(m[0].data == id.data);
    CHECK(m[1].data == id.data);
  }

  TEST_CASE("motion frames for k=3 are the two preceding frames") {
    const VideoSample v = numbered_clip(5);
    const ConditioningConfig cfg{2, 0, false};
    const auto m = build_motion_frames(v, 2, v.frames[4], cfg);
    CHECK(m[0].data == v.frames[0].data);
    CHECK(m[1].data == v.frames[1].data);
  }

  TEST_CASE("grayscale motion frames for k=2") {
    VideoSample v = numbered_clip(5);
    v.frames[0].data.row(0).setConstant(0.9f);
    Tensor<float> id(1, 3, 2, 2);
    id.data.row(1).setConstant(0.7f);
    const ConditioningConfig cfg{2, 0, true};
    const auto m = build_motion_frames(v, 1, id, cfg);
    REQUIRE(m.size() == 2);
    CHECK(m[0].channels == 1);
    CHECK(m[1].channels == 1);
    CHECK(m[0].data == to_grayscale(id).data);
    CHECK(m[1].data == to_grayscale(v.frames[0]).data);
  }

  TEST_CASE("assembled channel counts") {
    const Tensor<float> x(1, 3, 4, 4);
    CHECK(ConditioningConfig{2, 2, true}.input_channels(3) == 8);
    CHECK(ConditioningConfig{2, 2, false}.input_channels(3) == 12);
    CHECK(ConditioningConfig{0, 2, true}.input_channels(3) == 6);
    const std::vector<Tensor<float>> gray_motion(2, Tensor<float>(1, 1, 4, 4));
    const std::vector<Tensor<float>> rgb_motion(2, Tensor<float>(1, 3, 4, 4));
    CHECK(assemble_input(x, x, gray_motion).channels == 8);
    CHECK(assemble_input(x, x, rgb_motion).channels == 12);
    CHECK(assemble_input(x, x, std::vector<Tensor<float>>{}).channels == 6);
  }

  TEST_CASE("assembled channel order is target, identity, motion oldest first") {
    const Tensor<float> target = Tensor<float>::constant(1, 3, 2, 2, 1.0f);
    const Tensor<float> id = Tensor<float>::constant(1, 3, 2, 2, 2.0f);
    const std::vector<Tensor<float>> motion{Tensor<float>::constant(1, 1, 2, 2, 3.0f),
                                            Tensor<float>::constant(1, 1, 2, 2, 4.0f)};
    const auto in = assemble_input(target, id, motion);
    const float expected[] = {1, 1, 1, 2, 2, 2, 3, 4};
    for (Index c = 0; c < 8; ++c) CHECK(in.data.row(c).minCoeff() == expected[c]);
  }

  TEST_CASE("motion audio padding") {
    const auto y = numbered_clip(5, 2).audio_embeddings;
    CHECK(build_motion_audio(y, 0, 2) == concat({1, 1, 1, 2, 3}, 2));
    CHECK(build_motion_audio(y, 4, 2) == concat({3, 4, 5, 5, 5}, 2));
    for (Index k = 0; k < 5; ++k) CHECK(build_motion_audio(y, k, 0) == y[static_cast<std::size_t>(k)]);
  }

  TEST_CASE("exhaustive small-n conditioning contracts") {
    for (Index n = 1; n <= 6; ++n) {
      for (int mx = 0; mx <= 3; ++mx) {
        for (bool gray : {true, false}) {
          const VideoSample v = numbered_clip(n);
          const Tensor<float> id = Tensor<float>::constant(1, 3, 2, 2, -0.25f);
          const ConditioningConfig cfg{mx, 0, gray};
          for (Index k = 0; k < n; ++k) {
            // Frames at or after k are overwritten; outputs must not change.
            VideoSample poisoned = v;
            for (Index j = k; j < n; ++j) poisoned.frames[static_cast<std::size_t>(j)].data.setConstant(99.0f);
            const auto m = build_motion_frames(v, k, id, cfg);
            const auto mp = build_motion_frames(poisoned, k, id, cfg);
            REQUIRE(m.size() == static_cast<std::size_t>(mx));
            for (int s = 0; s < mx; ++s) {
              const auto& f = m[static_cast<std::size_t>(s)];
              CHECK(f.data == mp[static_cast<std::size_t>(s)].data);
              CHECK(f.channels == (gray ? 1 : 3));
              const Index src = k - mx + s;
              const Tensor<float>& expect = src < 0 ? id : v.frames[static_cast<std::size_t>(src)];
              CHECK(f.data == (gray ? to_grayscale(expect).data : expect.data));
            }
            const Tensor<float> x(1, 3, 2, 2);
            CHECK(assemble_input(x, id, m).channels == cfg.input_channels(3));
          }
        }
      }
      for (int my = 0; my <= 3; ++my) {
        const auto y = numbered_clip(n, 3).audio_embeddings;
        for (Index k = 0; k < n; ++k) {
          const Eigen::VectorXf w = build_motion_audio(y, k, my);
          REQUIRE(w.size() == (2 * my + 1) * 3);
          for (int j = -my; j <= my; ++j) {
            const Index src = std::clamp<Index>(k + j, 0, n - 1);
            CHECK(w.segment((j + my) * 3, 3) == y[static_cast<std::size_t>(src)]);
          }
        }
      }
    }
  }

  TEST_CASE("clip validation names the clip") {
    VideoSample v = numbered_clip(3);
    v.mouth_boxes[1] = Box{1, 1, 5, 5};
    try {
      v.validate();
      FAIL("expected a validation error");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("numbered") != std::string::npos);
    }
  }
}
