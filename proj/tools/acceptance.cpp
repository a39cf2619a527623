// Acceptance report: one PASS/FAIL line per criterion 1-9, a REPORT line for 10.
// Criterion 7 is SKIP when no end-to-end directory is given.
// Usage: dh_acceptance --cli PATH [--e2e DIR]
//   DIR/heldout          ground-truth synthetic corpus
//   DIR/samples          `diffheads sample --corpus DIR/heldout` output
//   DIR/ablation/mx0     samples from the m_x = 0 model (optional)
//   DIR/ablation/mx2     samples from the m_x = 2 model at the same step (optional)

#include "diffheads/conditioning.hpp"
#include "diffheads/data.hpp"
#include "diffheads/denoiser.hpp"
#include "diffheads/log.hpp"
#include "diffheads/losses.hpp"
#include "diffheads/metrics.hpp"
#include "diffheads/trainer.hpp"
#include "json.hpp"

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

namespace fs = std::filesystem;
using namespace dh;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

template <typename Scalar>
Tensor<Scalar> random_tensor(Index b, Index c, Index h, Index w, std::mt19937_64& rng, double lo = -1.0,
                             double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<Scalar> t(b, c, h, w);
  for (Index i = 0; i < t.size(); ++i) t.data.data()[i] = static_cast<Scalar>(u(rng));
  return t;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string fmt(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const auto n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i] / n, mb += b[i] / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return saa > 0 && sbb > 0 ? sab / std::sqrt(saa * sbb) : 0.0;
}

// ------------------------------------------------------------------ 1

Outcome closed_form_mean() {
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<int> pick_T(2, 1000);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const NoiseSchedule s = make_schedule(i % 2 ? ScheduleKind::cosine : ScheduleKind::linear, pick_T(rng));
    const int t = std::uniform_int_distribution<int>(2, s.steps())(rng);
    const auto x0 = random_tensor<double>(1, 3, 4, 4, rng);
    const auto eps = standard_normal_like(x0, rng);
    const auto xt = q_sample(s, x0, t, eps);
    const auto nu = random_tensor<double>(1, 3, 4, 4, rng, 0.0, 1.0);
    const auto model = model_mean_variance(s, eps, nu, xt, t);
    const auto post = posterior_mean_variance(s, x0, xt, t);
    worst = std::max(worst, (model.mean.data - post.mean.data).cwiseAbs().maxCoeff());
  }
  const double secs = seconds_since(start);
  return {worst <= 1e-5 && secs < 10, "max |mu - posterior mean| " + fmt(worst) + " over 1000 fixtures, " + fmt(secs) + " s"};
}

// ------------------------------------------------------------------ 2

Outcome schedule_oracle() {
  Eigen::VectorXd betas(4);
  betas << 0.1, 0.2, 0.3, 0.4;
  const NoiseSchedule s = NoiseSchedule::from_betas(betas);
  const double expected[] = {0.9, 0.72, 0.504, 0.3024};
  double worst = 0;
  for (int t = 1; t <= 4; ++t) worst = std::max(worst, std::abs(s.alpha_bar(t) - expected[t - 1]));
  const double tilde2 = s.posterior_variance(2);
  const RespacedSchedule r = respace(s, std::vector<int>{2, 4});
  const double r1 = r.effective.beta(1), r2 = r.effective.beta(2);
  const bool ok = worst <= 1e-12 && std::abs(tilde2 - 0.071429) <= 1e-6 && std::abs(r1 - 0.28) <= 1e-6 &&
                  std::abs(r2 - 0.58) <= 1e-6;
  return {ok, "alpha_bar error " + fmt(worst) + ", posterior variance(2) " + fmt(tilde2) + ", respaced {2,4} betas [" +
                  fmt(r1) + ", " + fmt(r2) + "]"};
}

// ------------------------------------------------------------------ 3

double normal_log_pdf(double x, double mean, double var) {
  return -0.5 * std::log(2 * std::numbers::pi * var) - 0.5 * (x - mean) * (x - mean) / var;
}

// Composite Simpson over mean1 +- 14 standard deviations.
double kl_quadrature(double m1, double v1, double m2, double v2) {
  const int n = 20000;
  const double sd = std::sqrt(v1), a = m1 - 14 * sd, b = m1 + 14 * sd, h = (b - a) / n;
  double sum = 0;
  for (int i = 0; i <= n; ++i) {
    const double x = a + i * h;
    const double lp = normal_log_pdf(x, m1, v1);
    sum += std::exp(lp) * (lp - normal_log_pdf(x, m2, v2)) * (i == 0 || i == n ? 1 : (i % 2 ? 4 : 2));
  }
  return sum * h / 3;
}

Outcome kl_and_likelihood() {
  std::mt19937_64 rng(103);
  std::uniform_real_distribution<double> mean(-2, 2), logv(-3, 1);
  double kl_worst = 0;
  for (int i = 0; i < 100; ++i) {
    const double m1 = mean(rng), m2 = mean(rng), v1 = std::exp(logv(rng)), v2 = std::exp(logv(rng));
    kl_worst = std::max(kl_worst, std::abs(kl_gaussian(m1, v1, m2, v2) - kl_quadrature(m1, v1, m2, v2)));
  }
  std::uniform_real_distribution<double> bmean(-1.2, 1.2), blogv(-14, 1);
  double mass_worst = 0;
  for (int i = 0; i < 100; ++i) {
    const double m = bmean(rng), lv = blogv(rng);
    double total = 0;
    for (int k = 0; k < 256; ++k)
      total += std::exp(discretized_gaussian_log_likelihood(std::clamp(-1.0 + 2.0 * k / 255.0, -1.0, 1.0), m, lv).value);
    mass_worst = std::max(mass_worst, std::abs(total - 1.0));
  }
  return {kl_worst <= 1e-3 && mass_worst <= 1e-6,
          "KL vs quadrature " + fmt(kl_worst) + " (100 cases), bin mass |sum - 1| " + fmt(mass_worst) + " (100 cases)"};
}

// ------------------------------------------------------------------ 4

Outcome gradient_check() {
  const auto start = std::chrono::steady_clock::now();
  DenoiserConfig c;
  c.channel_widths = {4, 8};
  c.resnet_blocks_per_level = 1;
  c.attention_heads = 2;
  c.attention_head_channels = 4;
  c.time_embed_dim = 8;
  c.audio_embed_dim = 2;
  c.motion_audio_radius = 1;
  c.input_channels = ConditioningConfig{2, 1, true}.input_channels(3);
  c.image_size = 8;
  Denoiser<double> model(c, 104, /*zero_init_outputs=*/false);
  const NoiseSchedule s = make_schedule(ScheduleKind::cosine, 4);
  const LossWeights w{0.5, 0.3};
  std::mt19937_64 rng(105);

  TrainingBatch<double> batch;
  const Index n = 4;
  batch.x0 = random_tensor<double>(n, 3, 8, 8, rng);
  batch.eps = standard_normal_like(batch.x0, rng);
  batch.xt = batch.x0;
  batch.input.timesteps = {1, 2, 3, 4};
  for (Index b = 0; b < n; ++b) {
    batch.xt.item(b) =
        q_sample(s, batch.x0.slice(b), batch.input.timesteps[static_cast<std::size_t>(b)], batch.eps.slice(b)).data;
    batch.boxes.push_back(Box{static_cast<int>(b), 2, 4, 3});
  }
  const auto identity = random_tensor<double>(n, 3, 8, 8, rng);
  const std::vector<Tensor<double>> motion{random_tensor<double>(n, 1, 8, 8, rng), random_tensor<double>(n, 1, 8, 8, rng)};
  batch.input.x_in = assemble_input(batch.xt, identity, motion);
  batch.input.motion_audio = Matrix<double>::Random(c.motion_audio_size(), n);

  typename Denoiser<double>::Cache cache;
  const auto base = model.forward(batch.input, cache);
  const auto loss = compute_losses(s, batch, base, w);
  model.zero_grad();
  model.backward(loss.d_eps, loss.d_nu, base, cache);

  // The bound term treats the model mean as a constant.
  auto objective = [&]() {
    const auto out = model.forward(batch.input);
    LossParts p;
    for (Index b = 0; b < n; ++b) {
      p.lip_sync += l_lip_sync(batch.eps, out.eps_pred, batch.boxes[static_cast<std::size_t>(b)], b).value / n;
      p.vlb += l_vlb(s, batch.x0.slice(b), batch.xt.slice(b), batch.input.timesteps[static_cast<std::size_t>(b)],
                     base.eps_pred.slice(b), out.nu.slice(b)).value / n;
    }
    p.simple = l_simple(batch.eps, out.eps_pred).value;
    return total_loss(p, w);
  };

  const double h = 1e-5;
  double worst = 0;
  std::string worst_name;
  Index checked = 0;
  for (auto& [name, p] : model.parameters()) {
    for (Index i = 0; i < p->value.size(); ++i) {
      double& v = p->value.data()[i];
      const double keep = v;
      v = keep + h;
      const double up = objective();
      v = keep - h;
      const double down = objective();
      v = keep;
      const double fd = (up - down) / (2 * h), an = p->grad.data()[i];
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-5});
      if (rel > worst) worst = rel, worst_name = name;
      ++checked;
    }
  }
  const double secs = seconds_since(start);
  return {worst < 1e-3 && checked == model.parameter_count() && secs < 120,
          "worst relative error " + fmt(worst) + " (" + worst_name + ") over " + std::to_string(checked) +
              " parameters, " + fmt(secs) + " s"};
}

// ------------------------------------------------------------------ 5

Outcome lip_loss_degeneracy() {
  std::mt19937_64 rng(106);
  std::uniform_int_distribution<int> size(1, 9);
  int equal = 0;
  for (int i = 0; i < 100; ++i) {
    const Index h = size(rng), w = size(rng), c = 1 + i % 3;
    const auto eps = random_tensor<float>(1, c, h, w, rng, -3, 3);
    const auto pred = random_tensor<float>(1, c, h, w, rng, -3, 3);
    const auto lip = l_lip_sync(eps, pred, Box{0, 0, static_cast<int>(w), static_cast<int>(h)});
    const auto simple = l_simple(eps, pred);
    equal += std::memcmp(&lip.value, &simple.value, sizeof(double)) == 0 &&
             std::memcmp(lip.grad.data.data(), simple.grad.data.data(),
                         sizeof(float) * static_cast<std::size_t>(simple.grad.size())) == 0;
  }
  return {equal == 100, std::to_string(equal) + "/100 fixtures bitwise equal (value and gradient)"};
}

// ------------------------------------------------------------------ 6

VideoSample numbered_clip(Index n, Index dim) {
  VideoSample v;
  v.clip_id = "numbered";
  for (Index j = 0; j < n; ++j) {
    v.frames.push_back(Tensor<float>::constant(1, 3, 2, 2, static_cast<float>(j + 1) / 10.0f));
    v.audio_embeddings.push_back(Eigen::VectorXf::Constant(dim, static_cast<float>(j + 1)));
    v.mouth_boxes.push_back(Box{0, 0, 1, 1});
  }
  return v;
}

Outcome conditioning_contracts() {
  long cases = 0, failures = 0;
  auto expect = [&](bool ok) { ++cases, failures += !ok; };
  expect(ConditioningConfig{2, 2, true}.input_channels(3) == 8);
  expect(ConditioningConfig{2, 2, false}.input_channels(3) == 12);
  for (Index n = 1; n <= 6; ++n) {
    for (int mx = 0; mx <= 3; ++mx) {
      for (bool gray : {true, false}) {
        const VideoSample v = numbered_clip(n, 2);
        const Tensor<float> id = Tensor<float>::constant(1, 3, 2, 2, -0.25f);
        const ConditioningConfig cfg{mx, 0, gray};
        for (Index k = 0; k < n; ++k) {
          VideoSample poisoned = v;
          for (Index j = k; j < n; ++j) poisoned.frames[static_cast<std::size_t>(j)].data.setConstant(99.0f);
          const auto m = build_motion_frames(v, k, id, cfg);
          const auto mp = build_motion_frames(poisoned, k, id, cfg);
          expect(m.size() == static_cast<std::size_t>(mx) && mp.size() == m.size());
          if (m.size() != static_cast<std::size_t>(mx)) continue;
          for (int s = 0; s < mx; ++s) {
            const auto& f = m[static_cast<std::size_t>(s)];
            const Index src = k - mx + s;
            const Tensor<float>& e = src < 0 ? id : v.frames[static_cast<std::size_t>(src)];
            expect(f.data == mp[static_cast<std::size_t>(s)].data);
            expect(f.data == (gray ? to_grayscale(e).data : e.data));
          }
          expect(assemble_input(Tensor<float>(1, 3, 2, 2), id, m).channels == cfg.input_channels(3));
        }
      }
    }
    for (int my = 0; my <= 3; ++my) {
      const auto y = numbered_clip(n, 3).audio_embeddings;
      for (Index k = 0; k < n; ++k) {
        const Eigen::VectorXf w = build_motion_audio(y, k, my);
        expect(w.size() == (2 * my + 1) * 3);
        if (w.size() != (2 * my + 1) * 3) continue;
        for (int j = -my; j <= my; ++j)
          expect(w.segment((j + my) * 3, 3) == y[static_cast<std::size_t>(std::clamp<Index>(k + j, 0, n - 1))]);
      }
    }
  }
  // Padding at k = 1 and k = n (0-based 0 and n - 1) for n = 5, m_y = 2.
  const auto y = numbered_clip(5, 1).audio_embeddings;
  Eigen::VectorXf first(5), last(5);
  first << 1, 1, 1, 2, 3;
  last << 3, 4, 5, 5, 5;
  expect(build_motion_audio(y, 0, 2) == first);
  expect(build_motion_audio(y, 4, 2) == last);
  return {failures == 0, std::to_string(cases - failures) + "/" + std::to_string(cases) + " checks"};
}

// ------------------------------------------------------------------ 8

Video constant_video(std::initializer_list<float> values) {
  Video v;
  for (float x : values) v.push_back(Tensor<float>::constant(1, 1, 2, 2, x));
  return v;
}

Outcome metrics_checks() {
  std::mt19937_64 rng(108);
  double oracle_worst = 0;
  for (int i = 0; i < 20; ++i) {
    Video v;
    const Index c = 1 + i % 3;
    for (int k = 0; k < 2 + i % 5; ++k) v.push_back(random_tensor<float>(1, c, 7, 5, rng));
    double total = 0;
    for (std::size_t k = 1; k < v.size(); ++k) {
      double sum = 0;
      for (Index ch = 0; ch < c; ++ch)
        for (Index y = 0; y < 7; ++y)
          for (Index x = 0; x < 5; ++x) {
            const double d = static_cast<double>(v[k].at(0, ch, y, x)) - v[k - 1].at(0, ch, y, x);
            sum += d * d;
          }
      total += sum / static_cast<double>(c * 35);
    }
    oracle_worst = std::max(oracle_worst, std::abs(f_mse(v) - total / static_cast<double>(v.size() - 1)));
  }
  const BlockMatchingFlow flow;
  const Video still(5, random_tensor<float>(1, 3, 16, 16, rng));
  const double still_fmse = f_mse(still), still_ofm = ofm(still, flow);

  // Smooth texture translated right by one pixel per frame.
  std::uniform_real_distribution<double> u(0, 2 * std::numbers::pi);
  double phase[6], fx[6], fy[6];
  for (int i = 0; i < 6; ++i) phase[i] = u(rng), fx[i] = 0.2 + 0.1 * u(rng), fy[i] = 0.2 + 0.1 * u(rng);
  Video moving;
  for (int k = 0; k < 6; ++k) {
    Tensor<float> f(1, 1, 32, 32);
    for (Index y = 0; y < 32; ++y)
      for (Index x = 0; x < 32; ++x) {
        double s = 0;
        for (int i = 0; i < 6; ++i) s += std::sin(fx[i] * static_cast<double>(x - k) + fy[i] * y + phase[i]);
        f.at(0, 0, y, x) = static_cast<float>(s / 6);
      }
    moving.push_back(std::move(f));
  }
  const double shift = ofm(moving, flow);
  const bool ok = oracle_worst <= 1e-10 && still_fmse == 0.0 && still_ofm == 0.0 && std::abs(shift - 1.0) <= 0.15 &&
                  f_mse(constant_video({0.0f, 2.0f})) == 4.0;
  return {ok, "F-MSE vs loops " + fmt(oracle_worst) + ", static F-MSE " + fmt(still_fmse) + " OFM " + fmt(still_ofm) +
                  ", 1 px/frame OFM " + fmt(shift) + " (" + flow.name() + ")"};
}

// ------------------------------------------------------------------ 9

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::map<std::string, std::string> frames_in(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".png") out[e.path().filename().string()] = slurp(e.path());
  return out;
}

Outcome sampler_reproducibility(const std::string& cli) {
  const fs::path root = fs::temp_directory_path() / "diffheads_acceptance";
  fs::remove_all(root);
  fs::create_directories(root);
  auto run = [&](const std::string& args) {
    const std::string cmd = "'" + cli + "' " + args + " >/dev/null 2>>'" + (root / "stderr.txt").string() + "'";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  std::ofstream(root / "synth.json") << json{{"image_size", 16}, {"min_frames", 3}, {"max_frames", 3}, {"max_aperture", 3}};
  std::ofstream(root / "train.json") << json{
      {"batch_size", 2},
      {"total_steps", 2},
      {"conditioning", {{"motion_frames", 2}, {"motion_audio_radius", 1}, {"grayscale_motion", true}}},
      {"schedule", {{"kind", "cosine"}, {"steps", 1000}}},
      {"model",
       {{"channel_widths", {4, 8}},
        {"resnet_blocks_per_level", 1},
        {"attention_heads", 1},
        {"attention_head_channels", 4},
        {"time_embed_dim", 8},
        {"image_size", 16}}},
      {"checkpoint_interval", 2}};
  const std::string q = "'";
  if (run("synth-data --config '" + (root / "synth.json").string() + "' --count 2 --seed 9 --out '" +
          (root / "corpus").string() + q) != 0 ||
      run("train --corpus '" + (root / "corpus").string() + "' --config '" + (root / "train.json").string() +
          "' --out '" + (root / "run").string() + q) != 0)
    return {false, "could not prepare a checkpoint; see " + (root / "stderr.txt").string()};

  const std::string identity = (root / "corpus" / "clip_00000" / "frame_00001.png").string();
  const std::string embeddings = (root / "corpus" / "clip_00000" / "embeddings.bin").string();
  auto sample = [&](const std::string& out, int respace) {
    return run("sample --checkpoint '" + (root / "run" / "final.ckpt").string() + "' --identity '" + identity +
               "' --embeddings '" + embeddings + "' --seed 5 --respace " + std::to_string(respace) + " --out '" +
               (root / out).string() + q);
  };
  if (sample("full", 1000) != 0 || sample("fast_a", 200) != 0 || sample("fast_b", 200) != 0)
    return {false, "sampling failed; see " + (root / "stderr.txt").string()};
  const auto a = frames_in(root / "fast_a"), b = frames_in(root / "fast_b");
  const bool identical = !a.empty() && a == b;
  const json full = json::parse(slurp(root / "full" / "manifest.json"));
  const json fast = json::parse(slurp(root / "fast_a" / "manifest.json"));
  const bool recorded = full["respaced_steps"] == 1000 && fast["respaced_steps"] == 200 &&
                        fast["resolved_config"]["sampling"]["used_steps"].size() == 200 &&
                        full["resolved_config"]["sampling"]["used_steps"].size() == 1000 && full["status"] == "ok" &&
                        fast["status"] == "ok";
  fs::remove_all(root);
  return {identical && recorded, std::string(identical ? "same seed gives byte-identical frames" : "frames differ") +
                                     ", manifests record 1000 and 200 steps: " + (recorded ? "yes" : "no")};
}

// ------------------------------------------------------------------ 7

Outcome end_to_end(const fs::path& dir) {
  const Corpus gt = Corpus::open(dir / "heldout");
  const Corpus gen = Corpus::open(dir / "samples");
  if (gt.size() == 0 || gen.size() == 0) return {false, "missing heldout or samples under " + dir.string()};
  std::vector<double> measured, envelope;
  double color_error = 0, spacing = 0, clip_r = 0;
  long pixels = 0;
  Index clips = 0;
  for (const auto& id : gen.clip_ids()) {
    const json meta = gt.meta(id).raw.at("synthetic");
    const VideoSample truth = gt.load(id);
    const auto frames = gen.load_frames(id);
    if (frames.size() != truth.frames.size()) return {false, id + ": generated frame count differs"};
    const auto env = meta.at("envelope").get<std::vector<double>>();
    const auto face = meta.at("face_color").get<std::vector<double>>();
    spacing += meta.at("palette_spacing").get<double>();
    std::vector<double> clip_measured;
    for (std::size_t k = 0; k < frames.size(); ++k) {
      const Box& box = truth.mouth_boxes[k];
      clip_measured.push_back(measured_aperture(frames[k], box));
      for (const auto& [x, y] : face_region(meta, static_cast<Index>(k), box)) {
        double d2 = 0;
        for (Index c = 0; c < 3; ++c) {
          const double d = frames[k].at(0, c, y, x) - face[static_cast<std::size_t>(c)];
          d2 += d * d;
        }
        color_error += std::sqrt(d2);
        ++pixels;
      }
    }
    clip_r += pearson(clip_measured, env);
    measured.insert(measured.end(), clip_measured.begin(), clip_measured.end());
    envelope.insert(envelope.end(), env.begin(), env.end());
    ++clips;
  }
  const double r = pearson(measured, envelope);
  const double err = color_error / static_cast<double>(pixels), limit = 0.1 * spacing / static_cast<double>(clips);
  return {r >= 0.5 && err <= limit, std::to_string(clips) + " clips: aperture/envelope Pearson " + fmt(r) +
                                        " (per-clip mean " + fmt(clip_r / static_cast<double>(clips)) +
                                        "), face color error " + fmt(err) + " vs limit " + fmt(limit)};
}

// ------------------------------------------------------------------ 10

std::string ablation_report(const fs::path& dir) {
  const fs::path a0 = dir / "ablation" / "mx0", a2 = dir / "ablation" / "mx2";
  if (!fs::exists(a0) || !fs::exists(a2)) return "not run (no ablation samples under " + dir.string() + ")";
  auto videos = [](const Corpus& c) {
    std::vector<std::pair<std::string, Video>> out;
    for (const auto& id : c.clip_ids()) out.emplace_back(id, c.load_frames(id));
    return out;
  };
  const auto gt = videos(Corpus::open(dir / "heldout"));
  const BlockMatchingFlow flow;
  const MetricsReport r0 = population_report(videos(Corpus::open(a0)), gt, flow);
  const MetricsReport r2 = population_report(videos(Corpus::open(a2)), gt, flow);
  return "|F-MSE delta| m_x=0 " + fmt(std::abs(r0.delta_f_mse)) + ", m_x=2 " + fmt(std::abs(r2.delta_f_mse)) +
         " (ground truth F-MSE " + fmt(r2.ground_truth_mean_f_mse) + "); m_x=0 further from ground truth: " +
         (std::abs(r0.delta_f_mse) > std::abs(r2.delta_f_mse) ? "yes" : "no");
}

}  // namespace

int main(int argc, char** argv) {
  std::string cli;
  fs::path e2e;
  for (int i = 1; i + 1 < argc; i += 2) {
    const std::string flag = argv[i];
    if (flag == "--cli") cli = argv[i + 1];
    else if (flag == "--e2e") e2e = argv[i + 1];
  }
  if (cli.empty()) {
    std::cerr << "usage: dh_acceptance --cli PATH [--e2e DIR]\n";
    return 2;
  }
  set_log_sink([](LogLevel, const std::string&) {});

  bool all = true;
  auto report = [&](int n, const std::string& title, const std::function<Outcome()>& check) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    all = all && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << n << " " << title << ": " << o.detail << std::endl;
  };
  report(1, "closed-form mean", closed_form_mean);
  report(2, "schedule oracle", schedule_oracle);
  report(3, "KL and likelihood oracles", kl_and_likelihood);
  report(4, "gradient check", gradient_check);
  report(5, "lip-loss degeneracy", lip_loss_degeneracy);
  report(6, "conditioning contracts", conditioning_contracts);
  if (e2e.empty()) {
    std::cout << "SKIP 7 end-to-end desk run: not evaluated (pass --e2e DIR)" << std::endl;
  } else {
    report(7, "end-to-end desk run", [&] { return end_to_end(e2e); });
  }
  report(8, "metrics", metrics_checks);
  report(9, "sampler reproducibility", [&] { return sampler_reproducibility(cli); });
  std::string ablation = "not run (pass --e2e DIR)";
  if (!e2e.empty()) {
    try {
      ablation = ablation_report(e2e);
    } catch (const std::exception& e) {
      ablation = std::string("error: ") + e.what();
    }
  }
  std::cout << "REPORT 10 motion-frame ablation (non-gating): " << ablation << std::endl;
  return all ? 0 : 1;
}
