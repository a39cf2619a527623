// Command-line front end: synth-data | train | sample | eval.
#include "diffheads/data.hpp"
#include "diffheads/log.hpp"
#include "diffheads/metrics.hpp"
#include "diffheads/sampler.hpp"
#include "diffheads/trainer.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>
#include <thread>

#ifndef DIFFHEADS_VERSION
#define DIFFHEADS_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string now_iso() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

fs::path output_root() {
  const char* env = std::getenv("DIFFHEADS_OUTPUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw dh::ValidationError("cannot open config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw dh::ValidationError("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw dh::RuntimeFailure("cannot write " + path.string());
}

void make_dirs(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw dh::RuntimeFailure("cannot create " + dir.string() + ": " + ec.message());
}

// Written before any work starts and rewritten when the run ends.
class Manifest {
 public:
  Manifest(fs::path path, std::string command, std::vector<std::string> argv)
      : path_(std::move(path)) {
    doc_ = {{"command", std::move(command)},
            {"argv", std::move(argv)},
            {"config_path", nullptr},
            {"resolved_config", nullptr},
            {"seed", nullptr},
            {"threads", 1},
            {"artifacts", json::object()},
            {"started_at", now_iso()},
            {"finished_at", nullptr},
            {"status", "running"},
            {"version", DIFFHEADS_VERSION}};
  }
  json& doc() { return doc_; }
  void write() const {
    make_dirs(path_.parent_path());
    write_text(path_, doc_.dump(2) + "\n");
  }
  void finish(const std::string& status) {
    doc_["finished_at"] = now_iso();
    doc_["status"] = status;
    write();
  }

 private:
  fs::path path_;
  json doc_;
};

struct Common {
  int threads = 1;
  std::vector<std::string> argv;
};

// ---------------------------------------------------------------- synth-data

struct SynthArgs {
  std::string config, out;
  long count = 50;
  std::uint64_t seed = 0;
};

void cmd_synth(const SynthArgs& a, const Common& common) {
  const fs::path out = a.out.empty() ? output_root() / "corpus" : fs::path(a.out);
  dh::SyntheticConfig cfg;
  if (!a.config.empty()) cfg = dh::synthetic_config_from_json(read_json_file(a.config));
  cfg.validate();
  dh::require(a.count >= 1, "--count must be positive");
  Manifest m(out / "manifest.json", "synth-data", common.argv);
  m.doc()["config_path"] = a.config.empty() ? json(nullptr) : json(a.config);
  m.doc()["resolved_config"] = dh::to_json(cfg);
  m.doc()["seed"] = a.seed;
  m.doc()["threads"] = common.threads;
  m.doc()["artifacts"] = {{"corpus", out.string()}, {"clips", a.count}};
  m.write();
  dh::make_synthetic_corpus(cfg, a.seed, a.count, out, common.threads);
  m.finish("ok");
  std::cout << "wrote " << a.count << " clips to " << out.string() << "\n";
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string corpus, config, out, resume;
  long steps = 0;
  std::optional<std::uint64_t> seed;
};

std::string step_name(long step) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "step_%08ld.ckpt", step);
  return buf;
}

void cmd_train(const TrainArgs& a, const Common& common) {
  const fs::path out = a.out.empty() ? output_root() / "train" : fs::path(a.out);
  std::optional<dh::Checkpoint<float>> resume;
  if (!a.resume.empty()) resume = dh::load_checkpoint<float>(a.resume);

  dh::TrainConfig cfg;
  if (!a.config.empty()) {
    cfg = dh::train_config_from_json(read_json_file(a.config));
  } else if (resume) {
    cfg = resume->meta.train;
  }
  if (a.steps > 0) cfg.total_steps = a.steps;
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();
  for (const auto& w : cfg.weights.warnings()) dh::log_warning(w);

  Manifest m(out / "manifest.json", "train", common.argv);
  m.doc()["config_path"] = a.config.empty() ? json(nullptr) : json(a.config);
  m.doc()["resolved_config"] = dh::to_json(cfg);
  m.doc()["seed"] = cfg.seed;
  m.doc()["corpus"] = a.corpus;
  m.doc()["resume"] = a.resume.empty() ? json(nullptr) : json(a.resume);
  m.doc()["artifacts"] = {{"loss_log", (out / "loss_log.jsonl").string()},
                          {"checkpoints", (out / "checkpoints").string()},
                          {"final_checkpoint", (out / "final.ckpt").string()}};
  m.write();

  const dh::Corpus corpus = dh::Corpus::open(a.corpus);
  std::vector<dh::CorpusError> errors;
  const std::vector<dh::VideoSample> clips = corpus.load_all(&errors);
  if (!errors.empty()) {
    throw dh::ValidationError("corpus " + a.corpus + " has " + std::to_string(errors.size()) +
                              " invalid clip(s); first: " + errors.front().message);
  }
  dh::require(!clips.empty(), "corpus " + a.corpus + " has no clips");
  const std::string encoder_id = corpus.meta(clips.front().clip_id).encoder;

  dh::Trainer<float> trainer(cfg, clips);
  if (resume) {
    dh::require(json(resume->meta.train.model) == json(cfg.model),
                "--resume checkpoint was trained with a different model configuration");
    dh::restore_trainer(trainer, *resume);
    dh::require(trainer.step() < cfg.total_steps, "checkpoint is already at step " + std::to_string(trainer.step()) +
                                                      " >= total_steps " + std::to_string(cfg.total_steps));
  }
  make_dirs(out / "checkpoints");
  std::ofstream log(out / "loss_log.jsonl", resume ? std::ios::app : std::ios::trunc);
  if (!log) throw dh::RuntimeFailure("cannot write loss log in " + out.string());

  const auto t0 = std::chrono::steady_clock::now();
  while (trainer.step() < cfg.total_steps) {
    const dh::LossParts parts = trainer.training_step();
    const long step = trainer.step();
    if (step % cfg.log_interval == 0 || step == cfg.total_steps) {
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log << json{{"step", step},
                  {"simple", parts.simple},
                  {"vlb", parts.vlb},
                  {"lip_sync", parts.lip_sync},
                  {"total", parts.total},
                  {"wall_time", wall}}
                 .dump()
          << "\n"
          << std::flush;
    }
    if (step % cfg.checkpoint_interval == 0 || step == cfg.total_steps) {
      dh::save_checkpoint(out / "checkpoints" / step_name(step), trainer, encoder_id);
    }
  }
  dh::save_checkpoint(out / "final.ckpt", trainer, encoder_id);
  m.doc()["final_step"] = trainer.step();
  m.finish("ok");
  std::cout << "trained to step " << trainer.step() << "; checkpoint " << (out / "final.ckpt").string() << "\n";
}

// ---------------------------------------------------------------- sample

struct SampleArgs {
  std::string checkpoint, out, identity, embeddings, audio, corpus, encoder, motion, mux;
  int respace = 0;
  int identity_index = 0;
  int batch = 16;
  long limit = 0;
  std::uint64_t seed = 0;
  bool live_weights = false;
};

struct SampleJob {
  std::string clip_id;
  dh::Tensor<float> identity;
  std::vector<Eigen::VectorXf> embeddings;
  fs::path source;  // source clip directory, empty for single-file inputs
};

void write_generated_clip(const fs::path& dir, const SampleJob& job, const std::vector<dh::Tensor<float>>& frames,
                          const json& provenance) {
  make_dirs(dir);
  char name[32];
  for (std::size_t k = 0; k < frames.size(); ++k) {
    std::snprintf(name, sizeof(name), "frame_%05zu.png", k + 1);
    dh::write_png(dir / name, frames[k]);
  }
  dh::write_embeddings(dir / "embeddings.bin", job.embeddings);
  json meta;
  if (!job.source.empty()) {
    for (const char* f : {"boxes.txt", "audio.raw"}) {
      if (fs::exists(job.source / f)) fs::copy_file(job.source / f, dir / f, fs::copy_options::overwrite_existing);
    }
    std::ifstream in(job.source / "meta.json");
    meta = json::parse(in);
  } else {
    meta = {{"clip_id", job.clip_id}, {"fps", 25}, {"sample_rate", 16000}, {"channels", 3}};
  }
  meta["n_frames"] = frames.size();
  meta["image_size"] = frames.front().height;
  meta["embed_dim"] = job.embeddings.front().size();
  meta["generated"] = provenance;
  write_text(dir / "meta.json", meta.dump(2) + "\n");
}

void cmd_sample(const SampleArgs& a, const Common& common) {
  const fs::path out = a.out.empty() ? output_root() / "samples" : fs::path(a.out);
  const dh::Checkpoint<float> ck = dh::load_checkpoint<float>(a.checkpoint);
  const dh::TrainConfig& trained = ck.meta.train;

  dh::SamplerConfig sc;
  sc.seed = a.seed;
  sc.conditioning = trained.conditioning;
  if (!a.motion.empty()) {
    dh::require(a.motion == "gray" || a.motion == "rgb", "--motion must be gray or rgb");
    sc.conditioning.grayscale_motion = a.motion == "gray";
  }
  dh::check_sampling_compatible(trained, sc.conditioning);
  const dh::NoiseSchedule base = trained.schedule.build();
  sc.respaced_steps = a.respace > 0 ? a.respace : base.steps();
  dh::require(sc.respaced_steps <= base.steps(), "--respace " + std::to_string(sc.respaced_steps) +
                                                     " exceeds the trained schedule length " + std::to_string(base.steps()));
  const dh::RespacedSchedule respaced = dh::respace(base, sc.respaced_steps);

  const int sources = !a.corpus.empty() + !a.embeddings.empty() + !a.audio.empty();
  dh::require(sources == 1, "give exactly one of --corpus, --embeddings or --audio");
  std::vector<SampleJob> jobs;
  if (!a.corpus.empty()) {
    const dh::Corpus corpus = dh::Corpus::open(a.corpus);
    for (const auto& id : corpus.clip_ids()) {
      if (a.limit > 0 && static_cast<long>(jobs.size()) >= a.limit) break;
      const dh::VideoSample v = corpus.load(id);
      dh::require(a.identity_index >= 0 && a.identity_index < v.size(),
                  id + ": --identity-index out of range");
      dh::require(corpus.meta(id).encoder == ck.meta.encoder_id,
                  id + ": corpus encoder '" + corpus.meta(id).encoder + "' differs from the checkpoint's '" +
                      ck.meta.encoder_id + "'");
      jobs.push_back({id, v.frames[static_cast<std::size_t>(a.identity_index)], v.audio_embeddings, a.corpus / fs::path(id)});
    }
    dh::require(!jobs.empty(), "corpus " + a.corpus + " has no clips");
  } else {
    dh::require(!a.identity.empty(), "--identity is required with --embeddings or --audio");
    SampleJob job;
    job.clip_id = "sample";
    job.identity = dh::read_png(a.identity);
    if (!a.embeddings.empty()) {
      job.embeddings = dh::read_embeddings(a.embeddings);
    } else {
      const std::string enc_id = a.encoder.empty() ? ck.meta.encoder_id : a.encoder;
      const auto encoder = dh::make_encoder(enc_id);
      const Eigen::VectorXf wave = dh::read_waveform(a.audio);
      const long spf = 16000 / 25;
      const long n = static_cast<long>(wave.size()) / spf;
      dh::require(n >= 1, "--audio is shorter than one frame (640 samples at 16 kHz, 25 fps)");
      job.embeddings = dh::encode_chunks(*encoder, dh::chunk_audio(wave, n));
    }
    jobs.push_back(std::move(job));
  }

  Manifest m(out / "manifest.json", "sample", common.argv);
  m.doc()["config_path"] = nullptr;
  m.doc()["resolved_config"] = {{"train_config", dh::to_json(trained)},
                                {"sampling",
                                 {{"respaced_steps", sc.respaced_steps},
                                  {"base_steps", base.steps()},
                                  {"used_steps", respaced.used_steps},
                                  {"clip_x0", sc.clip_x0},
                                  {"conditioning", dh::to_json(sc.conditioning)},
                                  {"ema_weights", !a.live_weights},
                                  {"identity_index", a.identity_index}}}};
  m.doc()["seed"] = a.seed;
  m.doc()["threads"] = common.threads;
  m.doc()["checkpoint"] = a.checkpoint;
  m.doc()["respaced_steps"] = sc.respaced_steps;
  json clips = json::array();
  for (const auto& j : jobs) clips.push_back((jobs.size() == 1 && a.corpus.empty() ? out : out / j.clip_id).string());
  m.doc()["artifacts"] = {{"clips", clips}};
  m.write();

  const dh::Denoiser<float> model = dh::model_from_checkpoint(ck, !a.live_weights);
  dh::require(a.batch >= 1, "--batch must be positive");
  // Videos of equal length are generated in lockstep groups; each video keeps
  // its own stream index, so grouping and threading do not change results.
  std::vector<std::vector<dh::Tensor<float>>> results(jobs.size());
  std::vector<std::pair<std::size_t, std::size_t>> groups;
  for (std::size_t i = 0; i < jobs.size();) {
    std::size_t j = i + 1;
    while (j < jobs.size() && j - i < static_cast<std::size_t>(a.batch) &&
           jobs[j].embeddings.size() == jobs[i].embeddings.size()) {
      ++j;
    }
    groups.emplace_back(i, j);
    i = j;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t g = next++; g < groups.size(); g = next++) {
      try {
        const auto [lo, hi] = groups[g];
        std::vector<dh::Tensor<float>> ids;
        std::vector<std::vector<Eigen::VectorXf>> embs;
        for (std::size_t i = lo; i < hi; ++i) {
          ids.push_back(jobs[i].identity);
          embs.push_back(jobs[i].embeddings);
        }
        dh::SamplerConfig local = sc;
        local.first_stream = lo;
        auto videos = dh::sample_videos<float>(model, base, ids, embs, local);
        for (std::size_t i = lo; i < hi; ++i) results[i] = std::move(videos[i - lo]);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = groups.size();
      }
    }
  };
  const int n_threads = std::max(1, std::min<int>(common.threads, static_cast<int>(groups.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const fs::path dir = jobs.size() == 1 && a.corpus.empty() ? out : out / jobs[i].clip_id;
    const json provenance = {{"checkpoint", a.checkpoint},
                             {"seed", a.seed},
                             {"stream", i},
                             {"respaced_steps", sc.respaced_steps},
                             {"identity_index", a.identity_index}};
    write_generated_clip(dir, jobs[i], results[i], provenance);
  }

  if (!a.mux.empty()) {
    // Frames on disk are the canonical output; muxing is best effort.
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      const fs::path dir = jobs.size() == 1 && a.corpus.empty() ? out : out / jobs[i].clip_id;
      const std::string cmd = "ffmpeg -loglevel error -y -framerate 25 -i '" + (dir / "frame_%05d.png").string() +
                              "' -c:v libx264 -pix_fmt yuv420p '" + (dir / a.mux).string() + "'";
      if (std::system(cmd.c_str()) != 0) dh::log_warning("video muxing failed for " + dir.string() + "; frames are kept");
    }
  }
  m.finish("ok");
  std::cout << "sampled " << jobs.size() << " video(s) with " << sc.respaced_steps << " reverse steps per frame into "
            << out.string() << "\n";
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string generated, ground_truth, out, flow = "block";
};

std::vector<std::pair<std::string, dh::Video>> load_videos(const std::string& root) {
  const dh::Corpus corpus = dh::Corpus::open(root);
  std::vector<std::pair<std::string, dh::Video>> out;
  for (const auto& id : corpus.clip_ids()) out.emplace_back(id, corpus.load_frames(id));
  return out;
}

void cmd_eval(const EvalArgs& a, const Common& common) {
  const fs::path out = a.out.empty() ? output_root() / "eval" : fs::path(a.out);
  const auto provider = dh::make_flow_provider(a.flow);
  Manifest m(out / "manifest.json", "eval", common.argv);
  m.doc()["resolved_config"] = {{"generated", a.generated}, {"ground_truth", a.ground_truth}, {"flow_provider", a.flow}};
  m.doc()["artifacts"] = {{"report_json", (out / "report.json").string()},
                          {"report_csv", (out / "report.csv").string()},
                          {"plot", (out / "plot.svg").string()}};
  m.write();
  const auto generated = load_videos(a.generated);
  const auto truth = load_videos(a.ground_truth);
  const dh::MetricsReport report = dh::population_report(generated, truth, *provider);
  write_text(out / "report.json", dh::to_json(report).dump(2) + "\n");
  write_text(out / "report.csv", dh::to_csv(report));
  write_text(out / "plot.svg", dh::to_svg(report));
  m.finish("ok");
  std::cout << "OFM " << report.population_mean_ofm << " (ground truth " << report.ground_truth_mean_ofm
            << "), F-MSE " << report.population_mean_f_mse << " (ground truth " << report.ground_truth_mean_f_mse
            << ")\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Audio-driven talking-head diffusion: corpus synthesis, training, sampling, evaluation"};
  app.set_version_flag("--version", DIFFHEADS_VERSION);
  app.require_subcommand(1);
  Common common;
  for (int i = 0; i < argc; ++i) common.argv.emplace_back(argv[i]);
  app.add_option("--threads", common.threads, "Upper bound on worker threads")->check(CLI::PositiveNumber);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth-data", "Generate a synthetic talking-blob corpus");
  s->add_option("--config", synth.config, "Synthetic corpus config (JSON)");
  s->add_option("--out", synth.out, "Corpus directory");
  s->add_option("--count", synth.count, "Number of clips");
  s->add_option("--seed", synth.seed, "Generator seed");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train the denoiser on a corpus");
  t->add_option("--corpus", train.corpus, "Corpus directory")->required();
  t->add_option("--config", train.config, "Training config (JSON)");
  t->add_option("--steps", train.steps, "Override total_steps");
  t->add_option("--out", train.out, "Run directory");
  t->add_option("--resume", train.resume, "Checkpoint to continue from");
  t->add_option("--seed", train.seed, "Override the config seed");

  SampleArgs sample;
  auto* p = app.add_subcommand("sample", "Generate videos from a checkpoint");
  p->add_option("--checkpoint", sample.checkpoint, "Checkpoint file")->required();
  p->add_option("--out", sample.out, "Output directory");
  p->add_option("--corpus", sample.corpus, "Generate one video per corpus clip (identity frame + embeddings)");
  p->add_option("--identity", sample.identity, "Identity frame (PNG)");
  p->add_option("--embeddings", sample.embeddings, "Precomputed embeddings file");
  p->add_option("--audio", sample.audio, "16 kHz mono 16-bit little-endian waveform");
  p->add_option("--encoder", sample.encoder, "Audio encoder id for --audio (default: the checkpoint's)");
  p->add_option("--respace", sample.respace, "Reverse steps per frame (default: the trained schedule length)");
  p->add_option("--seed", sample.seed, "Sampling seed");
  p->add_option("--motion", sample.motion, "Motion frame mode: gray or rgb (must match training)");
  p->add_option("--identity-index", sample.identity_index, "Corpus frame used as identity (0-based)");
  p->add_option("--batch", sample.batch, "Videos generated in lockstep");
  p->add_option("--limit", sample.limit, "Use at most this many corpus clips");
  p->add_flag("--live-weights", sample.live_weights, "Use live instead of EMA weights");
  p->add_option("--mux", sample.mux, "Also encode each video to this file name with ffmpeg, if available");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "OFM / F-MSE population report against ground truth");
  e->add_option("--generated", eval.generated, "Generated corpus directory")->required();
  e->add_option("--ground-truth", eval.ground_truth, "Ground-truth corpus directory")->required();
  e->add_option("--out", eval.out, "Report directory");
  e->add_option("--flow", eval.flow, "Flow provider: block or farneback");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*s) cmd_synth(synth, common);
    if (*t) cmd_train(train, common);
    if (*p) cmd_sample(sample, common);
    if (*e) cmd_eval(eval, common);
  } catch (const dh::ValidationError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  } catch (const dh::RuntimeFailure& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 3;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 3;
  }
  return 0;
}
