#include "diffheads/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace dh {

namespace {

void check_video(const Video& video, const char* what) {
  require(video.size() >= 2, std::string(what) + ": need at least 2 frames, got " + std::to_string(video.size()));
  const auto& first = video.front();
  for (std::size_t k = 0; k < video.size(); ++k) {
    require(video[k].batch == 1 && video[k].channels == first.channels && video[k].same_spatial(first),
            std::string(what) + ": frame " + std::to_string(k) + " has a different shape");
  }
}

Eigen::MatrixXd luma(const Tensor<float>& f) {
  Eigen::MatrixXd out(f.height, f.width);
  for (Index y = 0; y < f.height; ++y) {
    for (Index x = 0; x < f.width; ++x) {
      out(y, x) = f.channels == 3 ? 0.299 * f.at(0, 0, y, x) + 0.587 * f.at(0, 1, y, x) + 0.114 * f.at(0, 2, y, x)
                                  : static_cast<double>(f.at(0, 0, y, x));
    }
  }
  return out;
}

double mean(const std::vector<VideoMetrics>& v, double VideoMetrics::*field) {
  double s = 0;
  for (const auto& m : v) s += m.*field;
  return s / static_cast<double>(v.size());
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

}  // namespace

double f_mse(const Video& video) {
  check_video(video, "f_mse");
  double total = 0;
  for (std::size_t k = 1; k < video.size(); ++k) {
    total += (video[k].data.cast<double>() - video[k - 1].data.cast<double>()).squaredNorm();
  }
  const auto& f = video.front();
  return total / (static_cast<double>(f.size()) * static_cast<double>(video.size() - 1));
}

Eigen::MatrixXd BlockMatchingFlow::magnitude(const Tensor<float>& prev, const Tensor<float>& next) const {
  require(prev.same_shape(next), "block matching: frame shapes differ");
  const Eigen::MatrixXd a = luma(prev), b = luma(next);
  const Index h = a.rows(), w = a.cols();
  auto px = [&](const Eigen::MatrixXd& m, Index y, Index x) {
    return m(std::clamp<Index>(y, 0, h - 1), std::clamp<Index>(x, 0, w - 1));
  };
  // Candidate displacements, shortest first.
  std::vector<std::pair<int, int>> cands;
  for (int dy = -search_; dy <= search_; ++dy)
    for (int dx = -search_; dx <= search_; ++dx) cands.emplace_back(dy, dx);
  std::stable_sort(cands.begin(), cands.end(), [](const auto& l, const auto& r) {
    return l.first * l.first + l.second * l.second < r.first * r.first + r.second * r.second;
  });
  Eigen::MatrixXd mag(h, w);
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      double best = std::numeric_limits<double>::infinity();
      std::pair<int, int> best_d{0, 0};
      for (const auto& [dy, dx] : cands) {
        double ssd = 0;
        for (int wy = -radius_; wy <= radius_ && ssd < best; ++wy) {
          for (int wx = -radius_; wx <= radius_; ++wx) {
            const double d = px(b, y + wy + dy, x + wx + dx) - px(a, y + wy, x + wx);
            ssd += d * d;
          }
        }
        if (ssd < best) {
          best = ssd;
          best_d = {dy, dx};
        }
      }
      mag(y, x) = std::hypot(best_d.first, best_d.second);
    }
  }
  return mag;
}

double ofm(const Video& video, const FlowProvider& provider) {
  check_video(video, "ofm");
  double total = 0;
  for (std::size_t k = 1; k < video.size(); ++k) {
    Eigen::MatrixXd m;
    try {
      m = provider.magnitude(video[k - 1], video[k]);
    } catch (const std::exception& e) {
      throw RuntimeFailure("ofm: flow provider '" + provider.name() + "' failed on frame pair " + std::to_string(k - 1) +
                           "->" + std::to_string(k) + ": " + e.what());
    }
    if (m.rows() != video[k].height || m.cols() != video[k].width || !m.allFinite() || m.minCoeff() < 0) {
      throw RuntimeFailure("ofm: flow provider '" + provider.name() + "' returned an invalid field for frame pair " +
                           std::to_string(k - 1) + "->" + std::to_string(k));
    }
    total += m.mean();
  }
  return total / static_cast<double>(video.size() - 1);
}

std::unique_ptr<FlowProvider> make_flow_provider_opencv();

std::unique_ptr<FlowProvider> make_flow_provider(const std::string& name) {
  if (name == "block") return std::make_unique<BlockMatchingFlow>();
  if (name == "farneback") {
    require(farneback_available(), "flow provider 'farneback' needs a build with OpenCV");
    return make_flow_provider_opencv();
  }
  throw ValidationError("unknown flow provider '" + name + "' (expected block or farneback)");
}

MetricsReport population_report(const std::vector<std::pair<std::string, Video>>& generated,
                                const std::vector<std::pair<std::string, Video>>& ground_truth,
                                const FlowProvider& provider) {
  require(!generated.empty(), "population_report: generated set is empty");
  require(!ground_truth.empty(), "population_report: ground-truth set is empty");
  MetricsReport r;
  r.flow_provider = provider.name();
  auto measure = [&](const auto& set, std::vector<VideoMetrics>& out) {
    for (const auto& [id, video] : set) out.push_back({id, ofm(video, provider), f_mse(video)});
  };
  measure(generated, r.per_video);
  measure(ground_truth, r.ground_truth);
  r.population_mean_ofm = mean(r.per_video, &VideoMetrics::ofm);
  r.population_mean_f_mse = mean(r.per_video, &VideoMetrics::f_mse);
  r.ground_truth_mean_ofm = mean(r.ground_truth, &VideoMetrics::ofm);
  r.ground_truth_mean_f_mse = mean(r.ground_truth, &VideoMetrics::f_mse);
  r.delta_ofm = std::abs(r.population_mean_ofm - r.ground_truth_mean_ofm);
  r.delta_f_mse = std::abs(r.population_mean_f_mse - r.ground_truth_mean_f_mse);
  return r;
}

nlohmann::json to_json(const MetricsReport& r) {
  auto rows = [](const std::vector<VideoMetrics>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& m : v) a.push_back({{"clip_id", m.clip_id}, {"ofm", m.ofm}, {"f_mse", m.f_mse}});
    return a;
  };
  return {{"flow_provider", r.flow_provider},
          {"per_video", rows(r.per_video)},
          {"ground_truth", rows(r.ground_truth)},
          {"population", {{"mean_ofm", r.population_mean_ofm}, {"mean_f_mse", r.population_mean_f_mse}}},
          {"ground_truth_population", {{"mean_ofm", r.ground_truth_mean_ofm}, {"mean_f_mse", r.ground_truth_mean_f_mse}}},
          {"gt_deltas", {{"ofm", r.delta_ofm}, {"f_mse", r.delta_f_mse}}}};
}

std::string to_csv(const MetricsReport& r) {
  std::ostringstream os;
  os << std::setprecision(17) << "clip_id,ofm,f_mse\n";
  for (const auto& m : r.per_video) os << m.clip_id << ',' << m.ofm << ',' << m.f_mse << '\n';
  return os.str();
}

std::string to_svg(const MetricsReport& r) {
  const int panel_w = 240, panel_h = 220, top = 40, bottom = 40, bar_w = 60;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << 2 * panel_w << "\" height=\"" << panel_h + top + bottom
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  const struct {
    const char* title;
    double generated, truth;
  } panels[2] = {{"OFM", r.population_mean_ofm, r.ground_truth_mean_ofm},
                 {"F-MSE", r.population_mean_f_mse, r.ground_truth_mean_f_mse}};
  for (int p = 0; p < 2; ++p) {
    const int x0 = p * panel_w;
    const double top_value = std::max({panels[p].generated, panels[p].truth, 1e-12}) * 1.15;
    os << "<text x=\"" << x0 + panel_w / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">" << panels[p].title
       << "</text>\n";
    os << "<line x1=\"" << x0 + 30 << "\" y1=\"" << top + panel_h << "\" x2=\"" << x0 + panel_w - 20 << "\" y2=\""
       << top + panel_h << "\" stroke=\"black\"/>\n";
    const double values[2] = {panels[p].generated, panels[p].truth};
    const char* labels[2] = {"generated", "ground truth"};
    const char* colors[2] = {"#4c72b0", "#dd8452"};
    for (int b = 0; b < 2; ++b) {
      const double hgt = values[b] / top_value * panel_h;
      const double bx = x0 + 45 + b * (bar_w + 30);
      os << "<rect x=\"" << bx << "\" y=\"" << top + panel_h - hgt << "\" width=\"" << bar_w << "\" height=\"" << hgt
         << "\" fill=\"" << colors[b] << "\"/>\n";
      os << "<text x=\"" << bx + bar_w / 2.0 << "\" y=\"" << top + panel_h - hgt - 4
         << "\" text-anchor=\"middle\">" << fmt(values[b]) << "</text>\n";
      os << "<text x=\"" << bx + bar_w / 2.0 << "\" y=\"" << top + panel_h + 16 << "\" text-anchor=\"middle\">"
         << labels[b] << "</text>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace dh
