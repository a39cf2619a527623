#pragma once

#include "diffheads/core.hpp"
#include "json.hpp"

#include <memory>
#include <string>
#include <vector>

namespace dh {

// Single-item frames in [-1, 1], in temporal order.
using Video = std::vector<Tensor<float>>;

// Mean squared difference between consecutive frames over pixels and
// channels, averaged over the n-1 pairs.
double f_mse(const Video& video);

class FlowProvider {
 public:
  virtual ~FlowProvider() = default;
  virtual std::string name() const = 0;
  // Per-pixel flow magnitude (height x width), nonnegative.
  virtual Eigen::MatrixXd magnitude(const Tensor<float>& prev, const Tensor<float>& next) const = 0;
};

// Integer block matching on luma: for every pixel, the displacement within
// +-search that minimises the sum of squared differences over a
// (2*radius+1)^2 window, borders replicated. Ties go to the shorter
// displacement, so identical frames give exactly zero flow.
class BlockMatchingFlow : public FlowProvider {
 public:
  explicit BlockMatchingFlow(int radius = 2, int search = 3) : radius_(radius), search_(search) {}
  std::string name() const override { return "block"; }
  Eigen::MatrixXd magnitude(const Tensor<float>& prev, const Tensor<float>& next) const override;

 private:
  int radius_, search_;
};

// Farneback dense flow with pyr_scale 0.5, levels 7, winsize 5,
// iterations 15, poly_n 5, poly_sigma 1.2. Only available in OpenCV builds.
bool farneback_available();

// "block" or "farneback".
std::unique_ptr<FlowProvider> make_flow_provider(const std::string& name);

// Mean flow magnitude over pixels and consecutive pairs.
double ofm(const Video& video, const FlowProvider& provider);

struct VideoMetrics {
  std::string clip_id;
  double ofm = 0;
  double f_mse = 0;
};

struct MetricsReport {
  std::string flow_provider;
  std::vector<VideoMetrics> per_video;
  std::vector<VideoMetrics> ground_truth;
  double population_mean_ofm = 0;
  double population_mean_f_mse = 0;
  double ground_truth_mean_ofm = 0;
  double ground_truth_mean_f_mse = 0;
  double delta_ofm = 0;    // |generated - ground truth| of the population means
  double delta_f_mse = 0;
};

MetricsReport population_report(const std::vector<std::pair<std::string, Video>>& generated,
                                const std::vector<std::pair<std::string, Video>>& ground_truth,
                                const FlowProvider& provider);

nlohmann::json to_json(const MetricsReport& report);
// Header plus one row per generated video.
std::string to_csv(const MetricsReport& report);
// Bar chart of generated vs ground-truth population means, one panel per metric.
std::string to_svg(const MetricsReport& report);

}  // namespace dh
