#include "diffheads/metrics.hpp"

#ifdef DIFFHEADS_HAVE_OPENCV
#include <opencv2/core.hpp>
#include <opencv2/video/tracking.hpp>
#endif

namespace dh {

#ifdef DIFFHEADS_HAVE_OPENCV

namespace {

cv::Mat to_gray8(const Tensor<float>& f) {
  cv::Mat m(static_cast<int>(f.height), static_cast<int>(f.width), CV_8UC1);
  for (Index y = 0; y < f.height; ++y) {
    for (Index x = 0; x < f.width; ++x) {
      const double v = f.channels == 3 ? 0.299 * f.at(0, 0, y, x) + 0.587 * f.at(0, 1, y, x) + 0.114 * f.at(0, 2, y, x)
                                       : static_cast<double>(f.at(0, 0, y, x));
      m.at<std::uint8_t>(static_cast<int>(y), static_cast<int>(x)) = cv::saturate_cast<std::uint8_t>((v + 1.0) * 127.5);
    }
  }
  return m;
}

class FarnebackFlow : public FlowProvider {
 public:
  std::string name() const override { return "farneback"; }
  Eigen::MatrixXd magnitude(const Tensor<float>& prev, const Tensor<float>& next) const override {
    require(prev.same_shape(next), "farneback: frame shapes differ");
    // Farneback leaves small residual flow on identical inputs.
    if (prev.data == next.data) return Eigen::MatrixXd::Zero(prev.height, prev.width);
    cv::Mat flow;
    cv::calcOpticalFlowFarneback(to_gray8(prev), to_gray8(next), flow, 0.5, 7, 5, 15, 5, 1.2, 0);
    Eigen::MatrixXd mag(prev.height, prev.width);
    for (int y = 0; y < flow.rows; ++y) {
      for (int x = 0; x < flow.cols; ++x) {
        const cv::Point2f d = flow.at<cv::Point2f>(y, x);
        mag(y, x) = std::hypot(static_cast<double>(d.x), static_cast<double>(d.y));
      }
    }
    return mag;
  }
};

}  // namespace

bool farneback_available() { return true; }
std::unique_ptr<FlowProvider> make_flow_provider_opencv() { return std::make_unique<FarnebackFlow>(); }

#else

bool farneback_available() { return false; }
std::unique_ptr<FlowProvider> make_flow_provider_opencv() { return nullptr; }

#endif

}  // namespace dh
