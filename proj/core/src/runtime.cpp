#include "pcos/runtime.hpp"

#include <opencv2/core.hpp>

namespace pcos {

void set_deterministic(bool enabled) { cv::setNumThreads(enabled ? 1 : -1); }

}  // namespace pcos
