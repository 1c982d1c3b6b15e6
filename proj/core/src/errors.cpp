#include "pcos/errors.hpp"

namespace pcos {

TrainingDivergedError::TrainingDivergedError(int epoch, const std::string& what)
    : Error("training diverged at epoch " + std::to_string(epoch) + ": " + what), epoch_(epoch) {}

}  // namespace pcos
