#pragma once

namespace pcos {

/// Pins library thread pools to one thread so results do not depend on
/// scheduling. Off restores the libraries' defaults.
void set_deterministic(bool enabled);

}  // namespace pcos
