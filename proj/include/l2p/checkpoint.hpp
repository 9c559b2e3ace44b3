#pragma once

#include <string>
#include <vector>

#include "l2p/tape.hpp"

namespace l2p {

/// Named-array JSON snapshot of parameter values (gradients are not saved).
void save_checkpoint(const std::vector<Parameter*>& params, const std::string& path);

/// Restores values by name; the file must cover exactly the given parameter
/// set with matching shapes and finite entries.
void load_checkpoint(const std::vector<Parameter*>& params, const std::string& path);

}  // namespace l2p
