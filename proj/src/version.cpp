#include "iclebm/version.hpp"

namespace iclebm {

const char* version_string() { return "0.1.0"; }

}  // namespace iclebm
