#pragma once

namespace iclebm {

const char* version_string();

}  // namespace iclebm
