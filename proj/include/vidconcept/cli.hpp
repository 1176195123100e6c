#pragma once

#include <string>
#include <vector>

namespace vidconcept::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitModuleError = 1;
inline constexpr int kExitUsage = 2;

/// Environment variable naming the root for relative experiment paths.
inline constexpr const char* kRootEnv = "VIDCONCEPT_ROOT";

/// Dispatches `synth-data | train | eval | export`. args[0] is the program.
int run(const std::vector<std::string>& args);

}  // namespace vidconcept::cli
