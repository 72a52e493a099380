#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pfi/force.hpp"

namespace pfi {

inline constexpr const char* kCliVersion = "0.1.0";

/// Substream seed derivation matching Rng::substream's mix64 chain, so
/// command-level seeds and in-module named streams hang off one root seed.
std::uint64_t derive_seed(std::uint64_t base, const std::string& name, std::uint64_t index = 0);

/// Force checkpoint: JSON with the model kind, degradation rate, provenance
/// seed and dataset content hash; linear models store omega, net models
/// store dims plus the flat parameter vector. Loading reproduces the model
/// bit for bit.
void save_force(const ForceModel& force, const std::string& path, std::uint64_t seed,
                std::uint64_t dataset_hash);
ForceModel load_force(const std::string& path, std::uint64_t* dataset_hash = nullptr,
                      std::uint64_t* seed = nullptr);

/// Command-line entry point; args excludes the program name. Every command
/// writes its outputs plus a manifest (command, version, resolved config)
/// into --out; `rerun --manifest <file>` replays a manifest verbatim.
/// Returns the process exit code: 0 success, 1 usage/config/data errors,
/// 2 aborted optimization, 3 audit-flag thresholds exceeded.
int run_cli(const std::vector<std::string>& args);

}  // namespace pfi
