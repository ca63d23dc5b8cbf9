// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace weightlens {

inline constexpr const char* kToolVersion = "0.1.0";

// Bumped whenever any report field is added, removed or renamed.
inline constexpr int kReportSchemaVersion = 1;

}  // namespace weightlens
