// Copyright 2026 The brt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

namespace brt {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace brt
