// SPDX-License-Identifier: Apache-2.0

#pragma once

namespace lorkd {

/// Exit codes: 0 success, 1 usage, 2 validation, 3 numeric failure.
int run_cli(int argc, const char* const* argv);

}  // namespace lorkd
