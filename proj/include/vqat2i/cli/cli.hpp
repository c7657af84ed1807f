#pragma once

namespace vqat2i::cli {

/// Entry point behind main(). Exit codes: 0 success, 1 validation error,
/// 2 runtime failure.
int run(int argc, const char* const* argv);

}  // namespace vqat2i::cli
