#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace tetra {

// Error taxonomy. The CLI maps ConfigError/InputError/IoError to exit code 1
// and NumericError to exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct UsageError : std::logic_error {
    using std::logic_error::logic_error;
};

/// Operator thread cap. Resolution order: set_max_threads() override,
/// then the TETRA_THREADS environment variable, then the OpenMP default.
int max_threads();
void set_max_threads(int n);

/// Ordered reductions. The --deterministic CLI flag maps here and is on by
/// default; reductions always combine fixed chunks in index order, so results
/// do not depend on the thread count.
void set_deterministic(bool on);
bool deterministic();

/// Sum of a contiguous array with the fixed-chunk ordered combine.
double chunked_sum(const double* p, std::int64_t n);

/// Dot product with the same chunking contract.
double chunked_dot(const double* a, const double* b, std::int64_t n);

}  // namespace tetra
