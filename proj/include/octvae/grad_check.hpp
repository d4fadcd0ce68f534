#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "octvae/tensor.hpp"

namespace octvae {

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

/// What to do with an entry whose stencil changes a ReLU sign or max-pool
/// winner (see BranchTrace); differences across a kink do not estimate the gradient.
enum class KinkPolicy {
    Ignore, // use the plain difference anyway
    Skip,   // drop the entry and probe another one
    Freeze, // difference again with the branches recorded at the base point held fixed
};

struct GradCheckOptions {
    double fd_step = 1e-4;
    double tolerance = 1e-3;
    // Entries probed per block; 0 probes every entry. Subsets always include
    // the entry with the largest analytic magnitude.
    std::size_t max_entries_per_block = 0;
    std::uint64_t seed = 0;
    // Denominator floor for the relative error, so exact zeros compare absolutely.
    double abs_floor = 1e-8;
    KinkPolicy kinks = KinkPolicy::Freeze;
};

struct GradCheckBlock {
    std::string name;
    std::size_t entries_checked = 0;
    // Entries whose stencil crossed a kink: dropped (Skip) or differenced on frozen branches (Freeze).
    std::size_t entries_skipped = 0;
    std::size_t entries_frozen = 0;
    double max_relative_error = 0.0;
    std::size_t worst_index = 0;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
    bool passed = true;
};

struct GradCheckReport {
    std::vector<GradCheckBlock> blocks;
    bool passed = true;

    /// Names of the blocks that failed, comma separated.
    std::string failures() const;
};

/// Compares backward() against central differences (f(p+h) - f(p-h)) / 2h.
///
/// `loss_fn` must rebuild the graph on every call and be deterministic; it is
/// evaluated twice up front and a mismatch throws ContractViolation.
/// Relative error per entry is |a - n| / max(|a|, |n|, abs_floor). Under
/// KinkPolicy::Skip a block in which every entry straddles a kink fails with
/// no entries checked.
GradCheckReport grad_check(const std::function<Tensor<double>()>& loss_fn,
                           const std::vector<NamedTensor<double>>& params, const GradCheckOptions& options = {});

} // namespace octvae
