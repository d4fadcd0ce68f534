#include "octvae/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "octvae/rng.hpp"

namespace octvae {

std::string GradCheckReport::failures() const {
    std::string out;
    for (const auto& b : blocks) {
        if (b.passed) continue;
        if (!out.empty()) out += ", ";
        out += b.name;
    }
    return out;
}

namespace {

// Candidate order: the largest-magnitude entry first, then a seeded shuffle.
std::vector<std::size_t> probe_order(std::span<const double> analytic, std::size_t limit, Rng& rng) {
    const std::size_t n = analytic.size();
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    if (limit == 0 || limit >= n) return all;
    const auto largest = static_cast<std::size_t>(
        std::distance(analytic.begin(), std::max_element(analytic.begin(), analytic.end(),
                                                         [](double a, double b) { return std::abs(a) < std::abs(b); })));
    std::swap(all[0], all[largest]);
    for (std::size_t i = 1; i + 1 < n; ++i) std::swap(all[i], all[i + rng.uniform_index(n - i)]);
    return all;
}

} // namespace

GradCheckReport grad_check(const std::function<Tensor<double>()>& loss_fn,
                           const std::vector<NamedTensor<double>>& params, const GradCheckOptions& options) {
    auto evaluate = [&] {
        NoGradGuard guard;
        return loss_fn().item();
    };
    auto traced = [&](std::uint64_t& fingerprint) {
        BranchTrace trace;
        const double v = evaluate();
        fingerprint = trace.fingerprint();
        return v;
    };
    BranchRecord base;
    double first = 0.0;
    {
        BranchTrace trace;
        first = evaluate();
        base = trace.record();
    }
    const std::uint64_t base_branches = base.fingerprint;
    auto frozen = [&] {
        BranchTrace trace(base);
        return evaluate();
    };
    const double second = evaluate();
    if (first != second)
        throw ContractViolation("grad_check: loss function is not deterministic (" + std::to_string(first) +
                                " vs " + std::to_string(second) + "); freeze its noise");
    if (options.kinks == KinkPolicy::Freeze && frozen() != first)
        throw GraphError("grad_check: replaying the recorded branches does not reproduce the loss");

    for (const auto& p : params) {
        auto t = p.tensor;
        t.zero_grad();
    }
    loss_fn().backward();
    std::vector<std::vector<double>> analytic;
    for (const auto& p : params) analytic.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
    for (const auto& p : params) {
        auto t = p.tensor;
        t.zero_grad();
    }

    Rng rng(options.seed);
    GradCheckReport report;
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto tensor = params[k].tensor;
        auto values = tensor.mutable_values();
        GradCheckBlock block;
        block.name = params[k].name;
        const std::size_t wanted = options.max_entries_per_block == 0 ? values.size() : options.max_entries_per_block;
        for (std::size_t i : probe_order(analytic[k], options.max_entries_per_block, rng)) {
            if (block.entries_checked == wanted) break;
            const double original = values[i];
            std::uint64_t plus_branches = 0, minus_branches = 0;
            values[i] = original + options.fd_step;
            const double plus = traced(plus_branches);
            values[i] = original - options.fd_step;
            const double minus = traced(minus_branches);
            double numeric = (plus - minus) / (2.0 * options.fd_step);
            if (plus_branches != base_branches || minus_branches != base_branches) {
                if (options.kinks == KinkPolicy::Skip) {
                    values[i] = original;
                    ++block.entries_skipped;
                    continue;
                }
                if (options.kinks == KinkPolicy::Freeze) {
                    values[i] = original + options.fd_step;
                    const double frozen_plus = frozen();
                    values[i] = original - options.fd_step;
                    const double frozen_minus = frozen();
                    numeric = (frozen_plus - frozen_minus) / (2.0 * options.fd_step);
                    ++block.entries_frozen;
                }
            }
            values[i] = original;
            const double a = analytic[k][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), options.abs_floor});
            const double rel = std::abs(a - numeric) / denom;
            ++block.entries_checked;
            if (rel > block.max_relative_error || !std::isfinite(rel)) {
                block.max_relative_error = std::isfinite(rel) ? rel : INFINITY;
                block.worst_index = i;
                block.analytic_at_worst = a;
                block.numeric_at_worst = numeric;
            }
        }
        block.passed = block.entries_checked > 0 && block.max_relative_error < options.tolerance;
        report.passed = report.passed && block.passed;
        report.blocks.push_back(std::move(block));
    }
    return report;
}

} // namespace octvae
