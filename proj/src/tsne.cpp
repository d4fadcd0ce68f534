#include <algorithm>
#include <cmath>
#include <numeric>

#include "octvae/error.hpp"
#include "octvae/latent_tools.hpp"
#include "octvae/log.hpp"
#include "octvae/rng.hpp"
#include "octvae/text.hpp"

namespace octvae {

void check_perplexity(double perplexity, std::size_t n) {
    if (!(perplexity > 0.0)) throw ConfigError("perplexity must be positive");
    if (!(3.0 * perplexity < double(n)))
        throw ConfigError("perplexity " + format_double(perplexity) + " needs more than " +
                          format_double(3.0 * perplexity) + " points, got " + std::to_string(n) +
                          "; use perplexity < " + format_double(double(n) / 3.0));
}

namespace {

struct RowSearch {
    double beta = 1.0;
    double entropy = 0.0; // nats
    bool converged = false;
};

// Entropy (nats) of the row distribution p_j ~ exp(-beta * shifted_j); fills `p` normalized.
double row_entropy(std::span<const double> shifted, std::size_t self, double beta, std::span<double> p) {
    double sum = 0.0, weighted = 0.0;
    for (std::size_t j = 0; j < shifted.size(); ++j) {
        p[j] = j == self ? 0.0 : std::exp(-beta * shifted[j]);
        sum += p[j];
    }
    for (std::size_t j = 0; j < shifted.size(); ++j) {
        weighted += shifted[j] * p[j];
        p[j] /= sum;
    }
    return std::log(sum) + beta * weighted / sum;
}

RowSearch search_row(std::span<const double> shifted, std::size_t self, double target, double tolerance,
                     std::size_t max_steps, std::span<double> p) {
    const std::size_t n = shifted.size();
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += j == self ? 0.0 : shifted[j];
    mean /= double(n - 1);
    RowSearch best;
    double lo = 0.0, hi = INFINITY;
    double beta = mean > 0.0 ? 1.0 / mean : 1.0;
    double best_gap = INFINITY;
    for (std::size_t step = 0; step <= max_steps; ++step) {
        const double h = row_entropy(shifted, self, beta, p);
        const double gap = std::abs(h - target);
        if (gap < best_gap) {
            best_gap = gap;
            best.beta = beta;
            best.entropy = h;
        }
        if (gap < tolerance) {
            best.converged = true;
            return best;
        }
        if (h > target) { // too flat: sharpen
            lo = beta;
            beta = std::isinf(hi) ? beta * 2.0 : std::sqrt(lo * hi);
        } else {
            hi = beta;
            beta = lo == 0.0 ? beta / 2.0 : std::sqrt(lo * hi);
        }
    }
    best.entropy = row_entropy(shifted, self, best.beta, p);
    return best;
}

} // namespace

TsneAffinities tsne_affinities(std::span<const double> points, std::size_t n, std::size_t dim,
                               const TsneConfig& config) {
    if (points.size() != n * dim) throw ContractViolation("tsne_affinities: point buffer does not match n x dim");
    check_perplexity(config.perplexity, n);
    TsneAffinities a;
    a.n = n;
    a.conditional.assign(n * n, 0.0);
    a.entropy_bits.assign(n, 0.0);
    a.beta.assign(n, 0.0);
    const double target = std::log(config.perplexity);
    const double tolerance = config.entropy_tolerance_bits * std::log(2.0);
    std::vector<char> failed(n, 0);

#pragma omp parallel for schedule(dynamic, 8)
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> shifted(n);
        const double* xi = points.data() + i * dim;
        double nearest = INFINITY;
        for (std::size_t j = 0; j < n; ++j) {
            const double* xj = points.data() + j * dim;
            double d = 0.0;
            for (std::size_t k = 0; k < dim; ++k) d += (xi[k] - xj[k]) * (xi[k] - xj[k]);
            shifted[j] = d;
            if (j != i) nearest = std::min(nearest, d);
        }
        // Shifting by the nearest distance leaves the normalized row unchanged and avoids underflow.
        for (std::size_t j = 0; j < n; ++j) shifted[j] = j == i ? 0.0 : shifted[j] - nearest;
        auto row = std::span(a.conditional).subspan(i * n, n);
        const auto r = search_row(shifted, i, target, tolerance, config.max_bisection_steps, row);
        a.beta[i] = r.beta;
        a.entropy_bits[i] = r.entropy / std::log(2.0);
        failed[i] = !r.converged;
    }
    for (std::size_t i = 0; i < n; ++i)
        if (failed[i]) {
            ++a.fallbacks;
            log_warning("t-SNE: bandwidth search for point " + std::to_string(i) + " did not converge in " +
                        std::to_string(config.max_bisection_steps) + " steps; using entropy " +
                        format_double(a.entropy_bits[i]) + " bits");
        }

    a.joint.assign(n * n, 0.0);
    const double scale = 1.0 / (2.0 * double(n));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            a.joint[i * n + j] = (a.conditional[i * n + j] + a.conditional[j * n + i]) * scale;
    return a;
}

Embedding2D tsne_2d(const LatentMatrix& latents, const TsneConfig& config) {
    const std::size_t n = latents.rows;
    if (latents.values.size() != n * latents.dim || latents.labels.size() != n || latents.ids.size() != n)
        throw ContractViolation("tsne_2d: latent matrix fields disagree in size");
    if (n > config.max_points)
        throw ContractViolation("tsne_2d: exact t-SNE is limited to " + std::to_string(config.max_points) +
                                " points, got " + std::to_string(n));
    check_perplexity(config.perplexity, n);
    for (double v : latents.values)
        if (!std::isfinite(v)) throw NumericError("tsne_2d: non-finite latent value");

    // Canonical order: by id, ties by input position.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return latents.ids[a] < latents.ids[b]; });
    const std::size_t dim = latents.dim;
    std::vector<double> points(n * dim);
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = latents.row(order[i]);
        std::copy(r.begin(), r.end(), points.begin() + std::ptrdiff_t(i * dim));
    }
    const auto aff = tsne_affinities(points, n, dim, config);
    const auto& P = aff.joint;

    std::vector<double> y(2 * n), update(2 * n, 0.0), gains(2 * n, 1.0), grad(2 * n);
    {
        Rng rng(config.seed);
        for (auto& v : y) v = 1e-4 * rng.normal();
    }
    std::vector<double> row_sum(n), row_kl(n);

    // Student-t kernel sum, then gradient and KL(P || Q) at the current positions.
    auto evaluate = [&](double exaggeration) {
#pragma omp parallel for schedule(static)
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                const double dx = y[2 * i] - y[2 * j], dy = y[2 * i + 1] - y[2 * j + 1];
                s += 1.0 / (1.0 + dx * dx + dy * dy);
            }
            row_sum[i] = s;
        }
        double z = 0.0;
        for (double s : row_sum) z += s;
#pragma omp parallel for schedule(static)
        for (std::size_t i = 0; i < n; ++i) {
            double gx = 0.0, gy = 0.0, kl = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                const double dx = y[2 * i] - y[2 * j], dy = y[2 * i + 1] - y[2 * j + 1];
                const double kernel = 1.0 / (1.0 + dx * dx + dy * dy);
                const double q = kernel / z;
                const double p = P[i * n + j];
                const double force = (exaggeration * p - q) * kernel;
                gx += force * dx;
                gy += force * dy;
                if (p > 0.0) kl += p * std::log(p / std::max(q, 1e-300));
            }
            grad[2 * i] = 4.0 * gx;
            grad[2 * i + 1] = 4.0 * gy;
            row_kl[i] = kl;
        }
        double kl = 0.0;
        for (double v : row_kl) kl += v;
        return kl;
    };
    auto center = [&] {
        double mx = 0.0, my = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            mx += y[2 * i];
            my += y[2 * i + 1];
        }
        mx /= double(n);
        my /= double(n);
        for (std::size_t i = 0; i < n; ++i) {
            y[2 * i] -= mx;
            y[2 * i + 1] -= my;
        }
    };

    // Once exaggeration is off, a step that raises KL is undone: positions and
    // gradient go back to the last accepted point, momentum and gains restart,
    // and the step shrinks until progress resumes.
    std::vector<double> y_accepted, grad_accepted;
    double kl_accepted = INFINITY, step_scale = 1.0;
    Embedding2D e;
    e.kl_trace.reserve(config.iterations);
    for (std::size_t it = 0; it < config.iterations; ++it) {
        const double exaggeration = it < config.exaggeration_iterations ? config.early_exaggeration : 1.0;
        const double momentum = it < config.momentum_switch ? config.initial_momentum : config.final_momentum;
        double kl = evaluate(exaggeration);
        if (it > config.exaggeration_iterations && kl > kl_accepted) {
            y = y_accepted;
            grad = grad_accepted;
            kl = kl_accepted;
            std::fill(update.begin(), update.end(), 0.0);
            std::fill(gains.begin(), gains.end(), 1.0);
            step_scale *= 0.5;
        } else {
            y_accepted = y;
            grad_accepted = grad;
            kl_accepted = kl;
            step_scale = std::min(1.0, step_scale * 2.0);
        }
        e.kl_trace.push_back(kl);
        for (std::size_t k = 0; k < 2 * n; ++k) {
            // grow the gain while descent keeps the direction of the last step
            const bool same_direction = (grad[k] > 0.0) == (update[k] > 0.0);
            gains[k] = std::max(same_direction ? gains[k] * 0.8 : gains[k] + 0.2, 0.01);
            update[k] = momentum * update[k] - config.learning_rate * step_scale * gains[k] * grad[k];
            y[k] += update[k];
        }
        center();
    }
    center();
    e.final_kl = evaluate(1.0);
    if (config.iterations > config.exaggeration_iterations && e.final_kl > kl_accepted) {
        y = y_accepted;
        e.final_kl = kl_accepted;
    }
    e.iterations_run = config.iterations;
    e.bandwidth_fallbacks = aff.fallbacks;

    e.rows = n;
    e.coords.assign(2 * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        e.coords[2 * order[i]] = y[2 * i];
        e.coords[2 * order[i] + 1] = y[2 * i + 1];
    }
    e.labels = latents.labels;
    e.ids = latents.ids;
    return e;
}

} // namespace octvae
