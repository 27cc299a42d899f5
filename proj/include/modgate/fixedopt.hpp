#pragma once

#include "modgate/distcore.hpp"
#include "modgate/gates.hpp"

namespace modgate {

inline double constant_gate_bound(std::span<const double> epsilons, const MixtureWeights& lambda) {
    if (epsilons.size() != lambda.size()) throw std::invalid_argument("constant_gate_bound: length mismatch");
    double s = 0.0;
    for (std::size_t k = 0; k < lambda.size(); ++k)
        if (lambda[k] > 0.0) s += lambda[k] * epsilons[k];
    return s;
}

/// eps_k = KL(p_k || pi_k), with pi_k the full-space expert (its values on the support need not sum to 1).
inline std::vector<double> expert_epsilons(std::span<const DiscreteDist> sources, const ExpertTable& table) {
    if (sources.size() != table.num_experts()) throw std::invalid_argument("expert_epsilons: one source per expert required");
    std::vector<double> eps(sources.size());
    for (std::size_t k = 0; k < sources.size(); ++k) {
        if (!(sources[k].support() == table.support())) throw SupportMismatchError("expert_epsilons: source not on the table support");
        auto col = table.column(k);
        eps[k] = kl(std::span<const double>(sources[k].probs()), std::span<const double>(col));
    }
    return eps;
}

struct FixedGateResult {
    TabularGate gate;
    double mu_star = 1.0;
    std::vector<double> pi;  // clip(p_lambda / mu*, m, M), exactly in [m, M]
    double Z = 1.0;
};

/// Optimal gate in G1 for a fixed target: pi_g = clip(target / mu*, m, M), mu* by bisection on Z(mu).
inline FixedGateResult optimal_gate_for_target(std::span<const double> target, const ExpertTable& table) {
    std::size_t n = table.size(), p = table.num_experts();
    if (target.size() != n) throw SupportMismatchError("optimal_fixed_gate: target not on the table support");
    double smin = table.sum_lo(), smax = table.sum_hi();
    if (smin > 1.0 + kArithTol || smax < 1.0 - kArithTol) throw InfeasibleError("optimal_fixed_gate: need sum m <= 1 <= sum M");

    std::vector<double> pi(n);
    auto Z_of = [&](double mu) {
        double Z = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double v = target[i] > 0.0 ? std::clamp(target[i] / mu, table.lo(i), table.hi(i)) : table.lo(i);
            pi[i] = v;
            Z += v;
        }
        return Z;
    };

    // limit of Z as mu -> 0+
    double zmax = 0.0, lo_bound = kInf, hi_bound = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (target[i] > 0.0) {
            zmax += table.hi(i);
            if (table.hi(i) > 0.0) lo_bound = std::min(lo_bound, target[i] / table.hi(i));
            if (table.lo(i) > 0.0) hi_bound = std::max(hi_bound, target[i] / table.lo(i));
        } else {
            zmax += table.lo(i);
        }
    }

    double mu = 1.0;
    if (zmax < 1.0) {
        // target points saturated at M; remaining mass goes to off-target points, up to M
        mu = 0.0;
        double deficit = 1.0 - zmax, room = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (target[i] > 0.0) pi[i] = table.hi(i);
            else room += table.hi(i) - table.lo(i);
        }
        if (room < deficit - kArithTol) throw InfeasibleError("optimal_fixed_gate: cannot reach Z = 1");
        double frac = room > 0.0 ? std::min(1.0, deficit / room) : 0.0;
        for (std::size_t i = 0; i < n; ++i)
            if (target[i] <= 0.0) pi[i] = table.lo(i) + frac * (table.hi(i) - table.lo(i));
    } else {
        if (!(lo_bound < kInf)) throw ZeroMassError("optimal_fixed_gate: target has no mass");
        double sm = table.sum_lo();
        // with all m = 0 on target points the upper bracket comes from Z(mu) <= 1/mu + sum m
        if (hi_bound <= 0.0) hi_bound = sm < 1.0 ? 1.0 / (1.0 - sm) : lo_bound;
        double a = lo_bound / 10.0, b = hi_bound * 10.0;
        for (int it = 0; it < 200 && Z_of(b) > 1.0; ++it) b *= 10.0;
        for (int it = 0; it < 200 && Z_of(a) < 1.0; ++it) a /= 10.0;
        // Z can be flat around the root; prefer mu = 1 when it already solves Z = 1
        double best = 1.0, best_err = std::abs(Z_of(1.0) - 1.0);
        for (int it = 0; it < 200 && best_err > 1e-15; ++it) {
            double mid = 0.5 * (a + b);
            double Z = Z_of(mid);
            double err = std::abs(Z - 1.0);
            if (err < best_err) {
                best_err = err;
                best = mid;
            }
            if (err <= 1e-15 || mid == a || mid == b) break;
            if (Z > 1.0) a = mid;
            else b = mid;
        }
        mu = best;
        Z_of(mu);
    }

    double Z = 0.0;
    for (double v : pi) Z += v;
    if (std::abs(Z - 1.0) > 1e-10) throw NumericalError("optimal_fixed_gate: bisection did not reach |Z-1| <= 1e-10");

    std::vector<double> w(n * p, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        auto r = table.row(i);
        std::size_t kmin = static_cast<std::size_t>(std::min_element(r.begin(), r.end()) - r.begin());
        std::size_t kmax = static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
        double span = table.hi(i) - table.lo(i);
        double t = span > 0.0 ? std::clamp((pi[i] - table.lo(i)) / span, 0.0, 1.0) : 0.0;
        w[i * p + kmin] += 1.0 - t;
        w[i * p + kmax] += t;
    }
    return {TabularGate(table.support_ptr(), p, std::move(w)), mu, std::move(pi), Z};
}

inline FixedGateResult optimal_fixed_gate(std::span<const DiscreteDist> sources, const ExpertTable& table, const MixtureWeights& lambda) {
    auto target = mixture(sources, lambda);
    if (!(target.support() == table.support())) throw SupportMismatchError("optimal_fixed_gate: sources not on the table support");
    return optimal_gate_for_target(target.probs(), table);
}

struct KlComparison {
    double kl_constant = 0.0;
    double kl_optimal = 0.0;
};

inline KlComparison kl_vs_optimal(std::span<const DiscreteDist> sources, const ExpertTable& table, const MixtureWeights& lambda) {
    auto target = mixture(sources, lambda);
    auto pi_const = model_probs(TabularGate::constant(table.support_ptr(), lambda), table);
    auto opt = optimal_gate_for_target(target.probs(), table);
    return {kl(std::span<const double>(target.probs()), std::span<const double>(pi_const)), kl(std::span<const double>(target.probs()), std::span<const double>(opt.pi))};
}

}  // namespace modgate
