#pragma once

#include "modgate/distcore.hpp"
#include "modgate/fixedopt.hpp"
#include "modgate/gamesolver.hpp"
#include "modgate/gates.hpp"

namespace modgate {

inline MixtureWeights softmax_sigma(std::span<const double> epsilons) {
    for (double e : epsilons)
        if (!std::isfinite(e)) throw std::invalid_argument("softmax_sigma: non-finite epsilon");
    return MixtureWeights(softmax(epsilons), kArithTol);
}

/// ln sum_k e^{eps_k}: no static gate on disjoint experts beats this worst-case KL.
inline double capacity_bound(std::span<const double> epsilons) {
    for (double e : epsilons)
        if (!std::isfinite(e)) throw std::invalid_argument("capacity_bound: non-finite epsilon");
    return log_sum_exp(epsilons);
}

/// sum_k lambda*_k E_{p_k}[-ln(sigma_k pi_k(x) / pi_sigma(x))], pi_sigma = sum_j sigma_j pi_j.
inline double overlap_gain(std::span<const DiscreteDist> sources, const ExpertTable& table, const MixtureWeights& sigma, const MixtureWeights& lambda_star) {
    std::size_t p = table.num_experts();
    if (sources.size() != p || sigma.size() != p || lambda_star.size() != p) throw std::invalid_argument("overlap_gain: length mismatch");
    double total = 0.0;
    for (std::size_t k = 0; k < p; ++k) {
        if (lambda_star[k] <= 0.0) continue;
        if (!(sources[k].support() == table.support())) throw SupportMismatchError("overlap_gain: source not on the table support");
        double e = 0.0;
        for (std::size_t i = 0; i < table.size(); ++i) {
            double px = sources[k][i];
            if (px <= 0.0) continue;
            double pis = 0.0;
            for (std::size_t j = 0; j < p; ++j) pis += sigma[j] * table.prob(i, j);
            double num = sigma[k] * table.prob(i, k);
            if (!(pis > 0.0) || !(num > 0.0)) return kInf;
            e -= px * std::log(num / pis);
        }
        total += lambda_star[k] * e;
    }
    return total;
}

inline double bound_value(double capacity, double overlap, double diversity) { return capacity - overlap - diversity; }

struct BoundReport {
    std::vector<double> epsilons;
    MixtureWeights sigma;
    MixtureWeights lambda_star;
    MixtureWeights lambda_test;
    double capacity = 0.0;
    double overlap = 0.0;
    double diversity = 0.0;
    double value = 0.0;
    double measured_risk = std::numeric_limits<double>::quiet_NaN();        // KL(p_lambda_test || pi_g)
    double measured_worst_case = std::numeric_limits<double>::quiet_NaN();  // max_k KL(p_k || pi_g)
};

/// Assembles capacity - overlap(sigma, lambda*) - JSD(lambda_test). `gate_pi` (pi_g over the support) is optional.
inline BoundReport robust_bound_report(std::span<const DiscreteDist> sources, const ExpertTable& table, const MixtureWeights& lambda_star,
                                       const MixtureWeights& lambda_test, const std::vector<double>* gate_pi = nullptr) {
    BoundReport r;
    r.epsilons = expert_epsilons(sources, table);
    for (double e : r.epsilons)
        if (!std::isfinite(e)) throw NumericalError("robust_bound_report: infinite expert error; smooth the experts");
    r.sigma = softmax_sigma(r.epsilons);
    r.lambda_star = lambda_star;
    r.lambda_test = lambda_test;
    r.capacity = capacity_bound(r.epsilons);
    r.overlap = overlap_gain(sources, table, r.sigma, lambda_star);
    r.diversity = jsd(sources, lambda_test);
    r.value = bound_value(r.capacity, r.overlap, r.diversity);
    if (gate_pi) {
        auto target = mixture(sources, lambda_test);
        r.measured_risk = kl(std::span<const double>(target.probs()), std::span<const double>(*gate_pi));
        auto losses = source_losses(sources, *gate_pi);
        r.measured_worst_case = *std::max_element(losses.begin(), losses.end());
    }
    return r;
}

/// sum lambda_k eps_k - JSD: no model retrained on the mixture can get below this KL.
inline double jsd_gap_lower_bound(std::span<const DiscreteDist> sources, std::span<const double> epsilons, const MixtureWeights& lambda) {
    return constant_gate_bound(epsilons, lambda) - jsd(sources, lambda);
}

struct LinearProjection {
    MixtureWeights weights;
    std::vector<double> model;  // sum_i w_i b_i
    double objective = 0.0;     // KL(target || model)
    double stationarity = 0.0;  // max_i w_i |grad_i + 1|, zero exactly at the optimum
    std::size_t iterations = 0;
};

/// argmin over the simplex of KL(target || sum_i w_i b_i) by exponentiated gradient.
inline LinearProjection linear_family_project(const DiscreteDist& target, std::span<const DiscreteDist> basis, std::size_t iters = 200000,
                                              double eta = 1.0, double tol = 1e-8) {
    std::size_t m = basis.size(), n = target.size();
    if (m == 0) throw std::invalid_argument("linear_family_project: empty basis");
    for (const auto& b : basis)
        if (!same_support(b, target)) throw SupportMismatchError("linear_family_project: basis not on the target support");
    for (std::size_t x = 0; x < n; ++x) {
        if (target[x] <= 0.0) continue;
        bool covered = false;
        for (const auto& b : basis) covered |= b[x] > 0.0;
        if (!covered) throw NumericalError("linear_family_project: target not absolutely continuous w.r.t. the basis hull");
    }
    std::vector<double> w(m, 1.0 / static_cast<double>(m)), model(n), grad(m), z(m);
    auto refresh = [&] {
        std::fill(model.begin(), model.end(), 0.0);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t x = 0; x < n; ++x) model[x] += w[i] * basis[i][x];
        std::fill(grad.begin(), grad.end(), 0.0);
        for (std::size_t x = 0; x < n; ++x) {
            if (target[x] <= 0.0) continue;
            for (std::size_t i = 0; i < m; ++i) grad[i] -= target[x] * basis[i][x] / model[x];
        }
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s = std::max(s, w[i] * std::abs(grad[i] + 1.0));
        return s;
    };
    LinearProjection out;
    double stat = refresh();
    std::size_t it = 0;
    for (; it < iters && stat > tol; ++it) {
        for (std::size_t i = 0; i < m; ++i) z[i] = w[i] > 0.0 ? std::log(w[i]) - eta * grad[i] : kNegInf;
        double lse = log_sum_exp(z);
        for (std::size_t i = 0; i < m; ++i) w[i] = std::exp(z[i] - lse);
        stat = refresh();
    }
    out.weights = MixtureWeights::normalized(w);
    out.model = model;
    out.objective = kl(std::span<const double>(target.probs()), std::span<const double>(model));
    out.stationarity = stat;
    out.iterations = it;
    return out;
}

/// max over support points of the l2 norm of (pi_1(x), ..., pi_p(x)).
inline double coincidence_norm(const ExpertTable& table) {
    double c = 0.0;
    for (std::size_t i = 0; i < table.size(); ++i) {
        double s = 0.0;
        for (double v : table.row(i)) s += v * v;
        c = std::max(c, std::sqrt(s));
    }
    return c;
}

/// max over support points and experts of |ln pi_k(x)|; infinite when some expert gives a point zero mass.
inline double nll_bound_constant(const ExpertTable& table) {
    double M = 0.0;
    for (std::size_t i = 0; i < table.size(); ++i)
        for (std::size_t k = 0; k < table.num_experts(); ++k) M = std::max(M, std::abs(table.log_prob(i, k)));
    return M;
}

/// The p pure-expert gates and the uniform gate, as pi_g vectors over the support.
inline std::vector<std::vector<double>> standard_witnesses(const ExpertTable& table) {
    std::vector<std::vector<double>> out;
    std::size_t p = table.num_experts();
    for (std::size_t k = 0; k < p; ++k) out.push_back(table.column(k));
    out.push_back(model_probs(TabularGate::constant(table.support_ptr(), MixtureWeights::uniform(p)), table));
    return out;
}

/// Witness-set estimate of max_{k, g} sum_x p_k(x) |ln(p_k(x) / pi_g(x))|; a lower estimate of the sup over G1.
inline double lipschitz_estimate(std::span<const DiscreteDist> sources, const std::vector<std::vector<double>>& witness_pis) {
    double L = 0.0;
    for (const auto& pi : witness_pis) {
        for (const auto& src : sources) {
            if (pi.size() != src.size()) throw SupportMismatchError("lipschitz_estimate: witness not on the source support");
            double s = 0.0;
            for (std::size_t x = 0; x < src.size(); ++x) {
                if (src[x] <= 0.0) continue;
                if (pi[x] <= 0.0) return kInf;
                s += src[x] * std::abs(std::log(src[x] / pi[x]));
            }
            L = std::max(L, s);
        }
    }
    return L;
}

/// max over simplex vertices e_k of min_{l in set} ||e_k - l||_1 = 2 (1 - max_{l in set} l_k).
inline double hausdorff_l1(const LambdaSet& set) {
    double d = 0.0, sl = 0.0;
    for (double v : set.lower()) sl += v;
    for (std::size_t k = 0; k < set.size(); ++k) {
        double best = std::min(set.upper()[k], 1.0 - (sl - set.lower()[k]));
        d = std::max(d, 2.0 * (1.0 - best));
    }
    return d;
}

}  // namespace modgate
