#pragma once

#include "modgate/distcore.hpp"
#include "modgate/experts.hpp"
#include "modgate/fixedopt.hpp"
#include "modgate/gates.hpp"

#include <functional>

namespace modgate {

inline constexpr double kGainCap = 50.0;

/// Box-constrained simplex {lambda in simplex : lower <= lambda <= upper}.
class LambdaSet {
public:
    LambdaSet() = default;

    LambdaSet(std::vector<double> lower, std::vector<double> upper) : lower_(std::move(lower)), upper_(std::move(upper)) {
        if (lower_.empty() || lower_.size() != upper_.size()) throw std::invalid_argument("LambdaSet: bound length mismatch");
        double sl = 0.0, su = 0.0;
        for (std::size_t k = 0; k < lower_.size(); ++k) {
            if (!(0.0 <= lower_[k] && lower_[k] <= upper_[k] && upper_[k] <= 1.0)) throw std::invalid_argument("LambdaSet: need 0 <= lower <= upper <= 1");
            sl += lower_[k];
            su += upper_[k];
        }
        if (sl > 1.0 + kBuildTol || su < 1.0 - kBuildTol) throw InfeasibleError("LambdaSet: empty set");
    }

    static LambdaSet full(std::size_t p) { return LambdaSet(std::vector<double>(p, 0.0), std::vector<double>(p, 1.0)); }

    std::size_t size() const { return lower_.size(); }
    const std::vector<double>& lower() const { return lower_; }
    const std::vector<double>& upper() const { return upper_; }

    bool is_full() const {
        for (std::size_t k = 0; k < size(); ++k)
            if (lower_[k] > 0.0 || upper_[k] < 1.0) return false;
        return true;
    }

    bool contains(std::span<const double> l, double tol = 1e-12) const {
        if (l.size() != size()) return false;
        double s = 0.0;
        for (std::size_t k = 0; k < size(); ++k) {
            if (l[k] < lower_[k] - tol || l[k] > upper_[k] + tol) return false;
            s += l[k];
        }
        return std::abs(s - 1.0) <= tol;
    }

    /// max over the set of sum_k lambda_k c_k: fill lower bounds, then pour the rest into the largest c.
    double max_linear(std::span<const double> c) const {
        std::vector<std::size_t> order(size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return c[a] > c[b]; });
        auto l = lower_;
        double rest = 1.0;
        for (double v : l) rest -= v;
        for (std::size_t k : order) {
            double add = std::min(rest, upper_[k] - l[k]);
            l[k] += add;
            rest -= add;
        }
        double s = 0.0;
        for (std::size_t k = 0; k < size(); ++k)
            if (l[k] > 0.0) s += l[k] * c[k];
        return s;
    }

    /// Vertices of the polytope: every coordinate at a bound except at most one.
    std::vector<std::vector<double>> vertices() const {
        std::size_t p = size();
        if (p > 16) throw std::invalid_argument("LambdaSet::vertices: too many coordinates");
        std::vector<std::vector<double>> out;
        for (std::size_t free = 0; free < p; ++free) {
            for (std::size_t mask = 0; mask < (std::size_t{1} << (p - 1)); ++mask) {
                std::vector<double> v(p);
                double s = 0.0;
                std::size_t bit = 0;
                for (std::size_t k = 0; k < p; ++k) {
                    if (k == free) continue;
                    v[k] = (mask >> bit++) & 1 ? upper_[k] : lower_[k];
                    s += v[k];
                }
                v[free] = 1.0 - s;
                if (v[free] < lower_[free] - 1e-12 || v[free] > upper_[free] + 1e-12) continue;
                v[free] = std::clamp(v[free], lower_[free], upper_[free]);
                bool dup = false;
                for (const auto& u : out) {
                    double d = 0.0;
                    for (std::size_t k = 0; k < p; ++k) d += std::abs(u[k] - v[k]);
                    if (d < 1e-12) dup = true;
                }
                if (!dup) out.push_back(std::move(v));
            }
        }
        return out;
    }

private:
    std::vector<double> lower_, upper_;
};

/// lambda_{t+1}(k) proportional to lambda_t(k) exp(eta * gain_k); infinite gains are clamped to kGainCap.
inline MixtureWeights eg_update(const MixtureWeights& lambda, std::span<const double> gains, double eta) {
    if (gains.size() != lambda.size()) throw std::invalid_argument("eg_update: length mismatch");
    std::vector<double> z(lambda.size());
    for (std::size_t k = 0; k < z.size(); ++k) {
        double g = gains[k];
        if (std::isnan(g)) throw NumericalError("eg_update: NaN gain");
        g = std::min(g, kGainCap);
        z[k] = lambda[k] > 0.0 ? std::log(lambda[k]) + eta * g : kNegInf;
    }
    double lse = log_sum_exp(z);
    if (!std::isfinite(lse)) throw ZeroMassError("eg_update: all-zero normalizer");
    for (double& v : z) v = std::exp(v - lse);
    return MixtureWeights::normalized(std::move(z));
}

/// KL (I-)projection onto a LambdaSet: q_k = clip(raw_k * s, lower_k, upper_k) with sum q = 1.
inline MixtureWeights kl_project_lambda(const MixtureWeights& raw, const LambdaSet& set) {
    std::size_t p = raw.size();
    if (set.size() != p) throw std::invalid_argument("kl_project_lambda: length mismatch");
    for (std::size_t k = 0; k < p; ++k)
        if (!(raw[k] > 0.0)) throw std::invalid_argument("kl_project_lambda: raw weights must be strictly positive");
    if (set.contains(raw.span())) return raw;
    std::vector<double> q(p);
    auto total = [&](double s) {
        double t = 0.0;
        for (std::size_t k = 0; k < p; ++k) t += (q[k] = std::clamp(raw[k] * s, set.lower()[k], set.upper()[k]));
        return t;
    };
    double lo = 0.0, hi = 1.0;
    for (int it = 0; it < 2000 && total(hi) < 1.0; ++it) hi *= 2.0;
    for (int it = 0; it < 200; ++it) {
        double mid = 0.5 * (lo + hi);
        if (mid == lo || mid == hi) break;
        if (total(mid) < 1.0) lo = mid;
        else hi = mid;
    }
    total(hi);
    // put the rounding residual on a coordinate with room
    double resid = 1.0;
    for (double v : q) resid -= v;
    for (std::size_t k = 0; k < p && resid != 0.0; ++k) {
        double nv = std::clamp(q[k] + resid, set.lower()[k], set.upper()[k]);
        resid -= nv - q[k];
        q[k] = nv;
    }
    return MixtureWeights(std::move(q), kArithTol);
}

struct TraceRow {
    std::size_t iter = 0;
    std::vector<double> lambda;
    std::vector<double> loss;
    double mu = 0.0;
    double Z_hat = 1.0;
    double Z_ema = 1.0;
    double gap = 0.0;
};

struct GameTrace {
    std::vector<TraceRow> rows;
    MixtureWeights lambda_bar;
    std::optional<TabularGate> gate_bar;  // exact solver output
    std::optional<FeatGate> featgate;     // stochastic solver output (last iterate)
    /// Averaged iterates at each checkpoint row (exact solver only).
    std::vector<TabularGate> checkpoint_gates;
    std::vector<MixtureWeights> checkpoint_lambdas;
};

inline std::vector<double> source_losses(std::span<const DiscreteDist> sources, std::span<const double> pi) {
    std::vector<double> l(sources.size());
    for (std::size_t k = 0; k < sources.size(); ++k) l[k] = kl(std::span<const double>(sources[k].probs()), pi);
    return l;
}

/// Gaps below this are indistinguishable from rounding in the two KL evaluations and are reported as 0.
inline constexpr double kGapFloor = 1e-12;

/// Exact duality gap of the linearized game at (g_bar, lambda_bar):
/// max_{lambda in set} sum lambda_k KL(p_k || pi_gbar) minus min_{g in G1} of the same at lambda_bar.
/// The inner minimum is KL(p_lambda_bar || pi_{g*}) + JSD, with g* the clipped optimal gate.
inline double linearized_gap(std::span<const DiscreteDist> sources, const ExpertTable& table, const LambdaSet& set, const TabularGate& gbar,
                             const MixtureWeights& lambda_bar) {
    auto pi = model_probs(gbar, table);
    auto losses = source_losses(sources, pi);
    for (double& l : losses) l = std::min(l, kGainCap);
    double upper = set.max_linear(losses);
    auto target = mixture(sources, lambda_bar);
    auto opt = optimal_gate_for_target(target.probs(), table);
    double lower = kl(std::span<const double>(target.probs()), std::span<const double>(opt.pi)) + jsd(sources, lambda_bar);
    double gap = upper - lower;
    return std::abs(gap) <= kGapFloor ? 0.0 : gap;
}

struct ExactConfig {
    std::size_t T = 2000;
    double eta_lambda = 0.0;  // 0 selects the default
    double eta_g = 0.0;       // 0 selects the default
    std::vector<std::size_t> checkpoints;  // iteration counts to record; empty = every max(1, T/100)
    double ratio_cap = 1e4;   // cap on p_lambda(x) / pi_g(x) inside the gate gradient
};

inline double default_eta_lambda(std::size_t p, std::size_t T, double gain_scale) {
    if (p < 2) return 0.0;
    return std::sqrt(std::log(static_cast<double>(p)) / static_cast<double>(T)) / gain_scale;
}

/// Gate gradient v(x,k) = -(p_lambda(x) / pi_g(x)) pi_k(x), ratio capped.
inline std::vector<double> gate_gradient(std::span<const double> target, std::span<const double> pi, const ExpertTable& table, double ratio_cap) {
    std::size_t n = table.size(), p = table.num_experts();
    std::vector<double> v(n * p, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        if (target[i] <= 0.0) continue;
        double r = pi[i] > 0.0 ? std::min(target[i] / pi[i], ratio_cap) : ratio_cap;
        for (std::size_t k = 0; k < p; ++k) v[i * p + k] = -r * table.prob(i, k);
    }
    return v;
}

/// EG on the mixture player, projected OGD on the tabular gate, time-averaged outputs.
inline GameTrace solve_exact(std::span<const DiscreteDist> sources, const ExpertTable& table, const LambdaSet& set, const ExactConfig& cfg) {
    std::size_t p = table.num_experts(), n = table.size();
    if (sources.size() != p || set.size() != p) throw std::invalid_argument("solve_exact: need one source per expert");
    for (const auto& s : sources)
        if (!(s.support() == table.support())) throw SupportMismatchError("solve_exact: sources must live on the table support");
    if (cfg.T == 0) throw std::invalid_argument("solve_exact: T must be positive");
    if (n * p > 1000000) throw std::invalid_argument("solve_exact: support too large for the exact solver");

    MixtureWeights lambda = MixtureWeights::uniform(p);
    if (!set.is_full()) lambda = kl_project_lambda(lambda, set);
    std::vector<double> start(n * p, 1.0 / static_cast<double>(p));
    auto proj = project_G1_dual(start, table);
    TabularGate g = proj.gate;

    auto pi = model_probs(g, table);
    auto losses = source_losses(sources, pi);
    double eta_l = cfg.eta_lambda;
    if (eta_l <= 0.0) {
        double scale = 0.0;
        for (double l : losses) scale = std::max(scale, std::min(l, kGainCap));
        eta_l = default_eta_lambda(p, cfg.T, std::max(scale, 1e-3));
    }
    double eta_g = cfg.eta_g;
    if (eta_g <= 0.0) {
        auto target = mixture(sources, lambda);
        auto v = gate_gradient(target.probs(), pi, table, cfg.ratio_cap);
        double G = 0.0;
        for (double x : v) G += x * x;
        G = std::sqrt(G);
        double D = 2.0 * std::sqrt(static_cast<double>(n));
        eta_g = G > 0.0 ? D / (G * std::sqrt(static_cast<double>(cfg.T))) : 1.0;
    }

    std::vector<std::size_t> marks = cfg.checkpoints;
    if (marks.empty()) {
        std::size_t every = std::max<std::size_t>(1, cfg.T / 100);
        for (std::size_t t = every; t <= cfg.T; t += every) marks.push_back(t);
    }
    std::sort(marks.begin(), marks.end());
    std::size_t next_mark = 0;

    GameTrace trace;
    std::vector<double> gsum(n * p, 0.0), lsum(p, 0.0);
    std::vector<double> raw(n * p);
    for (std::size_t t = 1; t <= cfg.T; ++t) {
        // g is g_{t}: accumulate it before stepping (average of g_1..g_T)
        for (std::size_t j = 0; j < gsum.size(); ++j) gsum[j] += g.matrix()[j];
        auto gains = losses;
        lambda = eg_update(lambda, gains, eta_l);
        if (!set.is_full()) lambda = kl_project_lambda(lambda, set);
        for (std::size_t k = 0; k < p; ++k) lsum[k] += lambda[k];

        auto target = mixture(sources, lambda);
        auto v = gate_gradient(target.probs(), pi, table, cfg.ratio_cap);
        for (std::size_t j = 0; j < raw.size(); ++j) raw[j] = g.matrix()[j] - eta_g * v[j];
        proj = project_G1_dual(raw, table);
        g = proj.gate;
        pi = model_probs(g, table);
        auto new_losses = source_losses(sources, pi);

        while (next_mark < marks.size() && marks[next_mark] < t) ++next_mark;
        if (next_mark < marks.size() && marks[next_mark] == t) {
            std::vector<double> gbar(gsum);
            for (double& x : gbar) x /= static_cast<double>(t);
            std::vector<double> lbar(lsum);
            for (double& x : lbar) x /= static_cast<double>(t);
            TabularGate gb(table.support_ptr(), p, std::move(gbar));
            auto lb = MixtureWeights::normalized(std::move(lbar));
            TraceRow row;
            row.iter = t;
            row.lambda = lambda.values();
            row.loss = gains;
            row.mu = proj.nu;
            row.Z_hat = proj.Z;
            row.Z_ema = partition_Z(gb, table);
            row.gap = linearized_gap(sources, table, set, gb, lb);
            trace.rows.push_back(std::move(row));
            trace.checkpoint_gates.push_back(std::move(gb));
            trace.checkpoint_lambdas.push_back(lb);
            ++next_mark;
        }
        losses = std::move(new_losses);
    }
    for (double& x : gsum) x /= static_cast<double>(cfg.T);
    for (double& x : lsum) x /= static_cast<double>(cfg.T);
    trace.gate_bar = TabularGate(table.support_ptr(), p, std::move(gsum));
    trace.lambda_bar = MixtureWeights::normalized(std::move(lsum));
    return trace;
}

inline std::vector<double> duality_gap(const GameTrace& trace, std::span<const DiscreteDist> sources, const ExpertTable& table, const LambdaSet& set) {
    std::vector<double> out;
    out.reserve(trace.checkpoint_gates.size());
    for (std::size_t i = 0; i < trace.checkpoint_gates.size(); ++i)
        out.push_back(linearized_gap(sources, table, set, trace.checkpoint_gates[i], trace.checkpoint_lambdas[i]));
    return out;
}

inline MixtureWeights least_favorable_mixture(const GameTrace& trace) {
    if (trace.lambda_bar.size() == 0) throw std::invalid_argument("least_favorable_mixture: empty trace");
    return trace.lambda_bar;
}

/// Worst case over the set of KL(p_lambda || pi); convex in lambda, so vertices suffice.
inline double worst_case_risk(std::span<const DiscreteDist> sources, std::span<const double> pi, const LambdaSet& set) {
    double worst = 0.0;
    for (const auto& v : set.vertices()) {
        auto target = mixture(sources, MixtureWeights(v, kArithTol));
        worst = std::max(worst, kl(std::span<const double>(target.probs()), pi));
    }
    return worst;
}

using SourceSampler = std::function<Seq(Rng&)>;

inline SourceSampler dist_sampler(DiscreteDist d) {
    auto shared = std::make_shared<const DiscreteDist>(std::move(d));
    auto cdf = std::make_shared<std::vector<double>>(shared->size());
    double c = 0.0;
    for (std::size_t i = 0; i < shared->size(); ++i) (*cdf)[i] = (c += (*shared)[i]);
    return [shared, cdf](Rng& rng) {
        double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng) * cdf->back();
        auto it = std::upper_bound(cdf->begin(), cdf->end(), u);
        std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(it - cdf->begin()), shared->size() - 1);
        while ((*shared)[i] <= 0.0 && i > 0) --i;
        return shared->support()[i];
    };
}

struct PDConfig {
    double eta_g = 5e-3;
    double eta_lambda = 0.2;
    double eta_mu = 0.1;
    double alpha = 0.9;
    std::size_t T = 800;
    std::size_t batch = 64;
    std::size_t warmup = 0;
    std::size_t checkpoint_every = 10;
    std::uint64_t seed = 0;
};

/// Penalty form for the Z term of the batch objective.
enum class ZPenalty { lagrangian, quadratic };

struct BatchObjective {
    double J = 0.0;
    std::vector<double> losses;  // mean -ln pi_g over each source batch
    double Z_hat = 0.0;
    std::vector<double> grad;    // dJ/dTheta, row-major d x p
};

/// J = sum lambda_k l_k + coef term on Z_hat, with Z_hat = mean over the union batch of pi_g / q.
/// lagrangian: coef * (Z_hat - 1); quadratic: coef * (Z_hat - 1)^2.
inline BatchObjective batch_objective(const FeatGate& gate, const ExpertSet& experts, const std::vector<std::vector<Seq>>& batches,
                                      std::span<const double> lambda, double coef, ZPenalty mode) {
    std::size_t p = experts.size();
    if (gate.num_experts() != p || batches.size() != p || lambda.size() != p) throw std::invalid_argument("batch_objective: shape mismatch");
    BatchObjective out;
    out.losses.assign(p, 0.0);
    out.grad.assign(static_cast<std::size_t>(gate.dim()) * p, 0.0);
    std::size_t total = 0;
    for (const auto& b : batches) total += b.size();
    if (total == 0) throw std::invalid_argument("batch_objective: empty batch");
    double logp = std::log(static_cast<double>(p));

    struct Item {
        std::vector<double> w, L;
        double logpi, logq;
    };
    std::vector<std::vector<Item>> items(p);
    double zsum = 0.0;
    for (std::size_t k = 0; k < p; ++k) {
        if (batches[k].empty()) throw std::invalid_argument("batch_objective: empty source batch");
        for (const auto& x : batches[k]) {
            Item it;
            it.w = gate.weights(x);
            it.L.resize(p);
            std::vector<double> terms(p);
            for (std::size_t j = 0; j < p; ++j) {
                it.L[j] = experts[j]->log_prob(x);
                terms[j] = std::log(it.w[j]) + it.L[j];
            }
            it.logpi = log_sum_exp(terms);
            it.logq = log_sum_exp(it.L) - logp;
            if (!std::isfinite(it.logpi))
                throw NumericalError("primal-dual: non-finite loss (an expert assigns zero probability to a source sample); raise alpha");
            out.losses[k] -= it.logpi;
            zsum += std::exp(it.logpi - it.logq);
            items[k].push_back(std::move(it));
        }
        out.losses[k] /= static_cast<double>(batches[k].size());
    }
    out.Z_hat = zsum / static_cast<double>(total);
    double zc = mode == ZPenalty::lagrangian ? coef : 2.0 * coef * (out.Z_hat - 1.0);
    out.J = 0.0;
    for (std::size_t k = 0; k < p; ++k) out.J += lambda[k] * out.losses[k];
    out.J += mode == ZPenalty::lagrangian ? coef * (out.Z_hat - 1.0) : coef * (out.Z_hat - 1.0) * (out.Z_hat - 1.0);

    std::vector<double> dl(p);
    for (std::size_t k = 0; k < p; ++k) {
        double a = lambda[k] / static_cast<double>(batches[k].size());
        for (std::size_t n = 0; n < items[k].size(); ++n) {
            const auto& it = items[k][n];
            double ratio = std::exp(it.logpi - it.logq);
            for (std::size_t j = 0; j < p; ++j) {
                double r = std::exp(std::log(it.w[j]) + it.L[j] - it.logpi);
                double dz = it.w[j] * (std::exp(it.L[j] - it.logq) - ratio);
                dl[j] = a * (it.w[j] - r) + zc * dz / static_cast<double>(total);
            }
            gate.accumulate(batches[k][n], dl, out.grad);
        }
    }
    return out;
}

namespace detail {

inline GameTrace run_stochastic(const std::vector<SourceSampler>& sources, const ExpertSet& experts, FeatGate gate, const PDConfig& cfg,
                                ZPenalty mode, double beta) {
    std::size_t p = experts.size();
    if (sources.size() != p) throw std::invalid_argument("primal-dual: need one source sampler per expert");
    if (gate.num_experts() != p) throw std::invalid_argument("primal-dual: gate expert count mismatch");
    if (!(cfg.eta_g > 0.0 && cfg.eta_lambda >= 0.0 && cfg.eta_mu >= 0.0)) throw std::invalid_argument("primal-dual: learning rates must be positive");
    if (!(cfg.alpha > 0.0 && cfg.alpha < 1.0)) throw std::invalid_argument("primal-dual: alpha must lie in (0,1)");
    if (cfg.T == 0 || cfg.batch == 0) throw std::invalid_argument("primal-dual: T and batch must be positive");

    Rng rng(cfg.seed);
    MixtureWeights lambda = MixtureWeights::uniform(p);
    double mu = 0.0, zbar = 1.0;
    std::vector<double> lsum(p, 0.0);
    std::vector<std::vector<Seq>> batches(p);
    GameTrace trace;
    for (std::size_t t = 1; t <= cfg.T; ++t) {
        for (std::size_t k = 0; k < p; ++k) {
            batches[k].clear();
            for (std::size_t m = 0; m < cfg.batch; ++m) batches[k].push_back(sources[k](rng));
        }
        double coef = mode == ZPenalty::lagrangian ? mu : beta;
        auto obj = batch_objective(gate, experts, batches, lambda.values(), coef, mode);
        zbar = cfg.alpha * zbar + (1.0 - cfg.alpha) * obj.Z_hat;
        lambda = eg_update(lambda, obj.losses, cfg.eta_lambda);
        for (std::size_t k = 0; k < p; ++k) lsum[k] += lambda[k];
        if (mode == ZPenalty::lagrangian && t > cfg.warmup) mu += cfg.eta_mu * (zbar - 1.0);
        // the gate step uses the objective at the pre-update lambda and mu of this batch
        for (std::size_t j = 0; j < obj.grad.size(); ++j) gate.theta()[j] -= cfg.eta_g * obj.grad[j];

        if (t % std::max<std::size_t>(1, cfg.checkpoint_every) == 0 || t == cfg.T) {
            TraceRow row;
            row.iter = t;
            row.lambda = lambda.values();
            row.loss = obj.losses;
            row.mu = mode == ZPenalty::lagrangian ? mu : 2.0 * beta * (obj.Z_hat - 1.0);
            row.Z_hat = obj.Z_hat;
            row.Z_ema = zbar;
            double lmax = *std::max_element(obj.losses.begin(), obj.losses.end()), avg = 0.0;
            for (std::size_t k = 0; k < p; ++k) avg += lambda[k] * obj.losses[k];
            row.gap = std::max(0.0, lmax - avg);
            trace.rows.push_back(std::move(row));
        }
    }
    for (double& x : lsum) x /= static_cast<double>(cfg.T);
    trace.lambda_bar = MixtureWeights::normalized(std::move(lsum));
    trace.featgate = std::move(gate);
    return trace;
}

}  // namespace detail

inline GameTrace solve_primal_dual(const std::vector<SourceSampler>& sources, const ExpertSet& experts, const FeatGate& gate, const PDConfig& cfg) {
    return detail::run_stochastic(sources, experts, gate, cfg, ZPenalty::lagrangian, 0.0);
}

inline GameTrace solve_quadratic_penalty(const std::vector<SourceSampler>& sources, const ExpertSet& experts, const FeatGate& gate, double beta,
                                         const PDConfig& cfg) {
    if (beta < 0.0) throw std::invalid_argument("solve_quadratic_penalty: beta must be non-negative");
    return detail::run_stochastic(sources, experts, gate, cfg, ZPenalty::quadratic, beta);
}

/// Exact Z of a feature gate over a support (enumerable instances only).
template <GateLike G>
double exact_Z(const G& gate, const ExpertSet& experts, const SupportSet& support) {
    double Z = 0.0;
    for (const auto& x : support) Z += std::exp(gate_logpi(gate, experts, x));
    return Z;
}

}  // namespace modgate
