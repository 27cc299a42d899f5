#pragma once

#include "modgate/distcore.hpp"
#include "modgate/experts.hpp"

#include <concepts>
#include <numeric>

namespace modgate {

/// Expert probabilities tabulated over a support: prob(i, k) = pi_k(x_i), plus the pointwise hull [m, M].
class ExpertTable {
public:
    ExpertTable() = default;

    ExpertTable(const ExpertSet& experts, SupportPtr support) : support_(std::move(support)), p_(experts.size()) {
        if (experts.empty()) throw std::invalid_argument("ExpertTable: no experts");
        std::size_t n = support_->size();
        logp_.resize(n * p_);
        prob_.resize(n * p_);
        lo_.resize(n);
        hi_.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            double lo = kInf, hi = 0.0;
            for (std::size_t k = 0; k < p_; ++k) {
                double lp = experts[k]->log_prob((*support_)[i]);
                logp_[i * p_ + k] = lp;
                double pr = std::exp(lp);
                prob_[i * p_ + k] = pr;
                lo = std::min(lo, pr);
                hi = std::max(hi, pr);
            }
            lo_[i] = lo;
            hi_[i] = hi;
        }
    }

    /// Direct construction from a probability table (rows = support points).
    ExpertTable(SupportPtr support, std::size_t p, std::vector<double> prob) : support_(std::move(support)), p_(p), prob_(std::move(prob)) {
        std::size_t n = support_->size();
        if (p_ == 0 || prob_.size() != n * p_) throw std::invalid_argument("ExpertTable: table size mismatch");
        logp_.resize(prob_.size());
        lo_.resize(n);
        hi_.resize(n);
        for (std::size_t j = 0; j < prob_.size(); ++j) {
            if (!(prob_[j] >= 0.0)) throw std::invalid_argument("ExpertTable: negative probability");
            logp_[j] = std::log(prob_[j]);
        }
        for (std::size_t i = 0; i < n; ++i) {
            auto r = row(i);
            lo_[i] = *std::min_element(r.begin(), r.end());
            hi_[i] = *std::max_element(r.begin(), r.end());
        }
    }

    const SupportPtr& support_ptr() const { return support_; }
    const SupportSet& support() const { return *support_; }
    std::size_t size() const { return support_->size(); }
    std::size_t num_experts() const { return p_; }
    double prob(std::size_t i, std::size_t k) const { return prob_[i * p_ + k]; }
    double log_prob(std::size_t i, std::size_t k) const { return logp_[i * p_ + k]; }
    std::span<const double> row(std::size_t i) const { return {prob_.data() + i * p_, p_}; }
    double lo(std::size_t i) const { return lo_[i]; }
    double hi(std::size_t i) const { return hi_[i]; }

    /// Expert k's values over the support (a sub-probability vector).
    std::vector<double> column(std::size_t k) const {
        std::vector<double> c(size());
        for (std::size_t i = 0; i < c.size(); ++i) c[i] = prob(i, k);
        return c;
    }

    double sum_lo() const { return std::accumulate(lo_.begin(), lo_.end(), 0.0); }
    double sum_hi() const { return std::accumulate(hi_.begin(), hi_.end(), 0.0); }

private:
    SupportPtr support_;
    std::size_t p_ = 0;
    std::vector<double> logp_, prob_, lo_, hi_;
};

/// Anything that maps a sequence to simplex weights over p experts.
template <class G>
concept GateLike = requires(const G& g, const Seq& x) {
    { g.num_experts() } -> std::convertible_to<std::size_t>;
    { g.weights(x) } -> std::convertible_to<std::vector<double>>;
};

inline constexpr double kRowTol = 1e-10;

/// Gate over an enumerated support, one simplex row per point.
class TabularGate {
public:
    TabularGate() = default;

    TabularGate(SupportPtr support, std::size_t p, std::vector<double> w) : support_(std::move(support)), p_(p), w_(std::move(w)) {
        if (p_ == 0 || w_.size() != support_->size() * p_) throw std::invalid_argument("TabularGate: matrix size mismatch");
        for (std::size_t i = 0; i < support_->size(); ++i) {
            double s = 0.0;
            for (std::size_t k = 0; k < p_; ++k) {
                double v = w_[i * p_ + k];
                if (!(v >= -kRowTol) || !std::isfinite(v)) throw std::invalid_argument("TabularGate: negative or non-finite weight");
                s += v;
            }
            if (std::abs(s - 1.0) > kRowTol) throw std::invalid_argument("TabularGate: row does not sum to 1");
        }
    }

    static TabularGate constant(SupportPtr support, const MixtureWeights& lambda) {
        std::vector<double> w;
        w.reserve(support->size() * lambda.size());
        for (std::size_t i = 0; i < support->size(); ++i) w.insert(w.end(), lambda.values().begin(), lambda.values().end());
        return TabularGate(std::move(support), lambda.size(), std::move(w));
    }

    const SupportPtr& support_ptr() const { return support_; }
    const SupportSet& support() const { return *support_; }
    std::size_t size() const { return support_->size(); }
    std::size_t num_experts() const { return p_; }
    double operator()(std::size_t i, std::size_t k) const { return w_[i * p_ + k]; }
    std::span<const double> row(std::size_t i) const { return {w_.data() + i * p_, p_}; }
    const std::vector<double>& matrix() const { return w_; }

    std::vector<double> weights(const Seq& x) const {
        auto i = support_->index_of(x);
        if (!i) throw std::out_of_range("TabularGate: sequence outside the gate support");
        auto r = row(*i);
        return {r.begin(), r.end()};
    }

private:
    SupportPtr support_;
    std::size_t p_ = 0;
    std::vector<double> w_;
};

/// Softmax gate over fixed count features: token counts (V), step offsets (x_{t+1}-x_t mod V) counts (V), bias.
class FeatGate {
public:
    FeatGate() = default;

    FeatGate(int V, std::size_t p) : V_(V), p_(p), theta_(static_cast<std::size_t>(dim(V)) * p, 0.0) {
        if (V < 1 || p == 0) throw std::invalid_argument("FeatGate: bad dimensions");
    }

    FeatGate(int V, std::size_t p, std::vector<double> theta) : V_(V), p_(p), theta_(std::move(theta)) {
        if (V < 1 || p == 0 || theta_.size() != static_cast<std::size_t>(dim(V)) * p) throw std::invalid_argument("FeatGate: theta size mismatch");
    }

    static int dim(int V) { return 2 * V + 1; }

    int vocab_size() const { return V_; }
    int dim() const { return dim(V_); }
    std::size_t num_experts() const { return p_; }
    std::vector<double>& theta() { return theta_; }
    const std::vector<double>& theta() const { return theta_; }
    double& theta(int i, std::size_t k) { return theta_[static_cast<std::size_t>(i) * p_ + k]; }
    double theta(int i, std::size_t k) const { return theta_[static_cast<std::size_t>(i) * p_ + k]; }

    /// Sparse feature list: (index, value) pairs, repeated indices allowed.
    std::vector<int> active(const Seq& x) const {
        std::vector<int> idx;
        idx.reserve(2 * x.size() + 1);
        for (std::size_t t = 0; t < x.size(); ++t) {
            if (x[t] < 0 || x[t] >= V_) throw std::invalid_argument("FeatGate: token out of range");
            idx.push_back(x[t]);
            if (t + 1 < x.size()) idx.push_back(V_ + ((x[t + 1] - x[t]) % V_ + V_) % V_);
        }
        idx.push_back(2 * V_);
        return idx;
    }

    std::vector<double> features(const Seq& x) const {
        std::vector<double> phi(static_cast<std::size_t>(dim()), 0.0);
        for (int i : active(x)) phi[i] += 1.0;
        return phi;
    }

    std::vector<double> logits(const Seq& x) const {
        std::vector<double> z(p_, 0.0);
        for (int i : active(x))
            for (std::size_t k = 0; k < p_; ++k) z[k] += theta(i, k);
        return z;
    }

    std::vector<double> weights(const Seq& x) const {
        auto z = logits(x);
        return softmax(z);
    }

    /// grad[i][k] += phi_i(x) * dlogit[k]
    void accumulate(const Seq& x, std::span<const double> dlogit, std::vector<double>& grad) const {
        for (int i : active(x))
            for (std::size_t k = 0; k < p_; ++k) grad[static_cast<std::size_t>(i) * p_ + k] += dlogit[k];
    }

private:
    int V_ = 0;
    std::size_t p_ = 0;
    std::vector<double> theta_;
};

inline MixtureWeights featgate_weights(const FeatGate& g, const Seq& x) { return MixtureWeights(g.weights(x), kArithTol); }

/// ln pi_g(x) = LSE_k(ln g(x,k) + ln pi_k(x)).
template <GateLike G>
double gate_logpi(const G& g, const ExpertSet& experts, const Seq& x) {
    if (g.num_experts() != experts.size()) throw std::invalid_argument("gate_logpi: expert count mismatch");
    auto w = g.weights(x);
    std::vector<double> terms(experts.size());
    for (std::size_t k = 0; k < experts.size(); ++k) {
        double lw = w[k] > 0.0 ? std::log(w[k]) : kNegInf;
        terms[k] = lw == kNegInf ? kNegInf : lw + experts[k]->log_prob(x);
    }
    return log_sum_exp(terms);
}

/// pi_g over the gate support, from a precomputed expert table.
inline std::vector<double> model_probs(const TabularGate& g, const ExpertTable& table) {
    if (g.num_experts() != table.num_experts() || g.size() != table.size()) throw std::invalid_argument("model_probs: gate/table shape mismatch");
    std::vector<double> out(g.size(), 0.0);
    for (std::size_t i = 0; i < out.size(); ++i)
        for (std::size_t k = 0; k < g.num_experts(); ++k) out[i] += g(i, k) * table.prob(i, k);
    return out;
}

inline double partition_Z(const TabularGate& g, const ExpertTable& table) {
    auto pi = model_probs(g, table);
    return std::accumulate(pi.begin(), pi.end(), 0.0);
}

inline double partition_Z(const TabularGate& g, const ExpertSet& experts) { return partition_Z(g, ExpertTable(experts, g.support_ptr())); }

/// Euclidean projection of y onto the probability simplex (sort-based).
inline std::vector<double> project_simplex(std::span<const double> y) {
    std::vector<double> u(y.begin(), y.end());
    std::sort(u.begin(), u.end(), std::greater<>());
    double cum = 0.0, tau = 0.0;
    for (std::size_t j = 0; j < u.size(); ++j) {
        cum += u[j];
        double t = (cum - 1.0) / static_cast<double>(j + 1);
        if (u[j] - t > 0.0) tau = t;
    }
    std::vector<double> x(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) x[i] = std::max(y[i] - tau, 0.0);
    return x;
}

struct ProjectionResult {
    TabularGate gate;
    double nu = 0.0;  // multiplier of the Z = 1 constraint
    double Z = 1.0;
};

/// Frobenius projection onto {simplex rows} with sum_x pi_g(x) = 1, by bisection on the scalar dual.
inline ProjectionResult project_G1_dual(std::span<const double> raw, const ExpertTable& table) {
    std::size_t n = table.size(), p = table.num_experts();
    if (raw.size() != n * p) throw std::invalid_argument("project_G1: matrix size mismatch");
    for (double v : raw)
        if (!std::isfinite(v)) throw std::invalid_argument("project_G1: non-finite entry");
    double smin = table.sum_lo(), smax = table.sum_hi();
    if (smin > 1.0 + kArithTol || smax < 1.0 - kArithTol)
        throw InfeasibleError("project_G1: no gate with Z = 1 (sum of min = " + std::to_string(smin) + ", sum of max = " + std::to_string(smax) + ")");

    std::vector<double> out(n * p), shifted(p);
    auto eval = [&](double nu) {
        double Z = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t k = 0; k < p; ++k) shifted[k] = raw[i * p + k] - nu * table.prob(i, k);
            auto r = project_simplex(shifted);
            for (std::size_t k = 0; k < p; ++k) {
                out[i * p + k] = r[k];
                Z += r[k] * table.prob(i, k);
            }
        }
        return Z;
    };

    double Z0 = eval(0.0);
    double best_nu = 0.0, best_err = std::abs(Z0 - 1.0);
    if (best_err > 1e-13) {
        double lo = -1.0, hi = 1.0;
        for (int it = 0; it < 200 && eval(lo) < 1.0; ++it) lo *= 2.0;
        for (int it = 0; it < 200 && eval(hi) > 1.0; ++it) hi *= 2.0;
        for (int it = 0; it < 200; ++it) {
            double mid = 0.5 * (lo + hi);
            double Z = eval(mid);
            double err = std::abs(Z - 1.0);
            if (err < best_err) {
                best_err = err;
                best_nu = mid;
            }
            if (err <= 1e-14 || mid == lo || mid == hi) break;
            if (Z > 1.0) lo = mid;
            else hi = mid;
        }
    }
    double Z = eval(best_nu);
    if (std::abs(Z - 1.0) > 1e-8) throw NumericalError("project_G1: bisection did not reach |Z-1| <= 1e-8");
    // rows out of project_simplex can drift from 1 by an ulp; renormalize so the row check is exact
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < p; ++k) s += out[i * p + k];
        for (std::size_t k = 0; k < p; ++k) out[i * p + k] /= s;
    }
    return {TabularGate(table.support_ptr(), p, std::move(out)), best_nu, Z};
}

inline TabularGate project_G1(std::span<const double> raw, const ExpertTable& table) { return project_G1_dual(raw, table).gate; }

inline TabularGate project_G1(std::span<const double> raw, const ExpertSet& experts, SupportPtr support) {
    return project_G1(raw, ExpertTable(experts, std::move(support)));
}

inline bool in_G1(const TabularGate& g, const ExpertTable& table, double ztol) {
    return std::abs(partition_Z(g, table) - 1.0) <= ztol;
}

inline void write_gate(std::ostream& os, const TabularGate& g) {
    std::ostringstream buf;
    buf << std::setprecision(17);
    buf << "modgate-gate-tab v1\n" << g.size() << ' ' << g.support().length() << ' ' << g.num_experts() << '\n';
    for (std::size_t i = 0; i < g.size(); ++i) {
        buf << g.support()[i].str() << " |";
        for (double v : g.row(i)) buf << ' ' << v;
        buf << '\n';
    }
    os << buf.str();
}

inline void write_gate(std::ostream& os, const FeatGate& g) {
    std::ostringstream buf;
    buf << std::setprecision(17);
    buf << "modgate-gate-feat v1 " << g.dim() << ' ' << g.num_experts() << '\n';
    for (int i = 0; i < g.dim(); ++i) {
        for (std::size_t k = 0; k < g.num_experts(); ++k) buf << (k ? " " : "") << g.theta(i, k);
        buf << '\n';
    }
    os << buf.str();
}

inline TabularGate read_tabular_gate_body(std::istream& is) {
    std::size_t n = 0, T = 0, p = 0;
    if (!(is >> n >> T >> p) || p == 0) throw std::runtime_error("read_gate: bad tabular dimensions");
    std::vector<Seq> seqs(n);
    std::vector<double> w(n * p);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<int> tok(T);
        for (auto& t : tok)
            if (!(is >> t)) throw std::runtime_error("read_gate: truncated support row");
        std::string bar;
        if (!(is >> bar) || bar != "|") throw std::runtime_error("read_gate: missing separator");
        for (std::size_t k = 0; k < p; ++k)
            if (!(is >> w[i * p + k])) throw std::runtime_error("read_gate: truncated weights");
        seqs[i] = Seq(std::move(tok));
    }
    auto sup = make_support(seqs);
    if (sup->size() != n) throw std::runtime_error("read_gate: duplicate support rows");
    return TabularGate(sup, p, std::move(w));
}

inline FeatGate read_feat_gate_body(std::istream& is) {
    int d = 0;
    std::size_t p = 0;
    if (!(is >> d >> p) || d < 3 || d % 2 == 0 || p == 0) throw std::runtime_error("read_gate: bad feature dimensions");
    std::vector<double> theta(static_cast<std::size_t>(d) * p);
    for (auto& v : theta)
        if (!(is >> v)) throw std::runtime_error("read_gate: truncated theta");
    return FeatGate((d - 1) / 2, p, std::move(theta));
}

}  // namespace modgate
