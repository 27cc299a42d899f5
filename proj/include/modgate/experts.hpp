#pragma once

#include "modgate/distcore.hpp"

#include <iomanip>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>

namespace modgate {

using Rng = std::mt19937_64;

/// Autoregressive expert over fixed-length sequences. Implementations are immutable after construction.
class Expert {
public:
    virtual ~Expert() = default;

    virtual int vocab_size() const = 0;
    virtual int length() const = 0;

    /// ln pi(x_t = token | x_<t), with t = prefix.size().
    virtual double next_log_prob(std::span<const int> prefix, int token) const = 0;

    virtual Seq sample(Rng& rng) const = 0;

    virtual double log_prob(const Seq& x) const {
        if (static_cast<int>(x.size()) != length()) throw std::invalid_argument("log_prob: sequence length mismatch");
        double lp = 0.0;
        for (std::size_t t = 0; t < x.size(); ++t) {
            lp += next_log_prob(x.prefix(t), x[t]);
            if (lp == kNegInf) break;
        }
        return lp;
    }

    double next_prob(std::span<const int> prefix, int token) const { return std::exp(next_log_prob(prefix, token)); }
};

using ExpertPtr = std::shared_ptr<const Expert>;
using ExpertSet = std::vector<ExpertPtr>;

/// Order-1 Markov chain: start distribution plus row-stochastic transition matrix.
class MarkovExpert final : public Expert {
public:
    MarkovExpert(int V, int T, std::vector<double> start, std::vector<double> trans, double alpha = 0.0)
        : V_(V), T_(T), alpha_(alpha), start_(std::move(start)), trans_(std::move(trans)) {
        if (V < 1 || T < 1) throw std::invalid_argument("MarkovExpert: V and T must be positive");
        if (start_.size() != static_cast<std::size_t>(V) || trans_.size() != static_cast<std::size_t>(V) * V)
            throw std::invalid_argument("MarkovExpert: table sizes do not match V");
        if (alpha_ < 0.0) throw std::invalid_argument("MarkovExpert: alpha < 0");
        check_row(start_.data(), "start");
        for (int u = 0; u < V; ++u) check_row(trans_.data() + static_cast<std::size_t>(u) * V, "transition row");
        log_start_.resize(start_.size());
        log_trans_.resize(trans_.size());
        for (std::size_t i = 0; i < start_.size(); ++i) log_start_[i] = std::log(start_[i]);
        for (std::size_t i = 0; i < trans_.size(); ++i) log_trans_[i] = std::log(trans_[i]);
    }

    int vocab_size() const override { return V_; }
    int length() const override { return T_; }
    double alpha() const { return alpha_; }
    const std::vector<double>& start() const { return start_; }
    const std::vector<double>& trans() const { return trans_; }
    double trans(int u, int v) const { return trans_[static_cast<std::size_t>(u) * V_ + v]; }

    double next_log_prob(std::span<const int> prefix, int token) const override {
        if (token < 0 || token >= V_) throw std::invalid_argument("MarkovExpert: token out of range");
        if (prefix.empty()) return log_start_[token];
        return log_trans_[static_cast<std::size_t>(prefix.back()) * V_ + token];
    }

    double log_prob(const Seq& x) const override {
        if (static_cast<int>(x.size()) != T_) throw std::invalid_argument("log_prob: sequence length mismatch");
        double lp = log_start_[checked(x[0])];
        for (std::size_t t = 1; t < x.size(); ++t) lp += log_trans_[static_cast<std::size_t>(x[t - 1]) * V_ + checked(x[t])];
        return lp;
    }

    Seq sample(Rng& rng) const override {
        std::vector<int> out(T_);
        out[0] = draw(start_.data(), rng);
        for (int t = 1; t < T_; ++t) out[t] = draw(trans_.data() + static_cast<std::size_t>(out[t - 1]) * V_, rng);
        return Seq(std::move(out));
    }

private:
    int checked(int tok) const {
        if (tok < 0 || tok >= V_) throw std::invalid_argument("MarkovExpert: token out of range");
        return tok;
    }

    void check_row(const double* row, const char* what) const {
        double s = 0.0;
        for (int v = 0; v < V_; ++v) {
            if (!(row[v] >= 0.0) || !std::isfinite(row[v])) throw std::invalid_argument(std::string("MarkovExpert: bad entry in ") + what);
            s += row[v];
        }
        if (std::abs(s - 1.0) > kArithTol) throw std::invalid_argument(std::string("MarkovExpert: ") + what + " does not sum to 1");
    }

    int draw(const double* row, Rng& rng) const {
        double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        double c = 0.0;
        int last = 0;
        for (int v = 0; v < V_; ++v) {
            if (row[v] <= 0.0) continue;
            c += row[v];
            last = v;
            if (u < c) return v;
        }
        return last;
    }

    int V_, T_;
    double alpha_;
    std::vector<double> start_, trans_;
    std::vector<double> log_start_, log_trans_;
};

enum class Rule { increment, decrement };

struct DomainSpec {
    int V = 3;
    int T = 2;
    Rule rule = Rule::increment;
    double contamination = 0.0;
};

inline Seq rule_trajectory(int V, int T, Rule rule, int first) {
    std::vector<int> x(T);
    x[0] = first;
    int step = rule == Rule::increment ? 1 : V - 1;
    for (int t = 1; t < T; ++t) x[t] = (x[t - 1] + step) % V;
    return Seq(std::move(x));
}

/// Population distribution of a synthetic domain: uniform x_1, deterministic rule, fraction c of the opposite rule.
inline DiscreteDist domain_dist(const DomainSpec& spec) {
    if (spec.V < 2 || spec.T < 1) throw std::invalid_argument("domain_dist: need V >= 2 and T >= 1");
    if (!(spec.contamination >= 0.0 && spec.contamination <= 1.0)) throw std::invalid_argument("domain_dist: contamination outside [0,1]");
    Rule other = spec.rule == Rule::increment ? Rule::decrement : Rule::increment;
    std::vector<Seq> seqs;
    std::vector<double> w;
    double c = spec.contamination;
    double unit = 1.0 / spec.V;
    auto add = [&](Rule r, double mass) {
        if (mass <= 0.0) return;
        for (int v = 0; v < spec.V; ++v) {
            Seq s = rule_trajectory(spec.V, spec.T, r, v);
            auto it = std::find(seqs.begin(), seqs.end(), s);
            if (it == seqs.end()) {
                seqs.push_back(std::move(s));
                w.push_back(mass * unit);
            } else {
                w[static_cast<std::size_t>(it - seqs.begin())] += mass * unit;
            }
        }
    };
    add(spec.rule, 1.0 - c);
    add(other, c);
    return DiscreteDist(make_support(seqs), std::move(w), kArithTol);
}

/// Weighted count MLE with additive smoothing. Rows with zero total count (alpha = 0) fall back to uniform.
inline MarkovExpert fit_mle_weighted(const std::vector<Seq>& samples, std::span<const double> weights, int V, int T, double alpha) {
    if (samples.empty()) throw std::invalid_argument("fit_mle: empty sample set");
    if (weights.size() != samples.size()) throw std::invalid_argument("fit_mle: weight count mismatch");
    if (alpha < 0.0) throw std::invalid_argument("fit_mle: alpha < 0");
    std::vector<double> sc(V, 0.0), tc(static_cast<std::size_t>(V) * V, 0.0);
    for (std::size_t n = 0; n < samples.size(); ++n) {
        const auto& x = samples[n];
        if (static_cast<int>(x.size()) != T) throw std::invalid_argument("fit_mle: inconsistent sequence length");
        for (int t : x.tokens)
            if (t < 0 || t >= V) throw std::invalid_argument("fit_mle: token out of range");
        sc[x[0]] += weights[n];
        for (std::size_t t = 1; t < x.size(); ++t) tc[static_cast<std::size_t>(x[t - 1]) * V + x[t]] += weights[n];
    }
    auto normalize = [&](double* row) {
        double s = 0.0;
        for (int v = 0; v < V; ++v) s += (row[v] += alpha);
        for (int v = 0; v < V; ++v) row[v] = s > 0.0 ? row[v] / s : 1.0 / V;
    };
    normalize(sc.data());
    for (int u = 0; u < V; ++u) normalize(tc.data() + static_cast<std::size_t>(u) * V);
    return MarkovExpert(V, T, std::move(sc), std::move(tc), alpha);
}

inline MarkovExpert fit_mle(const std::vector<Seq>& samples, int V, int T, double alpha) {
    std::vector<double> ones(samples.size(), 1.0);
    return fit_mle_weighted(samples, ones, V, T, alpha);
}

/// Population MLE: each support point counted with weight count_scale * p(x).
inline MarkovExpert fit_mle_population(const DiscreteDist& dist, int V, int T, double alpha, double count_scale) {
    std::vector<double> w(dist.probs());
    for (double& v : w) v *= count_scale;
    return fit_mle_weighted(dist.support().seqs(), w, V, T, alpha);
}

inline std::vector<double> induced_dist(const Expert& e, const SupportSet& support) {
    std::vector<double> out(support.size());
    for (std::size_t i = 0; i < support.size(); ++i) out[i] = std::exp(e.log_prob(support[i]));
    return out;
}

/// All V^T sequences in lexicographic order.
inline std::vector<Seq> enumerate_space(int V, int T) {
    double n = std::pow(static_cast<double>(V), T);
    if (n > 5e6) throw std::invalid_argument("enumerate_space: space too large");
    std::vector<Seq> out;
    out.reserve(static_cast<std::size_t>(n));
    std::vector<int> x(T, 0);
    while (true) {
        out.emplace_back(x);
        int t = T - 1;
        while (t >= 0 && ++x[t] == V) x[t--] = 0;
        if (t < 0) break;
    }
    return out;
}

inline void write_expert(std::ostream& os, const MarkovExpert& e) {
    std::ostringstream buf;
    buf << std::setprecision(17);
    buf << "modgate-expert v1 " << e.vocab_size() << ' ' << e.length() << ' ' << e.alpha() << '\n';
    int V = e.vocab_size();
    for (int v = 0; v < V; ++v) buf << (v ? " " : "") << e.start()[v];
    buf << '\n';
    for (int u = 0; u < V; ++u) {
        for (int v = 0; v < V; ++v) buf << (v ? " " : "") << e.trans(u, v);
        buf << '\n';
    }
    os << buf.str();
}

inline MarkovExpert read_expert(std::istream& is) {
    std::string magic, version;
    int V = 0, T = 0;
    double alpha = 0.0;
    if (!(is >> magic >> version >> V >> T >> alpha) || magic != "modgate-expert" || version != "v1")
        throw std::runtime_error("read_expert: bad header");
    if (V < 1 || T < 1) throw std::runtime_error("read_expert: bad dimensions");
    std::vector<double> start(V), trans(static_cast<std::size_t>(V) * V);
    for (auto& v : start)
        if (!(is >> v)) throw std::runtime_error("read_expert: truncated start row");
    for (auto& v : trans)
        if (!(is >> v)) throw std::runtime_error("read_expert: truncated transition table");
    return MarkovExpert(V, T, std::move(start), std::move(trans), alpha);
}

}  // namespace modgate
