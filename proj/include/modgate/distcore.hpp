#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace modgate {

inline constexpr double kInf = std::numeric_limits<double>::infinity();
inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline constexpr double kBuildTol = 1e-12;
inline constexpr double kArithTol = 1e-9;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class SupportMismatchError : public Error {
public:
    using Error::Error;
};

class InfeasibleError : public Error {
public:
    using Error::Error;
};

class ZeroMassError : public Error {
public:
    using Error::Error;
};

class BudgetError : public Error {
public:
    using Error::Error;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

/// Fixed-length token sequence. Validation against (V, T) happens where an instance is known.
struct Seq {
    std::vector<int> tokens;

    Seq() = default;
    Seq(std::initializer_list<int> t) : tokens(t) {}
    explicit Seq(std::vector<int> t) : tokens(std::move(t)) {}

    std::size_t size() const { return tokens.size(); }
    int operator[](std::size_t i) const { return tokens[i]; }
    std::span<const int> prefix(std::size_t len) const { return {tokens.data(), len}; }

    bool operator==(const Seq&) const = default;
    auto operator<=>(const Seq&) const = default;

    std::string str() const {
        std::string out;
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (i) out += ' ';
            out += std::to_string(tokens[i]);
        }
        return out;
    }
};

struct SeqHash {
    std::size_t operator()(const Seq& s) const noexcept {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (int t : s.tokens) {
            h ^= static_cast<std::uint64_t>(static_cast<std::uint32_t>(t)) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        }
        return static_cast<std::size_t>(h);
    }
};

/// Ordered, duplicate-free list of sequences with reverse index. First occurrence wins.
class SupportSet {
public:
    SupportSet() = default;

    explicit SupportSet(const std::vector<Seq>& seqs) {
        for (const auto& s : seqs) add(s);
    }

    std::size_t size() const { return seqs_.size(); }
    bool empty() const { return seqs_.empty(); }
    const Seq& operator[](std::size_t i) const { return seqs_[i]; }
    const std::vector<Seq>& seqs() const { return seqs_; }
    auto begin() const { return seqs_.begin(); }
    auto end() const { return seqs_.end(); }

    std::optional<std::size_t> index_of(const Seq& s) const {
        auto it = index_.find(s);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }
    bool contains(const Seq& s) const { return index_.count(s) != 0; }

    /// Sequence length, or 0 for an empty set.
    std::size_t length() const { return seqs_.empty() ? 0 : seqs_.front().size(); }

    bool operator==(const SupportSet& o) const { return seqs_ == o.seqs_; }

private:
    void add(const Seq& s) {
        if (!seqs_.empty() && s.size() != seqs_.front().size())
            throw std::invalid_argument("SupportSet: sequences of different lengths");
        if (index_.emplace(s, seqs_.size()).second) seqs_.push_back(s);
    }

    std::vector<Seq> seqs_;
    std::unordered_map<Seq, std::size_t, SeqHash> index_;
};

using SupportPtr = std::shared_ptr<const SupportSet>;

inline SupportPtr make_support(const std::vector<Seq>& seqs) {
    return std::make_shared<const SupportSet>(seqs);
}

/// Probability vector over the simplex of p experts or sources.
class MixtureWeights {
public:
    MixtureWeights() = default;

    explicit MixtureWeights(std::vector<double> w, double tol = kBuildTol) : w_(std::move(w)) {
        if (w_.empty()) throw std::invalid_argument("MixtureWeights: empty");
        double s = 0.0;
        for (double v : w_) {
            if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("MixtureWeights: negative or non-finite entry");
            s += v;
        }
        if (std::abs(s - 1.0) > tol) throw std::invalid_argument("MixtureWeights: does not sum to 1");
    }

    static MixtureWeights uniform(std::size_t p) { return MixtureWeights(std::vector<double>(p, 1.0 / static_cast<double>(p))); }

    static MixtureWeights one_hot(std::size_t p, std::size_t k) {
        std::vector<double> w(p, 0.0);
        w.at(k) = 1.0;
        return MixtureWeights(std::move(w));
    }

    /// Normalizes non-negative weights; throws if the total is zero.
    static MixtureWeights normalized(std::vector<double> w) {
        double s = 0.0;
        for (double v : w) s += v;
        if (!(s > 0.0) || !std::isfinite(s)) throw ZeroMassError("MixtureWeights: all-zero normalizer");
        for (double& v : w) v /= s;
        return MixtureWeights(std::move(w), kArithTol);
    }

    std::size_t size() const { return w_.size(); }
    double operator[](std::size_t k) const { return w_[k]; }
    const std::vector<double>& values() const { return w_; }
    std::span<const double> span() const { return w_; }

private:
    std::vector<double> w_;
};

/// Distribution over an enumerated support; linear-space storage since supports are small.
class DiscreteDist {
public:
    DiscreteDist() = default;

    DiscreteDist(SupportPtr support, std::vector<double> probs, double tol = kBuildTol)
        : support_(std::move(support)), probs_(std::move(probs)) {
        if (!support_) throw std::invalid_argument("DiscreteDist: null support");
        if (probs_.size() != support_->size()) throw std::invalid_argument("DiscreteDist: size mismatch with support");
        double s = 0.0;
        for (double v : probs_) {
            if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("DiscreteDist: negative or non-finite entry");
            s += v;
        }
        if (std::abs(s - 1.0) > tol) throw std::invalid_argument("DiscreteDist: does not sum to 1");
    }

    static DiscreteDist normalized(SupportPtr support, std::vector<double> weights) {
        double s = 0.0;
        for (double v : weights) s += v;
        if (!(s > 0.0)) throw ZeroMassError("DiscreteDist: zero total mass");
        for (double& v : weights) v /= s;
        return DiscreteDist(std::move(support), std::move(weights), kArithTol);
    }

    const SupportPtr& support_ptr() const { return support_; }
    const SupportSet& support() const { return *support_; }
    std::size_t size() const { return probs_.size(); }
    double operator[](std::size_t i) const { return probs_[i]; }
    const std::vector<double>& probs() const { return probs_; }

    double prob(const Seq& x) const {
        auto i = support_->index_of(x);
        return i ? probs_[*i] : 0.0;
    }

    /// Same distribution expressed over a superset support.
    DiscreteDist rebase(const SupportPtr& superset) const {
        std::vector<double> out(superset->size(), 0.0);
        for (std::size_t i = 0; i < probs_.size(); ++i) {
            auto j = superset->index_of((*support_)[i]);
            if (!j) {
                if (probs_[i] > 0.0) throw SupportMismatchError("rebase: target support misses a mass point");
                continue;
            }
            out[*j] = probs_[i];
        }
        return DiscreteDist(superset, std::move(out), kArithTol);
    }

private:
    SupportPtr support_;
    std::vector<double> probs_;
};

inline bool same_support(const DiscreteDist& a, const DiscreteDist& b) {
    return a.support_ptr() == b.support_ptr() || a.support() == b.support();
}

/// Union of supports in order of first appearance.
inline SupportPtr union_support(std::span<const DiscreteDist> dists) {
    std::vector<Seq> all;
    for (const auto& d : dists)
        for (std::size_t i = 0; i < d.size(); ++i)
            if (d[i] > 0.0) all.push_back(d.support()[i]);
    return make_support(all);
}

/// Re-expresses every dist over the union of their positive-mass points.
inline std::vector<DiscreteDist> on_common_support(std::span<const DiscreteDist> dists) {
    auto u = union_support(dists);
    std::vector<DiscreteDist> out;
    out.reserve(dists.size());
    for (const auto& d : dists) {
        std::vector<double> probs(u->size(), 0.0);
        for (std::size_t i = 0; i < d.size(); ++i)
            if (d[i] > 0.0) probs[*u->index_of(d.support()[i])] = d[i];
        out.emplace_back(u, std::move(probs), kArithTol);
    }
    return out;
}

/// KL(p || q) in nats for raw vectors; q may be any non-negative measure. Returns +inf on p(x)>0, q(x)=0.
inline double kl(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw SupportMismatchError("kl: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        if (q[i] <= 0.0) return kInf;
        s += p[i] * std::log(p[i] / q[i]);
    }
    return s;
}

inline double kl(const DiscreteDist& p, const DiscreteDist& q) {
    if (!same_support(p, q)) throw SupportMismatchError("kl: distributions over different supports");
    return kl(std::span<const double>(p.probs()), std::span<const double>(q.probs()));
}

inline DiscreteDist mixture(std::span<const DiscreteDist> dists, const MixtureWeights& lambda) {
    if (dists.empty() || dists.size() != lambda.size()) throw std::invalid_argument("mixture: length mismatch");
    const auto& sup = dists.front().support_ptr();
    std::vector<double> out(dists.front().size(), 0.0);
    for (std::size_t k = 0; k < dists.size(); ++k) {
        if (!same_support(dists[k], dists.front())) throw SupportMismatchError("mixture: distributions over different supports");
        if (lambda[k] == 0.0) continue;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += lambda[k] * dists[k][i];
    }
    return DiscreteDist(sup, std::move(out), kArithTol);
}

/// Generalized Jensen-Shannon divergence: sum_k lambda_k KL(p_k || p_lambda).
inline double jsd(std::span<const DiscreteDist> dists, const MixtureWeights& lambda) {
    auto m = mixture(dists, lambda);
    double s = 0.0;
    for (std::size_t k = 0; k < dists.size(); ++k)
        if (lambda[k] > 0.0) s += lambda[k] * kl(dists[k], m);
    return s;
}

inline double entropy(std::span<const double> w) {
    double h = 0.0;
    for (double v : w)
        if (v > 0.0) h -= v * std::log(v);
    return h;
}

inline double entropy(const MixtureWeights& lambda) { return entropy(lambda.span()); }

inline double log_sum_exp(std::span<const double> v) {
    if (v.empty()) throw std::invalid_argument("log_sum_exp: empty input");
    double m = *std::max_element(v.begin(), v.end());
    if (m == kNegInf) return kNegInf;
    if (m == kInf) return kInf;
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

inline double log_sum_exp(std::initializer_list<double> v) {
    return log_sum_exp(std::span<const double>(v.begin(), v.size()));
}

inline std::vector<double> softmax(std::span<const double> logits) {
    double m = *std::max_element(logits.begin(), logits.end());
    std::vector<double> w(logits.size());
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += (w[i] = std::exp(logits[i] - m));
    for (double& x : w) x /= s;
    return w;
}

inline double total_variation(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw SupportMismatchError("total_variation: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
    return 0.5 * s;
}

/// Empirical frequencies of samples over a support; samples off the support are counted in `outside`.
inline std::vector<double> empirical(const std::vector<Seq>& samples, const SupportSet& support, std::size_t* outside = nullptr) {
    std::vector<double> f(support.size(), 0.0);
    std::size_t off = 0;
    for (const auto& s : samples) {
        if (auto i = support.index_of(s)) f[*i] += 1.0;
        else ++off;
    }
    if (!samples.empty())
        for (double& v : f) v /= static_cast<double>(samples.size());
    if (outside) *outside = off;
    return f;
}

}  // namespace modgate
