#pragma once

#include "modgate/distcore.hpp"
#include "modgate/experts.hpp"
#include "modgate/gates.hpp"
#include "modgate/sampler.hpp"

#include <map>

namespace modgate {

/// Per-step router: softmax over experts of Phi^T psi(prefix).
/// psi = last-token one-hot (V), last offset one-hot (V, empty before two tokens), len(prefix)/T, bias.
class CausalRouter {
public:
    CausalRouter() = default;

    CausalRouter(int V, int T, std::size_t p) : V_(V), T_(T), p_(p), phi_(static_cast<std::size_t>(dim(V)) * p, 0.0) {
        if (V < 1 || T < 1 || p == 0) throw std::invalid_argument("CausalRouter: bad dimensions");
    }

    CausalRouter(int V, int T, std::size_t p, std::vector<double> phi) : V_(V), T_(T), p_(p), phi_(std::move(phi)) {
        if (V < 1 || T < 1 || p == 0 || phi_.size() != static_cast<std::size_t>(dim(V)) * p) throw std::invalid_argument("CausalRouter: Phi size mismatch");
    }

    static int dim(int V) { return 2 * V + 2; }

    int vocab_size() const { return V_; }
    int length() const { return T_; }
    int dim() const { return dim(V_); }
    std::size_t num_experts() const { return p_; }
    std::vector<double>& phi() { return phi_; }
    const std::vector<double>& phi() const { return phi_; }

    std::vector<std::pair<int, double>> features(std::span<const int> prefix) const {
        std::vector<std::pair<int, double>> f;
        std::size_t len = prefix.size();
        if (len >= 1) f.emplace_back(prefix[len - 1], 1.0);
        if (len >= 2) f.emplace_back(V_ + ((prefix[len - 1] - prefix[len - 2]) % V_ + V_) % V_, 1.0);
        f.emplace_back(2 * V_, static_cast<double>(len) / static_cast<double>(T_));
        f.emplace_back(2 * V_ + 1, 1.0);
        return f;
    }

    std::vector<double> logits(std::span<const int> prefix) const {
        std::vector<double> z(p_, 0.0);
        for (auto [i, v] : features(prefix))
            for (std::size_t k = 0; k < p_; ++k) z[k] += v * phi_[static_cast<std::size_t>(i) * p_ + k];
        return z;
    }

    std::vector<double> routing(std::span<const int> prefix) const { return softmax(logits(prefix)); }

private:
    int V_ = 0, T_ = 0;
    std::size_t p_ = 0;
    std::vector<double> phi_;
};

using RoutingFn = std::function<std::vector<double>(std::span<const int>)>;

inline RoutingFn as_routing(const CausalRouter& r) {
    return [r](std::span<const int> h) { return r.routing(h); };
}

/// Teacher mass of every prefix of the support, split by expert: mass[h][k] = sum_{x extends h} g(x,k) pi_k(x).
class PrefixMass {
public:
    PrefixMass(const TabularGate& gate, const ExpertTable& table) : p_(gate.num_experts()) {
        if (gate.size() != table.size() || gate.num_experts() != table.num_experts()) throw std::invalid_argument("PrefixMass: gate/table mismatch");
        for (std::size_t i = 0; i < gate.size(); ++i) {
            const Seq& x = gate.support()[i];
            for (std::size_t t = 0; t <= x.size(); ++t) {
                auto& m = mass_[Seq(std::vector<int>(x.tokens.begin(), x.tokens.begin() + static_cast<std::ptrdiff_t>(t)))];
                if (m.empty()) m.assign(p_, 0.0);
                for (std::size_t k = 0; k < p_; ++k) m[k] += gate(i, k) * table.prob(i, k);
            }
        }
    }

    double total(std::span<const int> h) const {
        auto it = mass_.find(Seq(std::vector<int>(h.begin(), h.end())));
        if (it == mass_.end()) return 0.0;
        double s = 0.0;
        for (double v : it->second) s += v;
        return s;
    }

    std::vector<double> posterior(std::span<const int> h) const {
        auto it = mass_.find(Seq(std::vector<int>(h.begin(), h.end())));
        double s = 0.0;
        if (it != mass_.end())
            for (double v : it->second) s += v;
        if (!(s > 0.0)) throw ZeroMassError("posterior_router: prefix has zero teacher mass");
        std::vector<double> out(it->second);
        for (double& v : out) v /= s;
        return out;
    }

    std::size_t num_experts() const { return p_; }

private:
    std::size_t p_;
    std::unordered_map<Seq, std::vector<double>, SeqHash> mass_;
};

/// gamma*_k(h) = sum_{x extends h} g(x,k) pi_k(x) / sum_{x extends h} pi_g(x), by enumeration.
inline MixtureWeights posterior_router(const TabularGate& gate, const ExpertTable& table, std::span<const int> prefix) {
    std::size_t p = gate.num_experts();
    std::vector<double> m(p, 0.0);
    for (std::size_t i = 0; i < gate.size(); ++i) {
        const Seq& x = gate.support()[i];
        if (prefix.size() > x.size() || !std::equal(prefix.begin(), prefix.end(), x.tokens.begin())) continue;
        for (std::size_t k = 0; k < p; ++k) m[k] += gate(i, k) * table.prob(i, k);
    }
    double s = 0.0;
    for (double v : m) s += v;
    if (!(s > 0.0)) throw ZeroMassError("posterior_router: prefix has zero teacher mass");
    return MixtureWeights::normalized(std::move(m));
}

inline RoutingFn posterior_routing(const TabularGate& gate, const ExpertTable& table) {
    auto pm = std::make_shared<const PrefixMass>(gate, table);
    return [pm](std::span<const int> h) { return pm->posterior(h); };
}

/// sum_t LSE_k(ln gamma_k(x_<t) + ln pi_k(x_t | x_<t)).
inline double student_seq_logprob(const RoutingFn& router, const ExpertSet& experts, const Seq& x) {
    double lp = 0.0;
    std::vector<double> terms(experts.size());
    for (std::size_t t = 0; t < x.size(); ++t) {
        auto h = x.prefix(t);
        auto w = router(h);
        for (std::size_t k = 0; k < experts.size(); ++k)
            terms[k] = w[k] > 0.0 ? std::log(w[k]) + experts[k]->next_log_prob(h, x[t]) : kNegInf;
        lp += log_sum_exp(terms);
        if (lp == kNegInf) return kNegInf;
    }
    return lp;
}

inline double student_seq_logprob(const CausalRouter& router, const ExpertSet& experts, const Seq& x) {
    return student_seq_logprob(as_routing(router), experts, x);
}

struct ChainRuleResult {
    double total_kl = 0.0;
    double stepwise_sum = 0.0;
    double router_bound = 0.0;
};

/// KL(teacher || student) by enumeration, its per-step conditional decomposition, and the router-KL bound.
inline ChainRuleResult chain_rule_decomposition(const TabularGate& gate, const ExpertTable& table, const ExpertSet& experts, const RoutingFn& router) {
    std::size_t p = experts.size();
    PrefixMass pm(gate, table);
    auto pi = model_probs(gate, table);
    double Z = 0.0;
    for (double v : pi) Z += v;
    if (!(Z > 0.0)) throw ZeroMassError("chain_rule_decomposition: Z_g == 0");
    int V = experts.front()->vocab_size();

    ChainRuleResult r;
    for (std::size_t i = 0; i < gate.size(); ++i) {
        if (pi[i] <= 0.0) continue;
        double P = pi[i] / Z;
        double s = student_seq_logprob(router, experts, gate.support()[i]);
        r.total_kl += s == kNegInf ? kInf : P * (std::log(P) - s);
    }

    // distinct prefixes of positive mass, lengths 0 .. T-1
    std::unordered_map<Seq, bool, SeqHash> seen;
    for (std::size_t i = 0; i < gate.size(); ++i) {
        if (pi[i] <= 0.0) continue;
        const Seq& x = gate.support()[i];
        for (std::size_t t = 0; t < x.size(); ++t) {
            Seq h(std::vector<int>(x.tokens.begin(), x.tokens.begin() + static_cast<std::ptrdiff_t>(t)));
            if (!seen.emplace(h, true).second) continue;
            double mh = pm.total(h.tokens);
            if (!(mh > 0.0)) continue;
            double Ph = mh / Z;
            auto gamma = router(h.tokens);
            auto gstar = pm.posterior(h.tokens);
            r.router_bound += Ph * kl(std::span<const double>(gstar), std::span<const double>(gamma));
            std::vector<int> hv(h.tokens);
            hv.push_back(0);
            double step = 0.0;
            for (int v = 0; v < V; ++v) {
                hv.back() = v;
                double pv = pm.total(hv) / mh;
                if (pv <= 0.0) continue;
                double sv = 0.0;
                for (std::size_t k = 0; k < p; ++k) sv += gamma[k] * experts[k]->next_prob(h.tokens, v);
                if (sv <= 0.0) {
                    step = kInf;
                    break;
                }
                step += pv * std::log(pv / sv);
            }
            r.stepwise_sum += Ph * step;
        }
    }
    return r;
}

struct CachedTuple {
    std::vector<int> prefix;
    int target = 0;
    std::vector<double> probs;  // per-expert next-token probability of target
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// M teacher sequences by rejection sampling (sequence i uses its own seed derived from `seed`), one tuple per step.
template <GateLike G>
std::vector<CachedTuple> generate_cached_dataset(const G& gate, const ExpertSet& experts, std::size_t M, std::uint64_t seed,
                                                 std::vector<Seq>* sequences = nullptr) {
    if (M == 0) throw std::invalid_argument("generate_cached_dataset: corpus size must be positive");
    std::vector<CachedTuple> out;
    for (std::size_t i = 0; i < M; ++i) {
        Rng rng(splitmix64(seed ^ splitmix64(i)));
        Seq x = rejection_sample(gate, experts, rng).seq;
        for (std::size_t t = 0; t < x.size(); ++t) {
            CachedTuple c;
            c.prefix.assign(x.tokens.begin(), x.tokens.begin() + static_cast<std::ptrdiff_t>(t));
            c.target = x[t];
            c.probs.resize(experts.size());
            for (std::size_t k = 0; k < experts.size(); ++k) c.probs[k] = experts[k]->next_prob(c.prefix, x[t]);
            out.push_back(std::move(c));
        }
        if (sequences) sequences->push_back(std::move(x));
    }
    return out;
}

struct RouterTraining {
    CausalRouter router;
    std::vector<double> loss;  // training loss before each step, plus the final value
    std::size_t skipped = 0;   // tuples whose expert probabilities are all zero
};

/// Mean over non-skipped tuples of -ln(routing(h) . P).
inline double router_loss(const CausalRouter& router, const std::vector<CachedTuple>& data) {
    double s = 0.0;
    std::size_t n = 0;
    std::vector<double> terms(router.num_experts());
    for (const auto& c : data) {
        bool any = false;
        for (double v : c.probs) any |= v > 0.0;
        if (!any) continue;
        auto z = router.logits(c.prefix);
        double lz = log_sum_exp(z);
        for (std::size_t k = 0; k < terms.size(); ++k) terms[k] = c.probs[k] > 0.0 ? z[k] - lz + std::log(c.probs[k]) : kNegInf;
        s -= log_sum_exp(terms);
        ++n;
    }
    return n ? s / static_cast<double>(n) : 0.0;
}

/// Gradient descent on the cached mixture cross-entropy. batch == 0 uses the full dataset each step;
/// otherwise each step draws `batch` tuples with the seeded generator.
inline RouterTraining train_router(const std::vector<CachedTuple>& data, CausalRouter router, std::size_t steps, double eta, std::uint64_t seed = 0,
                                   std::size_t batch = 0) {
    if (data.empty()) throw std::invalid_argument("train_router: empty dataset");
    std::size_t p = router.num_experts();
    // collapse identical (prefix, target) tuples into weighted entries
    struct Entry {
        std::vector<std::pair<int, double>> feat;
        std::vector<double> logP;
        double weight;
    };
    std::map<std::pair<std::vector<int>, int>, std::size_t> where;
    std::vector<Entry> entries;
    RouterTraining out;
    std::size_t used = 0;
    for (const auto& c : data) {
        if (c.probs.size() != p) throw std::invalid_argument("train_router: tuple width does not match the router");
        bool any = false;
        for (double v : c.probs) any |= v > 0.0;
        if (!any) {
            ++out.skipped;
            continue;
        }
        ++used;
        auto key = std::make_pair(c.prefix, c.target);
        auto it = where.find(key);
        if (it != where.end()) {
            entries[it->second].weight += 1.0;
            continue;
        }
        Entry e;
        e.feat = router.features(c.prefix);
        e.logP.resize(p);
        for (std::size_t k = 0; k < p; ++k) e.logP[k] = c.probs[k] > 0.0 ? std::log(c.probs[k]) : kNegInf;
        e.weight = 1.0;
        where.emplace(std::move(key), entries.size());
        entries.push_back(std::move(e));
    }
    if (used == 0) throw std::invalid_argument("train_router: every tuple has all-zero expert probabilities");
    for (auto& e : entries) e.weight /= static_cast<double>(used);

    std::vector<double> grad(router.phi().size()), z(p), terms(p);
    std::vector<double> wts;
    for (const auto& e : entries) wts.push_back(e.weight);
    std::discrete_distribution<std::size_t> pick(wts.begin(), wts.end());
    Rng rng(seed);
    std::vector<std::size_t> chosen;
    auto pass = [&](bool want_grad) {
        double loss = 0.0;
        if (want_grad) std::fill(grad.begin(), grad.end(), 0.0);
        chosen.clear();
        if (want_grad && batch > 0)
            for (std::size_t b = 0; b < batch; ++b) chosen.push_back(pick(rng));
        std::size_t count = chosen.empty() ? entries.size() : chosen.size();
        for (std::size_t idx = 0; idx < count; ++idx) {
            const Entry& e = chosen.empty() ? entries[idx] : entries[chosen[idx]];
            double wt = chosen.empty() ? e.weight : 1.0 / static_cast<double>(batch);
            std::fill(z.begin(), z.end(), 0.0);
            for (auto [i, v] : e.feat)
                for (std::size_t k = 0; k < p; ++k) z[k] += v * router.phi()[static_cast<std::size_t>(i) * p + k];
            double lz = log_sum_exp(z);
            for (std::size_t k = 0; k < p; ++k) terms[k] = e.logP[k] == kNegInf ? kNegInf : z[k] - lz + e.logP[k];
            double lmix = log_sum_exp(terms);
            loss -= wt * lmix;
            if (!want_grad) continue;
            for (std::size_t k = 0; k < p; ++k) {
                // d(-ln mix)/dz_k = w_k - w_k P_k / mix
                double d = wt * (std::exp(z[k] - lz) - (terms[k] == kNegInf ? 0.0 : std::exp(terms[k] - lmix)));
                for (auto [i, v] : e.feat) grad[static_cast<std::size_t>(i) * p + k] += v * d;
            }
        }
        return loss;
    };
    for (std::size_t s = 0; s < steps; ++s) {
        double l = pass(true);
        out.loss.push_back(batch > 0 ? pass(false) : l);
        for (std::size_t j = 0; j < grad.size(); ++j) router.phi()[j] -= eta * grad[j];
    }
    out.loss.push_back(pass(false));
    out.router = std::move(router);
    return out;
}

/// Markov student fitted on a rejection-sampled teacher corpus.
template <GateLike G>
MarkovExpert monolithic_distill(const G& gate, const ExpertSet& experts, std::size_t M, double alpha, std::uint64_t seed) {
    if (M == 0) throw std::invalid_argument("monolithic_distill: corpus size must be positive");
    Rng rng(seed);
    auto corpus = rejection_corpus(gate, experts, M, rng);
    return fit_mle(corpus, experts.front()->vocab_size(), experts.front()->length(), alpha);
}

inline void write_cache(std::ostream& os, const std::vector<CachedTuple>& data, std::size_t p, int V, int T) {
    std::ostringstream buf;
    buf << std::setprecision(17);
    buf << "modgate-cache v1 " << p << ' ' << V << ' ' << T << '\n';
    for (const auto& c : data) {
        for (int t : c.prefix) buf << t << ' ';
        buf << "| " << c.target << " |";
        for (double v : c.probs) buf << ' ' << v;
        buf << '\n';
    }
    os << buf.str();
}

inline std::vector<CachedTuple> read_cache(std::istream& is, std::size_t* p_out = nullptr) {
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("read_cache: empty file");
    std::istringstream h(line);
    std::string magic, version;
    std::size_t p = 0;
    int V = 0, T = 0;
    if (!(h >> magic >> version >> p >> V >> T) || magic != "modgate-cache" || version != "v1" || p == 0) throw std::runtime_error("read_cache: bad header");
    std::vector<CachedTuple> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto a = line.find('|');
        auto b = line.find('|', a == std::string::npos ? a : a + 1);
        if (a == std::string::npos || b == std::string::npos) throw std::runtime_error("read_cache: malformed tuple line");
        CachedTuple c;
        std::istringstream pre(line.substr(0, a)), mid(line.substr(a + 1, b - a - 1)), post(line.substr(b + 1));
        int x;
        while (pre >> x) c.prefix.push_back(x);
        if (!(mid >> c.target)) throw std::runtime_error("read_cache: missing target");
        c.probs.resize(p);
        for (auto& v : c.probs)
            if (!(post >> v)) throw std::runtime_error("read_cache: truncated probabilities");
        out.push_back(std::move(c));
    }
    if (p_out) *p_out = p;
    return out;
}

inline void write_router(std::ostream& os, const CausalRouter& r) {
    std::ostringstream buf;
    buf << std::setprecision(17);
    buf << "modgate-router v1 " << r.vocab_size() << ' ' << r.length() << ' ' << r.num_experts() << '\n';
    for (int i = 0; i < r.dim(); ++i) {
        for (std::size_t k = 0; k < r.num_experts(); ++k) buf << (k ? " " : "") << r.phi()[static_cast<std::size_t>(i) * r.num_experts() + k];
        buf << '\n';
    }
    os << buf.str();
}

inline CausalRouter read_router(std::istream& is) {
    std::string magic, version;
    int V = 0, T = 0;
    std::size_t p = 0;
    if (!(is >> magic >> version >> V >> T >> p) || magic != "modgate-router" || version != "v1") throw std::runtime_error("read_router: bad header");
    std::vector<double> phi(static_cast<std::size_t>(CausalRouter::dim(V)) * p);
    for (auto& v : phi)
        if (!(is >> v)) throw std::runtime_error("read_router: truncated Phi");
    return CausalRouter(V, T, p, std::move(phi));
}

}  // namespace modgate
