#pragma once

#include "modgate/distcore.hpp"
#include "modgate/experts.hpp"
#include "modgate/gates.hpp"

namespace modgate {

/// ln q(x) for the uniform expert mixture q = (1/p) sum_k pi_k.
inline double proposal_logq(const ExpertSet& experts, const Seq& x) {
    std::vector<double> L(experts.size());
    for (std::size_t k = 0; k < experts.size(); ++k) L[k] = experts[k]->log_prob(x);
    return log_sum_exp(L) - std::log(static_cast<double>(experts.size()));
}

inline Seq sample_proposal(const ExpertSet& experts, Rng& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, experts.size() - 1);
    return experts[pick(rng)]->sample(rng);
}

/// ln pi_g(x), or -inf when a tabular gate does not cover x.
template <GateLike G>
double gate_logpi_or_zero(const G& gate, const ExpertSet& experts, const Seq& x) {
    if constexpr (std::is_same_v<G, TabularGate>) {
        if (!gate.support().contains(x)) return kNegInf;
    }
    return gate_logpi(gate, experts, x);
}

struct SirResult {
    Seq seq;
    bool fallback = false;
};

/// Sampling-importance-resampling with N candidates from q and weights pi_g / q.
template <GateLike G>
SirResult sir_sample(const G& gate, const ExpertSet& experts, std::size_t N, Rng& rng) {
    if (N == 0) throw std::invalid_argument("sir_sample: N must be positive");
    std::vector<Seq> cand(N);
    std::vector<double> logw(N);
    double mx = kNegInf;
    for (std::size_t i = 0; i < N; ++i) {
        cand[i] = sample_proposal(experts, rng);
        double lw = gate_logpi_or_zero(gate, experts, cand[i]) - proposal_logq(experts, cand[i]);
        logw[i] = std::isfinite(lw) ? lw : kNegInf;
        mx = std::max(mx, logw[i]);
    }
    SirResult out;
    if (!std::isfinite(mx)) {
        out.fallback = true;
        out.seq = cand[std::uniform_int_distribution<std::size_t>(0, N - 1)(rng)];
        return out;
    }
    std::vector<double> w(N);
    for (std::size_t i = 0; i < N; ++i) w[i] = std::exp(logw[i] - mx);
    std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
    out.seq = cand[pick(rng)];
    return out;
}

template <GateLike G>
SirResult sir_sample(const G& gate, const ExpertSet& experts, std::size_t N, std::uint64_t seed) {
    Rng rng(seed);
    return sir_sample(gate, experts, N, rng);
}

struct RejectionResult {
    Seq seq;
    std::size_t trials = 0;
};

/// Exact sampling from pi_g / Z_g: propose from q, accept with pi_g / (p q) <= 1.
template <GateLike G>
RejectionResult rejection_sample(const G& gate, const ExpertSet& experts, Rng& rng, std::size_t max_trials = 0) {
    std::size_t p = experts.size();
    if (max_trials == 0) max_trials = 100 * p;
    double logp = std::log(static_cast<double>(p));
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (std::size_t trial = 1; trial <= max_trials; ++trial) {
        Seq x = sample_proposal(experts, rng);
        double logA = gate_logpi_or_zero(gate, experts, x) - logp - proposal_logq(experts, x);
        double u = unif(rng);
        if (u > 0.0 && std::log(u) <= logA) return {std::move(x), trial};
    }
    throw BudgetError("rejection_sample: no acceptance within " + std::to_string(max_trials) + " trials");
}

template <GateLike G>
RejectionResult rejection_sample(const G& gate, const ExpertSet& experts, std::uint64_t seed, std::size_t max_trials = 0) {
    Rng rng(seed);
    return rejection_sample(gate, experts, rng, max_trials);
}

struct CorpusStats {
    std::size_t samples = 0;
    std::size_t trials = 0;     // rejection only
    std::size_t fallbacks = 0;  // SIR only
    double acceptance_rate() const { return trials ? static_cast<double>(samples) / static_cast<double>(trials) : 0.0; }
};

template <GateLike G>
std::vector<Seq> rejection_corpus(const G& gate, const ExpertSet& experts, std::size_t count, Rng& rng, CorpusStats* stats = nullptr,
                                  std::size_t max_trials = 0) {
    std::vector<Seq> out;
    out.reserve(count);
    CorpusStats st;
    for (std::size_t i = 0; i < count; ++i) {
        auto r = rejection_sample(gate, experts, rng, max_trials);
        st.trials += r.trials;
        out.push_back(std::move(r.seq));
    }
    st.samples = count;
    if (stats) *stats = st;
    return out;
}

template <GateLike G>
std::vector<Seq> sir_corpus(const G& gate, const ExpertSet& experts, std::size_t count, std::size_t N, Rng& rng, CorpusStats* stats = nullptr) {
    std::vector<Seq> out;
    out.reserve(count);
    CorpusStats st;
    for (std::size_t i = 0; i < count; ++i) {
        auto r = sir_sample(gate, experts, N, rng);
        st.fallbacks += r.fallback ? 1 : 0;
        out.push_back(std::move(r.seq));
    }
    st.samples = count;
    if (stats) *stats = st;
    return out;
}

/// pi_g over the gate support, normalized by Z_g.
inline DiscreteDist exact_model_dist(const TabularGate& gate, const ExpertTable& table) {
    auto pi = model_probs(gate, table);
    double Z = 0.0;
    for (double v : pi) Z += v;
    if (!(Z > 0.0)) throw ZeroMassError("exact_model_dist: Z_g == 0");
    return DiscreteDist::normalized(gate.support_ptr(), std::move(pi));
}

inline DiscreteDist exact_model_dist(const TabularGate& gate, const ExpertSet& experts) {
    return exact_model_dist(gate, ExpertTable(experts, gate.support_ptr()));
}

inline void write_corpus(std::ostream& os, const std::vector<Seq>& corpus, int V, int T) {
    std::ostringstream buf;
    buf << "# modgate-corpus v1 " << V << ' ' << T << ' ' << corpus.size() << '\n';
    for (const auto& s : corpus) buf << s.str() << '\n';
    os << buf.str();
}

inline std::vector<Seq> read_corpus(std::istream& is, int* V = nullptr, int* T = nullptr) {
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("read_corpus: empty file");
    std::istringstream h(line);
    std::string hash, magic, version;
    int v = 0, t = 0;
    std::size_t n = 0;
    if (!(h >> hash >> magic >> version >> v >> t >> n) || hash != "#" || magic != "modgate-corpus" || version != "v1")
        throw std::runtime_error("read_corpus: bad header");
    std::vector<Seq> out;
    out.reserve(n);
    while (out.size() < n && std::getline(is, line)) {
        std::istringstream ls(line);
        std::vector<int> tok;
        int x;
        while (ls >> x) tok.push_back(x);
        if (static_cast<int>(tok.size()) != t) throw std::runtime_error("read_corpus: sequence of wrong length");
        out.emplace_back(std::move(tok));
    }
    if (out.size() != n) throw std::runtime_error("read_corpus: truncated corpus");
    if (V) *V = v;
    if (T) *T = t;
    return out;
}

}  // namespace modgate
