#pragma once

#include "modgate/distcore.hpp"
#include "modgate/experts.hpp"
#include "modgate/gates.hpp"

namespace modgate {

/// Sources on their common support together with the expert table over it.
struct Instance {
    int V = 0;
    int T = 0;
    SupportPtr support;
    std::vector<DiscreteDist> sources;
    ExpertSet experts;
    ExpertTable table;
};

inline Instance make_instance(const std::vector<DiscreteDist>& sources, ExpertSet experts) {
    if (sources.empty() || sources.size() != experts.size()) throw std::invalid_argument("make_instance: one source per expert required");
    Instance in;
    in.V = experts.front()->vocab_size();
    in.T = experts.front()->length();
    in.sources = on_common_support(sources);
    in.support = in.sources.front().support_ptr();
    in.experts = std::move(experts);
    in.table = ExpertTable(in.experts, in.support);
    return in;
}

/// Domain A (increment, contamination cA) and domain B (decrement, contamination cB), experts fitted to the
/// exact populations with pseudo-counts V per domain (one count per clean trajectory).
inline Instance domain_instance(int V, int T, double cA, double cB, double alpha) {
    auto a = domain_dist({V, T, Rule::increment, cA});
    auto b = domain_dist({V, T, Rule::decrement, cB});
    ExpertSet ex{std::make_shared<MarkovExpert>(fit_mle_population(a, V, T, alpha, V)),
                 std::make_shared<MarkovExpert>(fit_mle_population(b, V, T, alpha, V))};
    return make_instance({a, b}, std::move(ex));
}

/// V=3, T=2, clean domains, exact experts on disjoint supports.
inline Instance instance_I1() { return domain_instance(3, 2, 0.0, 0.0, 0.0); }

/// T=1, V=2: both experts (0.5, 0.5), both targets (0.6, 0.4).
inline Instance instance_I2() {
    auto sup = make_support({Seq{0}, Seq{1}});
    DiscreteDist t(sup, {0.6, 0.4});
    auto e = std::make_shared<MarkovExpert>(2, 1, std::vector<double>{0.5, 0.5}, std::vector<double>{0.5, 0.5, 0.5, 0.5});
    return make_instance({t, t}, {e, e});
}

/// Single-step instance over V symbols: expert k has start distribution experts[k], source k is targets[k].
inline Instance unigram_instance(const std::vector<std::vector<double>>& targets, const std::vector<std::vector<double>>& experts) {
    int V = static_cast<int>(targets.front().size());
    std::vector<Seq> all;
    for (int v = 0; v < V; ++v) all.push_back(Seq{v});
    auto sup = make_support(all);
    std::vector<DiscreteDist> src;
    ExpertSet ex;
    std::vector<double> flat(static_cast<std::size_t>(V) * V, 1.0 / V);
    for (std::size_t k = 0; k < targets.size(); ++k) {
        src.emplace_back(sup, targets[k], kArithTol);
        ex.push_back(std::make_shared<MarkovExpert>(V, 1, experts[k], flat));
    }
    Instance in;
    in.V = V;
    in.T = 1;
    in.support = sup;
    in.sources = std::move(src);
    in.experts = std::move(ex);
    in.table = ExpertTable(in.experts, sup);
    return in;
}

}  // namespace modgate
