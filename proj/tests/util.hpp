#pragma once

#include "modgate/modgate.hpp"

#include <random>

namespace testutil {

using namespace modgate;

inline SupportPtr tokens_support(int n) {
    std::vector<Seq> s;
    for (int i = 0; i < n; ++i) s.push_back(Seq{i});
    return make_support(s);
}

inline std::vector<double> random_simplex(std::size_t n, Rng& rng, double floor = 0.0) {
    std::exponential_distribution<double> e(1.0);
    std::vector<double> w(n);
    double s = 0.0;
    for (auto& v : w) s += (v = e(rng) + floor);
    for (auto& v : w) v /= s;
    return w;
}

inline DiscreteDist random_dist(const SupportPtr& sup, Rng& rng, double floor = 0.0) {
    return DiscreteDist(sup, random_simplex(sup->size(), rng, floor), kArithTol);
}

inline MarkovExpert random_markov(int V, int T, Rng& rng, double floor = 0.05) {
    std::vector<double> start = random_simplex(V, rng, floor), trans;
    for (int u = 0; u < V; ++u) {
        auto row = random_simplex(V, rng, floor);
        trans.insert(trans.end(), row.begin(), row.end());
    }
    return MarkovExpert(V, T, start, trans);
}

}  // namespace testutil
