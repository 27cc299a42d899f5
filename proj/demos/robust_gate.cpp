// Two clean Markov domains: solve for the robust gate, then compare it with the
// best constant gate and the clipped optimum at a few fixed mixtures.
#include "modgate/modgate.hpp"

#include <cstdio>

int main() {
    using namespace modgate;
    auto in = domain_instance(3, 3, 0.2, 0.1, 0.1);
    auto set = LambdaSet::full(2);

    ExactConfig cfg;
    cfg.T = 1000;
    cfg.checkpoints = {250, 500, 1000};
    auto trace = solve_exact(in.sources, in.table, set, cfg);
    for (const auto& row : trace.rows) std::printf("T=%-5zu gap=%.3e  lambda=(%.4f, %.4f)\n", row.iter, row.gap, row.lambda[0], row.lambda[1]);

    auto pi = model_probs(*trace.gate_bar, in.table);
    auto losses = source_losses(in.sources, pi);
    std::printf("robust gate: KL to A %.5f, KL to B %.5f\n", losses[0], losses[1]);

    for (double a : {0.1, 0.5, 0.9}) {
        auto r = kl_vs_optimal(in.sources, in.table, MixtureWeights({a, 1.0 - a}));
        std::printf("lambda_A=%.1f  constant gate %.5f  clipped optimum %.5f\n", a, r.kl_constant, r.kl_optimal);
    }
}
