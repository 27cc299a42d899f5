#include "util.hpp"

#include <gtest/gtest.h>

using namespace modgate;

namespace {

// Best achievable KL(target || pi_g) over gates whose pi_g stays in the hull [m, M] with sum 1,
// searched on a grid over the first n-1 coordinates (n <= 3).
double grid_min_kl(std::span<const double> target, const ExpertTable& table, double step) {
    std::size_t n = table.size();
    double best = kInf;
    auto eval = [&](const std::vector<double>& pi) {
        for (std::size_t i = 0; i < n; ++i)
            if (pi[i] < table.lo(i) - 1e-12 || pi[i] > table.hi(i) + 1e-12) return;
        best = std::min(best, kl(target, std::span<const double>(pi)));
    };
    int steps = static_cast<int>(std::round(1.0 / step));
    if (n == 1) eval({1.0});
    if (n == 2)
        for (int a = 0; a <= steps; ++a) eval({a * step, 1.0 - a * step});
    if (n == 3)
        for (int a = 0; a <= steps; ++a)
            for (int b = 0; a + b <= steps; ++b) eval({a * step, b * step, 1.0 - (a + b) * step});
    return best;
}

}  // namespace

TEST(ConstantBound, Values) {
    std::vector<double> zero{0.0, 0.0}, e{0.01, 0.5};
    EXPECT_EQ(constant_gate_bound(zero, MixtureWeights::uniform(2)), 0.0);
    EXPECT_NEAR(constant_gate_bound(e, MixtureWeights({0.95, 0.05})), 0.0345, 1e-12);
    EXPECT_EQ(constant_gate_bound(e, MixtureWeights::one_hot(2, 1)), 0.5);
}

TEST(OptimalGate, SingleExactExpert) {
    auto d = domain_dist({3, 3, Rule::increment, 0.0});
    ExpertSet ex{std::make_shared<MarkovExpert>(fit_mle(d.support().seqs(), 3, 3, 0.0))};
    ExpertTable table(ex, d.support_ptr());
    auto r = optimal_gate_for_target(d.probs(), table);
    EXPECT_EQ(r.mu_star, 1.0);
    for (std::size_t i = 0; i < d.size(); ++i) EXPECT_NEAR(r.pi[i], table.prob(i, 0), 1e-15);
}

TEST(OptimalGate, I1BalancedTargetIsMatchedExactly) {
    auto in = instance_I1();
    auto r = optimal_fixed_gate(in.sources, in.table, MixtureWeights::uniform(2));
    for (double v : r.pi) EXPECT_NEAR(v, 1.0 / 6, 1e-12);
    EXPECT_NEAR(partition_Z(r.gate, in.table), 1.0, 1e-12);
    // the fixed-mixture risk is zero; the per-source average still pays the full divergence ln 2
    auto target = mixture(in.sources, MixtureWeights::uniform(2));
    EXPECT_NEAR(kl(std::span<const double>(target.probs()), std::span<const double>(r.pi)), 0.0, 1e-12);
    auto losses = source_losses(in.sources, r.pi);
    EXPECT_NEAR(0.5 * (losses[0] + losses[1]), std::log(2.0), 1e-12);
    EXPECT_NEAR(jsd(in.sources, MixtureWeights::uniform(2)), std::log(2.0), 1e-12);
}

TEST(OptimalGate, TwoSymbolToyBeatsGrid) {
    auto in = unigram_instance({{0.5, 0.5}, {0.5, 0.5}}, {{0.9, 0.1}, {0.2, 0.8}});
    std::vector<double> target{0.5, 0.5};
    auto r = optimal_gate_for_target(target, in.table);
    EXPECT_LE(kl(std::span<const double>(target), std::span<const double>(r.pi)), grid_min_kl(target, in.table, 1e-3) + 1e-12);
}

TEST(OptimalGate, ClippedCaseBeatsGrid) {
    auto in = unigram_instance({{0.9, 0.05, 0.05}, {0.9, 0.05, 0.05}}, {{0.2, 0.5, 0.3}, {0.4, 0.1, 0.5}});
    auto target = in.sources[0].probs();
    auto r = optimal_gate_for_target(target, in.table);
    EXPECT_NEAR(r.Z, 1.0, 1e-10);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_GE(r.pi[i], in.table.lo(i));
        EXPECT_LE(r.pi[i], in.table.hi(i));
    }
    EXPECT_LE(kl(std::span<const double>(target), std::span<const double>(r.pi)), grid_min_kl(target, in.table, 1e-3) + 1e-12);
    auto realized = model_probs(r.gate, in.table);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(realized[i], r.pi[i], 1e-14);
}

TEST(OptimalGate, RandomInstancesAgainstGrid) {
    Rng rng(5);
    for (int rep = 0; rep < 30; ++rep) {
        std::size_t n = 2 + rep % 2;
        auto sup = testutil::tokens_support(static_cast<int>(n));
        std::vector<double> prob;
        // two sub-probability experts whose hull contains a unit-mass point
        auto a = testutil::random_simplex(n, rng), b = testutil::random_simplex(n, rng);
        for (std::size_t i = 0; i < n; ++i) {
            prob.push_back(a[i]);
            prob.push_back(b[i]);
        }
        ExpertTable table(sup, 2, prob);
        auto target = testutil::random_simplex(n, rng);
        auto r = optimal_gate_for_target(target, table);
        EXPECT_NEAR(r.Z, 1.0, 1e-10);
        EXPECT_LE(kl(std::span<const double>(target), std::span<const double>(r.pi)), grid_min_kl(target, table, 1e-3) + 1e-4);
    }
}

TEST(OptimalGate, ZeroTargetPointsSitAtLowerHull) {
    auto in = unigram_instance({{0.5, 0.5, 0.0}, {0.5, 0.5, 0.0}}, {{0.3, 0.3, 0.4}, {0.5, 0.4, 0.1}});
    auto r = optimal_gate_for_target(in.sources[0].probs(), in.table);
    EXPECT_NEAR(r.pi[2], 0.1, 1e-12);
}

TEST(OptimalGate, InfeasibleHull) {
    auto sup = testutil::tokens_support(2);
    ExpertTable table(sup, 2, {0.1, 0.2, 0.1, 0.2});
    std::vector<double> target{0.5, 0.5};
    EXPECT_THROW(optimal_gate_for_target(target, table), InfeasibleError);
}

TEST(KlVsOptimal, IdenticalExpertsAndSources) {
    auto in = instance_I2();
    auto eps = expert_epsilons(in.sources, in.table);
    auto r = kl_vs_optimal(in.sources, in.table, MixtureWeights({0.3, 0.7}));
    EXPECT_NEAR(r.kl_constant, eps[0], 1e-14);
    EXPECT_NEAR(r.kl_optimal, eps[0], 1e-12);
}

TEST(KlVsOptimal, I1BothZeroAtBalance) {
    auto in = instance_I1();
    auto r = kl_vs_optimal(in.sources, in.table, MixtureWeights::uniform(2));
    EXPECT_NEAR(r.kl_constant, 0.0, 1e-14);
    EXPECT_NEAR(r.kl_optimal, 0.0, 1e-12);
}

TEST(KlVsOptimal, OrderingOnContaminatedInstance) {
    Rng rng(6);
    auto in = domain_instance(3, 2, 0.5, 0.5, 0.0);
    std::uniform_real_distribution<double> u;
    for (int rep = 0; rep < 20; ++rep) {
        double a = u(rng);
        MixtureWeights l({a, 1 - a});
        auto r = kl_vs_optimal(in.sources, in.table, l);
        EXPECT_LE(r.kl_optimal, r.kl_constant + 1e-12);
        EXPECT_LE(r.kl_constant, constant_gate_bound(expert_epsilons(in.sources, in.table), l) + 1e-12);
    }
}

TEST(KlVsOptimal, ConstantGuaranteeOnSmoothedDomains) {
    auto in = domain_instance(4, 3, 0.1, 0.3, 0.05);
    auto eps = expert_epsilons(in.sources, in.table);
    for (double a : {0.0, 0.2, 0.5, 0.9, 1.0}) {
        MixtureWeights l({a, 1 - a});
        auto r = kl_vs_optimal(in.sources, in.table, l);
        EXPECT_LE(r.kl_constant, constant_gate_bound(eps, l) + 1e-12);
        EXPECT_LE(r.kl_optimal, r.kl_constant + 1e-12);
    }
}
