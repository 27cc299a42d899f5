#include "util.hpp"

#include <gtest/gtest.h>

using namespace modgate;

namespace {

// Bases with disjoint supports that partition tokens 0..n-1 into contiguous blocks.
std::vector<DiscreteDist> block_basis(const SupportPtr& sup, const std::vector<std::size_t>& cuts, Rng& rng) {
    std::vector<DiscreteDist> out;
    std::size_t from = 0;
    for (std::size_t to : cuts) {
        std::vector<double> w(sup->size(), 0.0);
        auto r = testutil::random_simplex(to - from, rng, 0.1);
        for (std::size_t j = from; j < to; ++j) w[j] = r[j - from];
        out.emplace_back(sup, w, kArithTol);
        from = to;
    }
    return out;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
    return d;
}

double coincidence_mismatch(const std::vector<DiscreteDist>& sources, const std::vector<DiscreteDist>& basis, const MixtureWeights& l) {
    auto direct = linear_family_project(mixture(sources, l), basis);
    std::vector<double> blend(sources.front().size(), 0.0);
    for (std::size_t k = 0; k < sources.size(); ++k) {
        auto pk = linear_family_project(sources[k], basis);
        for (std::size_t x = 0; x < blend.size(); ++x) blend[x] += l[k] * pk.model[x];
    }
    return max_abs_diff(direct.model, blend);
}

}  // namespace

TEST(Sigma, Values) {
    std::vector<double> z2{0, 0}, z4{0, 0, 0, 0}, e{0.01, 0.5};
    EXPECT_NEAR(softmax_sigma(z2)[0], 0.5, 1e-15);
    EXPECT_NEAR(softmax_sigma(z4)[3], 0.25, 1e-15);
    auto s = softmax_sigma(e);
    EXPECT_NEAR(s[0], 0.3799, 1e-4);
    EXPECT_NEAR(s[1], 0.6201, 1e-4);
}

TEST(Capacity, Values) {
    std::vector<double> z2{0, 0}, one{0.37};
    EXPECT_NEAR(capacity_bound(z2), std::log(2.0), 1e-15);
    EXPECT_NEAR(capacity_bound(one), 0.37, 1e-15);
}

TEST(Capacity, NoStaticGateBeatsItOnDisjointExperts) {
    std::vector<Instance> cases{instance_I1(), unigram_instance({{0.5, 0.5, 0, 0}, {0, 0, 0.5, 0.5}}, {{0.9, 0.1, 0, 0}, {0, 0, 0.3, 0.7}})};
    for (const auto& in : cases) {
        double cap = capacity_bound(expert_epsilons(in.sources, in.table));
        double best = kInf;
        for (int i = 0; i <= 1000; ++i) {
            double w = i / 1000.0;
            auto pi = model_probs(TabularGate::constant(in.support, MixtureWeights({w, 1 - w})), in.table);
            auto l = source_losses(in.sources, pi);
            best = std::min(best, std::max(l[0], l[1]));
        }
        EXPECT_GE(best, cap - 1e-3);
        EXPECT_LE(best, cap + 1e-3);
    }
}

TEST(Overlap, DisjointAndIdenticalExperts) {
    auto i1 = instance_I1();
    auto u = MixtureWeights::uniform(2);
    EXPECT_NEAR(overlap_gain(i1.sources, i1.table, u, u), 0.0, 1e-15);
    auto i2 = instance_I2();
    EXPECT_NEAR(overlap_gain(i2.sources, i2.table, u, MixtureWeights({0.3, 0.7})), std::log(2.0), 1e-15);
}

TEST(Overlap, IdenticalExpertsEntropyIdentity) {
    std::vector<double> e{0.25, 0.25, 0.25, 0.25};
    auto in = unigram_instance({{0.27, 0.25, 0.24, 0.24}, {0.7, 0.2, 0.05, 0.05}}, {e, e});
    auto eps = expert_epsilons(in.sources, in.table);
    auto sigma = softmax_sigma(eps);
    double by_overlap = overlap_gain(in.sources, in.table, sigma, sigma);
    EXPECT_NEAR(by_overlap, entropy(sigma), 1e-13);
    EXPECT_NEAR(by_overlap, capacity_bound(eps) - constant_gate_bound(eps, sigma), 1e-13);
    // evaluated at lambda* = sigma the bound collapses to sum sigma_k eps_k
    auto r = robust_bound_report(in.sources, in.table, sigma, sigma);
    EXPECT_NEAR(r.capacity - r.overlap, constant_gate_bound(eps, sigma), 1e-13);
}

TEST(BoundReport, DisjointExperts) {
    auto in = instance_I1();
    auto u = MixtureWeights::uniform(2);
    auto r = robust_bound_report(in.sources, in.table, u, u);
    EXPECT_NEAR(r.value, 0.0, 1e-14);
    auto r1 = robust_bound_report(in.sources, in.table, u, MixtureWeights::one_hot(2, 0));
    EXPECT_NEAR(r1.value, std::log(2.0), 1e-14);
}

TEST(BoundReport, IdenticalExperts) {
    auto in = instance_I2();
    auto r = robust_bound_report(in.sources, in.table, MixtureWeights::uniform(2), MixtureWeights({0.2, 0.8}));
    EXPECT_NEAR(r.value, r.epsilons[0], 1e-14);
}

TEST(BoundReport, MeasuredRiskWithinBoundForSolverGate) {
    auto in = domain_instance(3, 3, 0.2, 0.1, 0.1);
    ExactConfig cfg;
    cfg.T = 2000;
    auto tr = solve_exact(in.sources, in.table, LambdaSet::full(2), cfg);
    auto pi = model_probs(*tr.gate_bar, in.table);
    auto l = least_favorable_mixture(tr);
    auto r = robust_bound_report(in.sources, in.table, l, l, &pi);
    EXPECT_LE(r.measured_risk, r.value + 0.01);
    EXPECT_TRUE(std::isfinite(r.measured_worst_case));
}

TEST(BoundReport, UnsmoothedMissThrows) {
    auto in = unigram_instance({{0.5, 0.5}, {0.5, 0.5}}, {{1.0, 0.0}, {0.5, 0.5}});
    auto u = MixtureWeights::uniform(2);
    EXPECT_THROW(robust_bound_report(in.sources, in.table, u, u), NumericalError);
}

TEST(JsdGap, Values) {
    auto in = instance_I1();
    auto u = MixtureWeights::uniform(2);
    auto eps = expert_epsilons(in.sources, in.table);
    EXPECT_NEAR(jsd_gap_lower_bound(in.sources, eps, u), -std::log(2.0), 1e-14);
    auto i2 = instance_I2();
    auto e2 = expert_epsilons(i2.sources, i2.table);
    MixtureWeights l({0.3, 0.7});
    EXPECT_NEAR(jsd_gap_lower_bound(i2.sources, e2, l), constant_gate_bound(e2, l), 1e-15);
}

TEST(JsdGap, RetrainedMarkovRespectsTheBound) {
    for (double a : {0.2, 0.5, 0.8}) {
        auto in = domain_instance(3, 4, 0.1, 0.2, 0.1);
        MixtureWeights l({a, 1 - a});
        auto target = mixture(in.sources, l);
        auto fit = fit_mle_population(target, 3, 4, 0.0, 6.0);
        double measured = kl(std::span<const double>(target.probs()), std::span<const double>(induced_dist(fit, target.support())));
        EXPECT_GE(measured, jsd_gap_lower_bound(in.sources, expert_epsilons(in.sources, in.table), l) - 1e-12);
        EXPECT_GE(measured, 0.0);
    }
}

TEST(LinearFamily, TargetInsideHull) {
    Rng rng(1);
    auto sup = testutil::tokens_support(6);
    std::vector<DiscreteDist> basis{testutil::random_dist(sup, rng, 0.1), testutil::random_dist(sup, rng, 0.1), testutil::random_dist(sup, rng, 0.1)};
    auto target = mixture(basis, MixtureWeights({0.2, 0.5, 0.3}));
    auto r = linear_family_project(target, basis);
    EXPECT_LE(max_abs_diff(r.model, target.probs()), 1e-6);
    EXPECT_LE(r.objective, 1e-10);
}

TEST(LinearFamily, SingleBasisElement) {
    Rng rng(2);
    auto sup = testutil::tokens_support(4);
    std::vector<DiscreteDist> basis{testutil::random_dist(sup, rng, 0.1)};
    auto r = linear_family_project(testutil::random_dist(sup, rng), basis);
    EXPECT_EQ(r.weights[0], 1.0);
}

TEST(LinearFamily, OptimalityAgainstGrid) {
    Rng rng(3);
    auto sup = testutil::tokens_support(5);
    std::vector<DiscreteDist> basis{testutil::random_dist(sup, rng, 0.1), testutil::random_dist(sup, rng, 0.1), testutil::random_dist(sup, rng, 0.1)};
    auto target = testutil::random_dist(sup, rng);
    auto r = linear_family_project(target, basis);
    double best = kInf;
    for (int a = 0; a <= 200; ++a)
        for (int b = 0; a + b <= 200; ++b) {
            auto m = mixture(basis, MixtureWeights({a / 200.0, b / 200.0, (200 - a - b) / 200.0}, 1e-9));
            best = std::min(best, kl(target, m));
        }
    EXPECT_LE(r.objective, best + 1e-7);
}

TEST(LinearFamily, CoincidenceForPartitionBases) {
    Rng rng(4);
    for (int rep = 0; rep < 10; ++rep) {
        auto sup = testutil::tokens_support(9);
        auto basis = block_basis(sup, {3, 5, 9}, rng);
        std::vector<DiscreteDist> sources{testutil::random_dist(sup, rng), testutil::random_dist(sup, rng)};
        MixtureWeights l(testutil::random_simplex(2, rng));
        EXPECT_LE(coincidence_mismatch(sources, basis, l), 1e-5);
    }
}

TEST(LinearFamily, OverlappingBasesNeedNotCoincide) {
    // Without disjoint supports the projection is not linear in the target; this documents the hypothesis.
    Rng rng(5);
    double worst = 0.0;
    for (int rep = 0; rep < 10; ++rep) {
        auto sup = testutil::tokens_support(6);
        std::vector<DiscreteDist> basis{testutil::random_dist(sup, rng, 0.05), testutil::random_dist(sup, rng, 0.05), testutil::random_dist(sup, rng, 0.05)};
        std::vector<DiscreteDist> sources{testutil::random_dist(sup, rng), testutil::random_dist(sup, rng)};
        worst = std::max(worst, coincidence_mismatch(sources, basis, MixtureWeights::uniform(2)));
    }
    EXPECT_GT(worst, 1e-3);
}

TEST(LinearFamily, UncoveredTargetThrows) {
    auto sup = testutil::tokens_support(3);
    std::vector<DiscreteDist> basis{DiscreteDist(sup, {0.5, 0.5, 0.0})};
    EXPECT_THROW(linear_family_project(DiscreteDist(sup, {0.2, 0.2, 0.6}), basis), NumericalError);
}

TEST(CoincidenceNorm, Values) {
    EXPECT_NEAR(coincidence_norm(instance_I1().table), 1.0 / 3, 1e-15);
    auto sup = testutil::tokens_support(1);
    EXPECT_NEAR(coincidence_norm(ExpertTable(sup, 3, {1.0, 1.0, 1.0})), std::sqrt(3.0), 1e-15);
    auto two = testutil::tokens_support(2);
    EXPECT_NEAR(coincidence_norm(ExpertTable(two, 1, {0.3, 0.7})), 0.7, 1e-15);
}

TEST(NllConstant, Values) {
    auto sup = testutil::tokens_support(1);
    EXPECT_EQ(nll_bound_constant(ExpertTable(sup, 1, {1.0})), 0.0);
    double coarse = nll_bound_constant(domain_instance(3, 2, 0.0, 0.0, 0.5).table);
    double fine = nll_bound_constant(domain_instance(3, 2, 0.0, 0.0, 0.1).table);
    EXPECT_TRUE(std::isfinite(fine));
    EXPECT_GT(coarse, 0.0);
    EXPECT_GT(fine, coarse);
}

TEST(Lipschitz, MoreWitnessesNeverLower) {
    auto in = domain_instance(3, 3, 0.2, 0.1, 0.1);
    auto w = standard_witnesses(in.table);
    double before = lipschitz_estimate(in.sources, w);
    w.push_back(model_probs(TabularGate::constant(in.support, MixtureWeights({0.9, 0.1})), in.table));
    EXPECT_GE(lipschitz_estimate(in.sources, w), before);
    EXPECT_GT(before, 0.0);
}

TEST(Hausdorff, ClosedForms) {
    EXPECT_EQ(hausdorff_l1(LambdaSet::full(3)), 0.0);
    EXPECT_NEAR(hausdorff_l1(LambdaSet({0, 0}, {1, 0.05})), 1.9, 1e-15);
    EXPECT_NEAR(hausdorff_l1(LambdaSet({0.5, 0.5}, {0.5, 0.5})), 1.0, 1e-15);
}

TEST(Hausdorff, MatchesGridOnThreeSources) {
    LambdaSet set({0.1, 0.0, 0.2}, {0.5, 0.6, 0.8});
    double worst = 0.0;
    for (int k = 0; k < 3; ++k) {
        double best = kInf;
        for (int a = 0; a <= 200; ++a)
            for (int b = 0; a + b <= 200; ++b) {
                std::vector<double> l{a / 200.0, b / 200.0, (200 - a - b) / 200.0};
                if (!set.contains(l, 1e-12)) continue;
                double d = 0.0;
                for (int j = 0; j < 3; ++j) d += std::abs(l[j] - (j == k ? 1.0 : 0.0));
                best = std::min(best, d);
            }
        worst = std::max(worst, best);
    }
    EXPECT_NEAR(hausdorff_l1(set), worst, 1e-12);
}
