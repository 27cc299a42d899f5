#include "modgate/harness/pipelines.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

using namespace modgate;
using namespace modgate::harness;

namespace {

// Fresh working directory under the build tree for one CLI scenario.
fs::path scratch(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / ("modgate_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_config(const fs::path& dir, const std::string& body) { write_text(dir / "run.cfg", body); }

int cli(const fs::path& dir, const std::string& args) {
    std::string cmd = std::string(MODGATE_CLI) + " " + args + " --out " + dir.string() + " > " + (dir / "stdout.txt").string() + " 2> " + (dir / "stderr.txt").string();
    int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

int run(const fs::path& dir, const std::string& sub, const std::string& extra = "") {
    return cli(dir, sub + " --config " + (dir / "run.cfg").string() + " " + extra);
}

std::string slurp(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

struct Csv {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;
    double at(std::size_t r, const std::string& col) const {
        auto it = std::find(header.begin(), header.end(), col);
        if (it == header.end()) throw std::runtime_error("no column " + col);
        return rows.at(r)[static_cast<std::size_t>(it - header.begin())];
    }
};

Csv read_csv(const fs::path& path) {
    std::ifstream f(path);
    Csv c;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (c.header.empty()) {
            c.header = cells;
            continue;
        }
        std::vector<double> v;
        for (const auto& s : cells) v.push_back(std::stod(s));
        c.rows.push_back(v);
    }
    return c;
}

std::map<std::string, double> read_quantities(const fs::path& path) {
    std::map<std::string, double> out;
    std::ifstream f(path);
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#' || line == "quantity,value") continue;
        auto comma = line.find(',');
        out[line.substr(0, comma)] = std::stod(line.substr(comma + 1));
    }
    return out;
}

}  // namespace

TEST(Config, ParsesCommentsAndRejectsUnknownKeys) {
    std::stringstream ok("# experiment\nvocab = 4  # tokens\n\nlength=3\n");
    auto c = Config::parse(ok);
    EXPECT_EQ(c.integer("vocab"), 4);
    EXPECT_TRUE(c.was_set("length"));
    EXPECT_FALSE(c.was_set("alpha"));
    EXPECT_EQ(c.real("alpha"), 0.0);
    std::stringstream bad("vocab=3\ncolour=blue\n");
    EXPECT_THROW(Config::parse(bad), ConfigError);
    std::stringstream noeq("vocab 3\n");
    EXPECT_THROW(Config::parse(noeq), ConfigError);
}

TEST(Config, TypedAccessors) {
    Config c;
    c.set("lambda_upper", "1,0.05");
    EXPECT_EQ(c.list("lambda_upper"), (std::vector<double>{1.0, 0.05}));
    c.set("iterations", "12x");
    EXPECT_THROW(c.integer("iterations"), ConfigError);
    c.set("iterations", "-3");
    EXPECT_THROW(c.count("iterations"), ConfigError);
    c.set("eta_mu", "abc");
    EXPECT_THROW(c.real("eta_mu"), ConfigError);
    EXPECT_THROW(c.set("nope", "1"), ConfigError);
    for (const auto& k : config_keys()) EXPECT_NE(help_text().find(k.key), std::string::npos);
}

TEST(Baselines, ContextModelOrders) {
    auto in = domain_instance(3, 4, 0.0, 0.0, 0.0);
    auto half = mixture(in.sources, MixtureWeights::uniform(2));
    ContextModel one(3, 1, 0.0), two(3, 2, 0.0);
    one.fit(half, 6.0);
    two.fit(half, 6.0);
    auto markov = fit_mle_population(half, 3, 4, 0.0, 6.0);
    for (std::size_t i = 0; i < half.size(); ++i) EXPECT_NEAR(one.log_prob(half.support()[i]), markov.log_prob(half.support()[i]), 1e-12);
    EXPECT_NEAR(expected_nll(half, [&](const Seq& x) { return two.log_prob(x); }), std::log(6.0), 1e-12);
    EXPECT_EQ(two.log_prob(Seq{0, 0, 0, 0}), kNegInf);
}

TEST(Baselines, Inversions) {
    EXPECT_FALSE(has_inversion(Seq{0, 1, 2, 0}, 3));
    EXPECT_TRUE(has_inversion(Seq{0, 1, 0, 2}, 3));
    EXPECT_FALSE(has_inversion(Seq{1, 1, 1}, 4));
}

TEST(Cli, FitExpertsWritesExactEpsilons) {
    auto dir = scratch("fit");
    write_config(dir, "vocab=3\nlength=2\n");
    ASSERT_EQ(run(dir, "fit-experts"), 0) << slurp(dir / "stderr.txt");
    auto q = read_quantities(dir / "manifest.csv");
    EXPECT_EQ(q["epsilon_1"], 0.0);
    EXPECT_EQ(q["epsilon_2"], 0.0);

    write_config(dir, "vocab=3\nlength=2\nalpha=0.1\n");
    ASSERT_EQ(run(dir, "fit-experts"), 0);
    q = read_quantities(dir / "manifest.csv");
    auto experts = load_experts(dir);
    auto a = domain_dist({3, 2, Rule::increment, 0.0});
    double eps = kl(std::span<const double>(a.probs()), std::span<const double>(induced_dist(*experts[0], a.support())));
    EXPECT_GT(q["epsilon_1"], 0.0);
    EXPECT_NEAR(q["epsilon_1"], eps, 1e-9);
}

TEST(Cli, ConfigErrorsExitTwo) {
    auto dir = scratch("cfgerr");
    write_config(dir, "length=2\n");
    EXPECT_EQ(run(dir, "fit-experts"), 2);
    EXPECT_NE(slurp(dir / "stderr.txt").find("vocab"), std::string::npos);
    write_config(dir, "vocab=3\nlength=2\nbogus=1\n");
    EXPECT_EQ(run(dir, "fit-experts"), 2);
}

TEST(Cli, UsageErrorsExitOne) {
    auto dir = scratch("usage");
    EXPECT_EQ(cli(dir, "frobnicate"), 1);
    EXPECT_EQ(cli(dir, "solve --seed notanumber"), 1);
    write_config(dir, "vocab=3\nlength=2\n");
    ASSERT_EQ(run(dir, "fit-experts"), 0);
    write_config(dir, "vocab=3\nlength=2\nmethod=annealing\n");
    EXPECT_EQ(run(dir, "solve"), 1);
    EXPECT_EQ(cli(dir, "--help"), 0);
    EXPECT_NE(slurp(dir / "stdout.txt").find("corpus_size"), std::string::npos);
}

TEST(Cli, MissingInputsExitTwo) {
    auto dir = scratch("missing");
    write_config(dir, "vocab=3\nlength=2\n");
    EXPECT_EQ(run(dir, "solve"), 2);
    EXPECT_EQ(run(dir, "sweep"), 2);
}

TEST(Cli, SweepOnCleanDomains) {
    auto dir = scratch("sweep");
    write_config(dir, "vocab=3\nlength=4\n");
    ASSERT_EQ(run(dir, "fit-experts"), 0);
    ASSERT_EQ(run(dir, "solve"), 0) << slurp(dir / "stderr.txt");
    ASSERT_EQ(run(dir, "sweep"), 0) << slurp(dir / "stderr.txt");
    auto c = read_csv(dir / "sweep.csv");
    EXPECT_EQ(c.header, (std::vector<std::string>{"lambda", "gate_nll", "fixed_small_nll", "fixed_large_nll", "oracle_nll", "expert_a_nll", "expert_b_nll"}));
    ASSERT_EQ(c.rows.size(), 11u);
    for (std::size_t r = 0; r < 11; ++r) EXPECT_NEAR(c.at(r, "lambda"), r / 10.0, 1e-15);
    double ln2 = std::log(2.0), ln3 = std::log(3.0);
    std::size_t mid = 5;
    EXPECT_GE(c.at(mid, "fixed_small_nll"), ln3 + 3 * ln2 - 0.05);
    EXPECT_NEAR(c.at(0, "oracle_nll"), c.at(0, "expert_b_nll"), 1e-12);
    EXPECT_GE(c.at(mid, "oracle_nll"), c.at(0, "oracle_nll") + 0.2);
    EXPECT_GE(c.at(mid, "oracle_nll") - c.at(mid, "gate_nll"), 1.0);
    // a normalized model facing six equally likely trajectories cannot go below ln 6
    for (std::size_t r = 0; r < 11; ++r) EXPECT_NEAR(c.at(r, "gate_nll"), std::log(6.0), 1e-9);
}

TEST(Cli, SweepResampleAddsSpread) {
    auto dir = scratch("resample");
    write_config(dir, "vocab=3\nlength=3\nalpha=0.05\ncontamination_a=0.2\ncontamination_b=0.1\nlambda_step=0.5\ntest_size=200\n");
    ASSERT_EQ(run(dir, "fit-experts"), 0);
    ASSERT_EQ(run(dir, "solve"), 0) << slurp(dir / "stderr.txt");
    ASSERT_EQ(run(dir, "sweep", "--resample 5 --seed 3"), 0) << slurp(dir / "stderr.txt");
    auto c = read_csv(dir / "sweep.csv");
    EXPECT_EQ(c.header.size(), 13u);
    EXPECT_EQ(c.rows.size(), 3u);
    EXPECT_GT(c.at(1, "gate_nll_std"), 0.0);
}

TEST(Cli, SolveExactReportsMinimaxRisk) {
    auto dir = scratch("solve");
    write_config(dir, "vocab=3\nlength=2\n");
    ASSERT_EQ(run(dir, "fit-experts"), 0);
    ASSERT_EQ(run(dir, "solve"), 0);
    auto q = read_quantities(dir / "bound_report.csv");
    EXPECT_NEAR(q["measured_worst_case"], std::log(2.0), 1e-9);
    EXPECT_NEAR(q["bound_value"], 0.0, 1e-12);
    EXPECT_NEAR(q["Z_support"], 1.0, 1e-8);
    auto t = read_csv(dir / "trace.csv");
    EXPECT_EQ(t.header, (std::vector<std::string>{"iter", "lambda_1", "lambda_2", "loss_1", "loss_2", "mu", "Z_hat", "Z_ema", "gap"}));
    EXPECT_EQ(t.rows.size(), 200u);
    EXPECT_NE(slurp(dir / "bound_report.csv").find("# provenance"), std::string::npos);
}

TEST(Cli, SolvePrimalDualReplica) {
    auto dir = scratch("pd");
    write_config(dir, "vocab=8\nlength=4\nalpha=0.01\nmethod=primal-dual\niterations=600\n");
    ASSERT_EQ(run(dir, "fit-experts"), 0);
    ASSERT_EQ(run(dir, "solve", "--seed 5"), 0) << slurp(dir / "stderr.txt");
    auto t = read_csv(dir / "trace.csv");
    EXPECT_NEAR(t.rows.back()[static_cast<std::size_t>(std::find(t.header.begin(), t.header.end(), "Z_ema") - t.header.begin())], 1.0, 0.05);
    auto q = read_quantities(dir / "bound_report.csv");
    EXPECT_NEAR(q["lambda_star_1"], 0.5, 0.1);
    EXPECT_EQ(slurp(dir / "gate.txt").rfind("modgate-gate-feat", 0), 0u);
}

TEST(Cli, SampleStatisticsAndDeterminism) {
    auto dir = scratch("sample");
    write_config(dir, "vocab=3\nlength=3\nalpha=0.1\ncount=5000\n");
    ASSERT_EQ(run(dir, "fit-experts"), 0);
    // a uniform feature gate: the mixture of the experts, so rejection accepts one proposal in p
    write_text(dir / "gate.txt", [] {
        std::ostringstream os;
        write_gate(os, FeatGate(3, 2));
        return os.str();
    }());
    ASSERT_EQ(run(dir, "sample", "--seed 4"), 0) << slurp(dir / "stderr.txt");
    auto out = slurp(dir / "stdout.txt");
    auto pos = out.find("acceptance rate ");
    ASSERT_NE(pos, std::string::npos);
    EXPECT_NEAR(std::stod(out.substr(pos + 16)), 0.5, 0.02);
    auto first = slurp(dir / "corpus.txt");
    ASSERT_EQ(run(dir, "sample", "--seed 4"), 0);
    EXPECT_EQ(slurp(dir / "corpus.txt"), first);

    write_config(dir, "vocab=3\nlength=3\nalpha=0.1\ncount=2000\nsampler=sir\ncandidates=1\n");
    ASSERT_EQ(run(dir, "sample", "--seed 4"), 0);
    EXPECT_NE(slurp(dir / "stdout.txt").find("fallbacks 0"), std::string::npos);
    write_config(dir, "vocab=3\nlength=3\nsampler=gibbs\n");
    EXPECT_EQ(run(dir, "sample"), 1);
}

TEST(Cli, DistillOnCleanDomains) {
    auto dir = scratch("distill");
    write_config(dir, "vocab=3\nlength=4\ncorpus_size=500\nrouter_steps=2000\n");
    ASSERT_EQ(run(dir, "fit-experts"), 0);
    ASSERT_EQ(run(dir, "solve"), 0);
    ASSERT_EQ(run(dir, "distill", "--seed 2"), 0) << slurp(dir / "stderr.txt");
    auto c = read_csv(dir / "distill.csv");
    EXPECT_EQ(c.header, (std::vector<std::string>{"lambda", "teacher_nll", "causal_router_nll", "monolithic_nll"}));
    for (std::size_t r = 0; r < c.rows.size(); ++r) EXPECT_LE(c.at(r, "causal_router_nll") - c.at(r, "teacher_nll"), 0.1);
    EXPECT_GE(c.at(5, "monolithic_nll") - c.at(5, "causal_router_nll"), 3 * std::log(2.0) * 0.5);
    for (const char* f : {"cache.txt", "router.txt", "student.txt"}) EXPECT_TRUE(fs::exists(dir / f));
    EXPECT_NE(slurp(dir / "stdout.txt").find("inversion rate"), std::string::npos);

    write_config(dir, "vocab=3\nlength=4\ncorpus_size=0\n");
    EXPECT_EQ(run(dir, "distill"), 2);
}

TEST(Cli, DistillInversionRateStaysLowWithSmoothedExperts) {
    auto dir = scratch("inversions");
    write_config(dir, "vocab=4\nlength=4\nalpha=0.02\ncontamination_a=0.1\ncontamination_b=0.1\ncorpus_size=400\nrouter_steps=200\n");
    ASSERT_EQ(run(dir, "fit-experts"), 0);
    ASSERT_EQ(run(dir, "solve"), 0) << slurp(dir / "stderr.txt");
    ASSERT_EQ(run(dir, "distill", "--seed 6"), 0) << slurp(dir / "stderr.txt");
    auto out = slurp(dir / "stdout.txt");
    auto pos = out.find("inversion rate ");
    ASSERT_NE(pos, std::string::npos);
    double rate = std::stod(out.substr(pos + 15));
    // the trained gate keeps almost no mass on sequences neither domain produces
    EXPECT_GE(rate, 0.0);
    EXPECT_LT(rate, 0.05);
}

TEST(Cli, AnalyzeRestrictedSet) {
    auto dir = scratch("analyze");
    write_config(dir, "vocab=3\nlength=3\nalpha=0.05\ncontamination_a=0.3\ncontamination_b=0.2\nlambda_lower=0,0\nlambda_upper=1,0.05\niterations=1000\n");
    ASSERT_EQ(run(dir, "fit-experts"), 0);
    ASSERT_EQ(run(dir, "analyze"), 0) << slurp(dir / "stderr.txt");
    auto q = read_quantities(dir / "analysis.csv");
    EXPECT_NEAR(q["hausdorff_l1"], 1.9, 1e-12);
    EXPECT_LE(q["value_restricted"], q["value_full_simplex"]);
    EXPECT_LE(q["value_full_simplex"], q["value_restricted_plus_L_dH"] + 1e-9);
    EXPECT_TRUE(std::isfinite(q["lipschitz_estimate"]));
    EXPECT_GE(q["retrained_markov_kl"], q["jsd_gap_lower_bound"]);
}

TEST(Cli, SeedReproducibility) {
    auto a = scratch("repro_a"), b = scratch("repro_b");
    for (const auto& dir : {a, b}) {
        write_config(dir, "vocab=4\nlength=3\nalpha=0.05\nsamples_per_domain=200\nmethod=primal-dual\niterations=50\ncorpus_size=50\nrouter_steps=20\n");
        ASSERT_EQ(run(dir, "fit-experts", "--seed 11"), 0);
        ASSERT_EQ(run(dir, "solve", "--seed 11"), 0) << slurp(dir / "stderr.txt");
        ASSERT_EQ(run(dir, "distill", "--seed 11"), 0) << slurp(dir / "stderr.txt");
    }
    for (const char* f : {"expert_a.txt", "manifest.csv", "gate.txt", "trace.csv", "cache.txt", "router.txt", "student.txt", "distill.csv"})
        EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
}
