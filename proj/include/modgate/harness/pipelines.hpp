#pragma once

#include "modgate/harness/baselines.hpp"
#include "modgate/harness/config.hpp"
#include "modgate/modgate.hpp"

#include <cstdio>
#include <filesystem>
#include <variant>

namespace modgate::harness {

namespace fs = std::filesystem;

/// Bad command-line usage, including an unrecognized method or sampler name.
class UsageError : public Error {
public:
    using Error::Error;
};

inline std::string num(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_text(const fs::path& path, const std::string& content) {
    std::error_code ec;
    if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    f << content;
    if (!f) throw Error("cannot write " + path.string());
}

inline std::ifstream open_input(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("missing input file " + path.string() + " (run the earlier pipeline stage first)");
    return f;
}

struct Domains {
    int V = 0;
    int T = 0;
    std::vector<DiscreteDist> sources;  // A then B, on their common support
};

inline Domains domains_from(const Config& cfg) {
    Domains d;
    d.V = static_cast<int>(cfg.integer("vocab"));
    d.T = static_cast<int>(cfg.integer("length"));
    if (d.V < 2 || d.T < 1) throw ConfigError("need vocab >= 2 and length >= 1");
    double ca = cfg.real("contamination_a"), cb = cfg.real("contamination_b");
    if (!(ca >= 0.0 && ca <= 1.0 && cb >= 0.0 && cb <= 1.0)) throw ConfigError("contamination must lie in [0,1]");
    std::vector<DiscreteDist> raw{domain_dist({d.V, d.T, Rule::increment, ca}), domain_dist({d.V, d.T, Rule::decrement, cb})};
    d.sources = on_common_support(raw);
    return d;
}

inline std::string provenance(const Config& cfg, std::uint64_t seed) {
    std::ostringstream os;
    os << "# provenance instance=domains V=" << cfg.str("vocab") << " T=" << cfg.str("length") << " contamination_a=" << cfg.str("contamination_a")
       << " contamination_b=" << cfg.str("contamination_b") << " alpha=" << cfg.str("alpha") << " seed=" << seed << '\n';
    return os.str();
}

inline ExpertSet load_experts(const fs::path& dir) {
    ExpertSet ex;
    for (const char* name : {"expert_a.txt", "expert_b.txt"}) {
        auto f = open_input(dir / name);
        ex.push_back(std::make_shared<MarkovExpert>(read_expert(f)));
    }
    return ex;
}

using AnyGate = std::variant<TabularGate, FeatGate>;

inline AnyGate load_gate(const fs::path& path) {
    auto f = open_input(path);
    std::string magic, version;
    if (!(f >> magic >> version) || version != "v1") throw Error("bad gate file header in " + path.string());
    if (magic == "modgate-gate-tab") return read_tabular_gate_body(f);
    if (magic == "modgate-gate-feat") return read_feat_gate_body(f);
    throw Error("unknown gate file type '" + magic + "'");
}

/// ln pi_g(x) for either gate kind; -inf off a tabular gate's support.
inline double any_logpi(const AnyGate& g, const ExpertSet& experts, const Seq& x) {
    return std::visit([&](const auto& gate) { return gate_logpi_or_zero(gate, experts, x); }, g);
}

inline std::vector<double> lambda_grid(const Config& cfg) {
    double step = cfg.real("lambda_step");
    if (!(step > 0.0 && step <= 1.0)) throw ConfigError("lambda_step must lie in (0,1]");
    double n = std::round(1.0 / step);
    if (std::abs(n * step - 1.0) > 1e-9) throw ConfigError("lambda_step must divide 1");
    std::vector<double> out;
    for (int i = 0; i <= static_cast<int>(n); ++i) out.push_back(i / n);
    return out;
}

inline MixtureWeights ab(double lam) { return MixtureWeights({lam, 1.0 - lam}, kArithTol); }

inline LambdaSet lambda_set(const Config& cfg, std::size_t p) {
    auto lo = cfg.list("lambda_lower"), hi = cfg.list("lambda_upper");
    if (lo.empty()) lo.assign(p, 0.0);
    if (hi.empty()) hi.assign(p, 1.0);
    if (lo.size() != p || hi.size() != p) throw ConfigError("lambda_lower / lambda_upper need one entry per source");
    try {
        return LambdaSet(lo, hi);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("invalid mixture set: ") + e.what());
    }
}

// ---------------------------------------------------------------- fit-experts

inline void run_fit_experts(const Config& cfg, std::uint64_t seed, const fs::path& out, std::ostream& log) {
    for (const char* key : {"vocab", "length"})
        if (!cfg.was_set(key)) throw ConfigError(std::string("missing domain key '") + key + "'");
    auto d = domains_from(cfg);
    double alpha = cfg.real("alpha");
    if (alpha < 0.0) throw ConfigError("alpha must be non-negative");
    std::size_t n = cfg.count("samples_per_domain");
    Rng rng(seed);
    std::vector<MarkovExpert> fitted;
    for (const auto& src : d.sources) {
        if (n == 0) {
            fitted.push_back(fit_mle_population(src, d.V, d.T, alpha, d.V));
        } else {
            auto draw = dist_sampler(src);
            std::vector<Seq> samples;
            for (std::size_t i = 0; i < n; ++i) samples.push_back(draw(rng));
            fitted.push_back(fit_mle(samples, d.V, d.T, alpha));
        }
    }
    const char* names[] = {"expert_a.txt", "expert_b.txt"};
    std::ostringstream manifest;
    manifest << provenance(cfg, seed) << "quantity,value\n";
    for (std::size_t k = 0; k < fitted.size(); ++k) {
        std::ostringstream os;
        write_expert(os, fitted[k]);
        write_text(out / names[k], os.str());
        double eps = kl(std::span<const double>(d.sources[k].probs()), std::span<const double>(induced_dist(fitted[k], d.sources[k].support())));
        manifest << "epsilon_" << k + 1 << ',' << num(eps) << '\n';
        log << "expert " << k + 1 << ": epsilon = " << num(eps) << '\n';
    }
    write_text(out / "manifest.csv", manifest.str());
}

// ---------------------------------------------------------------- solve

inline std::string trace_csv(const GameTrace& tr, std::size_t p) {
    std::ostringstream os;
    os << "iter";
    for (std::size_t k = 1; k <= p; ++k) os << ",lambda_" << k;
    for (std::size_t k = 1; k <= p; ++k) os << ",loss_" << k;
    os << ",mu,Z_hat,Z_ema,gap\n";
    for (const auto& r : tr.rows) {
        os << r.iter;
        for (double v : r.lambda) os << ',' << num(v);
        for (double v : r.loss) os << ',' << num(v);
        os << ',' << num(r.mu) << ',' << num(r.Z_hat) << ',' << num(r.Z_ema) << ',' << num(r.gap) << '\n';
    }
    return os.str();
}

inline void report_rows(std::ostream& os, const BoundReport& r) {
    for (std::size_t k = 0; k < r.epsilons.size(); ++k) os << "epsilon_" << k + 1 << ',' << num(r.epsilons[k]) << '\n';
    for (std::size_t k = 0; k < r.sigma.size(); ++k) os << "sigma_" << k + 1 << ',' << num(r.sigma[k]) << '\n';
    for (std::size_t k = 0; k < r.lambda_star.size(); ++k) os << "lambda_star_" << k + 1 << ',' << num(r.lambda_star[k]) << '\n';
    for (std::size_t k = 0; k < r.lambda_test.size(); ++k) os << "lambda_test_" << k + 1 << ',' << num(r.lambda_test[k]) << '\n';
    os << "capacity," << num(r.capacity) << '\n';
    os << "overlap," << num(r.overlap) << '\n';
    os << "diversity," << num(r.diversity) << '\n';
    os << "bound_value," << num(r.value) << '\n';
    os << "measured_risk," << num(r.measured_risk) << '\n';
    os << "measured_worst_case," << num(r.measured_worst_case) << '\n';
}

inline void run_solve(const Config& cfg, std::uint64_t seed, const fs::path& out, std::ostream& log) {
    const std::string& method = cfg.str("method");
    if (method != "exact" && method != "primal-dual" && method != "quadratic") throw UsageError("unknown method '" + method + "' (exact | primal-dual | quadratic)");
    auto d = domains_from(cfg);
    auto experts = load_experts(out);
    for (const auto& e : experts)
        if (e->vocab_size() != d.V || e->length() != d.T) throw ConfigError("stored experts do not match vocab/length in the config");
    ExpertTable table(experts, d.sources.front().support_ptr());
    std::size_t p = experts.size();
    auto set = lambda_set(cfg, p);

    GameTrace tr;
    std::vector<double> pi;
    std::ostringstream gate_text;
    if (method == "exact") {
        ExactConfig ec;
        ec.T = cfg.count("iterations");
        ec.eta_lambda = cfg.real("eta_lambda");
        ec.eta_g = cfg.real("eta_g");
        std::size_t every = std::max<std::size_t>(1, cfg.count("checkpoint_every"));
        for (std::size_t t = every; t <= ec.T; t += every) ec.checkpoints.push_back(t);
        tr = solve_exact(d.sources, table, set, ec);
        pi = model_probs(*tr.gate_bar, table);
        write_gate(gate_text, *tr.gate_bar);
    } else {
        if (!set.is_full()) throw ConfigError("restricted mixture sets are only supported by the exact solver");
        PDConfig pc;
        pc.T = cfg.count("iterations");
        pc.eta_lambda = cfg.was_set("eta_lambda") ? cfg.real("eta_lambda") : 0.2;
        pc.eta_g = cfg.was_set("eta_g") ? cfg.real("eta_g") : 0.05;
        pc.eta_mu = cfg.real("eta_mu");
        pc.alpha = cfg.real("ema");
        pc.batch = cfg.count("batch");
        pc.warmup = cfg.count("warmup");
        pc.checkpoint_every = cfg.count("checkpoint_every");
        pc.seed = seed;
        std::vector<SourceSampler> samplers;
        for (const auto& s : d.sources) samplers.push_back(dist_sampler(s));
        FeatGate init(d.V, p);
        tr = method == "primal-dual" ? solve_primal_dual(samplers, experts, init, pc) : solve_quadratic_penalty(samplers, experts, init, cfg.real("beta"), pc);
        pi.resize(table.size());
        for (std::size_t i = 0; i < table.size(); ++i) pi[i] = std::exp(gate_logpi(*tr.featgate, experts, table.support()[i]));
        write_gate(gate_text, *tr.featgate);
    }
    write_text(out / "gate.txt", gate_text.str());
    write_text(out / "trace.csv", trace_csv(tr, p));

    auto lstar = least_favorable_mixture(tr);
    std::ostringstream rep;
    rep << provenance(cfg, seed);
    rep << "# method=" << method << " iterations=" << cfg.str("iterations") << '\n';
    rep << "quantity,value\n";
    double Zs = 0.0;
    for (double v : pi) Zs += v;
    try {
        auto r = robust_bound_report(d.sources, table, lstar, lstar, &pi);
        report_rows(rep, r);
    } catch (const NumericalError& e) {
        // unsmoothed experts that miss a source point make every bound term infinite
        log << "bound terms unavailable: " << e.what() << '\n';
        auto losses = source_losses(d.sources, pi);
        rep << "measured_worst_case," << num(*std::max_element(losses.begin(), losses.end())) << '\n';
    }
    rep << "worst_case_over_set," << num(worst_case_risk(d.sources, pi, set)) << '\n';
    rep << "Z_support," << num(Zs) << '\n';
    if (!tr.rows.empty()) rep << "final_gap," << num(tr.rows.back().gap) << '\n';
    write_text(out / "bound_report.csv", rep.str());

    auto losses = source_losses(d.sources, pi);
    log << "method " << method << ": worst-case risk max_k KL = " << num(*std::max_element(losses.begin(), losses.end())) << ", lambda_bar = (";
    for (std::size_t k = 0; k < p; ++k) log << (k ? ", " : "") << num(lstar[k]);
    log << "), Z over support = " << num(Zs) << '\n';
}

// ---------------------------------------------------------------- sweep

struct SweepModels {
    std::function<double(const Seq&)> gate, fixed_small, fixed_large, expert_a, expert_b;
    std::function<std::function<double(const Seq&)>(const DiscreteDist&)> oracle;
};

inline void run_sweep(const Config& cfg, std::uint64_t seed, const fs::path& out, std::size_t resample, std::ostream& log) {
    auto d = domains_from(cfg);
    auto experts = load_experts(out);
    auto gate = std::make_shared<AnyGate>(load_gate(out / "gate.txt"));
    double balpha = cfg.real("baseline_alpha");
    double scale = 2.0 * d.V;  // pseudo-count of one per clean trajectory of both domains
    auto half = mixture(d.sources, ab(0.5));
    auto small = std::make_shared<MarkovExpert>(fit_mle_population(half, d.V, d.T, balpha, scale));
    auto large = std::make_shared<ContextModel>(d.V, 2, balpha);
    large->fit(half, scale);
    SweepModels m;
    m.gate = [gate, experts](const Seq& x) { return any_logpi(*gate, experts, x); };
    m.fixed_small = [small](const Seq& x) { return small->log_prob(x); };
    m.fixed_large = [large](const Seq& x) { return large->log_prob(x); };
    m.expert_a = [e = experts[0]](const Seq& x) { return e->log_prob(x); };
    m.expert_b = [e = experts[1]](const Seq& x) { return e->log_prob(x); };
    m.oracle = [&](const DiscreteDist& target) {
        auto o = std::make_shared<MarkovExpert>(fit_mle_population(target, d.V, d.T, balpha, scale));
        return std::function<double(const Seq&)>([o](const Seq& x) { return o->log_prob(x); });
    };

    auto grid = lambda_grid(cfg);
    std::ostringstream os;
    const char* names[] = {"gate_nll", "fixed_small_nll", "fixed_large_nll", "oracle_nll", "expert_a_nll", "expert_b_nll"};
    os << "lambda";
    for (const char* n : names) {
        if (resample == 0) os << ',' << n;
        else os << ',' << n << "_mean," << n << "_std";
    }
    os << '\n';
    Rng rng(seed);
    std::size_t test_size = cfg.count("test_size");
    if (resample > 0 && test_size == 0) throw ConfigError("test_size must be positive in --resample mode");
    for (double lam : grid) {
        auto target = mixture(d.sources, ab(lam));
        auto oracle = m.oracle(target);
        std::vector<std::function<double(const Seq&)>> models{m.gate, m.fixed_small, m.fixed_large, oracle, m.expert_a, m.expert_b};
        os << num(lam);
        if (resample == 0) {
            for (auto& f : models) os << ',' << num(expected_nll(target, f));
        } else {
            auto draw = dist_sampler(target);
            std::vector<std::vector<double>> vals(models.size());
            for (std::size_t r = 0; r < resample; ++r) {
                std::vector<Seq> test;
                for (std::size_t i = 0; i < test_size; ++i) test.push_back(draw(rng));
                for (std::size_t j = 0; j < models.size(); ++j) {
                    double s = 0.0;
                    for (const auto& x : test) s -= models[j](x);
                    vals[j].push_back(s / static_cast<double>(test_size));
                }
            }
            for (const auto& v : vals) {
                double mean = 0.0, var = 0.0;
                for (double x : v) mean += x;
                mean /= static_cast<double>(v.size());
                for (double x : v) var += (x - mean) * (x - mean);
                var = v.size() > 1 ? var / static_cast<double>(v.size() - 1) : 0.0;
                os << ',' << num(mean) << ',' << num(std::sqrt(var));
            }
        }
        os << '\n';
    }
    write_text(out / "sweep.csv", os.str());
    log << "sweep: " << grid.size() << " grid points written\n";
}

// ---------------------------------------------------------------- sample

inline void run_sample(const Config& cfg, std::uint64_t seed, const fs::path& out, std::ostream& log) {
    const std::string& method = cfg.str("sampler");
    if (method != "rejection" && method != "sir") throw UsageError("unknown sampler '" + method + "' (rejection | sir)");
    auto experts = load_experts(out);
    auto gate = load_gate(out / "gate.txt");
    std::size_t count = cfg.count("count");
    Rng rng(seed);
    CorpusStats st;
    std::vector<Seq> corpus = std::visit(
        [&](const auto& g) {
            if (method == "rejection") return rejection_corpus(g, experts, count, rng, &st, cfg.count("max_trials"));
            std::size_t N = cfg.count("candidates");
            if (N == 0) throw ConfigError("candidates must be positive");
            return sir_corpus(g, experts, count, N, rng, &st);
        },
        gate);
    std::ostringstream os;
    write_corpus(os, corpus, experts.front()->vocab_size(), experts.front()->length());
    write_text(out / "corpus.txt", os.str());
    if (method == "rejection") log << "rejection: " << count << " samples, " << st.trials << " trials, acceptance rate " << num(st.acceptance_rate()) << '\n';
    else log << "sir: " << count << " samples, fallbacks " << st.fallbacks << '\n';
}

// ---------------------------------------------------------------- distill

inline void run_distill(const Config& cfg, std::uint64_t seed, const fs::path& out, std::ostream& log) {
    auto d = domains_from(cfg);
    auto experts = load_experts(out);
    auto gate = load_gate(out / "gate.txt");
    std::size_t M = cfg.count("corpus_size");
    if (M == 0) throw ConfigError("corpus_size must be positive");
    std::size_t p = experts.size();

    std::vector<Seq> seqs;
    auto data = std::visit([&](const auto& g) { return generate_cached_dataset(g, experts, M, seed, &seqs); }, gate);
    std::ostringstream cache;
    write_cache(cache, data, p, d.V, d.T);
    write_text(out / "cache.txt", cache.str());

    auto trained = train_router(data, CausalRouter(d.V, d.T, p), cfg.count("router_steps"), cfg.real("router_eta"), seed);
    std::ostringstream rt;
    write_router(rt, trained.router);
    write_text(out / "router.txt", rt.str());

    auto student = std::visit([&](const auto& g) { return monolithic_distill(g, experts, M, cfg.real("student_alpha"), splitmix64(seed + 1)); }, gate);
    std::ostringstream st;
    write_expert(st, student);
    write_text(out / "student.txt", st.str());

    // teacher normalized by Z over the support for tabular gates; feature gates are used as is
    double logZ = 0.0;
    if (const auto* tg = std::get_if<TabularGate>(&gate)) logZ = std::log(partition_Z(*tg, experts));
    auto router = as_routing(trained.router);
    std::ostringstream os;
    os << "lambda,teacher_nll,causal_router_nll,monolithic_nll\n";
    for (double lam : lambda_grid(cfg)) {
        auto target = mixture(d.sources, ab(lam));
        double tn = expected_nll(target, [&](const Seq& x) { return any_logpi(gate, experts, x) - logZ; });
        double rn = expected_nll(target, [&](const Seq& x) { return student_seq_logprob(router, experts, x); });
        double mn = expected_nll(target, [&](const Seq& x) { return student.log_prob(x); });
        os << num(lam) << ',' << num(tn) << ',' << num(rn) << ',' << num(mn) << '\n';
    }
    write_text(out / "distill.csv", os.str());

    std::size_t inv = 0;
    for (const auto& x : seqs) inv += has_inversion(x, d.V) ? 1 : 0;
    log << "distill: " << data.size() << " cached tuples (" << trained.skipped << " skipped), router loss " << num(trained.loss.front()) << " -> "
        << num(trained.loss.back()) << ", inversion rate " << num(static_cast<double>(inv) / static_cast<double>(seqs.size())) << '\n';
}

// ---------------------------------------------------------------- analyze

inline void run_analyze(const Config& cfg, std::uint64_t seed, const fs::path& out, std::ostream& log) {
    auto d = domains_from(cfg);
    auto experts = load_experts(out);
    ExpertTable table(experts, d.sources.front().support_ptr());
    std::size_t p = experts.size();
    auto set = lambda_set(cfg, p);
    ExactConfig ec;
    ec.T = cfg.count("iterations");
    ec.eta_lambda = cfg.real("eta_lambda");
    ec.eta_g = cfg.real("eta_g");
    ec.checkpoints = {ec.T};
    auto full = solve_exact(d.sources, table, LambdaSet::full(p), ec);
    auto restricted = set.is_full() ? full : solve_exact(d.sources, table, set, ec);
    auto pi_full = model_probs(*full.gate_bar, table);
    auto pi_set = model_probs(*restricted.gate_bar, table);
    auto lstar = least_favorable_mixture(full);

    std::ostringstream os;
    os << provenance(cfg, seed) << "# lipschitz_estimate is a witness-set estimate (pure-expert gates, uniform gate, solver gates)\n";
    os << "quantity,value\n";
    auto eps = expert_epsilons(d.sources, table);
    bool finite = std::all_of(eps.begin(), eps.end(), [](double e) { return std::isfinite(e); });
    if (finite) report_rows(os, robust_bound_report(d.sources, table, lstar, lstar, &pi_full));
    else for (std::size_t k = 0; k < p; ++k) os << "epsilon_" << k + 1 << ',' << num(eps[k]) << '\n';
    os << "jsd_lambda_star," << num(jsd(d.sources, lstar)) << '\n';
    os << "entropy_lambda_star," << num(entropy(lstar)) << '\n';
    if (finite) {
        os << "jsd_gap_lower_bound," << num(jsd_gap_lower_bound(d.sources, eps, lstar)) << '\n';
        auto target = mixture(d.sources, lstar);
        auto retrained = fit_mle_population(target, d.V, d.T, 0.0, 2.0 * d.V);
        os << "retrained_markov_kl," << num(kl(std::span<const double>(target.probs()), std::span<const double>(induced_dist(retrained, target.support())))) << '\n';
    }
    os << "coincidence_norm," << num(coincidence_norm(table)) << '\n';
    os << "nll_bound_constant," << num(nll_bound_constant(table)) << '\n';
    auto witnesses = standard_witnesses(table);
    witnesses.push_back(pi_full);
    witnesses.push_back(pi_set);
    double L = lipschitz_estimate(d.sources, witnesses);
    double dH = hausdorff_l1(set);
    double v_full = worst_case_risk(d.sources, pi_full, LambdaSet::full(p));
    double v_set = worst_case_risk(d.sources, pi_set, set);
    os << "lipschitz_estimate," << num(L) << '\n';
    os << "hausdorff_l1," << num(dH) << '\n';
    os << "value_full_simplex," << num(v_full) << '\n';
    os << "value_restricted," << num(v_set) << '\n';
    os << "value_restricted_plus_L_dH," << num(dH == 0.0 ? v_set : v_set + L * dH) << '\n';
    write_text(out / "analysis.csv", os.str());
    log << "analyze: V*_full = " << num(v_full) << ", V*_restricted = " << num(v_set) << ", L estimate = " << num(L) << ", d_H = " << num(dH) << '\n';
}

}  // namespace modgate::harness
