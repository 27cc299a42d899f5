// modgate command-line driver: fit experts, solve for a robust gate, sweep, sample, distill, analyze.
#include "modgate/harness/pipelines.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace h = modgate::harness;

namespace {

struct Common {
    std::string config;
    std::uint64_t seed = 0;
    std::string out = "out";
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "key=value config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", c.seed, "random seed (runs are reproducible given the seed)");
    sub->add_option("--out", c.out, "directory for inputs and outputs");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"modgate: robust gating over fixed sequence experts"};
    app.footer("\n" + h::help_text() + "\nexit codes: 0 success, 1 usage error, 2 numerical or config failure");
    app.require_subcommand(1);

    Common c;
    std::size_t resample = 0;
    using Pipeline = void (*)(const h::Config&, std::uint64_t, const h::fs::path&, std::ostream&);
    std::vector<std::pair<CLI::App*, Pipeline>> subs;
    auto add = [&](const char* name, const char* desc, Pipeline fn) {
        auto* s = app.add_subcommand(name, desc);
        add_common(s, c);
        subs.emplace_back(s, fn);
        return s;
    };
    add("fit-experts", "fit expert A (increment rule) and expert B (decrement rule)", h::run_fit_experts);
    add("solve", "solve for the robust gate with the configured method", h::run_solve);
    auto* sweep = add("sweep", "expected NLL of the gate and the baselines over the lambda grid", nullptr);
    sweep->add_option("--resample", resample, "replace population evaluation by R resampled test sets (mean/std columns)");
    add("sample", "draw a corpus from the gated model", h::run_sample);
    add("distill", "distill the gate into a causal router and a monolithic student", h::run_distill);
    add("analyze", "bound terms, coincidence norm and restricted-set quantities", h::run_analyze);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        h::Config cfg = c.config.empty() ? h::Config() : h::Config::load(c.config);
        for (const auto& [s, fn] : subs) {
            if (!s->parsed()) continue;
            if (s == sweep) h::run_sweep(cfg, c.seed, c.out, resample, std::cout);
            else fn(cfg, c.seed, c.out, std::cout);
        }
    } catch (const h::UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
