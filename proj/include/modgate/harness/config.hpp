#pragma once

#include "modgate/distcore.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace modgate::harness {

class ConfigError : public Error {
public:
    using Error::Error;
};

struct KeyDoc {
    const char* key;
    const char* fallback;
    const char* help;
};

// Every accepted key; anything else in a config file is rejected.
inline const std::vector<KeyDoc>& config_keys() {
    static const std::vector<KeyDoc> keys = {
        {"vocab", "3", "vocabulary size V"},
        {"length", "2", "sequence length T"},
        {"contamination_a", "0", "fraction of decrement trajectories mixed into domain A"},
        {"contamination_b", "0", "fraction of increment trajectories mixed into domain B"},
        {"alpha", "0", "additive smoothing of the fitted experts"},
        {"samples_per_domain", "0", "training samples per domain; 0 fits the exact population"},
        {"method", "exact", "solver: exact | primal-dual | quadratic"},
        {"iterations", "2000", "solver iterations"},
        {"eta_lambda", "0", "mixture-player step; 0 picks the default schedule (exact) or 0.2 (stochastic)"},
        {"eta_g", "0", "gate step; 0 picks the default schedule (exact) or 0.05 (stochastic)"},
        {"eta_mu", "0.1", "dual step for the Z constraint"},
        {"ema", "0.9", "moving-average factor for Z"},
        {"batch", "64", "samples per source per stochastic iteration"},
        {"warmup", "0", "stochastic iterations with the dual variable frozen"},
        {"beta", "1000", "quadratic penalty weight"},
        {"checkpoint_every", "10", "trace row spacing"},
        {"lambda_lower", "", "comma-separated lower bounds of the mixture set (empty: 0)"},
        {"lambda_upper", "", "comma-separated upper bounds of the mixture set (empty: 1)"},
        {"lambda_step", "0.1", "grid step of sweeps over the weight of domain A"},
        {"test_size", "1000", "held-out samples per grid point in --resample mode"},
        {"baseline_alpha", "0", "smoothing of the retrained baselines"},
        {"sampler", "rejection", "sampler: rejection | sir"},
        {"candidates", "64", "SIR candidate count N"},
        {"count", "1000", "number of sequences to sample"},
        {"max_trials", "0", "rejection budget per sample; 0 means 100 p"},
        {"corpus_size", "500", "teacher sequences for distillation"},
        {"router_steps", "2000", "router gradient steps"},
        {"router_eta", "0.5", "router step size"},
        {"student_alpha", "0", "smoothing of the monolithic student"},
    };
    return keys;
}

class Config {
public:
    Config() {
        for (const auto& k : config_keys()) values_[k.key] = k.fallback;
    }

    static Config parse(std::istream& is) {
        Config c;
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            auto trim = [](std::string s) {
                auto a = s.find_first_not_of(" \t\r");
                auto b = s.find_last_not_of(" \t\r");
                return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
            };
            line = trim(line);
            if (line.empty()) continue;
            auto eq = line.find('=');
            if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
            std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
            if (!c.values_.count(key)) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
            c.values_[key] = value;
            c.set_.insert(key);
        }
        return c;
    }

    static Config load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot read config file " + path);
        return parse(f);
    }

    void set(const std::string& key, const std::string& value) {
        if (!values_.count(key)) throw ConfigError("unknown key '" + key + "'");
        values_[key] = value;
        set_.insert(key);
    }

    bool was_set(const std::string& key) const { return set_.count(key) != 0; }

    const std::string& str(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown key '" + key + "'");
        return it->second;
    }

    double real(const std::string& key) const {
        const auto& s = str(key);
        try {
            std::size_t used = 0;
            double v = std::stod(s, &used);
            if (used != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "': expected a number, got '" + s + "'");
        }
    }

    long long integer(const std::string& key) const {
        const auto& s = str(key);
        long long v = 0;
        auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || ptr != s.data() + s.size()) throw ConfigError("key '" + key + "': expected an integer, got '" + s + "'");
        return v;
    }

    std::size_t count(const std::string& key) const {
        auto v = integer(key);
        if (v < 0) throw ConfigError("key '" + key + "': must be non-negative");
        return static_cast<std::size_t>(v);
    }

    std::vector<double> list(const std::string& key) const {
        std::vector<double> out;
        std::stringstream ss(str(key));
        std::string item;
        while (std::getline(ss, item, ',')) {
            try {
                out.push_back(std::stod(item));
            } catch (const std::exception&) {
                throw ConfigError("key '" + key + "': bad list entry '" + item + "'");
            }
        }
        return out;
    }

private:
    std::map<std::string, std::string> values_;
    std::set<std::string> set_;
};

inline std::string help_text() {
    std::ostringstream os;
    os << "config keys (key=value, one per line, # comments):\n";
    for (const auto& k : config_keys()) os << "  " << k.key << " (default '" << k.fallback << "'): " << k.help << '\n';
    return os.str();
}

}  // namespace modgate::harness
