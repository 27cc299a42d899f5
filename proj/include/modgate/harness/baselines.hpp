#pragma once

#include "modgate/distcore.hpp"
#include "modgate/experts.hpp"

namespace modgate::harness {

/// Order-n context model (n previous tokens, fewer near the start) fitted by weighted counts.
/// Used as the larger-capacity monolithic baseline; order 1 coincides with the Markov expert fit.
class ContextModel {
public:
    ContextModel(int V, int order, double alpha) : V_(V), order_(order), alpha_(alpha) {
        if (V < 1 || order < 1 || alpha < 0.0) throw std::invalid_argument("ContextModel: bad parameters");
    }

    void fit(const DiscreteDist& dist, double count_scale) {
        counts_.clear();
        for (std::size_t i = 0; i < dist.size(); ++i) {
            const Seq& x = dist.support()[i];
            for (std::size_t t = 0; t < x.size(); ++t) {
                auto& c = counts_[context(x, t)];
                if (c.empty()) c.assign(V_, 0.0);
                c[x[t]] += dist[i] * count_scale;
            }
        }
    }

    double log_prob(const Seq& x) const {
        double lp = 0.0;
        for (std::size_t t = 0; t < x.size(); ++t) {
            auto it = counts_.find(context(x, t));
            double num = alpha_, den = alpha_ * V_;
            if (it != counts_.end()) {
                num += it->second[x[t]];
                for (double v : it->second) den += v;
            }
            if (den <= 0.0) {
                lp -= std::log(static_cast<double>(V_));
                continue;
            }
            if (num <= 0.0) return kNegInf;
            lp += std::log(num / den);
        }
        return lp;
    }

private:
    // position marker keeps start contexts apart from interior ones
    Seq context(const Seq& x, std::size_t t) const {
        std::size_t from = t >= static_cast<std::size_t>(order_) ? t - order_ : 0;
        std::vector<int> c{t < static_cast<std::size_t>(order_) ? -1 - static_cast<int>(t) : -1000};
        c.insert(c.end(), x.tokens.begin() + static_cast<std::ptrdiff_t>(from), x.tokens.begin() + static_cast<std::ptrdiff_t>(t));
        return Seq(std::move(c));
    }

    int V_, order_;
    double alpha_;
    std::unordered_map<Seq, std::vector<double>, SeqHash> counts_;
};

/// Expected negative log-likelihood per sequence under dist; +inf if the model misses a mass point.
template <class LogProb>
double expected_nll(const DiscreteDist& dist, LogProb&& log_prob) {
    double s = 0.0;
    for (std::size_t i = 0; i < dist.size(); ++i) {
        if (dist[i] <= 0.0) continue;
        double lp = log_prob(dist.support()[i]);
        if (lp == kNegInf) return kInf;
        s -= dist[i] * lp;
    }
    return s;
}

/// A sequence contains an inversion when it takes both a +1 and a -1 step.
inline bool has_inversion(const Seq& x, int V) {
    bool up = false, down = false;
    for (std::size_t t = 1; t < x.size(); ++t) {
        int d = ((x[t] - x[t - 1]) % V + V) % V;
        up |= d == 1 % V;
        down |= d == (V - 1) % V;
    }
    return up && down;
}

}  // namespace modgate::harness
