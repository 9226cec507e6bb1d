#pragma once

// Beam and greedy decoding over an abstract step function, so the same
// search runs against the real model and against table-driven toy models in
// tests. The step function maps a token prefix (start symbol implied) to
// log-probabilities over the vocabulary for the next position.

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

namespace cat {

struct BeamConfig {
    int beam = 5;
    int max_len = 40;
    int eos = 3;
    bool length_normalize = false;  // divide scores by token count for final selection
};

struct BeamHypothesis {
    std::vector<int> tokens;  // generated tokens, end symbol excluded
    double log_prob = 0.0;    // cumulative, including the end symbol step when finished
    bool finished = false;
};

using StepFn = std::function<std::vector<double>(const std::vector<int>&)>;

inline std::vector<double> log_softmax(const std::vector<double>& logits) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> out(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

namespace detail {
inline double final_score(const BeamHypothesis& h, const BeamConfig& cfg) {
    if (!cfg.length_normalize) return h.log_prob;
    const size_t steps = h.tokens.size() + (h.finished ? 1 : 0);
    return h.log_prob / std::max<size_t>(steps, 1);
}
}  // namespace detail

inline BeamHypothesis greedy_decode(const StepFn& step, const BeamConfig& cfg) {
    BeamHypothesis hyp;
    for (int t = 0; t < cfg.max_len; ++t) {
        auto lp = step(hyp.tokens);
        int best = 0;
        for (int v = 1; v < static_cast<int>(lp.size()); ++v)
            if (lp[v] > lp[best]) best = v;  // ties keep the lowest token id
        hyp.log_prob += lp[best];
        if (best == cfg.eos) {
            hyp.finished = true;
            return hyp;
        }
        hyp.tokens.push_back(best);
    }
    return hyp;
}

// Standard length-capped beam search. Candidates are ordered by cumulative
// log-probability with deterministic tie-breaks (token id, then parent
// index). Finished hypotheses are preferred at final selection; truncated
// ones are considered only when nothing finished in time.
inline BeamHypothesis beam_decode(const StepFn& step, const BeamConfig& cfg) {
    if (cfg.beam < 1) throw std::invalid_argument("beam size must be at least 1");
    struct Cand {
        BeamHypothesis hyp;
        int token = -1;   // tie-break: token chosen at this expansion
        int parent = -1;  // tie-break: index of the expanded beam entry
    };
    std::vector<BeamHypothesis> alive = {BeamHypothesis{}};
    std::vector<BeamHypothesis> done;

    for (int t = 0; t < cfg.max_len && !alive.empty(); ++t) {
        std::vector<Cand> pool;
        pool.reserve(alive.size() * 8);
        for (size_t b = 0; b < alive.size(); ++b) {
            auto lp = step(alive[b].tokens);
            for (int v = 0; v < static_cast<int>(lp.size()); ++v) {
                Cand c;
                c.hyp = alive[b];
                c.hyp.log_prob += lp[v];
                if (v == cfg.eos)
                    c.hyp.finished = true;
                else
                    c.hyp.tokens.push_back(v);
                c.token = v;
                c.parent = static_cast<int>(b);
                pool.push_back(std::move(c));
            }
        }
        std::sort(pool.begin(), pool.end(), [](const Cand& a, const Cand& b) {
            if (a.hyp.log_prob != b.hyp.log_prob) return a.hyp.log_prob > b.hyp.log_prob;
            if (a.token != b.token) return a.token < b.token;
            return a.parent < b.parent;
        });
        // keep the top `beam` candidates; finished ones retire from the frontier
        alive.clear();
        int taken = 0;
        for (const auto& c : pool) {
            if (taken++ >= cfg.beam) break;
            if (c.hyp.finished)
                done.push_back(c.hyp);
            else
                alive.push_back(c.hyp);
        }
        // Without length normalization scores only decrease as hypotheses
        // grow, so once the best finished beats the best alive we can stop.
        if (!cfg.length_normalize && !done.empty() && !alive.empty()) {
            double best_done = done[0].log_prob;
            for (const auto& h : done) best_done = std::max(best_done, h.log_prob);
            if (best_done >= alive[0].log_prob) break;
        }
    }

    const std::vector<BeamHypothesis>& finals = done.empty() ? alive : done;
    if (finals.empty()) return BeamHypothesis{};
    const BeamHypothesis* best = &finals[0];
    for (const auto& h : finals)
        if (detail::final_score(h, cfg) > detail::final_score(*best, cfg)) best = &h;
    return *best;
}

}  // namespace cat
