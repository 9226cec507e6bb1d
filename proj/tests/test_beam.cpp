#include <doctest.h>

#include <cat/beam.hpp>

#include <cmath>
#include <map>
#include <random>

using cat::BeamConfig;
using cat::BeamHypothesis;
using cat::StepFn;

namespace {

// Deterministic table-driven toy model: the log-probabilities for a prefix
// come from an RNG seeded by the prefix content, with the end token given a
// floor so every branch can terminate.
StepFn toy_model(unsigned seed, int vocab, int eos, double eos_boost = 0.5) {
    return [=](const std::vector<int>& prefix) {
        size_t h = seed;
        for (int t : prefix) h = h * 1000003u + static_cast<size_t>(t) + 12345u;
        std::mt19937 rng(static_cast<unsigned>(h));
        std::uniform_real_distribution<double> dist(-2.0, 2.0);
        std::vector<double> logits(vocab);
        for (auto& v : logits) v = dist(rng);
        logits[eos] += eos_boost;
        return cat::log_softmax(logits);
    };
}

// Exhaustive search over every sequence up to max_len, preferring finished
// hypotheses exactly like the search under test.
BeamHypothesis enumerate_best(const StepFn& step, const BeamConfig& cfg) {
    BeamHypothesis best_done, best_trunc;
    bool have_done = false, have_trunc = false;
    std::vector<int> prefix;

    std::function<void(double)> walk = [&](double lp) {
        auto lps = step(prefix);
        for (int v = 0; v < static_cast<int>(lps.size()); ++v) {
            if (v == cfg.eos) {
                BeamHypothesis h{prefix, lp + lps[v], true};
                if (!have_done || h.log_prob > best_done.log_prob) best_done = h;
                have_done = true;
            } else if (static_cast<int>(prefix.size()) + 1 < cfg.max_len) {
                prefix.push_back(v);
                walk(lp + lps[v]);
                prefix.pop_back();
            } else {
                BeamHypothesis h{prefix, lp + lps[v], false};
                h.tokens.push_back(v);
                if (!have_trunc || h.log_prob > best_trunc.log_prob) best_trunc = h;
                have_trunc = true;
            }
        }
    };
    walk(0.0);
    return have_done ? best_done : best_trunc;
}

}  // namespace

TEST_CASE("a wide beam matches exhaustive enumeration") {
    BeamConfig cfg;
    cfg.max_len = 4;
    cfg.eos = 0;
    for (unsigned seed : {1u, 2u, 3u, 4u, 5u}) {
        auto model = toy_model(seed, 4, cfg.eos);
        auto oracle = enumerate_best(model, cfg);
        cfg.beam = 64;  // wider than the number of live prefixes at any depth
        auto found = cat::beam_decode(model, cfg);
        CHECK(found.log_prob == doctest::Approx(oracle.log_prob).epsilon(1e-12));
        CHECK(found.tokens == oracle.tokens);
        CHECK(found.finished == oracle.finished);
    }
}

TEST_CASE("beam of one is exactly greedy") {
    BeamConfig cfg;
    cfg.beam = 1;
    cfg.max_len = 6;
    cfg.eos = 0;
    for (unsigned seed = 10; seed < 30; ++seed) {
        auto model = toy_model(seed, 5, cfg.eos);
        auto g = cat::greedy_decode(model, cfg);
        auto b = cat::beam_decode(model, cfg);
        CHECK(b.tokens == g.tokens);
        CHECK(b.log_prob == doctest::Approx(g.log_prob).epsilon(1e-12));
        CHECK(b.finished == g.finished);
    }
}

TEST_CASE("constructed toy where greedy is suboptimal but beam=2 recovers") {
    // vocab {eos=0, a=1, b=2}. Greedy takes a (0.6), then must settle for a
    // weak ending; the b branch ends strong and wins overall.
    const int eos = 0;
    StepFn model = [&](const std::vector<int>& prefix) {
        std::vector<double> p(3);
        if (prefix.empty())
            p = {0.0001, 0.5999, 0.4};  // a preferred by one step
        else if (prefix == std::vector<int>{1})
            p = {0.55, 0.225, 0.225};  // after a: end with 0.55
        else if (prefix == std::vector<int>{2})
            p = {0.9, 0.05, 0.05};  // after b: end with 0.9
        else
            p = {0.98, 0.01, 0.01};
        std::vector<double> lp(3);
        for (int i = 0; i < 3; ++i) lp[i] = std::log(p[i]);
        return lp;
    };
    BeamConfig cfg;
    cfg.max_len = 4;
    cfg.eos = eos;

    cfg.beam = 1;
    auto greedy = cat::beam_decode(model, cfg);
    CHECK(greedy.tokens == std::vector<int>{1});
    CHECK(greedy.log_prob == doctest::Approx(std::log(0.5999 * 0.55)));

    cfg.beam = 2;
    auto beam = cat::beam_decode(model, cfg);
    CHECK(beam.tokens == std::vector<int>{2});
    CHECK(beam.log_prob == doctest::Approx(std::log(0.4 * 0.9)));
    CHECK(beam.log_prob > greedy.log_prob);

    auto oracle = enumerate_best(model, cfg);
    CHECK(oracle.tokens == beam.tokens);
}

TEST_CASE("beam decoding is deterministic") {
    BeamConfig cfg;
    cfg.beam = 5;
    cfg.max_len = 6;
    cfg.eos = 0;
    auto model = toy_model(77, 6, cfg.eos);
    auto a = cat::beam_decode(model, cfg);
    auto b = cat::beam_decode(model, cfg);
    CHECK(a.tokens == b.tokens);
    CHECK(a.log_prob == b.log_prob);
}

TEST_CASE("wider beams never score below greedy") {
    BeamConfig cfg;
    cfg.max_len = 8;
    cfg.eos = 0;
    for (unsigned seed = 100; seed < 120; ++seed) {
        auto model = toy_model(seed, 5, cfg.eos, /*eos_boost=*/1.0);
        cfg.beam = 1;
        auto greedy = cat::beam_decode(model, cfg);
        for (int width : {2, 3, 5}) {
            cfg.beam = width;
            auto beam = cat::beam_decode(model, cfg);
            CHECK(beam.log_prob >= greedy.log_prob - 1e-12);
        }
    }
}

TEST_CASE("immediate end token yields an empty finished hypothesis") {
    StepFn model = [](const std::vector<int>&) {
        return cat::log_softmax({50.0, 0.0, 0.0});
    };
    BeamConfig cfg;
    cfg.beam = 3;
    cfg.eos = 0;
    auto h = cat::beam_decode(model, cfg);
    CHECK(h.finished);
    CHECK(h.tokens.empty());
    CHECK(h.log_prob == doctest::Approx(0.0).epsilon(1e-10));
}

TEST_CASE("decoding caps at max_len when the end token never fires") {
    StepFn model = [](const std::vector<int>&) {
        return cat::log_softmax({-100.0, 1.0, 0.0});
    };
    BeamConfig cfg;
    cfg.beam = 2;
    cfg.max_len = 7;
    cfg.eos = 0;
    auto h = cat::beam_decode(model, cfg);
    CHECK_FALSE(h.finished);
    CHECK(h.tokens.size() == 7);
    auto g = cat::greedy_decode(model, cfg);
    CHECK_FALSE(g.finished);
    CHECK(g.tokens.size() == 7);
}

TEST_CASE("length normalization can prefer the longer hypothesis") {
    // ending immediately costs little in raw log-prob but a lot per token
    const int eos = 0;
    StepFn model = [&](const std::vector<int>& prefix) {
        std::vector<double> p(3);
        if (prefix.empty())
            p = {0.45, 0.55, 0.0001};
        else if (prefix.size() < 3)
            p = {0.05, 0.9499, 0.0001};  // keep extending with near-free steps
        else
            p = {0.9998, 0.0001, 0.0001};
        std::vector<double> lp(3);
        for (int i = 0; i < 3; ++i) lp[i] = std::log(p[i] + 1e-9);
        return lp;
    };
    BeamConfig cfg;
    cfg.beam = 3;
    cfg.max_len = 5;
    cfg.eos = eos;
    auto raw = cat::beam_decode(model, cfg);
    cfg.length_normalize = true;
    auto norm = cat::beam_decode(model, cfg);
    CHECK(norm.tokens.size() >= raw.tokens.size());
}
