#pragma once

// Corpus evaluation: perplexity, corpus BLEU, ROUGE-L, and the two
// knowledge-utilization metrics (KU-N, QKU-N) computed from n-gram overlap
// between document, conversation context, and response.

#include <array>
#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

namespace cat {

using Tokens = std::vector<std::string>;

// Lowercased whitespace tokenization with punctuation split into separate
// tokens. Applied identically to documents, context turns, and responses so
// overlap statistics stay fair.
Tokens metric_tokenize(const std::string& text);

// ---------------------------------------------------------------------------
// n-gram profiles and knowledge utilization
// ---------------------------------------------------------------------------

struct NGramProfile {
    int order = 1;
    std::unordered_map<std::string, int> counts;  // key = tokens joined by '\x1f'
    long total_tokens = 0;

    long total_grams() const {
        long n = 0;
        for (const auto& [k, c] : counts) n += c;
        return n;
    }
    long distinct() const { return static_cast<long>(counts.size()); }
    int frequency(const std::string& key) const {
        auto it = counts.find(key);
        return it == counts.end() ? 0 : it->second;
    }
};

NGramProfile ngram_profile(const Tokens& tokens, int order);

// One (document, context, response) evaluation unit at a fixed order.
// Context grams are pooled across turns without crossing turn boundaries.
struct TripleEval {
    NGramProfile g_d, g_c, g_r;
    std::vector<std::string> g_dr;    // distinct grams shared by document and response
    std::vector<std::string> g_dr_c;  // g_dr minus grams present in the context
};

TripleEval build_triple(const Tokens& document, const std::vector<Tokens>& context_turns,
                        const Tokens& response, int order);

struct KUResult {
    bool defined = false;  // false when document and response share no gram
    double value = 0.0;
};

KUResult ku(const TripleEval& t);

struct QKUTriple {
    bool contributes = false;  // false when G_dr-c is empty
    double ratio = 0.0;
};

QKUTriple qku_triple(const TripleEval& t);

struct QKUCorpus {
    double raw_sum = 0.0;  // literal outer sum over triples
    double mean = 0.0;     // raw_sum / contributing triples
    int contributing = 0;
    int skipped = 0;
};

QKUCorpus qku(const std::vector<TripleEval>& triples);

// ---------------------------------------------------------------------------
// BLEU / ROUGE-L / perplexity
// ---------------------------------------------------------------------------

struct BleuStats {
    static constexpr int kMaxOrder = 4;
    std::array<long, kMaxOrder> match{};  // clipped n-gram matches per order
    std::array<long, kMaxOrder> total{};  // hypothesis n-grams per order
    long hyp_len = 0, ref_len = 0;

    double precision(int order) const;  // modified precision, orders 1-based
    double brevity_penalty() const;
    // Geometric mean of modified precisions times the brevity penalty.
    // An order with zero matches zeroes the score unless `smooth`, which
    // substitutes (match+1)/(total+1) for orders >= 2.
    double score(bool smooth = false, int max_order = kMaxOrder) const;
};

BleuStats bleu_stats(const std::vector<Tokens>& hypotheses, const std::vector<Tokens>& references,
                     int max_order = BleuStats::kMaxOrder);

double bleu(const std::vector<Tokens>& hypotheses, const std::vector<Tokens>& references,
            bool smooth = false, int max_order = BleuStats::kMaxOrder);

struct RougeL {
    double precision = 0.0, recall = 0.0, f = 0.0;
};

// LCS-based ROUGE-L; F is the recall-weighted F_beta with beta = 1.2.
RougeL rouge_l(const Tokens& hypothesis, const Tokens& reference, double beta = 1.2);

// Running negative log-likelihood accumulator; ppl() = exp(mean per-token NLL).
struct PplAccum {
    double nll_sum = 0.0;
    long tokens = 0;

    void add(double nll, long n) {
        nll_sum += nll;
        tokens += n;
    }
    double ppl() const { return tokens > 0 ? std::exp(nll_sum / double(tokens)) : 1.0; }
};

}  // namespace cat
