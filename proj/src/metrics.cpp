#include <cat/metrics.hpp>

#include <algorithm>
#include <cctype>
#include <set>
#include <stdexcept>

namespace cat {

Tokens metric_tokenize(const std::string& text) {
    Tokens out;
    std::string word;
    auto flush = [&] {
        if (!word.empty()) {
            out.push_back(word);
            word.clear();
        }
    };
    for (unsigned char c : text) {
        if (std::isspace(c)) {
            flush();
        } else if (std::isalnum(c) || c >= 128) {
            // non-ASCII bytes stay inside words so UTF-8 sequences survive
            word.push_back(static_cast<char>(std::tolower(c)));
        } else {
            flush();
            out.push_back(std::string(1, static_cast<char>(c)));
        }
    }
    flush();
    return out;
}

namespace {

constexpr char kSep = '\x1f';

std::string gram_key(const Tokens& tokens, size_t start, int order) {
    std::string key = tokens[start];
    for (int i = 1; i < order; ++i) {
        key.push_back(kSep);
        key += tokens[start + i];
    }
    return key;
}

void add_grams(NGramProfile& p, const Tokens& tokens) {
    p.total_tokens += static_cast<long>(tokens.size());
    if (static_cast<int>(tokens.size()) < p.order) return;
    for (size_t i = 0; i + p.order <= tokens.size(); ++i) ++p.counts[gram_key(tokens, i, p.order)];
}

}  // namespace

NGramProfile ngram_profile(const Tokens& tokens, int order) {
    if (order < 1) throw std::invalid_argument("n-gram order must be at least 1");
    NGramProfile p;
    p.order = order;
    add_grams(p, tokens);
    return p;
}

TripleEval build_triple(const Tokens& document, const std::vector<Tokens>& context_turns,
                        const Tokens& response, int order) {
    TripleEval t;
    t.g_d = ngram_profile(document, order);
    t.g_r = ngram_profile(response, order);
    t.g_c.order = order;
    for (const auto& turn : context_turns) add_grams(t.g_c, turn);

    // deterministic order for reports and diagnostics
    std::set<std::string> overlap;
    for (const auto& [key, c] : t.g_r.counts)
        if (t.g_d.counts.count(key)) overlap.insert(key);
    for (const auto& key : overlap) {
        t.g_dr.push_back(key);
        if (!t.g_c.counts.count(key)) t.g_dr_c.push_back(key);
    }
    return t;
}

KUResult ku(const TripleEval& t) {
    if (t.g_dr.empty()) return {false, 0.0};
    return {true, double(t.g_dr_c.size()) / double(t.g_dr.size())};
}

QKUTriple qku_triple(const TripleEval& t) {
    if (t.g_dr_c.empty()) return {false, 0.0};
    double num = 0.0, den = 0.0;
    for (const auto& key : t.g_dr_c) {
        num += 1.0 / t.g_r.frequency(key);  // every key is in both profiles by construction
        den += 1.0 / t.g_d.frequency(key);
    }
    return {true, num / den};
}

QKUCorpus qku(const std::vector<TripleEval>& triples) {
    QKUCorpus out;
    for (const auto& t : triples) {
        auto q = qku_triple(t);
        if (q.contributes) {
            out.raw_sum += q.ratio;
            ++out.contributing;
        } else {
            ++out.skipped;
        }
    }
    out.mean = out.contributing > 0 ? out.raw_sum / out.contributing : 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

double BleuStats::precision(int order) const {
    if (order < 1 || order > kMaxOrder) throw std::invalid_argument("BLEU order out of range");
    if (total[order - 1] == 0) return 0.0;
    return double(match[order - 1]) / double(total[order - 1]);
}

double BleuStats::brevity_penalty() const {
    if (hyp_len >= ref_len) return 1.0;
    if (hyp_len == 0) return 0.0;
    return std::exp(1.0 - double(ref_len) / double(hyp_len));
}

double BleuStats::score(bool smooth, int max_order) const {
    if (max_order < 1 || max_order > kMaxOrder) throw std::invalid_argument("BLEU order out of range");
    double log_sum = 0.0;
    for (int n = 1; n <= max_order; ++n) {
        long m = match[n - 1], tot = total[n - 1];
        if (smooth && n >= 2 && m == 0) {
            ++m;
            ++tot;
        }
        if (m == 0 || tot == 0) return 0.0;
        log_sum += std::log(double(m) / double(tot));
    }
    return brevity_penalty() * std::exp(log_sum / max_order);
}

BleuStats bleu_stats(const std::vector<Tokens>& hypotheses, const std::vector<Tokens>& references,
                     int max_order) {
    if (hypotheses.empty()) throw std::invalid_argument("BLEU needs at least one hypothesis");
    if (hypotheses.size() != references.size())
        throw std::invalid_argument("BLEU: " + std::to_string(hypotheses.size()) +
                                    " hypotheses vs " + std::to_string(references.size()) +
                                    " references");
    if (max_order < 1 || max_order > BleuStats::kMaxOrder)
        throw std::invalid_argument("BLEU order out of range");

    BleuStats s;
    for (size_t i = 0; i < hypotheses.size(); ++i) {
        const auto& hyp = hypotheses[i];
        const auto& ref = references[i];
        s.hyp_len += static_cast<long>(hyp.size());
        s.ref_len += static_cast<long>(ref.size());
        for (int n = 1; n <= max_order; ++n) {
            auto hp = ngram_profile(hyp, n);
            auto rp = ngram_profile(ref, n);
            for (const auto& [key, c] : hp.counts) {
                s.total[n - 1] += c;
                s.match[n - 1] += std::min(c, rp.frequency(key));  // clipped
            }
        }
    }
    return s;
}

double bleu(const std::vector<Tokens>& hypotheses, const std::vector<Tokens>& references,
            bool smooth, int max_order) {
    return bleu_stats(hypotheses, references, max_order).score(smooth, max_order);
}

// ---------------------------------------------------------------------------
// ROUGE-L
// ---------------------------------------------------------------------------

RougeL rouge_l(const Tokens& hypothesis, const Tokens& reference, double beta) {
    if (reference.empty()) throw std::invalid_argument("ROUGE-L needs a nonempty reference");
    RougeL out;
    if (hypothesis.empty()) return out;

    const size_t m = hypothesis.size(), n = reference.size();
    std::vector<std::vector<int>> dp(m + 1, std::vector<int>(n + 1, 0));
    for (size_t i = 1; i <= m; ++i)
        for (size_t j = 1; j <= n; ++j)
            dp[i][j] = hypothesis[i - 1] == reference[j - 1]
                           ? dp[i - 1][j - 1] + 1
                           : std::max(dp[i - 1][j], dp[i][j - 1]);
    const double lcs = dp[m][n];
    out.precision = lcs / double(m);
    out.recall = lcs / double(n);
    const double b2 = beta * beta;
    const double denom = out.recall + b2 * out.precision;
    out.f = denom > 0.0 ? (1.0 + b2) * out.precision * out.recall / denom : 0.0;
    return out;
}

}  // namespace cat
