#pragma once

#include <cat/beam.hpp>
#include <cat/comparison.hpp>
#include <cat/config.hpp>
#include <cat/data.hpp>
#include <cat/decoders.hpp>
#include <cat/encoder.hpp>

#include <algorithm>
#include <random>
#include <vector>

namespace cat {

// A DialogueExample mapped into vocabulary ids. History turns are
// concatenated in order; the model sees one flat history sequence.
struct EncodedExample {
    std::vector<int> document;
    std::vector<int> history;
    std::vector<int> last_utterance;
    std::vector<int> response;
    bool has_sections = false;
    bool topic_transfer = false;
};

inline EncodedExample encode_example(const DialogueExample& ex, const Vocab& vocab) {
    EncodedExample out;
    out.document = vocab.encode(ex.document);
    for (const auto& turn : ex.history) {
        auto ids = vocab.encode(turn);
        out.history.insert(out.history.end(), ids.begin(), ids.end());
    }
    out.last_utterance = vocab.encode(ex.last_utterance);
    out.response = vocab.encode(ex.response);
    out.has_sections = ex.has_sections;
    out.topic_transfer = ex.topic_transfer;
    return out;
}

// The full network: one shared embedding table feeding the dual-branch
// encoder, the relevance gate, and the two-pass decoder.
template <class S>
struct CatModelT {
    int dim = 0;
    int vocab_size = 0;
    DecoderKind kind = DecoderKind::dd;
    Ablation ablation = Ablation::none;
    EmbeddingT<S> embed;
    CatEncoderT<S> encoder;
    GateParamsT<S> gate;
    DeliberationDecoderT<S> decoder;

    CatModelT() = default;
    CatModelT(const ModelConfig& cfg, int vocab_size_, std::mt19937& rng)
        : dim(cfg.hidden),
          vocab_size(vocab_size_),
          kind(cfg.decoder),
          ablation(cfg.ablation),
          embed(vocab_size_, cfg.hidden, rng, cfg.positional_encoding),
          encoder(cfg.hidden, cfg.heads, cfg.filter, cfg.layers, cfg.ablation, rng),
          gate(cfg.hidden, rng),
          decoder(cfg.decoder, cfg.hidden, cfg.heads, cfg.filter, cfg.layers, vocab_size_,
                  std::max(cfg.max_decode_len, cfg.utt_limit), rng) {}

    NamedParamsT<S> params() const {
        NamedParamsT<S> out;
        embed.register_params("embed", out);
        encoder.register_params("encoder", out);
        gate.register_params("gate", out);
        decoder.register_params("decoder", out);
        return out;
    }

    // Encoded context plus the aggregated document view. `gate_value` is set
    // only when the gated concatenation actually ran (DD path with history).
    struct Forward {
        EncoderOutputT<S> enc;
        TensorT<S> d_emb;
        TensorT<S> d_final;
        TensorT<S> gate_value;
        bool gated = false;
    };

    Forward context_forward(const EncodedExample& ex, const RunState& rs) const {
        Forward f;
        f.d_emb = embed(ex.document);
        auto l_emb = embed(ex.last_utterance);
        TensorT<S> h_emb;
        if (!ex.history.empty()) h_emb = embed(ex.history);
        f.enc = encoder(h_emb, l_emb, f.d_emb, rs);
        if (kind == DecoderKind::edd) return f; // merge consumes the branches directly
        if (!f.enc.has_left) {
            f.d_final = f.enc.d_tilde_n; // no history to compare against
        } else if (ablation == Ablation::wo_56) {
            f.d_final = aggregate_concat(f.enc.d_n, f.enc.d_tilde_n, TensorT<S>(), ablation);
        } else {
            f.gate_value = relevance_gate(pool_mean(f.enc.h_s), pool_mean(f.enc.l_s), gate);
            f.d_final = aggregate_concat(f.enc.d_n, f.enc.d_tilde_n, f.gate_value, ablation);
            f.gated = true;
        }
        return f;
    }

    // Teacher-forced joint loss: decoder input [BOS, R...], targets [R..., EOS].
    JointLossT<S> example_loss(const EncodedExample& ex, const RunState& rs,
                             S label_smoothing = S(0)) const {
        auto f = context_forward(ex, rs);
        std::vector<int> input = {Vocab::kBos};
        input.insert(input.end(), ex.response.begin(), ex.response.end());
        std::vector<int> targets = ex.response;
        targets.push_back(Vocab::kEos);
        auto r_emb = embed(input);
        auto [p1, p2] = decoder.run(r_emb, f.enc.l_s, f.d_final, f.enc.d_n, f.enc.d_tilde_n,
                                    f.d_emb, rs);
        return joint_loss(p1.logits, p2.logits, targets, label_smoothing);
    }

    // Next-token distribution after `prefix` under the full two-pass decode;
    // generation scores come from the refined (second) pass.
    std::vector<double> next_logprobs(const Forward& f, const std::vector<int>& prefix) const {
        NoGradGuard ng;
        RunState rs;
        std::vector<int> input = {Vocab::kBos};
        input.insert(input.end(), prefix.begin(), prefix.end());
        auto r_emb = embed(input);
        auto [p1, p2] = decoder.run(r_emb, f.enc.l_s, f.d_final, f.enc.d_n, f.enc.d_tilde_n,
                                    f.d_emb, rs);
        const int last = p2.logits.rows() - 1;
        std::vector<double> row(vocab_size);
        for (int v = 0; v < vocab_size; ++v) row[v] = static_cast<double>(p2.logits.at(last, v));
        return log_softmax(row);
    }

    StepFn make_step_fn(const Forward& f) const {
        return [this, f](const std::vector<int>& prefix) { return next_logprobs(f, prefix); };
    }

    // Summed pass-2 NLL of the reference continuation (EOS included), for
    // perplexity reporting. Returns {nll, token count}.
    std::pair<double, int> reference_nll(const Forward& f, const std::vector<int>& response) const {
        NoGradGuard ng;
        RunState rs;
        std::vector<int> input = {Vocab::kBos};
        input.insert(input.end(), response.begin(), response.end());
        std::vector<int> targets = response;
        targets.push_back(Vocab::kEos);
        auto r_emb = embed(input);
        auto [p1, p2] = decoder.run(r_emb, f.enc.l_s, f.d_final, f.enc.d_n, f.enc.d_tilde_n,
                                    f.d_emb, rs);
        auto nll = cross_entropy_sum(p2.logits, targets, S(0));
        return {static_cast<double>(nll.value()), static_cast<int>(targets.size())};
    }

    std::pair<double, int> reference_nll(const EncodedExample& ex) const {
        NoGradGuard ng;
        RunState rs;
        return reference_nll(context_forward(ex, rs), ex.response);
    }

    // Gate diagnostics. With no history the pooled history vector is zero by
    // convention and the probe is flagged.
    struct GateProbe {
        double value = 0.0;
        bool flagged = false;
    };

    GateProbe gate_probe(const EncodedExample& ex) const {
        NoGradGuard ng;
        RunState rs;
        auto l_emb = embed(ex.last_utterance);
        auto l_pool = pool_mean(encoder.l_self(l_emb, rs));
        GateProbe probe;
        TensorT<S> h_pool;
        if (ex.history.empty()) {
            h_pool = TensorT<S>::zeros({1, dim});
            probe.flagged = true;
        } else {
            h_pool = pool_mean(encoder.h_self(embed(ex.history), rs));
        }
        probe.value = static_cast<double>(relevance_gate(h_pool, l_pool, gate).value());
        return probe;
    }
};

using CatModel = CatModelT<float>;

} // namespace cat
