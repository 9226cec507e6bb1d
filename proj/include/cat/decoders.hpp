#pragma once

// Two-pass deliberation decoding. The first pass drafts a response from the
// last utterance and the aggregated document; the second pass polishes the
// draft with access to the first-pass states and the raw document. The
// enhanced variant (EDD) replaces the first pass with a merge-attention
// decoder that weighs the draft stream against both encoder branches.
//
// Inference note: generation scores come from the second pass only; the
// hypothesis prefix is fed through both passes each step (continuous
// deliberation). First-pass logits participate only in the training loss.

#include <cat/ablation.hpp>
#include <cat/transformer.hpp>

#include <utility>

namespace cat {

enum class DecoderKind { dd, edd };

inline std::string to_string(DecoderKind k) { return k == DecoderKind::dd ? "dd" : "edd"; }

inline DecoderKind decoder_kind_from_string(const std::string& s) {
    if (s == "dd") return DecoderKind::dd;
    if (s == "edd") return DecoderKind::edd;
    throw std::invalid_argument("unknown decoder '" + s + "' (expected dd|edd)");
}

template <class S>
struct DecoderPassOutputT {
    TensorT<S> hidden;  // [r x dim]
    TensorT<S> logits;  // [r x vocab]
};

// ---------------------------------------------------------------------------
// merge attention
// ---------------------------------------------------------------------------

// The pure combination step: per decoder row, score the three aligned
// streams with W_P, softmax to simplex weights, and mix. Returns the mixed
// stream and the [r x 3] weight rows.
template <class S>
std::pair<TensorT<S>, TensorT<S>> merge_combine(const TensorT<S>& r, const TensorT<S>& c_d,
                                                const TensorT<S>& c_dt, const TensorT<S>& w_p) {
    if (w_p.rows() != 3 * r.cols() || w_p.cols() != 3)
        throw std::invalid_argument("merge_combine: W_P must be [3*dim x 3], got " +
                                    shape_string(w_p.shape()));
    auto p = softmax_rows(matmul(concat_cols<S>({r, c_d, c_dt}), w_p));
    auto pick = [&](int k) {
        auto basis = TensorT<S>::zeros({3, 1});
        basis.values()[k] = S(1);
        return matmul(p, basis);  // [r x 1] column of P
    };
    auto v = add(add(mul_rows(r, pick(0)), mul_rows(c_d, pick(1))), mul_rows(c_dt, pick(2)));
    return {v, p};
}

// Aligns both encoder branches to the decoder steps by cross-attention, then
// applies merge_combine.
template <class S>
struct MergeAttentionT {
    MultiHeadAttentionT<S> d_att, dt_att;
    TensorT<S> w_p;  // [3*dim x 3]

    MergeAttentionT() = default;
    MergeAttentionT(int dim, int heads, std::mt19937& rng)
        : d_att(dim, heads, rng), dt_att(dim, heads, rng), w_p(xavier_uniform<S>(3 * dim, 3, rng)) {}

    TensorT<S> operator()(const TensorT<S>& r, const TensorT<S>& d_n, const TensorT<S>& d_tilde_n,
                          const RunState& rs, TensorT<S>* weights_out = nullptr) const {
        auto c_d = d_att(r, d_n, d_n, AttentionMask::none(), rs);
        auto c_dt = dt_att(r, d_tilde_n, d_tilde_n, AttentionMask::none(), rs);
        auto [v, p] = merge_combine(r, c_d, c_dt, w_p);
        if (weights_out) *weights_out = p;
        return v;
    }

    void register_params(const std::string& prefix, NamedParamsT<S>& out) const {
        d_att.register_params(prefix + ".d", out);
        dt_att.register_params(prefix + ".dt", out);
        out.emplace_back(prefix + ".w_p", w_p);
    }
};

// ---------------------------------------------------------------------------
// decoder layers
// ---------------------------------------------------------------------------

template <class S>
struct DDFirstLayerT {
    MultiHeadAttentionT<S> self_att;
    ResidualNormT<S> self_norm;
    MultiHeadAttentionT<S> utter_att;  // cross-attention to L_s
    ResidualNormT<S> utter_norm;
    MultiHeadAttentionT<S> doc_att;  // cross-attention to D_final
    ResidualNormT<S> doc_norm;
    FeedForwardT<S> ff;
    ResidualNormT<S> ff_norm;

    DDFirstLayerT() = default;
    DDFirstLayerT(int dim, int heads, int filter, std::mt19937& rng)
        : self_att(dim, heads, rng),
          self_norm(dim),
          utter_att(dim, heads, rng),
          utter_norm(dim),
          doc_att(dim, heads, rng),
          doc_norm(dim),
          ff(dim, filter, rng),
          ff_norm(dim) {}

    TensorT<S> operator()(TensorT<S> x, const TensorT<S>& l_s, const TensorT<S>& d_final,
                          const RunState& rs) const {
        x = self_norm(x, self_att(x, x, x, AttentionMask::causal_self(), rs), rs);
        x = utter_norm(x, utter_att(x, l_s, l_s, AttentionMask::none(), rs), rs);
        x = doc_norm(x, doc_att(x, d_final, d_final, AttentionMask::none(), rs), rs);
        return ff_norm(x, ff(x), rs);
    }

    void register_params(const std::string& prefix, NamedParamsT<S>& out) const {
        self_att.register_params(prefix + ".self", out);
        self_norm.register_params(prefix + ".self", out);
        utter_att.register_params(prefix + ".utter", out);
        utter_norm.register_params(prefix + ".utter", out);
        doc_att.register_params(prefix + ".doc", out);
        doc_norm.register_params(prefix + ".doc", out);
        ff.register_params(prefix + ".ff", out);
        ff_norm.register_params(prefix + ".ff", out);
    }
};

// Enhanced first-pass layer: self-attention, merge attention over the two
// encoder branches, utterance attention, feed-forward.
template <class S>
struct EDDFirstLayerT {
    MultiHeadAttentionT<S> self_att;
    ResidualNormT<S> self_norm;
    MergeAttentionT<S> merge;
    ResidualNormT<S> merge_norm;
    MultiHeadAttentionT<S> utter_att;
    ResidualNormT<S> utter_norm;
    FeedForwardT<S> ff;
    ResidualNormT<S> ff_norm;

    EDDFirstLayerT() = default;
    EDDFirstLayerT(int dim, int heads, int filter, std::mt19937& rng)
        : self_att(dim, heads, rng),
          self_norm(dim),
          merge(dim, heads, rng),
          merge_norm(dim),
          utter_att(dim, heads, rng),
          utter_norm(dim),
          ff(dim, filter, rng),
          ff_norm(dim) {}

    TensorT<S> operator()(TensorT<S> x, const TensorT<S>& l_s, const TensorT<S>& d_n,
                          const TensorT<S>& d_tilde_n, const RunState& rs,
                          TensorT<S>* merge_weights = nullptr) const {
        x = self_norm(x, self_att(x, x, x, AttentionMask::causal_self(), rs), rs);
        x = merge_norm(x, merge(x, d_n, d_tilde_n, rs, merge_weights), rs);
        x = utter_norm(x, utter_att(x, l_s, l_s, AttentionMask::none(), rs), rs);
        return ff_norm(x, ff(x), rs);
    }

    void register_params(const std::string& prefix, NamedParamsT<S>& out) const {
        self_att.register_params(prefix + ".self", out);
        self_norm.register_params(prefix + ".self", out);
        merge.register_params(prefix + ".merge", out);
        merge_norm.register_params(prefix + ".merge", out);
        utter_att.register_params(prefix + ".utter", out);
        utter_norm.register_params(prefix + ".utter", out);
        ff.register_params(prefix + ".ff", out);
        ff_norm.register_params(prefix + ".ff", out);
    }
};

// Second pass, shared verbatim between DD and EDD: self-attention over the
// response prefix, cross-attention to the first-pass states, cross-attention
// to the embedded document, feed-forward. The first-pass cross-attention is
// causally aligned (query t sees states <= t) so that step t never observes
// information derived from reference tokens at positions >= t.
template <class S>
struct SecondPassLayerT {
    MultiHeadAttentionT<S> self_att;
    ResidualNormT<S> self_norm;
    MultiHeadAttentionT<S> draft_att;  // cross-attention to first-pass states
    ResidualNormT<S> draft_norm;
    MultiHeadAttentionT<S> doc_att;  // cross-attention to the embedded document
    ResidualNormT<S> doc_norm;
    FeedForwardT<S> ff;
    ResidualNormT<S> ff_norm;

    SecondPassLayerT() = default;
    SecondPassLayerT(int dim, int heads, int filter, std::mt19937& rng)
        : self_att(dim, heads, rng),
          self_norm(dim),
          draft_att(dim, heads, rng),
          draft_norm(dim),
          doc_att(dim, heads, rng),
          doc_norm(dim),
          ff(dim, filter, rng),
          ff_norm(dim) {}

    TensorT<S> operator()(TensorT<S> x, const TensorT<S>& r1_states, const TensorT<S>& d_emb,
                          const AttentionMask& d_mask, const RunState& rs) const {
        x = self_norm(x, self_att(x, x, x, AttentionMask::causal_self(), rs), rs);
        x = draft_norm(x, draft_att(x, r1_states, r1_states, AttentionMask::causal_self(), rs), rs);
        x = doc_norm(x, doc_att(x, d_emb, d_emb, d_mask, rs), rs);
        return ff_norm(x, ff(x), rs);
    }

    void register_params(const std::string& prefix, NamedParamsT<S>& out) const {
        self_att.register_params(prefix + ".self", out);
        self_norm.register_params(prefix + ".self", out);
        draft_att.register_params(prefix + ".draft", out);
        draft_norm.register_params(prefix + ".draft", out);
        doc_att.register_params(prefix + ".doc", out);
        doc_norm.register_params(prefix + ".doc", out);
        ff.register_params(prefix + ".ff", out);
        ff_norm.register_params(prefix + ".ff", out);
    }
};

// ---------------------------------------------------------------------------
// the two-pass decoder
// ---------------------------------------------------------------------------

template <class S>
struct DeliberationDecoderT {
    DecoderKind kind = DecoderKind::dd;
    int max_len = 40;
    std::vector<DDFirstLayerT<S>> first;    // populated for DD
    std::vector<EDDFirstLayerT<S>> efirst;  // populated for EDD
    std::vector<SecondPassLayerT<S>> second;
    LinearT<S> head1, head2;  // vocabulary projections per pass

    DeliberationDecoderT() = default;
    DeliberationDecoderT(DecoderKind kind_, int dim, int heads, int filter, int n_layers,
                         int vocab, int max_len_, std::mt19937& rng)
        : kind(kind_), max_len(max_len_) {
        if (n_layers < 1) throw std::invalid_argument("decoder needs at least one layer");
        for (int i = 0; i < n_layers; ++i) {
            if (kind == DecoderKind::dd)
                first.emplace_back(dim, heads, filter, rng);
            else
                efirst.emplace_back(dim, heads, filter, rng);
            second.emplace_back(dim, heads, filter, rng);
        }
        head1 = LinearT<S>(dim, vocab, rng);
        head2 = LinearT<S>(dim, vocab, rng);
    }

    void check_prefix(const TensorT<S>& r_emb) const {
        // prefix includes the start token, hence max_len + 1 rows at most
        if (r_emb.rows() > max_len + 1)
            throw std::invalid_argument("decoder prefix of " + std::to_string(r_emb.rows()) +
                                        " rows exceeds the decode limit of " + std::to_string(max_len));
    }

    DecoderPassOutputT<S> first_pass(const TensorT<S>& r_emb, const TensorT<S>& l_s,
                                     const TensorT<S>& d_final, const RunState& rs) const {
        if (kind != DecoderKind::dd) throw std::logic_error("first_pass called on an EDD decoder");
        check_prefix(r_emb);
        auto x = r_emb;
        for (const auto& layer : first) x = layer(x, l_s, d_final, rs);
        return {x, head1(x)};
    }

    DecoderPassOutputT<S> first_pass_enhanced(const TensorT<S>& r_emb, const TensorT<S>& l_s,
                                              const TensorT<S>& d_n, const TensorT<S>& d_tilde_n,
                                              const RunState& rs,
                                              std::vector<TensorT<S>>* merge_weights = nullptr) const {
        if (kind != DecoderKind::edd)
            throw std::logic_error("first_pass_enhanced called on a DD decoder");
        if (!d_n.defined())
            throw std::invalid_argument(
                "enhanced decoder needs both encoder branches; it cannot run under wo_left");
        check_prefix(r_emb);
        auto x = r_emb;
        for (const auto& layer : efirst) {
            TensorT<S> w;
            x = layer(x, l_s, d_n, d_tilde_n, rs, merge_weights ? &w : nullptr);
            if (merge_weights) merge_weights->push_back(w);
        }
        return {x, head1(x)};
    }

    DecoderPassOutputT<S> second_pass(const TensorT<S>& r_emb, const TensorT<S>& r1_states,
                                      const TensorT<S>& d_emb, const RunState& rs,
                                      const AttentionMask& d_mask = {}) const {
        check_prefix(r_emb);
        if (r1_states.rows() != r_emb.rows())
            throw std::invalid_argument("second pass needs one first-pass state per prefix row, got " +
                                        shape_string(r1_states.shape()) + " for prefix " +
                                        shape_string(r_emb.shape()));
        auto x = r_emb;
        for (const auto& layer : second) x = layer(x, r1_states, d_emb, d_mask, rs);
        return {x, head2(x)};
    }

    // Full two-pass forward. d_n / d_tilde_n are consulted only by EDD.
    std::pair<DecoderPassOutputT<S>, DecoderPassOutputT<S>> run(
        const TensorT<S>& r_emb, const TensorT<S>& l_s, const TensorT<S>& d_final,
        const TensorT<S>& d_n, const TensorT<S>& d_tilde_n, const TensorT<S>& d_emb,
        const RunState& rs) const {
        auto p1 = kind == DecoderKind::dd ? first_pass(r_emb, l_s, d_final, rs)
                                          : first_pass_enhanced(r_emb, l_s, d_n, d_tilde_n, rs);
        auto p2 = second_pass(r_emb, p1.hidden, d_emb, rs);
        return {p1, p2};
    }

    void register_params(const std::string& prefix, NamedParamsT<S>& out) const {
        for (size_t i = 0; i < first.size(); ++i)
            first[i].register_params(prefix + ".first." + std::to_string(i), out);
        for (size_t i = 0; i < efirst.size(); ++i)
            efirst[i].register_params(prefix + ".first." + std::to_string(i), out);
        for (size_t i = 0; i < second.size(); ++i)
            second[i].register_params(prefix + ".second." + std::to_string(i), out);
        head1.register_params(prefix + ".head1", out);
        head2.register_params(prefix + ".head2", out);
    }
};

// ---------------------------------------------------------------------------
// joint loss
// ---------------------------------------------------------------------------

template <class S>
struct JointLossT {
    TensorT<S> sum;  // graph scalar: summed NLL of pass 1 plus pass 2
    double pass1 = 0.0, pass2 = 0.0;
    int tokens = 0;
    double raw() const { return pass1 + pass2; }
    double mean_per_token() const { return tokens > 0 ? raw() / tokens : 0.0; }
};

// Negative log-likelihood of the reference under both passes, summed over
// steps with equal pass weights. Callers optimize sum scaled by 1/tokens.
template <class S>
JointLossT<S> joint_loss(const TensorT<S>& logits1, const TensorT<S>& logits2,
                     const std::vector<int>& targets, S label_smoothing = S(0)) {
    if (logits1.rows() != static_cast<int>(targets.size()) ||
        logits2.rows() != static_cast<int>(targets.size()))
        throw std::invalid_argument("joint_loss: " + std::to_string(targets.size()) +
                                    " reference tokens for logits " + shape_string(logits1.shape()) +
                                    " and " + shape_string(logits2.shape()));
    auto l1 = cross_entropy_sum(logits1, targets, label_smoothing);
    auto l2 = cross_entropy_sum(logits2, targets, label_smoothing);
    JointLossT<S> out;
    out.pass1 = static_cast<double>(l1.value());
    out.pass2 = static_cast<double>(l2.value());
    out.tokens = static_cast<int>(targets.size());
    out.sum = add(l1, l2);
    return out;
}

}  // namespace cat
