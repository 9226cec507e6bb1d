#pragma once

// Dual-branch encoder. The left branch guides the dialogue history with the
// self-attended last utterance and uses the result to filter the document;
// the right branch filters the document with the last utterance alone.
// Layer recurrence (N layers, untied parameters):
//
//   left   layer 1:  H1 = MAtt(L_s, H, H);  D1 = FF(MAtt(H1, D, D))
//   left   layer i:  Ds = MAtt(D^{i-1}, D^{i-1}, D^{i-1});
//                    Hi = MAtt(Ds, H, H);   Di = FF(MAtt(Hi, D, D))
//   right  layer 1:  E1 = FF(MAtt(L_s, D, D))
//   right  layer i:  Ei = FF(MAtt(MAtt(E^{i-1},E^{i-1},E^{i-1}), D, D))
//
// Every MAtt/FF above is wrapped in residual + layer norm. Both branches end
// with query length equal to the last-utterance length, which keeps their
// outputs concatenable downstream.

#include <cat/ablation.hpp>
#include <cat/transformer.hpp>

#include <type_traits>

namespace cat {

template <class S>
struct SelfEncoderT {
    MultiHeadAttentionT<S> att;
    ResidualNormT<S> norm;

    SelfEncoderT() = default;
    SelfEncoderT(int dim, int heads, std::mt19937& rng) : att(dim, heads, rng), norm(dim) {}

    TensorT<S> operator()(const TensorT<S>& x, const RunState& rs) const {
        if (x.rows() == 0)
            throw std::invalid_argument("self_encode: sequence must contain at least one token");
        return norm(x, att(x, x, x, AttentionMask::none(), rs), rs);
    }

    void register_params(const std::string& prefix, NamedParamsT<S>& out) const {
        att.register_params(prefix + ".att", out);
        norm.register_params(prefix + ".norm", out);
    }
};

// One encoder layer; the self and guide stages are optional so the same type
// covers both branches and both layer positions.
template <class S>
struct EncoderLayerT {
    bool has_self = false;
    bool has_guide = false;
    MultiHeadAttentionT<S> self_att;
    ResidualNormT<S> self_norm;
    MultiHeadAttentionT<S> guide_att;
    ResidualNormT<S> guide_norm;
    MultiHeadAttentionT<S> select_att;
    ResidualNormT<S> select_norm;
    FeedForwardT<S> ff;
    ResidualNormT<S> ff_norm;

    EncoderLayerT() = default;
    EncoderLayerT(int dim, int heads, int filter, bool with_self, bool with_guide, std::mt19937& rng)
        : has_self(with_self),
          has_guide(with_guide),
          select_att(dim, heads, rng),
          select_norm(dim),
          ff(dim, filter, rng),
          ff_norm(dim) {
        if (with_self) {
            self_att = MultiHeadAttentionT<S>(dim, heads, rng);
            self_norm = ResidualNormT<S>(dim);
        }
        if (with_guide) {
            guide_att = MultiHeadAttentionT<S>(dim, heads, rng);
            guide_norm = ResidualNormT<S>(dim);
        }
    }

    TensorT<S> operator()(TensorT<S> x, const TensorT<S>* guide_kv, const TensorT<S>& d,
                          const RunState& rs) const {
        if (has_guide && guide_kv == nullptr)
            throw std::logic_error("encoder layer built with a guide stage but given no history");
        if (has_self) x = self_norm(x, self_att(x, x, x, AttentionMask::none(), rs), rs);
        if (has_guide)
            x = guide_norm(x, guide_att(x, *guide_kv, *guide_kv, AttentionMask::none(), rs), rs);
        x = select_norm(x, select_att(x, d, d, AttentionMask::none(), rs), rs);
        return ff_norm(x, ff(x), rs);
    }

    void register_params(const std::string& prefix, NamedParamsT<S>& out) const {
        if (has_self) {
            self_att.register_params(prefix + ".self", out);
            self_norm.register_params(prefix + ".self", out);
        }
        if (has_guide) {
            guide_att.register_params(prefix + ".guide", out);
            guide_norm.register_params(prefix + ".guide", out);
        }
        select_att.register_params(prefix + ".select", out);
        select_norm.register_params(prefix + ".select", out);
        ff.register_params(prefix + ".ff", out);
        ff_norm.register_params(prefix + ".ff", out);
    }
};

template <class S>
TensorT<S> encode_branch(const std::vector<EncoderLayerT<S>>& layers, TensorT<S> x,
                         std::type_identity_t<const TensorT<S>*> guide_kv, const TensorT<S>& d,
                         const RunState& rs) {
    for (const auto& layer : layers) x = layer(x, guide_kv, d, rs);
    return x;
}

template <class S>
struct EncoderOutputT {
    TensorT<S> d_n;        // left-branch document filter; defined only when has_left
    TensorT<S> d_tilde_n;  // right-branch document filter
    TensorT<S> h_s;        // self-attended history; defined only when history nonempty
    TensorT<S> l_s;        // self-attended last utterance
    bool has_left = false;
};

template <class S>
struct CatEncoderT {
    Ablation ablation = Ablation::none;
    SelfEncoderT<S> h_self, l_self;
    std::vector<EncoderLayerT<S>> left;  // absent under wo_left
    std::vector<EncoderLayerT<S>> right;

    CatEncoderT() = default;
    CatEncoderT(int dim, int heads, int filter, int n_layers, Ablation ab, std::mt19937& rng)
        : ablation(ab), h_self(dim, heads, rng), l_self(dim, heads, rng) {
        if (n_layers < 1) throw std::invalid_argument("encoder needs at least one layer");
        const bool guided = ab != Ablation::wo_G;
        if (ab != Ablation::wo_left)
            for (int i = 0; i < n_layers; ++i)
                left.emplace_back(dim, heads, filter, /*with_self=*/i > 0, /*with_guide=*/guided, rng);
        for (int i = 0; i < n_layers; ++i)
            right.emplace_back(dim, heads, filter, /*with_self=*/i > 0, /*with_guide=*/false, rng);
    }

    // h_emb may be empty (no history rounds); the left branch is skipped then.
    EncoderOutputT<S> operator()(const TensorT<S>& h_emb, const TensorT<S>& l_emb,
                                 const TensorT<S>& d_emb, const RunState& rs) const {
        if (l_emb.rows() == 0)
            throw std::invalid_argument("encoder: last utterance must contain at least one token");
        if (d_emb.rows() == 0)
            throw std::invalid_argument("encoder: document must contain at least one token");
        EncoderOutputT<S> out;
        out.l_s = l_self(l_emb, rs);
        const bool have_history = h_emb.defined() && h_emb.rows() > 0;
        if (have_history) out.h_s = h_self(h_emb, rs);
        out.d_tilde_n = encode_branch(right, out.l_s, nullptr, d_emb, rs);
        out.has_left = ablation != Ablation::wo_left && have_history;
        if (out.has_left) {
            if (ablation == Ablation::wo_G)
                out.d_n = encode_branch(left, out.h_s, nullptr, d_emb, rs);
            else
                out.d_n = encode_branch(left, out.l_s, &h_emb, d_emb, rs);
        }
        return out;
    }

    void register_params(const std::string& prefix, NamedParamsT<S>& out) const {
        h_self.register_params(prefix + ".h_self", out);
        l_self.register_params(prefix + ".l_self", out);
        for (size_t i = 0; i < left.size(); ++i)
            left[i].register_params(prefix + ".left." + std::to_string(i), out);
        for (size_t i = 0; i < right.size(); ++i)
            right[i].register_params(prefix + ".right." + std::to_string(i), out);
    }
};

}  // namespace cat
