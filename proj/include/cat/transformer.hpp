#pragma once

// Transformer building blocks shared by the encoder and both decoders:
// scaled dot-product attention, multi-head attention, position-wise
// feed-forward, embeddings with sinusoidal positions, and the
// residual + layer-norm sublayer wrapper.

#include <cat/tensor.hpp>

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace cat {

template <class S>
using NamedParamsT = std::vector<std::pair<std::string, TensorT<S>>>;

// Attention masking: keys may be disabled wholesale (padding) and/or
// restricted to a lower triangle (decoding). `causal` requires query i to
// attend only keys j <= i, which also expresses the aligned cross-attention
// used by the second decoding pass.
struct AttentionMask {
    std::vector<uint8_t> key_valid;  // empty = every key allowed
    bool causal = false;

    static AttentionMask none() { return {}; }
    static AttentionMask causal_self() {
        AttentionMask m;
        m.causal = true;
        return m;
    }
};

// Diagnostics accumulated across attention calls in one forward pass.
struct AttnStats {
    int all_masked_rows = 0;
};

// Mutable per-forward context: dropout configuration and diagnostics sink.
// Inference passes keep the defaults (no dropout, no stats).
struct RunState {
    double dropout = 0.0;
    std::mt19937* rng = nullptr;
    bool training = false;
    AttnStats* stats = nullptr;

    bool dropping() const { return training && dropout > 0.0 && rng != nullptr; }
};

template <class S>
TensorT<S> maybe_dropout(const TensorT<S>& x, const RunState& rs) {
    if (!rs.dropping()) return x;
    return dropout(x, rs.dropout, *rs.rng, true);
}

namespace detail {
inline std::vector<uint8_t> expand_mask(const AttentionMask& mask, int q_len, int k_len) {
    if (mask.key_valid.empty() && !mask.causal) return {};
    if (!mask.key_valid.empty() && static_cast<int>(mask.key_valid.size()) != k_len)
        throw std::invalid_argument("attention mask covers " + std::to_string(mask.key_valid.size()) +
                                    " keys but sequence has " + std::to_string(k_len));
    std::vector<uint8_t> allowed(static_cast<size_t>(q_len) * k_len, 1);
    for (int i = 0; i < q_len; ++i)
        for (int j = 0; j < k_len; ++j) {
            bool ok = mask.key_valid.empty() || mask.key_valid[j];
            if (mask.causal && j > i) ok = false;
            allowed[static_cast<size_t>(i) * k_len + j] = ok ? 1 : 0;
        }
    return allowed;
}
}  // namespace detail

// Scaled dot-product attention. Rows of Q whose keys are entirely masked
// come out zero and are tallied in stats (they carry no information, and
// renormalizing over nothing is undefined).
template <class S>
TensorT<S> attention(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v,
                     const AttentionMask& mask = {}, AttnStats* stats = nullptr,
                     TensorT<S>* weights_out = nullptr) {
    if (q.cols() != k.cols())
        throw std::invalid_argument("attention: query width " + shape_string(q.shape()) +
                                    " differs from key width " + shape_string(k.shape()));
    if (k.rows() != v.rows())
        throw std::invalid_argument("attention: key count " + shape_string(k.shape()) +
                                    " differs from value count " + shape_string(v.shape()));
    const S inv_sqrt_dk = S(1) / std::sqrt(S(q.cols()));
    auto scores = scale(matmul_nt(q, k), inv_sqrt_dk);
    auto allowed = detail::expand_mask(mask, q.rows(), k.rows());
    int dead = 0;
    auto weights = masked_softmax_rows(scores, allowed, &dead);
    if (dead > 0 && stats) stats->all_masked_rows += dead;
    if (weights_out) *weights_out = weights;
    return matmul(weights, v);
}

template <class S>
struct LinearT {
    TensorT<S> w;  // [in x out]
    TensorT<S> b;  // [1 x out] when biased
    bool biased = true;

    LinearT() = default;
    LinearT(int in, int out, std::mt19937& rng, bool bias = true)
        : w(xavier_uniform<S>(in, out, rng)), biased(bias) {
        if (bias) b = zeros_param<S>(1, out);
    }

    TensorT<S> operator()(const TensorT<S>& x) const {
        auto y = matmul(x, w);
        return biased ? add_rowvec(y, b) : y;
    }

    void register_params(const std::string& prefix, NamedParamsT<S>& out) const {
        out.emplace_back(prefix + ".w", w);
        if (biased) out.emplace_back(prefix + ".b", b);
    }
};

template <class S>
struct LayerNormT {
    TensorT<S> gain, bias;

    LayerNormT() = default;
    explicit LayerNormT(int dim) : gain(ones_param<S>(1, dim)), bias(zeros_param<S>(1, dim)) {}

    TensorT<S> operator()(const TensorT<S>& x) const { return layer_norm_rows(x, gain, bias); }

    void register_params(const std::string& prefix, NamedParamsT<S>& out) const {
        out.emplace_back(prefix + ".gain", gain);
        out.emplace_back(prefix + ".bias", bias);
    }
};

// Residual connection followed by layer normalization, with dropout on the
// sublayer output: LN(x + Dropout(sub)).
template <class S>
struct ResidualNormT {
    LayerNormT<S> norm;

    ResidualNormT() = default;
    explicit ResidualNormT(int dim) : norm(dim) {}

    TensorT<S> operator()(const TensorT<S>& x, const TensorT<S>& sub, const RunState& rs) const {
        return norm(add(x, maybe_dropout(sub, rs)));
    }

    void register_params(const std::string& prefix, NamedParamsT<S>& out) const {
        norm.register_params(prefix + ".norm", out);
    }
};

// Multi-head attention: per-head query/key/value projections, scaled
// dot-product attention per head, concatenation, and an output projection.
template <class S>
struct MultiHeadAttentionT {
    int model_dim = 0;
    int heads = 0;
    int head_dim = 0;
    std::vector<TensorT<S>> wq, wk, wv;  // each [model_dim x head_dim]
    TensorT<S> wo;                       // [model_dim x model_dim]

    MultiHeadAttentionT() = default;
    MultiHeadAttentionT(int model_dim_, int heads_, std::mt19937& rng)
        : model_dim(model_dim_), heads(heads_), head_dim(model_dim_ / heads_) {
        if (heads <= 0 || model_dim % heads != 0)
            throw std::invalid_argument("multi-head attention: model dim " + std::to_string(model_dim) +
                                        " not divisible by " + std::to_string(heads) + " heads");
        for (int h = 0; h < heads; ++h) {
            wq.push_back(xavier_uniform<S>(model_dim, head_dim, rng));
            wk.push_back(xavier_uniform<S>(model_dim, head_dim, rng));
            wv.push_back(xavier_uniform<S>(model_dim, head_dim, rng));
        }
        wo = xavier_uniform<S>(model_dim, model_dim, rng);
    }

    TensorT<S> operator()(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v,
                          const AttentionMask& mask, const RunState& rs) const {
        if (q.cols() != model_dim || k.cols() != model_dim || v.cols() != model_dim)
            throw std::invalid_argument("multi-head attention: inputs must be " +
                                        std::to_string(model_dim) + " wide, got " +
                                        shape_string(q.shape()) + ", " + shape_string(k.shape()) +
                                        ", " + shape_string(v.shape()));
        std::vector<TensorT<S>> parts;
        parts.reserve(heads);
        for (int h = 0; h < heads; ++h) {
            auto qh = matmul(q, wq[h]);
            auto kh = matmul(k, wk[h]);
            auto vh = matmul(v, wv[h]);
            parts.push_back(attention(qh, kh, vh, mask, rs.stats));
        }
        return matmul(concat_cols(parts), wo);
    }

    void register_params(const std::string& prefix, NamedParamsT<S>& out) const {
        for (int h = 0; h < heads; ++h) {
            out.emplace_back(prefix + ".h" + std::to_string(h) + ".wq", wq[h]);
            out.emplace_back(prefix + ".h" + std::to_string(h) + ".wk", wk[h]);
            out.emplace_back(prefix + ".h" + std::to_string(h) + ".wv", wv[h]);
        }
        out.emplace_back(prefix + ".wo", wo);
    }
};

// Position-wise feed-forward: Linear -> ReLU -> Linear.
template <class S>
struct FeedForwardT {
    LinearT<S> inner, outer;

    FeedForwardT() = default;
    FeedForwardT(int dim, int filter, std::mt19937& rng)
        : inner(dim, filter, rng), outer(filter, dim, rng) {}

    TensorT<S> operator()(const TensorT<S>& x) const { return outer(relu(inner(x))); }

    void register_params(const std::string& prefix, NamedParamsT<S>& out) const {
        inner.register_params(prefix + ".inner", out);
        outer.register_params(prefix + ".outer", out);
    }
};

// Sinusoidal positional encoding: row p, even dim 2i holds
// sin(p / 10000^(2i/dim)), odd dim 2i+1 the matching cosine.
template <class S>
TensorT<S> positional_encoding(int len, int dim) {
    auto pe = TensorT<S>::zeros({len, dim});
    for (int p = 0; p < len; ++p) {
        for (int i = 0; i * 2 < dim; ++i) {
            const double freq = std::pow(10000.0, (2.0 * i) / dim);
            pe.at(p, 2 * i) = S(std::sin(p / freq));
            if (2 * i + 1 < dim) pe.at(p, 2 * i + 1) = S(std::cos(p / freq));
        }
    }
    return pe;
}

// Token embedding shared across dialogue, document, and response streams.
// Lookup is scaled by sqrt(dim) and summed with the positional encoding.
template <class S>
struct EmbeddingT {
    TensorT<S> table;  // [vocab x dim]
    int dim = 0;
    bool positional = true;

    EmbeddingT() = default;
    EmbeddingT(int vocab, int dim_, std::mt19937& rng, bool positional_ = true)
        : table(normal_init<S>(vocab, dim_, 1.0 / std::sqrt(double(dim_)), rng)),
          dim(dim_),
          positional(positional_) {}

    TensorT<S> operator()(const std::vector<int>& ids) const {
        auto e = scale(embedding_rows(table, ids), S(std::sqrt(double(dim))));
        if (positional && !ids.empty())
            e = add(e, positional_encoding<S>(static_cast<int>(ids.size()), dim));
        return e;
    }

    void register_params(const std::string& prefix, NamedParamsT<S>& out) const {
        out.emplace_back(prefix + ".table", table);
    }
};

}  // namespace cat
