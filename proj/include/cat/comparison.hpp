#pragma once

// Concatenation comparison: pool the self-attended history and last
// utterance, score their relevance with a scalar gate, scale the
// history-filtered document by the gate, and concatenate with the
// utterance-filtered document along the sequence dimension.

#include <cat/ablation.hpp>
#include <cat/transformer.hpp>

namespace cat {

template <class S>
struct GateParamsT {
    TensorT<S> w_h;      // [dim x dim]
    TensorT<S> w_l;      // [dim x dim]
    TensorT<S> w_alpha;  // [1 x dim]

    GateParamsT() = default;
    GateParamsT(int dim, std::mt19937& rng)
        : w_h(xavier_uniform<S>(dim, dim, rng)),
          w_l(xavier_uniform<S>(dim, dim, rng)),
          w_alpha(xavier_uniform<S>(1, dim, rng)) {}

    void register_params(const std::string& prefix, NamedParamsT<S>& out) const {
        out.emplace_back(prefix + ".w_h", w_h);
        out.emplace_back(prefix + ".w_l", w_l);
        out.emplace_back(prefix + ".w_alpha", w_alpha);
    }
};

// Average pooling over positions -> [1 x dim].
template <class S>
TensorT<S> pool_mean(const TensorT<S>& x) {
    if (x.rows() == 0) throw std::invalid_argument("pool_mean: empty sequence");
    return mean_rows(x);
}

// alpha = tanh(H_sa W_H + L_sa W_L); g = sigmoid(alpha . w_alpha), a [1 x 1]
// tensor kept in the graph so the gate trains end-to-end. Strictly in (0,1).
template <class S>
TensorT<S> relevance_gate(const TensorT<S>& h_sa, const TensorT<S>& l_sa,
                          const GateParamsT<S>& p) {
    auto alpha = tanh(add(matmul(h_sa, p.w_h), matmul(l_sa, p.w_l)));
    return sigmoid(matmul_nt(alpha, p.w_alpha));
}

// D_final = [g * D_n ; D_tilde_n]. Under wo_56 the gate is pinned to 1 and
// this is a plain concatenation.
template <class S>
TensorT<S> aggregate_concat(const TensorT<S>& d_n, const TensorT<S>& d_tilde_n,
                            const TensorT<S>& g, Ablation ablation) {
    if (d_n.cols() != d_tilde_n.cols())
        throw std::invalid_argument("aggregate_concat: width mismatch " + shape_string(d_n.shape()) +
                                    " vs " + shape_string(d_tilde_n.shape()));
    if (ablation == Ablation::wo_56) return concat_rows(d_n, d_tilde_n);
    return concat_rows(mul_scalar_t(d_n, g), d_tilde_n);
}

}  // namespace cat
