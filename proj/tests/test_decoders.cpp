#include <doctest.h>

#include <cat/decoders.hpp>

#include "testutil.hpp"

#include <cmath>
#include <random>

using cat::AttentionMask;
using cat::DecoderKind;
using cat::RunState;
using DT = cat::TensorT<double>;
using testutil::check_gradients;
using testutil::random_tensor;

namespace {

// Small decoder plus fake encoder-side tensors shared by most cases.
struct Rig {
    std::mt19937 rng{401};
    cat::DeliberationDecoderT<double> dec;
    cat::EmbeddingT<double> emb;
    DT l_s, d_n, d_tilde, d_final, d_emb;
    RunState rs;

    explicit Rig(DecoderKind kind = DecoderKind::dd, int layers = 2)
        : dec(kind, 4, 2, 6, layers, /*vocab=*/10, /*max_len=*/8, rng), emb(10, 4, rng) {
        l_s = random_tensor(2, 4, rng, 1.0, false);
        d_n = random_tensor(3, 4, rng, 1.0, false);
        d_tilde = random_tensor(3, 4, rng, 1.0, false);
        d_final = cat::concat_rows(d_n, d_tilde);
        d_emb = random_tensor(4, 4, rng, 1.0, false);
    }

    std::pair<DT, DT> logits_for(const std::vector<int>& prefix) {
        auto r = emb(prefix);
        auto [p1, p2] = dec.run(r, l_s, d_final, d_n, d_tilde, d_emb, rs);
        return {p1.logits, p2.logits};
    }
};

bool rows_equal(const DT& a, const DT& b, int upto) {
    for (int i = 0; i < upto; ++i)
        for (int j = 0; j < a.cols(); ++j)
            if (a.at(i, j) != b.at(i, j)) return false;
    return true;
}

}  // namespace

TEST_CASE("both passes are causal: step t ignores tokens at positions >= t") {
    for (auto kind : {DecoderKind::dd, DecoderKind::edd}) {
        Rig rig(kind);
        std::vector<int> base = {2, 5, 6, 7};
        std::vector<int> fut = {2, 5, 9, 8};  // diverges from row 2 onward
        auto [a1, a2] = rig.logits_for(base);
        auto [b1, b2] = rig.logits_for(fut);
        CHECK(rows_equal(a1, b1, 2));
        CHECK(rows_equal(a2, b2, 2));
        CHECK_FALSE(rows_equal(a1, b1, 4));  // later rows must actually move
        CHECK_FALSE(rows_equal(a2, b2, 4));
    }
}

TEST_CASE("first pass accepts a right-branch-only document") {
    Rig rig;
    auto r = rig.emb(std::vector<int>{2, 5, 6});
    auto out = rig.dec.first_pass(r, rig.l_s, rig.d_tilde, rig.rs);  // wo_left: D_final = D_tilde
    CHECK(out.logits.rows() == 3);
    CHECK(out.logits.cols() == 10);
    for (double v : out.logits.values()) CHECK(std::isfinite(v));
}

TEST_CASE("hand-set head weights pick the favored token") {
    Rig rig;
    std::fill(rig.dec.head1.w.values().begin(), rig.dec.head1.w.values().end(), 0.0);
    std::fill(rig.dec.head1.b.values().begin(), rig.dec.head1.b.values().end(), 0.0);
    rig.dec.head1.b.values()[4] = 5.0;  // bias toward token 4
    auto out = rig.dec.first_pass(rig.emb(std::vector<int>{2}), rig.l_s, rig.d_final, rig.rs);
    int argmax = 0;
    for (int v = 1; v < 10; ++v)
        if (out.logits.at(0, v) > out.logits.at(0, argmax)) argmax = v;
    CHECK(argmax == 4);
}

TEST_CASE("second pass keeps logits shape and proper distributions") {
    Rig rig;
    auto r = rig.emb(std::vector<int>{2, 5, 6, 7});
    auto p1 = rig.dec.first_pass(r, rig.l_s, rig.d_final, rig.rs);
    auto p2 = rig.dec.second_pass(r, p1.hidden, rig.d_emb, rig.rs);
    CHECK(p2.logits.rows() == p1.logits.rows());
    CHECK(p2.logits.cols() == p1.logits.cols());
    auto probs = cat::softmax_rows(p2.logits);
    for (int i = 0; i < probs.rows(); ++i) {
        double s = 0.0;
        for (int j = 0; j < probs.cols(); ++j) s += probs.at(i, j);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("second pass needs aligned first-pass states") {
    Rig rig;
    auto r = rig.emb(std::vector<int>{2, 5, 6});
    auto shorter = random_tensor(2, 4, rig.rng, 1.0, false);
    CHECK_THROWS_AS(rig.dec.second_pass(r, shorter, rig.d_emb, rig.rs), std::invalid_argument);
}

TEST_CASE("a fully masked document reduces the second pass to draft conditioning") {
    Rig rig(DecoderKind::dd, 1);
    auto r = rig.emb(std::vector<int>{2, 5});
    auto p1 = rig.dec.first_pass(r, rig.l_s, rig.d_final, rig.rs);

    AttentionMask dead;
    dead.key_valid.assign(rig.d_emb.rows(), 0);
    cat::AttnStats stats;
    RunState rs;
    rs.stats = &stats;
    auto masked = rig.dec.second_pass(r, p1.hidden, rig.d_emb, rs, dead);
    CHECK(stats.all_masked_rows == 2 * 2);  // 2 query rows x 2 heads in the doc stage

    // manual forward with the document contribution replaced by zeros
    const auto& layer = rig.dec.second[0];
    auto x = r;
    x = layer.self_norm(x, layer.self_att(x, x, x, AttentionMask::causal_self(), rig.rs), rig.rs);
    x = layer.draft_norm(
        x, layer.draft_att(x, p1.hidden, p1.hidden, AttentionMask::causal_self(), rig.rs), rig.rs);
    x = layer.doc_norm(x, cat::matmul(DT::zeros({2, 4}), layer.doc_att.wo), rig.rs);
    x = layer.ff_norm(x, layer.ff(x), rig.rs);
    auto manual = rig.dec.head2(x);
    CHECK(masked.logits.values() == manual.values());
}

TEST_CASE("prefixes beyond the decode limit are rejected") {
    Rig rig;
    std::vector<int> prefix(10, 5);
    CHECK_THROWS_AS(rig.dec.first_pass(rig.emb(prefix), rig.l_s, rig.d_final, rig.rs),
                    std::invalid_argument);
}

TEST_CASE("merge_combine with zero scores averages the three streams") {
    std::mt19937 rng(419);
    auto r = random_tensor(3, 4, rng, 1.0, false);
    auto cd = random_tensor(3, 4, rng, 1.0, false);
    auto cdt = random_tensor(3, 4, rng, 1.0, false);
    auto wp = DT::zeros({12, 3});
    auto [v, p] = cat::merge_combine(r, cd, cdt, wp);
    for (int i = 0; i < 3; ++i) {
        for (int k = 0; k < 3; ++k) CHECK(p.at(i, k) == doctest::Approx(1.0 / 3));
        for (int j = 0; j < 4; ++j)
            CHECK(v.at(i, j) == doctest::Approx((r.at(i, j) + cd.at(i, j) + cdt.at(i, j)) / 3.0));
    }
}

TEST_CASE("merge weights live on the 2-simplex at every step") {
    std::mt19937 rng(421);
    auto r = random_tensor(5, 4, rng, 2.0, false);
    auto cd = random_tensor(5, 4, rng, 2.0, false);
    auto cdt = random_tensor(5, 4, rng, 2.0, false);
    auto wp = random_tensor(12, 3, rng, 1.0, false);
    auto [v, p] = cat::merge_combine(r, cd, cdt, wp);
    for (int i = 0; i < 5; ++i) {
        double s = 0.0;
        for (int k = 0; k < 3; ++k) {
            CHECK(p.at(i, k) >= 0.0);
            s += p.at(i, k);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("merge_combine scalar hand case gives 3.5") {
    auto r = DT::from_rows({{2.0}});
    auto cd = DT::from_rows({{4.0}});
    auto cdt = DT::from_rows({{6.0}});
    auto wp = DT::zeros({3, 3});
    wp.at(0, 0) = std::log(2.0) / 2.0;  // scores (ln 2, 0, 0) -> weights (1/2, 1/4, 1/4)
    auto [v, p] = cat::merge_combine(r, cd, cdt, wp);
    CHECK(p.at(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(p.at(0, 1) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(p.at(0, 2) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(v.value() == doctest::Approx(3.5).epsilon(1e-12));
}

TEST_CASE("swapping the branch streams with their W_P blocks preserves the merge") {
    std::mt19937 rng(431);
    const int dim = 3;
    auto r = random_tensor(2, dim, rng, 1.0, false);
    auto cd = random_tensor(2, dim, rng, 1.0, false);
    auto cdt = random_tensor(2, dim, rng, 1.0, false);
    auto wp = random_tensor(3 * dim, 3, rng, 1.0, false);

    // swap row blocks 1<->2 and columns 1<->2 of W_P
    auto wps = DT::zeros({3 * dim, 3});
    auto src_row = [&](int i) { return i < dim ? i : (i < 2 * dim ? i + dim : i - dim); };
    auto src_col = [&](int k) { return k == 0 ? 0 : (k == 1 ? 2 : 1); };
    for (int i = 0; i < 3 * dim; ++i)
        for (int k = 0; k < 3; ++k) wps.at(i, k) = wp.at(src_row(i), src_col(k));

    auto [v1, p1] = cat::merge_combine(r, cd, cdt, wp);
    auto [v2, p2] = cat::merge_combine(r, cdt, cd, wps);
    CHECK(testutil::approx_equal(v1.values(), v2.values(), 1e-12));
}

TEST_CASE("EDD refuses to run without the left branch") {
    Rig rig(DecoderKind::edd);
    auto r = rig.emb(std::vector<int>{2, 5});
    CHECK_THROWS_AS(
        rig.dec.first_pass_enhanced(r, rig.l_s, DT{}, rig.d_tilde, rig.rs),
        std::invalid_argument);
}

TEST_CASE("DD and EDD share the second-pass computation") {
    Rig dd(DecoderKind::dd);
    Rig edd(DecoderKind::edd);
    // align the second-pass parameters and feed identical inputs
    cat::NamedParamsT<double> pd, pe;
    for (size_t i = 0; i < dd.dec.second.size(); ++i) {
        dd.dec.second[i].register_params("s", pd);
        edd.dec.second[i].register_params("s", pe);
    }
    dd.dec.head2.register_params("h", pd);
    edd.dec.head2.register_params("h", pe);
    REQUIRE(pd.size() == pe.size());
    for (size_t i = 0; i < pd.size(); ++i) pe[i].second.values() = pd[i].second.values();

    std::mt19937 rng(433);
    auto r = random_tensor(3, 4, rng, 1.0, false);
    auto states = random_tensor(3, 4, rng, 1.0, false);
    auto doc = random_tensor(4, 4, rng, 1.0, false);
    RunState rs;
    auto a = dd.dec.second_pass(r, states, doc, rs);
    auto b = edd.dec.second_pass(r, states, doc, rs);
    CHECK(a.logits.values() == b.logits.values());
}

TEST_CASE("EDD exposes simplex merge weights per layer") {
    Rig rig(DecoderKind::edd);
    auto r = rig.emb(std::vector<int>{2, 5, 6});
    std::vector<DT> weights;
    auto out = rig.dec.first_pass_enhanced(r, rig.l_s, rig.d_n, rig.d_tilde, rig.rs, &weights);
    CHECK(out.logits.rows() == 3);
    REQUIRE(weights.size() == rig.dec.efirst.size());
    for (const auto& w : weights) {
        REQUIRE(w.rows() == 3);
        for (int i = 0; i < 3; ++i) {
            double s = 0.0;
            for (int k = 0; k < 3; ++k) s += w.at(i, k);
            CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("joint_loss vanishes on near-one-hot logits and matches the uniform closed form") {
    auto mk = [](std::vector<int> tgt, double hot) {
        auto t = DT::zeros({static_cast<int>(tgt.size()), 4});
        for (size_t i = 0; i < tgt.size(); ++i) t.at(static_cast<int>(i), tgt[i]) = hot;
        return t;
    };
    std::vector<int> targets = {1, 3};
    auto sharp = mk(targets, 100.0);
    auto l0 = cat::joint_loss(sharp, sharp, targets);
    CHECK(l0.raw() == doctest::Approx(0.0).epsilon(1e-9));

    auto uniform = DT::zeros({2, 4});
    auto lu = cat::joint_loss(uniform, uniform, targets);
    CHECK(lu.raw() == doctest::Approx(2 * 2 * std::log(4.0)).epsilon(1e-12));
    CHECK(lu.raw() == doctest::Approx(5.545).epsilon(1e-3));
    CHECK(lu.pass1 >= 0.0);
    CHECK(lu.pass2 >= 0.0);
    CHECK(lu.mean_per_token() == doctest::Approx(2 * std::log(4.0)));

    CHECK_THROWS_AS(cat::joint_loss(uniform, uniform, std::vector<int>{1}), std::invalid_argument);
}

TEST_CASE("finite differences validate the DD two-pass stack end to end") {
    std::mt19937 rng(439);
    cat::DeliberationDecoderT<double> dec(DecoderKind::dd, 4, 2, 5, 1, 6, 8, rng);
    auto r = random_tensor(3, 4, rng);
    auto l_s = random_tensor(2, 4, rng);
    auto d_fin = random_tensor(3, 4, rng);
    auto d_emb = random_tensor(2, 4, rng);
    std::vector<int> targets = {1, 4, 3};

    std::vector<std::pair<std::string, DT>> params;
    dec.register_params("dec", params);
    params.emplace_back("r", r);
    params.emplace_back("l_s", l_s);
    params.emplace_back("d_fin", d_fin);
    params.emplace_back("d_emb", d_emb);

    RunState rs;
    auto loss_fn = [&] {
        auto [p1, p2] = dec.run(r, l_s, d_fin, DT{}, DT{}, d_emb, rs);
        return cat::joint_loss(p1.logits, p2.logits, targets).sum;
    };
    auto res = check_gradients(params, loss_fn);
    INFO("worst: ", res.worst_param, "[", res.worst_index, "] rel=", res.max_rel_err);
    CHECK(res.ok(1e-4));
}

TEST_CASE("finite differences validate the EDD merge path end to end") {
    std::mt19937 rng(443);
    cat::DeliberationDecoderT<double> dec(DecoderKind::edd, 4, 2, 5, 1, 6, 8, rng);
    auto r = random_tensor(2, 4, rng);
    auto l_s = random_tensor(2, 4, rng);
    auto d_n = random_tensor(2, 4, rng);
    auto d_t = random_tensor(2, 4, rng);
    auto d_emb = random_tensor(2, 4, rng);
    std::vector<int> targets = {5, 0};

    std::vector<std::pair<std::string, DT>> params;
    dec.register_params("dec", params);
    params.emplace_back("r", r);
    params.emplace_back("d_n", d_n);
    params.emplace_back("d_t", d_t);

    RunState rs;
    auto loss_fn = [&] {
        auto d_fin = cat::concat_rows(d_n, d_t);
        auto [p1, p2] = dec.run(r, l_s, d_fin, d_n, d_t, d_emb, rs);
        return cat::joint_loss(p1.logits, p2.logits, targets).sum;
    };
    auto res = check_gradients(params, loss_fn);
    INFO("worst: ", res.worst_param, "[", res.worst_index, "] rel=", res.max_rel_err);
    CHECK(res.ok(1e-4));
}
