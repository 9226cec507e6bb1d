#include <doctest.h>

#include <cat/transformer.hpp>

#include "testutil.hpp"

#include <cmath>
#include <random>

using cat::AttentionMask;
using cat::AttnStats;
using cat::RunState;
using DT = cat::TensorT<double>;
using testutil::check_gradients;
using testutil::random_tensor;

TEST_CASE("attention with orthogonal scores returns the column mean of V") {
    auto q = DT::from_rows({{1.0, 0.0}});
    auto k = DT::from_rows({{0.0, 1.0}, {0.0, 2.0}, {0.0, -1.0}});
    auto v = DT::from_rows({{3.0, 0.0}, {0.0, 6.0}, {3.0, 3.0}});
    auto out = cat::attention(q, k, v);
    CHECK(out.at(0, 0) == doctest::Approx(2.0));
    CHECK(out.at(0, 1) == doctest::Approx(3.0));
}

TEST_CASE("attention with a single key returns that value row regardless of query") {
    auto k = DT::from_rows({{0.4, -1.2}});
    auto v = DT::from_rows({{7.0, -3.0, 2.5}});
    for (double qv : {-5.0, 0.0, 9.0}) {
        auto q = DT::from_rows({{qv, qv * 2}});
        auto out = cat::attention(q, k, v);
        CHECK(out.at(0, 0) == doctest::Approx(7.0));
        CHECK(out.at(0, 1) == doctest::Approx(-3.0));
        CHECK(out.at(0, 2) == doctest::Approx(2.5));
    }
}

TEST_CASE("attention 2x2 hand case") {
    auto q = DT::from_rows({{1.0, 0.0}});
    auto k = DT::from_rows({{1.0, 0.0}, {0.0, 1.0}});
    auto v = DT::from_rows({{1.0, 0.0}, {0.0, 1.0}});
    DT weights;
    auto out = cat::attention(q, k, v, AttentionMask::none(), nullptr, &weights);

    // brute force: scores [1/sqrt(2), 0], softmax by explicit exponentiation
    const double s0 = std::exp(1.0 / std::sqrt(2.0)), s1 = std::exp(0.0);
    const double w0 = s0 / (s0 + s1), w1 = s1 / (s0 + s1);
    CHECK(weights.at(0, 0) == doctest::Approx(w0).epsilon(1e-12));
    CHECK(weights.at(0, 1) == doctest::Approx(w1).epsilon(1e-12));
    CHECK(weights.at(0, 0) == doctest::Approx(0.670).epsilon(1e-3));
    CHECK(out.at(0, 0) == doctest::Approx(0.670).epsilon(1e-3));
    CHECK(out.at(0, 1) == doctest::Approx(0.330).epsilon(1e-3));
}

TEST_CASE("attention weight rows sum to one over unmasked keys") {
    std::mt19937 rng(101);
    auto q = random_tensor(4, 3, rng, 2.0, false);
    auto k = random_tensor(5, 3, rng, 2.0, false);
    auto v = random_tensor(5, 2, rng, 2.0, false);
    AttentionMask mask;
    mask.key_valid = {1, 0, 1, 1, 0};
    DT weights;
    cat::attention(q, k, v, mask, nullptr, &weights);
    for (int i = 0; i < 4; ++i) {
        double s = 0.0;
        for (int j = 0; j < 5; ++j) s += weights.at(i, j);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        CHECK(weights.at(i, 1) == 0.0);
        CHECK(weights.at(i, 4) == 0.0);
    }
}

TEST_CASE("permuting K and V rows together leaves attention output unchanged") {
    std::mt19937 rng(103);
    auto q = random_tensor(3, 4, rng, 1.0, false);
    auto k = random_tensor(5, 4, rng, 1.0, false);
    auto v = random_tensor(5, 4, rng, 1.0, false);
    std::vector<int> perm = {4, 2, 0, 3, 1};
    auto kp = DT::zeros({5, 4});
    auto vp = DT::zeros({5, 4});
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 4; ++j) {
            kp.at(i, j) = k.at(perm[i], j);
            vp.at(i, j) = v.at(perm[i], j);
        }
    auto base = cat::attention(q, k, v);
    auto permd = cat::attention(q, kp, vp);
    CHECK(testutil::approx_equal(base.values(), permd.values(), 1e-12));
}

TEST_CASE("fully masked keys give a zero row and a diagnostic count") {
    auto q = DT::from_rows({{1.0, 2.0}, {3.0, 4.0}});
    auto k = DT::from_rows({{1.0, 0.0}});
    auto v = DT::from_rows({{5.0, 5.0}});
    AttentionMask mask;
    mask.key_valid = {0};
    AttnStats stats;
    auto out = cat::attention(q, k, v, mask, &stats);
    CHECK(stats.all_masked_rows == 2);
    for (double x : out.values()) CHECK(x == 0.0);
}

TEST_CASE("causal mask zeroes the strict upper triangle of the weights") {
    std::mt19937 rng(107);
    auto x = random_tensor(5, 4, rng, 1.0, false);
    DT weights;
    cat::attention(x, x, x, AttentionMask::causal_self(), nullptr, &weights);
    for (int i = 0; i < 5; ++i) {
        double s = 0.0;
        for (int j = 0; j < 5; ++j) {
            if (j > i) CHECK(weights.at(i, j) == 0.0);
            s += weights.at(i, j);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
    // first query can only see the first key
    CHECK(weights.at(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("single-head multi-head attention reduces to projected attention") {
    std::mt19937 rng(109);
    cat::MultiHeadAttentionT<double> mha(4, 1, rng);
    auto q = random_tensor(3, 4, rng, 1.0, false);
    auto k = random_tensor(6, 4, rng, 1.0, false);
    auto v = random_tensor(6, 4, rng, 1.0, false);
    RunState rs;
    auto got = mha(q, k, v, AttentionMask::none(), rs);
    auto head = cat::attention(cat::matmul(q, mha.wq[0]), cat::matmul(k, mha.wk[0]),
                               cat::matmul(v, mha.wv[0]));
    auto want = cat::matmul(head, mha.wo);
    CHECK(testutil::approx_equal(got.values(), want.values(), 1e-12));
}

TEST_CASE("multi-head output length tracks the query length only") {
    std::mt19937 rng(113);
    cat::MultiHeadAttentionT<double> mha(6, 2, rng);
    RunState rs;
    for (int qlen : {1, 3, 8}) {
        for (int klen : {1, 4, 9}) {
            auto q = random_tensor(qlen, 6, rng, 1.0, false);
            auto kv = random_tensor(klen, 6, rng, 1.0, false);
            auto out = mha(q, kv, kv, AttentionMask::none(), rs);
            CHECK(out.rows() == qlen);
            CHECK(out.cols() == 6);
        }
    }
}

TEST_CASE("two heads with block projections match independent attention calls") {
    std::mt19937 rng(127);
    cat::MultiHeadAttentionT<double> mha(4, 2, rng);
    // head h projects onto column block [2h, 2h+2); output projection = identity
    for (int h = 0; h < 2; ++h) {
        std::fill(mha.wq[h].values().begin(), mha.wq[h].values().end(), 0.0);
        std::fill(mha.wk[h].values().begin(), mha.wk[h].values().end(), 0.0);
        std::fill(mha.wv[h].values().begin(), mha.wv[h].values().end(), 0.0);
        for (int j = 0; j < 2; ++j) {
            mha.wq[h].at(2 * h + j, j) = 1.0;
            mha.wk[h].at(2 * h + j, j) = 1.0;
            mha.wv[h].at(2 * h + j, j) = 1.0;
        }
    }
    std::fill(mha.wo.values().begin(), mha.wo.values().end(), 0.0);
    for (int j = 0; j < 4; ++j) mha.wo.at(j, j) = 1.0;

    auto q = random_tensor(3, 4, rng, 1.0, false);
    auto kv = random_tensor(5, 4, rng, 1.0, false);
    RunState rs;
    auto got = mha(q, kv, kv, AttentionMask::none(), rs);

    auto block = [](const DT& m, int c0) {
        auto out = DT::zeros({m.rows(), 2});
        for (int i = 0; i < m.rows(); ++i)
            for (int j = 0; j < 2; ++j) out.at(i, j) = m.at(i, c0 + j);
        return out;
    };
    auto a0 = cat::attention(block(q, 0), block(kv, 0), block(kv, 0));
    auto a1 = cat::attention(block(q, 2), block(kv, 2), block(kv, 2));
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 2; ++j) {
            CHECK(got.at(i, j) == doctest::Approx(a0.at(i, j)).epsilon(1e-12));
            CHECK(got.at(i, j + 2) == doctest::Approx(a1.at(i, j)).epsilon(1e-12));
        }
}

TEST_CASE("multi-head attention rejects indivisible dimensions") {
    std::mt19937 rng(131);
    CHECK_THROWS_AS(cat::MultiHeadAttentionT<double>(300, 8, rng), std::invalid_argument);
}

TEST_CASE("feed-forward zero weights give zero output") {
    std::mt19937 rng(137);
    cat::FeedForwardT<double> ff(3, 5, rng);
    std::fill(ff.inner.w.values().begin(), ff.inner.w.values().end(), 0.0);
    std::fill(ff.outer.w.values().begin(), ff.outer.w.values().end(), 0.0);
    auto x = random_tensor(4, 3, rng, 2.0, false);
    auto y = ff(x);
    for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("feed-forward is position-wise") {
    std::mt19937 rng(139);
    cat::FeedForwardT<double> ff(4, 7, rng);
    auto row = random_tensor(1, 4, rng, 1.0, false);
    auto x = cat::concat_rows(row, row);
    auto y = ff(x);
    for (int j = 0; j < 4; ++j) CHECK(y.at(0, j) == doctest::Approx(y.at(1, j)).epsilon(1e-12));

    // permuting input rows permutes output rows identically
    auto a = random_tensor(3, 4, rng, 1.0, false);
    auto ap = DT::zeros({3, 4});
    std::vector<int> perm = {2, 0, 1};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) ap.at(i, j) = a.at(perm[i], j);
    auto ya = ff(a);
    auto yp = ff(ap);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) CHECK(yp.at(i, j) == doctest::Approx(ya.at(perm[i], j)).epsilon(1e-12));
}

TEST_CASE("feed-forward one-dimensional toy") {
    std::mt19937 rng(149);
    cat::FeedForwardT<double> ff(1, 1, rng);
    ff.inner.w.values()[0] = 1.0;
    ff.inner.b.values()[0] = 0.0;
    ff.outer.w.values()[0] = 2.0;
    ff.outer.b.values()[0] = 0.0;
    CHECK(ff(DT::scalar(3.0)).value() == doctest::Approx(6.0));
    CHECK(ff(DT::scalar(-3.0)).value() == doctest::Approx(0.0));
}

TEST_CASE("positional encoding closed form") {
    auto pe = cat::positional_encoding<double>(4, 6);
    for (int i = 0; i < 3; ++i) {
        CHECK(pe.at(0, 2 * i) == 0.0);           // sin 0
        CHECK(pe.at(0, 2 * i + 1) == 1.0);       // cos 0
    }
    CHECK(pe.at(2, 0) == doctest::Approx(std::sin(2.0)));
    CHECK(pe.at(3, 2) == doctest::Approx(std::sin(3.0 / std::pow(10000.0, 2.0 / 6))));
    CHECK(pe.at(1, 5) == doctest::Approx(std::cos(1.0 / std::pow(10000.0, 4.0 / 6))));
}

TEST_CASE("embedding of the empty sequence is a zero-length representation") {
    std::mt19937 rng(151);
    cat::EmbeddingT<double> emb(9, 6, rng);
    auto e = emb(std::vector<int>{});
    CHECK(e.rows() == 0);
    CHECK(e.cols() == 6);
}

TEST_CASE("repeated token rows differ exactly by the positional delta") {
    std::mt19937 rng(157);
    cat::EmbeddingT<double> emb(9, 6, rng);
    auto e = emb(std::vector<int>{4, 4});
    auto pe = cat::positional_encoding<double>(2, 6);
    for (int j = 0; j < 6; ++j)
        CHECK(e.at(1, j) - e.at(0, j) == doctest::Approx(pe.at(1, j) - pe.at(0, j)).epsilon(1e-12));

    cat::EmbeddingT<double> flat(9, 6, rng, false);
    auto f = flat(std::vector<int>{4, 4});
    for (int j = 0; j < 6; ++j) CHECK(f.at(0, j) == doctest::Approx(f.at(1, j)));
}

TEST_CASE("embedding rejects out-of-range ids") {
    std::mt19937 rng(163);
    cat::EmbeddingT<double> emb(5, 4, rng);
    CHECK_THROWS_AS(emb(std::vector<int>{0, 5}), std::invalid_argument);
}

TEST_CASE("finite differences validate multi-head attention") {
    std::mt19937 rng(167);
    cat::MultiHeadAttentionT<double> mha(4, 2, rng);
    auto q = random_tensor(3, 4, rng);
    auto kv = random_tensor(5, 4, rng);
    std::vector<std::pair<std::string, DT>> params;
    mha.register_params("mha", params);
    params.emplace_back("q", q);
    params.emplace_back("kv", kv);

    AttentionMask mask;
    mask.key_valid = {1, 1, 0, 1, 1};
    RunState rs;
    auto loss_fn = [&] {
        auto y = mha(q, kv, kv, mask, rs);
        return cat::sum_all(cat::mul(y, y));
    };
    auto res = check_gradients(params, loss_fn);
    INFO("worst: ", res.worst_param, "[", res.worst_index, "] rel=", res.max_rel_err);
    CHECK(res.ok(1e-4));
}

TEST_CASE("finite differences validate a full residual-norm sublayer stack") {
    std::mt19937 rng(173);
    cat::MultiHeadAttentionT<double> mha(4, 2, rng);
    cat::FeedForwardT<double> ff(4, 6, rng);
    cat::ResidualNormT<double> n1(4), n2(4);
    auto x = random_tensor(4, 4, rng);
    std::vector<std::pair<std::string, DT>> params;
    mha.register_params("mha", params);
    ff.register_params("ff", params);
    n1.register_params("n1", params);
    n2.register_params("n2", params);
    params.emplace_back("x", x);

    RunState rs;
    auto loss_fn = [&] {
        auto h = n1(x, mha(x, x, x, AttentionMask::causal_self(), rs), rs);
        auto o = n2(h, ff(h), rs);
        return cat::sum_all(cat::mul(o, o));
    };
    auto res = check_gradients(params, loss_fn);
    INFO("worst: ", res.worst_param, "[", res.worst_index, "] rel=", res.max_rel_err);
    CHECK(res.ok(1e-4));
}

TEST_CASE("finite differences validate embeddings through a linear head") {
    std::mt19937 rng(179);
    cat::EmbeddingT<double> emb(8, 4, rng);
    cat::LinearT<double> head(4, 8, rng);
    std::vector<std::pair<std::string, DT>> params;
    emb.register_params("emb", params);
    head.register_params("head", params);
    std::vector<int> ids = {1, 3, 3, 7};
    std::vector<int> targets = {3, 3, 7, 0};
    auto loss_fn = [&] { return cat::cross_entropy_sum(head(emb(ids)), targets); };
    auto res = check_gradients(params, loss_fn);
    INFO("worst: ", res.worst_param, "[", res.worst_index, "] rel=", res.max_rel_err);
    CHECK(res.ok(1e-4));
}
