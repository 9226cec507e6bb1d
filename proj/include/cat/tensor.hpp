#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation,
// plus the Adam optimizer. Scalar type is a template parameter so the
// same graph code runs in float32 for training and float64 for
// gradient checking.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace cat {

// Runtime switch for the per-op finiteness check. Defaults to on in
// debug builds; tests flip it on explicitly.
inline bool& debug_checks() {
#ifdef NDEBUG
    static bool enabled = false;
#else
    static bool enabled = true;
#endif
    return enabled;
}

// When false, ops skip recording backward closures (inference mode).
inline bool& grad_enabled() {
    static bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
    ~NoGradGuard() { grad_enabled() = prev; }
};

inline std::string shape_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << " x ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

inline long shape_numel(const std::vector<int>& shape) {
    long n = 1;
    for (int d : shape) {
        if (d < 0) throw std::invalid_argument("negative extent in shape " + shape_string(shape));
        n *= d;
    }
    return n;
}

template <class S>
struct TensorNodeT {
    std::vector<int> shape;
    std::vector<S> values;
    std::vector<S> grad;       // allocated on first accumulation
    std::vector<S> pass_grad;  // scratch for one backward() call
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNodeT>> parents;
    std::function<void(TensorNodeT&)> backward_fn;

    long numel() const { return static_cast<long>(values.size()); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), S(0));
    }
    void ensure_pass() {
        if (pass_grad.empty()) pass_grad.assign(values.size(), S(0));
    }
};

template <class S>
class TensorT {
public:
    using Node = TensorNodeT<S>;

    TensorT() = default;
    explicit TensorT(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    static TensorT zeros(std::vector<int> shape) {
        auto n = std::make_shared<Node>();
        long count = shape_numel(shape);
        n->shape = std::move(shape);
        n->values.assign(static_cast<size_t>(count), S(0));
        return TensorT(n);
    }

    static TensorT full(std::vector<int> shape, S v) {
        TensorT t = zeros(std::move(shape));
        std::fill(t.values().begin(), t.values().end(), v);
        return t;
    }

    static TensorT from(std::vector<int> shape, std::vector<S> data) {
        if (shape_numel(shape) != static_cast<long>(data.size()))
            throw std::invalid_argument("tensor data size " + std::to_string(data.size()) +
                                        " does not match shape " + shape_string(shape));
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->values = std::move(data);
        return TensorT(n);
    }

    static TensorT from_rows(const std::vector<std::vector<S>>& rows) {
        int r = static_cast<int>(rows.size());
        int c = r > 0 ? static_cast<int>(rows[0].size()) : 0;
        std::vector<S> data;
        data.reserve(static_cast<size_t>(r) * c);
        for (const auto& row : rows) {
            if (static_cast<int>(row.size()) != c)
                throw std::invalid_argument("ragged rows in tensor literal");
            data.insert(data.end(), row.begin(), row.end());
        }
        return from({r, c}, std::move(data));
    }

    static TensorT scalar(S v) { return from({1, 1}, {v}); }

    bool defined() const { return n_ != nullptr; }
    const std::vector<int>& shape() const { return n_->shape; }
    long numel() const { return n_->numel(); }
    bool is_scalar() const { return numel() == 1; }

    int rows() const {
        if (n_->shape.size() != 2) throw std::invalid_argument("expected matrix, got shape " + shape_string(n_->shape));
        return n_->shape[0];
    }
    int cols() const {
        if (n_->shape.size() != 2) throw std::invalid_argument("expected matrix, got shape " + shape_string(n_->shape));
        return n_->shape[1];
    }

    std::vector<S>& values() { return n_->values; }
    const std::vector<S>& values() const { return n_->values; }
    S value() const {
        if (!is_scalar()) throw std::invalid_argument("value() on non-scalar tensor " + shape_string(n_->shape));
        return n_->values[0];
    }
    S& at(int r, int c) { return n_->values[static_cast<size_t>(r) * cols() + c]; }
    S at(int r, int c) const { return n_->values[static_cast<size_t>(r) * cols() + c]; }

    bool requires_grad() const { return n_->requires_grad; }
    TensorT& set_requires_grad(bool b) {
        n_->requires_grad = b;
        return *this;
    }

    bool has_grad() const { return !n_->grad.empty(); }
    const std::vector<S>& grad() const {
        if (n_->grad.empty()) throw std::runtime_error("tensor has no gradient; call backward() first");
        return n_->grad;
    }
    void zero_grad() {
        if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), S(0));
    }

    std::shared_ptr<Node> node() const { return n_; }

private:
    std::shared_ptr<Node> n_;
};

namespace detail {

template <class S>
void check_finite(const TensorT<S>& t, const char* op) {
    if (!debug_checks()) return;
    for (S v : t.values()) {
        if (!std::isfinite(static_cast<double>(v)))
            throw std::runtime_error(std::string("non-finite value produced by ") + op);
    }
}

template <class S>
TensorT<S> make_result(std::vector<int> shape, std::initializer_list<TensorT<S>> parents) {
    auto t = TensorT<S>::zeros(std::move(shape));
    bool req = false;
    for (const auto& p : parents) req = req || p.requires_grad();
    t.set_requires_grad(req);
    if (req && grad_enabled()) {
        for (const auto& p : parents) t.node()->parents.push_back(p.node());
    }
    return t;
}

template <class S>
bool wants_backward(const TensorT<S>& t) {
    return t.requires_grad() && grad_enabled();
}

template <class S>
void add_into_pass(TensorNodeT<S>& n, const S* contrib) {
    n.ensure_pass();
    for (size_t i = 0; i < n.pass_grad.size(); ++i) n.pass_grad[i] += contrib[i];
}

// --- raw matrix kernels (row-major) ---

// c[m,n] (+)= a[m,k] * b[k,n]
template <class S>
void mm_nn(const S* a, const S* b, S* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const S* arow = a + static_cast<size_t>(i) * k;
        S* crow = c + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const S av = arow[p];
            if (av == S(0)) continue;
            const S* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m,n] (+)= a[m,k] * b[n,k]^T
template <class S>
void mm_nt(const S* a, const S* b, S* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const S* arow = a + static_cast<size_t>(i) * k;
        S* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const S* brow = b + static_cast<size_t>(j) * k;
            S acc = S(0);
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// c[m,n] (+)= a[k,m]^T * b[k,n]
template <class S>
void mm_tn(const S* a, const S* b, S* c, int m, int k, int n) {
    for (int p = 0; p < k; ++p) {
        const S* arow = a + static_cast<size_t>(p) * m;
        const S* brow = b + static_cast<size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const S av = arow[i];
            if (av == S(0)) continue;
            S* crow = c + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// element-wise and structural ops
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("add: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    auto out = detail::make_result<S>(a.shape(), {a, b});
    for (long i = 0; i < a.numel(); ++i) out.values()[i] = a.values()[i] + b.values()[i];
    detail::check_finite(out, "add");
    if (out.requires_grad() && grad_enabled()) {
        auto an = a.node();
        auto bn = b.node();
        bool ra = detail::wants_backward(a), rb = detail::wants_backward(b);
        out.node()->backward_fn = [an, bn, ra, rb](TensorNodeT<S>& self) {
            if (ra) detail::add_into_pass(*an, self.pass_grad.data());
            if (rb) detail::add_into_pass(*bn, self.pass_grad.data());
        };
    }
    return out;
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("sub: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    auto out = detail::make_result<S>(a.shape(), {a, b});
    for (long i = 0; i < a.numel(); ++i) out.values()[i] = a.values()[i] - b.values()[i];
    detail::check_finite(out, "sub");
    if (out.requires_grad() && grad_enabled()) {
        auto an = a.node();
        auto bn = b.node();
        bool ra = detail::wants_backward(a), rb = detail::wants_backward(b);
        out.node()->backward_fn = [an, bn, ra, rb](TensorNodeT<S>& self) {
            if (ra) detail::add_into_pass(*an, self.pass_grad.data());
            if (rb) {
                bn->ensure_pass();
                for (size_t i = 0; i < bn->pass_grad.size(); ++i) bn->pass_grad[i] -= self.pass_grad[i];
            }
        };
    }
    return out;
}

template <class S>
TensorT<S> scale(const TensorT<S>& x, S c) {
    auto out = detail::make_result<S>(x.shape(), {x});
    for (long i = 0; i < x.numel(); ++i) out.values()[i] = x.values()[i] * c;
    detail::check_finite(out, "scale");
    if (out.requires_grad() && grad_enabled()) {
        auto xn = x.node();
        out.node()->backward_fn = [xn, c](TensorNodeT<S>& self) {
            xn->ensure_pass();
            for (size_t i = 0; i < xn->pass_grad.size(); ++i) xn->pass_grad[i] += c * self.pass_grad[i];
        };
    }
    return out;
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("mul: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    auto out = detail::make_result<S>(a.shape(), {a, b});
    for (long i = 0; i < a.numel(); ++i) out.values()[i] = a.values()[i] * b.values()[i];
    detail::check_finite(out, "mul");
    if (out.requires_grad() && grad_enabled()) {
        auto an = a.node();
        auto bn = b.node();
        bool ra = detail::wants_backward(a), rb = detail::wants_backward(b);
        out.node()->backward_fn = [an, bn, ra, rb](TensorNodeT<S>& self) {
            if (ra) {
                an->ensure_pass();
                for (size_t i = 0; i < an->pass_grad.size(); ++i) an->pass_grad[i] += bn->values[i] * self.pass_grad[i];
            }
            if (rb) {
                bn->ensure_pass();
                for (size_t i = 0; i < bn->pass_grad.size(); ++i) bn->pass_grad[i] += an->values[i] * self.pass_grad[i];
            }
        };
    }
    return out;
}

// y = x * s where s is a [1 x 1] tensor broadcast over every element.
template <class S>
TensorT<S> mul_scalar_t(const TensorT<S>& x, const TensorT<S>& s) {
    if (!s.is_scalar())
        throw std::invalid_argument("mul_scalar_t: scale must be scalar, got " + shape_string(s.shape()));
    auto out = detail::make_result<S>(x.shape(), {x, s});
    const S sv = s.value();
    for (long i = 0; i < x.numel(); ++i) out.values()[i] = x.values()[i] * sv;
    detail::check_finite(out, "mul_scalar_t");
    if (out.requires_grad() && grad_enabled()) {
        auto xn = x.node();
        auto sn = s.node();
        bool rx = detail::wants_backward(x), rs = detail::wants_backward(s);
        out.node()->backward_fn = [xn, sn, sv, rx, rs](TensorNodeT<S>& self) {
            if (rx) {
                xn->ensure_pass();
                for (size_t i = 0; i < xn->pass_grad.size(); ++i) xn->pass_grad[i] += sv * self.pass_grad[i];
            }
            if (rs) {
                sn->ensure_pass();
                S acc = S(0);
                for (size_t i = 0; i < xn->values.size(); ++i) acc += xn->values[i] * self.pass_grad[i];
                sn->pass_grad[0] += acc;
            }
        };
    }
    return out;
}

// y[i,j] = x[i,j] * w[i,0]; per-row scalar broadcast.
template <class S>
TensorT<S> mul_rows(const TensorT<S>& x, const TensorT<S>& w) {
    if (w.shape().size() != 2 || w.cols() != 1 || w.rows() != x.rows())
        throw std::invalid_argument("mul_rows: weight shape " + shape_string(w.shape()) +
                                    " incompatible with " + shape_string(x.shape()));
    auto out = detail::make_result<S>(x.shape(), {x, w});
    const int r = x.rows(), c = x.cols();
    for (int i = 0; i < r; ++i) {
        const S wv = w.values()[i];
        for (int j = 0; j < c; ++j) out.values()[static_cast<size_t>(i) * c + j] = x.at(i, j) * wv;
    }
    detail::check_finite(out, "mul_rows");
    if (out.requires_grad() && grad_enabled()) {
        auto xn = x.node();
        auto wn = w.node();
        bool rx = detail::wants_backward(x), rw = detail::wants_backward(w);
        out.node()->backward_fn = [xn, wn, r, c, rx, rw](TensorNodeT<S>& self) {
            if (rx) {
                xn->ensure_pass();
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j)
                        xn->pass_grad[static_cast<size_t>(i) * c + j] += wn->values[i] * self.pass_grad[static_cast<size_t>(i) * c + j];
            }
            if (rw) {
                wn->ensure_pass();
                for (int i = 0; i < r; ++i) {
                    S acc = S(0);
                    for (int j = 0; j < c; ++j) acc += xn->values[static_cast<size_t>(i) * c + j] * self.pass_grad[static_cast<size_t>(i) * c + j];
                    wn->pass_grad[i] += acc;
                }
            }
        };
    }
    return out;
}

// y[i,:] = x[i,:] + b[0,:]
template <class S>
TensorT<S> add_rowvec(const TensorT<S>& x, const TensorT<S>& b) {
    if (b.shape().size() != 2 || b.rows() != 1 || b.cols() != x.cols())
        throw std::invalid_argument("add_rowvec: bias shape " + shape_string(b.shape()) +
                                    " incompatible with " + shape_string(x.shape()));
    auto out = detail::make_result<S>(x.shape(), {x, b});
    const int r = x.rows(), c = x.cols();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.values()[static_cast<size_t>(i) * c + j] = x.at(i, j) + b.values()[j];
    detail::check_finite(out, "add_rowvec");
    if (out.requires_grad() && grad_enabled()) {
        auto xn = x.node();
        auto bn = b.node();
        bool rx = detail::wants_backward(x), rb = detail::wants_backward(b);
        out.node()->backward_fn = [xn, bn, r, c, rx, rb](TensorNodeT<S>& self) {
            if (rx) detail::add_into_pass(*xn, self.pass_grad.data());
            if (rb) {
                bn->ensure_pass();
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) bn->pass_grad[j] += self.pass_grad[static_cast<size_t>(i) * c + j];
            }
        };
    }
    return out;
}

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows())
        throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_string(a.shape()) +
                                    " vs " + shape_string(b.shape()));
    const int m = a.rows(), k = a.cols(), n = b.cols();
    auto out = detail::make_result<S>({m, n}, {a, b});
    detail::mm_nn(a.values().data(), b.values().data(), out.values().data(), m, k, n);
    detail::check_finite(out, "matmul");
    if (out.requires_grad() && grad_enabled()) {
        auto an = a.node();
        auto bn = b.node();
        bool ra = detail::wants_backward(a), rb = detail::wants_backward(b);
        out.node()->backward_fn = [an, bn, m, k, n, ra, rb](TensorNodeT<S>& self) {
            if (ra) {
                an->ensure_pass();  // dA += dC * B^T
                detail::mm_nt(self.pass_grad.data(), bn->values.data(), an->pass_grad.data(), m, n, k);
            }
            if (rb) {
                bn->ensure_pass();  // dB += A^T * dC
                detail::mm_tn(an->values.data(), self.pass_grad.data(), bn->pass_grad.data(), k, m, n);
            }
        };
    }
    return out;
}

// c = a * b^T; used for attention scores so keys stay row-major.
template <class S>
TensorT<S> matmul_nt(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.cols())
        throw std::invalid_argument("matmul_nt: inner dimensions disagree: " + shape_string(a.shape()) +
                                    " vs " + shape_string(b.shape()) + " transposed");
    const int m = a.rows(), k = a.cols(), n = b.rows();
    auto out = detail::make_result<S>({m, n}, {a, b});
    detail::mm_nt(a.values().data(), b.values().data(), out.values().data(), m, k, n);
    detail::check_finite(out, "matmul_nt");
    if (out.requires_grad() && grad_enabled()) {
        auto an = a.node();
        auto bn = b.node();
        bool ra = detail::wants_backward(a), rb = detail::wants_backward(b);
        out.node()->backward_fn = [an, bn, m, k, n, ra, rb](TensorNodeT<S>& self) {
            if (ra) {
                an->ensure_pass();  // dA += dC * B
                detail::mm_nn(self.pass_grad.data(), bn->values.data(), an->pass_grad.data(), m, n, k);
            }
            if (rb) {
                bn->ensure_pass();  // dB += dC^T * A
                detail::mm_tn(self.pass_grad.data(), an->values.data(), bn->pass_grad.data(), n, m, k);
            }
        };
    }
    return out;
}

template <class S>
TensorT<S> relu(const TensorT<S>& x) {
    auto out = detail::make_result<S>(x.shape(), {x});
    for (long i = 0; i < x.numel(); ++i) out.values()[i] = x.values()[i] > S(0) ? x.values()[i] : S(0);
    if (out.requires_grad() && grad_enabled()) {
        auto xn = x.node();
        out.node()->backward_fn = [xn](TensorNodeT<S>& self) {
            xn->ensure_pass();
            for (size_t i = 0; i < xn->pass_grad.size(); ++i)
                if (xn->values[i] > S(0)) xn->pass_grad[i] += self.pass_grad[i];
        };
    }
    return out;
}

template <class S>
TensorT<S> tanh(const TensorT<S>& x) {
    auto out = detail::make_result<S>(x.shape(), {x});
    for (long i = 0; i < x.numel(); ++i) out.values()[i] = std::tanh(x.values()[i]);
    detail::check_finite(out, "tanh");
    if (out.requires_grad() && grad_enabled()) {
        // read the saved activations through `self`: capturing the output
        // node here would create a shared_ptr cycle and leak every graph
        auto xn = x.node();
        out.node()->backward_fn = [xn](TensorNodeT<S>& self) {
            xn->ensure_pass();
            for (size_t i = 0; i < xn->pass_grad.size(); ++i) {
                const S y = self.values[i];
                xn->pass_grad[i] += (S(1) - y * y) * self.pass_grad[i];
            }
        };
    }
    return out;
}

template <class S>
TensorT<S> sigmoid(const TensorT<S>& x) {
    auto out = detail::make_result<S>(x.shape(), {x});
    for (long i = 0; i < x.numel(); ++i) {
        const S v = x.values()[i];
        out.values()[i] = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                                    : std::exp(v) / (S(1) + std::exp(v));
    }
    detail::check_finite(out, "sigmoid");
    if (out.requires_grad() && grad_enabled()) {
        auto xn = x.node();
        out.node()->backward_fn = [xn](TensorNodeT<S>& self) {
            xn->ensure_pass();
            for (size_t i = 0; i < xn->pass_grad.size(); ++i) {
                const S y = self.values[i];
                xn->pass_grad[i] += y * (S(1) - y) * self.pass_grad[i];
            }
        };
    }
    return out;
}

// Row-wise softmax with max subtraction. `allowed`, when non-empty, is a
// row-major bitmask; rows with no allowed entry come out all-zero and are
// counted in *zero_rows.
template <class S>
TensorT<S> masked_softmax_rows(const TensorT<S>& x, const std::vector<uint8_t>& allowed,
                               int* zero_rows = nullptr) {
    const int r = x.rows(), c = x.cols();
    if (!allowed.empty() && static_cast<long>(allowed.size()) != x.numel())
        throw std::invalid_argument("masked_softmax_rows: mask size does not match " + shape_string(x.shape()));
    auto out = detail::make_result<S>(x.shape(), {x});
    for (int i = 0; i < r; ++i) {
        const S* xi = x.values().data() + static_cast<size_t>(i) * c;
        S* yi = out.values().data() + static_cast<size_t>(i) * c;
        const uint8_t* mi = allowed.empty() ? nullptr : allowed.data() + static_cast<size_t>(i) * c;
        S mx = -std::numeric_limits<S>::infinity();
        for (int j = 0; j < c; ++j)
            if (!mi || mi[j]) mx = std::max(mx, xi[j]);
        if (!std::isfinite(static_cast<double>(mx))) {  // no allowed key
            if (zero_rows) ++*zero_rows;
            continue;  // row stays zero
        }
        S sum = S(0);
        for (int j = 0; j < c; ++j) {
            if (!mi || mi[j]) {
                yi[j] = std::exp(xi[j] - mx);
                sum += yi[j];
            }
        }
        for (int j = 0; j < c; ++j) yi[j] /= sum;
    }
    detail::check_finite(out, "softmax");
    if (out.requires_grad() && grad_enabled()) {
        auto xn = x.node();
        out.node()->backward_fn = [xn, r, c](TensorNodeT<S>& self) {
            xn->ensure_pass();
            for (int i = 0; i < r; ++i) {
                const S* yi = self.values.data() + static_cast<size_t>(i) * c;
                const S* di = self.pass_grad.data() + static_cast<size_t>(i) * c;
                S dot = S(0);
                for (int j = 0; j < c; ++j) dot += di[j] * yi[j];
                S* gi = xn->pass_grad.data() + static_cast<size_t>(i) * c;
                for (int j = 0; j < c; ++j) gi[j] += yi[j] * (di[j] - dot);
            }
        };
    }
    return out;
}

template <class S>
TensorT<S> softmax_rows(const TensorT<S>& x) {
    return masked_softmax_rows(x, {});
}

// Layer normalization over the last dimension with learned gain/bias.
template <class S>
TensorT<S> layer_norm_rows(const TensorT<S>& x, const TensorT<S>& gain, const TensorT<S>& bias,
                           S eps = S(1e-5)) {
    const int r = x.rows(), c = x.cols();
    if (gain.numel() != c || bias.numel() != c)
        throw std::invalid_argument("layer_norm_rows: gain/bias shape mismatch with " + shape_string(x.shape()));
    auto out = detail::make_result<S>(x.shape(), {x, gain, bias});
    std::vector<S> xhat(static_cast<size_t>(r) * c);
    std::vector<S> inv_std(r);
    for (int i = 0; i < r; ++i) {
        const S* xi = x.values().data() + static_cast<size_t>(i) * c;
        S mu = S(0);
        for (int j = 0; j < c; ++j) mu += xi[j];
        mu /= S(c);
        S var = S(0);
        for (int j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= S(c);
        const S is = S(1) / std::sqrt(var + eps);
        inv_std[i] = is;
        for (int j = 0; j < c; ++j) {
            const S xh = (xi[j] - mu) * is;
            xhat[static_cast<size_t>(i) * c + j] = xh;
            out.values()[static_cast<size_t>(i) * c + j] = gain.values()[j] * xh + bias.values()[j];
        }
    }
    detail::check_finite(out, "layer_norm");
    if (out.requires_grad() && grad_enabled()) {
        auto xn = x.node();
        auto gn = gain.node();
        auto bn = bias.node();
        bool rx = detail::wants_backward(x), rg = detail::wants_backward(gain), rb = detail::wants_backward(bias);
        out.node()->backward_fn = [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), r, c,
                                   rx, rg, rb](TensorNodeT<S>& self) {
            if (rg) gn->ensure_pass();
            if (rb) bn->ensure_pass();
            if (rx) xn->ensure_pass();
            for (int i = 0; i < r; ++i) {
                const S* di = self.pass_grad.data() + static_cast<size_t>(i) * c;
                const S* xh = xhat.data() + static_cast<size_t>(i) * c;
                if (rg)
                    for (int j = 0; j < c; ++j) gn->pass_grad[j] += di[j] * xh[j];
                if (rb)
                    for (int j = 0; j < c; ++j) bn->pass_grad[j] += di[j];
                if (rx) {
                    S mean_dxhat = S(0), mean_dxhat_xhat = S(0);
                    for (int j = 0; j < c; ++j) {
                        const S dxh = di[j] * gn->values[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                    }
                    mean_dxhat /= S(c);
                    mean_dxhat_xhat /= S(c);
                    S* gi = xn->pass_grad.data() + static_cast<size_t>(i) * c;
                    for (int j = 0; j < c; ++j) {
                        const S dxh = di[j] * gn->values[j];
                        gi[j] += (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat) * inv_std[i];
                    }
                }
            }
        };
    }
    return out;
}

// Sequence-dimension concatenation: [a; b].
template <class S>
TensorT<S> concat_rows(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.cols() != b.cols())
        throw std::invalid_argument("concat_rows: width mismatch " + shape_string(a.shape()) +
                                    " vs " + shape_string(b.shape()));
    const int ra = a.rows(), rb = b.rows(), c = a.cols();
    auto out = detail::make_result<S>({ra + rb, c}, {a, b});
    std::copy(a.values().begin(), a.values().end(), out.values().begin());
    std::copy(b.values().begin(), b.values().end(), out.values().begin() + static_cast<size_t>(ra) * c);
    if (out.requires_grad() && grad_enabled()) {
        auto an = a.node();
        auto bn = b.node();
        bool raq = detail::wants_backward(a), rbq = detail::wants_backward(b);
        out.node()->backward_fn = [an, bn, ra, rb, c, raq, rbq](TensorNodeT<S>& self) {
            if (raq) detail::add_into_pass(*an, self.pass_grad.data());
            if (rbq) detail::add_into_pass(*bn, self.pass_grad.data() + static_cast<size_t>(ra) * c);
        };
    }
    return out;
}

// Feature-dimension concatenation of equal-length sequences.
template <class S>
TensorT<S> concat_cols(const std::vector<TensorT<S>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const int r = parts[0].rows();
    int total = 0;
    bool req = false;
    for (const auto& p : parts) {
        if (p.rows() != r)
            throw std::invalid_argument("concat_cols: row mismatch " + shape_string(parts[0].shape()) +
                                        " vs " + shape_string(p.shape()));
        total += p.cols();
        req = req || p.requires_grad();
    }
    auto out = TensorT<S>::zeros({r, total});
    out.set_requires_grad(req);
    int off = 0;
    for (const auto& p : parts) {
        const int c = p.cols();
        for (int i = 0; i < r; ++i)
            std::copy(p.values().begin() + static_cast<size_t>(i) * c,
                      p.values().begin() + static_cast<size_t>(i + 1) * c,
                      out.values().begin() + static_cast<size_t>(i) * total + off);
        off += c;
    }
    if (req && grad_enabled()) {
        std::vector<std::shared_ptr<TensorNodeT<S>>> nodes;
        std::vector<int> widths;
        std::vector<bool> wants;
        for (const auto& p : parts) {
            nodes.push_back(p.node());
            widths.push_back(p.cols());
            wants.push_back(detail::wants_backward(p));
            out.node()->parents.push_back(p.node());
        }
        out.node()->backward_fn = [nodes, widths, wants, r, total](TensorNodeT<S>& self) {
            int off = 0;
            for (size_t pi = 0; pi < nodes.size(); ++pi) {
                const int c = widths[pi];
                if (wants[pi]) {
                    nodes[pi]->ensure_pass();
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < c; ++j)
                            nodes[pi]->pass_grad[static_cast<size_t>(i) * c + j] +=
                                self.pass_grad[static_cast<size_t>(i) * total + off + j];
                }
                off += c;
            }
        };
    }
    return out;
}

// Arithmetic mean over rows -> [1 x c].
template <class S>
TensorT<S> mean_rows(const TensorT<S>& x) {
    const int r = x.rows(), c = x.cols();
    if (r == 0) throw std::invalid_argument("mean_rows: empty input");
    auto out = detail::make_result<S>({1, c}, {x});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.values()[j] += x.at(i, j);
    for (int j = 0; j < c; ++j) out.values()[j] /= S(r);
    detail::check_finite(out, "mean_rows");
    if (out.requires_grad() && grad_enabled()) {
        auto xn = x.node();
        out.node()->backward_fn = [xn, r, c](TensorNodeT<S>& self) {
            xn->ensure_pass();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) xn->pass_grad[static_cast<size_t>(i) * c + j] += self.pass_grad[j] / S(r);
        };
    }
    return out;
}

template <class S>
TensorT<S> sum_all(const TensorT<S>& x) {
    auto out = detail::make_result<S>({1, 1}, {x});
    S acc = S(0);
    for (S v : x.values()) acc += v;
    out.values()[0] = acc;
    detail::check_finite(out, "sum_all");
    if (out.requires_grad() && grad_enabled()) {
        auto xn = x.node();
        out.node()->backward_fn = [xn](TensorNodeT<S>& self) {
            xn->ensure_pass();
            for (size_t i = 0; i < xn->pass_grad.size(); ++i) xn->pass_grad[i] += self.pass_grad[0];
        };
    }
    return out;
}

// Embedding lookup: rows of `table` gathered by id.
template <class S>
TensorT<S> embedding_rows(const TensorT<S>& table, const std::vector<int>& ids) {
    const int v = table.rows(), c = table.cols();
    for (int id : ids)
        if (id < 0 || id >= v)
            throw std::invalid_argument("embedding_rows: id " + std::to_string(id) + " out of range for vocab " +
                                        std::to_string(v));
    auto out = detail::make_result<S>({static_cast<int>(ids.size()), c}, {table});
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy(table.values().begin() + static_cast<size_t>(ids[i]) * c,
                  table.values().begin() + static_cast<size_t>(ids[i] + 1) * c,
                  out.values().begin() + i * c);
    if (out.requires_grad() && grad_enabled()) {
        auto tn = table.node();
        out.node()->backward_fn = [tn, ids, c](TensorNodeT<S>& self) {
            tn->ensure_pass();
            for (size_t i = 0; i < ids.size(); ++i)
                for (int j = 0; j < c; ++j)
                    tn->pass_grad[static_cast<size_t>(ids[i]) * c + j] += self.pass_grad[i * c + j];
        };
    }
    return out;
}

// Summed token-level negative log-likelihood from logits, computed via
// log-sum-exp (no literal log 0). Optional label smoothing.
template <class S>
TensorT<S> cross_entropy_sum(const TensorT<S>& logits, const std::vector<int>& targets,
                             S label_smoothing = S(0)) {
    const int r = logits.rows(), v = logits.cols();
    if (static_cast<int>(targets.size()) != r)
        throw std::invalid_argument("cross_entropy_sum: " + std::to_string(targets.size()) +
                                    " targets for " + std::to_string(r) + " logit rows");
    for (int t : targets)
        if (t < 0 || t >= v) throw std::invalid_argument("cross_entropy_sum: target id out of range");
    auto out = detail::make_result<S>({1, 1}, {logits});
    const S ls = label_smoothing;
    S total = S(0);
    for (int i = 0; i < r; ++i) {
        const S* xi = logits.values().data() + static_cast<size_t>(i) * v;
        S mx = xi[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, xi[j]);
        S sum = S(0), mean_x = S(0);
        for (int j = 0; j < v; ++j) {
            sum += std::exp(xi[j] - mx);
            mean_x += xi[j];
        }
        mean_x /= S(v);
        const S lse = mx + std::log(sum);
        total += lse - (S(1) - ls) * xi[targets[i]] - ls * mean_x;
    }
    out.values()[0] = total;
    detail::check_finite(out, "cross_entropy_sum");
    if (out.requires_grad() && grad_enabled()) {
        auto ln = logits.node();
        out.node()->backward_fn = [ln, targets, r, v, ls](TensorNodeT<S>& self) {
            ln->ensure_pass();
            const S d = self.pass_grad[0];
            for (int i = 0; i < r; ++i) {
                const S* xi = ln->values.data() + static_cast<size_t>(i) * v;
                S mx = xi[0];
                for (int j = 1; j < v; ++j) mx = std::max(mx, xi[j]);
                S sum = S(0);
                for (int j = 0; j < v; ++j) sum += std::exp(xi[j] - mx);
                S* gi = ln->pass_grad.data() + static_cast<size_t>(i) * v;
                for (int j = 0; j < v; ++j) {
                    const S p = std::exp(xi[j] - mx) / sum;
                    S q = ls / S(v);
                    if (j == targets[i]) q += S(1) - ls;
                    gi[j] += d * (p - q);
                }
            }
        };
    }
    return out;
}

// Inverted dropout; identity when not training or rate == 0.
template <class S>
TensorT<S> dropout(const TensorT<S>& x, double rate, std::mt19937& rng, bool training) {
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0,1)");
    if (!training || rate == 0.0) return x;
    auto out = detail::make_result<S>(x.shape(), {x});
    std::bernoulli_distribution keep(1.0 - rate);
    std::vector<uint8_t> mask(x.numel());
    const S inv = S(1.0 / (1.0 - rate));
    for (long i = 0; i < x.numel(); ++i) {
        mask[i] = keep(rng) ? 1 : 0;
        out.values()[i] = mask[i] ? x.values()[i] * inv : S(0);
    }
    if (out.requires_grad() && grad_enabled()) {
        auto xn = x.node();
        out.node()->backward_fn = [xn, mask = std::move(mask), inv](TensorNodeT<S>& self) {
            xn->ensure_pass();
            for (size_t i = 0; i < xn->pass_grad.size(); ++i)
                if (mask[i]) xn->pass_grad[i] += inv * self.pass_grad[i];
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Gradients accumulate into .grad of
// every requires_grad tensor reachable from the loss; repeated calls without
// zero_grad() keep accumulating.
template <class S>
void backward(const TensorT<S>& loss) {
    if (!loss.is_scalar())
        throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_string(loss.shape()));
    using Node = TensorNodeT<S>;
    std::vector<Node*> topo;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }
    loss.node()->ensure_pass();
    loss.node()->pass_grad[0] += S(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->pass_grad.empty()) n->backward_fn(*n);
    }
    for (Node* n : topo) {
        if (n->requires_grad && !n->pass_grad.empty()) {
            n->ensure_grad();
            for (size_t i = 0; i < n->grad.size(); ++i) n->grad[i] += n->pass_grad[i];
        }
        n->pass_grad.clear();
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
    double alpha = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <class S>
class AdamStateT {
public:
    explicit AdamStateT(AdamConfig cfg = {}) : cfg_(cfg) {}

    const AdamConfig& config() const { return cfg_; }
    long step() const { return step_; }

    // In-place bias-corrected update; grads read from the tensors.
    void update(std::vector<TensorT<S>>& params) {
        std::vector<const std::vector<S>*> grads;
        static const std::vector<S> kEmpty;
        grads.reserve(params.size());
        for (auto& p : params) grads.push_back(p.has_grad() ? &p.grad() : &kEmpty);
        apply(params, grads);
    }

    // Explicit-gradient variant; sizes must line up one-to-one.
    void update(std::vector<TensorT<S>>& params, const std::vector<std::vector<S>>& grads) {
        if (grads.size() != params.size())
            throw std::invalid_argument("adam: " + std::to_string(grads.size()) + " grads for " +
                                        std::to_string(params.size()) + " params");
        std::vector<const std::vector<S>*> ptrs;
        for (size_t i = 0; i < grads.size(); ++i) {
            if (static_cast<long>(grads[i].size()) != params[i].numel())
                throw std::invalid_argument("adam: grad size " + std::to_string(grads[i].size()) +
                                            " does not match param shape " + shape_string(params[i].shape()));
            ptrs.push_back(&grads[i]);
        }
        apply(params, ptrs);
    }

    std::vector<std::vector<S>>& first_moments() { return m_; }
    std::vector<std::vector<S>>& second_moments() { return v_; }
    void set_step(long s) { step_ = s; }

private:
    void apply(std::vector<TensorT<S>>& params, const std::vector<const std::vector<S>*>& grads) {
        if (m_.empty()) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (size_t i = 0; i < params.size(); ++i) {
                m_[i].assign(params[i].numel(), S(0));
                v_[i].assign(params[i].numel(), S(0));
            }
        }
        if (m_.size() != params.size())
            throw std::invalid_argument("adam: state initialized for a different parameter list");
        ++step_;
        const double b1 = cfg_.beta1, b2 = cfg_.beta2;
        const double corr1 = 1.0 - std::pow(b1, static_cast<double>(step_));
        const double corr2 = 1.0 - std::pow(b2, static_cast<double>(step_));
        for (size_t i = 0; i < params.size(); ++i) {
            auto& vals = params[i].values();
            const std::vector<S>& g = *grads[i];
            if (g.empty()) {
                // no gradient accumulated: decay moments with g = 0
                for (size_t j = 0; j < vals.size(); ++j) {
                    m_[i][j] = S(b1) * m_[i][j];
                    v_[i][j] = S(b2) * v_[i][j];
                    const double mhat = m_[i][j] / corr1;
                    const double vhat = v_[i][j] / corr2;
                    vals[j] -= S(cfg_.alpha * mhat / (std::sqrt(vhat) + cfg_.eps));
                }
                continue;
            }
            if (g.size() != vals.size())
                throw std::invalid_argument("adam: grad size " + std::to_string(g.size()) +
                                            " does not match param shape " + shape_string(params[i].shape()));
            for (size_t j = 0; j < vals.size(); ++j) {
                m_[i][j] = S(b1) * m_[i][j] + S(1.0 - b1) * g[j];
                v_[i][j] = S(b2) * v_[i][j] + S(1.0 - b2) * g[j] * g[j];
                const double mhat = m_[i][j] / corr1;
                const double vhat = v_[i][j] / corr2;
                vals[j] -= S(cfg_.alpha * mhat / (std::sqrt(vhat) + cfg_.eps));
            }
        }
    }

    AdamConfig cfg_;
    long step_ = 0;
    std::vector<std::vector<S>> m_, v_;
};

// ---------------------------------------------------------------------------
// initialization helpers
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> xavier_uniform(int rows, int cols, std::mt19937& rng) {
    const double limit = std::sqrt(6.0 / (rows + cols));
    std::uniform_real_distribution<double> dist(-limit, limit);
    auto t = TensorT<S>::zeros({rows, cols});
    for (auto& v : t.values()) v = S(dist(rng));
    t.set_requires_grad(true);
    return t;
}

template <class S>
TensorT<S> normal_init(int rows, int cols, double stddev, std::mt19937& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    auto t = TensorT<S>::zeros({rows, cols});
    for (auto& v : t.values()) v = S(dist(rng));
    t.set_requires_grad(true);
    return t;
}

template <class S>
TensorT<S> zeros_param(int rows, int cols) {
    auto t = TensorT<S>::zeros({rows, cols});
    t.set_requires_grad(true);
    return t;
}

template <class S>
TensorT<S> ones_param(int rows, int cols) {
    auto t = TensorT<S>::full({rows, cols}, S(1));
    t.set_requires_grad(true);
    return t;
}

using Tensor = TensorT<float>;
using AdamState = AdamStateT<float>;

}  // namespace cat
