#pragma once

// Dense row-major tensor with tape-based reverse-mode differentiation.
// Real = double for verification builds, float for training; both share
// one code path. Broadcasting aligns trailing dimensions. All reductions
// run in a fixed serial order so repeated runs are bitwise identical.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "xil/rng.hpp"

namespace xil {

using Shape = std::vector<int64_t>;

// ---------------------------------------------------------------- errors

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};
struct UsageError : Error {
    explicit UsageError(const std::string& msg) : Error(msg) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        os << s[i] << (i + 1 < s.size() ? "," : "");
    }
    os << "]";
    return os.str();
}

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

// ---------------------------------------------------------------- tensor

template <class Real>
class Tape;

namespace detail {
// Identity of a tensor on a tape. Shared between copies of the same value so
// a parameter held by a module and the copy used inside a forward pass map to
// the same tape node.
struct GradMeta {
    const void* tape = nullptr;
    int64_t node = -1;
};
} // namespace detail

template <class Real>
class Tensor {
  public:
    Tensor() = default;

    Tensor(Shape shape, std::shared_ptr<std::vector<Real>> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_numel(shape_) != static_cast<int64_t>(data_->size())) {
            throw ShapeError("data length does not match shape " + shape_str(shape_));
        }
    }

    static Tensor zeros(Shape shape) {
        auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::make_shared<std::vector<Real>>(n, Real(0)));
    }
    static Tensor ones(Shape shape) { return full(std::move(shape), Real(1)); }
    static Tensor full(Shape shape, Real v) {
        auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::make_shared<std::vector<Real>>(n, v));
    }
    static Tensor scalar(Real v) { return full({1}, v); }
    static Tensor from(Shape shape, std::vector<Real> values) {
        return Tensor(std::move(shape), std::make_shared<std::vector<Real>>(std::move(values)));
    }
    static Tensor randn(Shape shape, Rng& rng, Real stddev = Real(1)) {
        auto t = zeros(std::move(shape));
        for (auto& v : t.raw()) v = static_cast<Real>(rng.normal()) * stddev;
        return t;
    }
    static Tensor uniform(Shape shape, Rng& rng, Real lo, Real hi) {
        auto t = zeros(std::move(shape));
        for (auto& v : t.raw()) v = static_cast<Real>(rng.uniform(lo, hi));
        return t;
    }

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return shape_; }
    int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
    int64_t dim(int64_t i) const { return shape_[static_cast<size_t>(i >= 0 ? i : ndim() + i)]; }
    int64_t numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

    const std::vector<Real>& raw() const { return *data_; }
    std::vector<Real>& raw() { return *data_; }
    const Real* data() const { return data_->data(); }
    Real* data() { return data_->data(); }
    Real at(int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

    const std::shared_ptr<std::vector<Real>>& storage() const { return data_; }

    bool requires_grad() const { return requires_grad_; }
    Tensor& set_requires_grad(bool v) {
        requires_grad_ = v;
        if (v && !meta_) meta_ = std::make_shared<detail::GradMeta>();
        return *this;
    }

    // same storage, new shape
    Tensor reshaped_view(Shape shape) const {
        if (shape_numel(shape) != numel()) {
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        Tensor t(std::move(shape), data_);
        t.requires_grad_ = requires_grad_;
        return t;
    }

    bool all_finite() const {
        for (Real v : *data_) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    std::shared_ptr<detail::GradMeta>& meta() const { return meta_; }

  private:
    Shape shape_;
    std::shared_ptr<std::vector<Real>> data_;
    bool requires_grad_ = false;
    mutable std::shared_ptr<detail::GradMeta> meta_;
};

// ------------------------------------------------------------------ tape

template <class Real>
inline thread_local Tape<Real>* g_active_tape = nullptr;

template <class Real>
class Tape {
  public:
    using BackwardFn = std::function<void(Tape&, const Tensor<Real>&)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Registers t as a leaf if it is not yet known to this tape.
    int64_t node_of(const Tensor<Real>& t) {
        auto& meta = t.meta();
        if (!meta) meta = std::make_shared<detail::GradMeta>();
        if (meta->tape != this) {
            meta->tape = this;
            meta->node = add_node({}, nullptr);
        }
        return meta->node;
    }

    int64_t add_node(std::vector<int64_t> inputs, BackwardFn fn) {
        nodes_.push_back(Node{std::move(inputs), std::move(fn)});
        grads_.emplace_back();
        return static_cast<int64_t>(nodes_.size()) - 1;
    }

    void attach_result(Tensor<Real>& out, std::vector<int64_t> inputs, BackwardFn fn) {
        auto id = add_node(std::move(inputs), std::move(fn));
        out.set_requires_grad(true);
        out.meta() = std::make_shared<detail::GradMeta>();
        out.meta()->tape = this;
        out.meta()->node = id;
    }

    void accumulate(int64_t node, const Tensor<Real>& g) {
        auto& slot = grads_[static_cast<size_t>(node)];
        if (!slot.defined()) {
            slot = Tensor<Real>::zeros(g.shape());
        }
        auto* acc = slot.data();
        const auto* src = g.data();
        const int64_t n = g.numel();
        for (int64_t i = 0; i < n; ++i) acc[i] += src[i];
    }

    // Reverse pass from a scalar root. A second call on the same tape is
    // rejected; reset() clears accumulated state for reuse.
    void backward(const Tensor<Real>& root) {
        if (backward_done_) {
            throw UsageError("backward called twice on the same tape; reset() first");
        }
        if (root.numel() != 1) {
            throw UsageError("backward root must be scalar, got shape " + shape_str(root.shape()));
        }
        if (!root.meta() || root.meta()->tape != this) {
            throw UsageError("backward root is not attached to this tape");
        }
        backward_done_ = true;
        const int64_t root_id = root.meta()->node;
        accumulate(root_id, Tensor<Real>::ones(root.shape()));
        for (int64_t i = root_id; i >= 0; --i) {
            auto& node = nodes_[static_cast<size_t>(i)];
            auto& g = grads_[static_cast<size_t>(i)];
            if (node.backward && g.defined()) {
                node.backward(*this, g);
            }
        }
    }

    // Gradient of a tensor recorded on this tape; zeros if it never
    // participated in the reverse pass.
    Tensor<Real> grad(const Tensor<Real>& t) const {
        if (t.meta() && t.meta()->tape == this) {
            const auto& g = grads_[static_cast<size_t>(t.meta()->node)];
            if (g.defined()) return g;
        }
        return Tensor<Real>::zeros(t.shape());
    }

    void reset() {
        nodes_.clear();
        grads_.clear();
        backward_done_ = false;
    }

    size_t size() const { return nodes_.size(); }
    bool backward_done() const { return backward_done_; }

  private:
    struct Node {
        std::vector<int64_t> inputs;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
    std::vector<Tensor<Real>> grads_;
    bool backward_done_ = false;
};

// RAII: activate a tape on this thread.
template <class Real>
class TapeScope {
  public:
    explicit TapeScope(Tape<Real>& t) : prev_(g_active_tape<Real>) { g_active_tape<Real> = &t; }
    ~TapeScope() { g_active_tape<Real> = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

  private:
    Tape<Real>* prev_;
};

// RAII: suspend recording (samplers, rollouts, benchmarks).
template <class Real>
class NoGrad {
  public:
    NoGrad() : prev_(g_active_tape<Real>) { g_active_tape<Real> = nullptr; }
    ~NoGrad() { g_active_tape<Real> = prev_; }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

  private:
    Tape<Real>* prev_;
};

namespace detail {

template <class Real>
bool should_record(std::initializer_list<const Tensor<Real>*> ins) {
    if (g_active_tape<Real> == nullptr) return false;
    for (const auto* t : ins) {
        if (t->requires_grad()) return true;
    }
    return false;
}

} // namespace detail

// ----------------------------------------------------------- broadcasting

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    const size_t n = std::max(a.size(), b.size());
    Shape out(n);
    for (size_t i = 0; i < n; ++i) {
        const int64_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
        const int64_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
        if (da != db && da != 1 && db != 1) {
            throw ShapeError("shapes not broadcastable: " + shape_str(a) + " vs " + shape_str(b));
        }
        out[n - 1 - i] = std::max(da, db);
    }
    return out;
}

namespace detail {

// Row-major strides, 0 where the dimension is broadcast, right-aligned to rank.
inline std::vector<int64_t> broadcast_strides(const Shape& s, size_t rank) {
    std::vector<int64_t> strides(rank, 0);
    int64_t acc = 1;
    for (size_t i = 0; i < s.size(); ++i) {
        const size_t src = s.size() - 1 - i;
        const size_t dst = rank - 1 - i;
        strides[dst] = (s[src] == 1) ? 0 : acc;
        acc *= s[src];
    }
    return strides;
}

// Sums g down to `target` (inverse of broadcasting), fixed accumulation order.
template <class Real>
Tensor<Real> reduce_to_shape(const Tensor<Real>& g, const Shape& target) {
    if (g.shape() == target) return g;
    auto out = Tensor<Real>::zeros(target);
    const size_t rank = g.shape().size();
    const auto tstr = broadcast_strides(target, rank);
    const auto& gs = g.shape();
    std::vector<int64_t> idx(rank, 0);
    const auto* src = g.data();
    auto* dst = out.data();
    const int64_t n = g.numel();
    int64_t toff = 0;
    for (int64_t lin = 0; lin < n; ++lin) {
        dst[toff] += src[lin];
        for (int64_t d = static_cast<int64_t>(rank) - 1; d >= 0; --d) {
            idx[d]++;
            toff += tstr[d];
            if (idx[d] < gs[d]) break;
            toff -= tstr[d] * gs[d];
            idx[d] = 0;
        }
    }
    return out;
}

} // namespace detail

// -------------------------------------------------------- elementwise core

namespace detail {

template <class Real, class F>
Tensor<Real> binary_map(const Tensor<Real>& a, const Tensor<Real>& b, F&& f) {
    if (a.shape() == b.shape()) {
        auto out = Tensor<Real>::zeros(a.shape());
        const auto* pa = a.data();
        const auto* pb = b.data();
        auto* po = out.data();
        const int64_t n = a.numel();
        for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
        return out;
    }
    const Shape os = broadcast_shape(a.shape(), b.shape());
    auto out = Tensor<Real>::zeros(os);
    const size_t rank = os.size();
    const auto sa = broadcast_strides(a.shape(), rank);
    const auto sb = broadcast_strides(b.shape(), rank);
    std::vector<int64_t> idx(rank, 0);
    const auto* pa = a.data();
    const auto* pb = b.data();
    auto* po = out.data();
    const int64_t n = out.numel();
    int64_t oa = 0, ob = 0;
    for (int64_t lin = 0; lin < n; ++lin) {
        po[lin] = f(pa[oa], pb[ob]);
        for (int64_t d = static_cast<int64_t>(rank) - 1; d >= 0; --d) {
            idx[d]++;
            oa += sa[d];
            ob += sb[d];
            if (idx[d] < os[d]) break;
            oa -= sa[d] * os[d];
            ob -= sb[d] * os[d];
            idx[d] = 0;
        }
    }
    return out;
}

template <class Real, class F>
Tensor<Real> unary_map(const Tensor<Real>& a, F&& f) {
    auto out = Tensor<Real>::zeros(a.shape());
    const auto* pa = a.data();
    auto* po = out.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i]);
    return out;
}

} // namespace detail

// --------------------------------------------------------- binary ops

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    auto out = detail::binary_map(a, b, [](Real x, Real y) { return x + y; });
    if (detail::should_record<Real>({&a, &b})) {
        auto* tape = g_active_tape<Real>;
        const bool ga = a.requires_grad(), gb = b.requires_grad();
        const int64_t na = ga ? tape->node_of(a) : -1;
        const int64_t nb = gb ? tape->node_of(b) : -1;
        Shape sa = a.shape(), sb = b.shape();
        tape->attach_result(out, {na, nb}, [=](Tape<Real>& t, const Tensor<Real>& g) {
            if (na >= 0) t.accumulate(na, detail::reduce_to_shape(g, sa));
            if (nb >= 0) t.accumulate(nb, detail::reduce_to_shape(g, sb));
        });
    }
    return out;
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
    auto out = detail::binary_map(a, b, [](Real x, Real y) { return x - y; });
    if (detail::should_record<Real>({&a, &b})) {
        auto* tape = g_active_tape<Real>;
        const int64_t na = a.requires_grad() ? tape->node_of(a) : -1;
        const int64_t nb = b.requires_grad() ? tape->node_of(b) : -1;
        Shape sa = a.shape(), sb = b.shape();
        tape->attach_result(out, {na, nb}, [=](Tape<Real>& t, const Tensor<Real>& g) {
            if (na >= 0) t.accumulate(na, detail::reduce_to_shape(g, sa));
            if (nb >= 0) {
                auto neg_g = detail::unary_map(g, [](Real x) { return -x; });
                t.accumulate(nb, detail::reduce_to_shape(neg_g, sb));
            }
        });
    }
    return out;
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    auto out = detail::binary_map(a, b, [](Real x, Real y) { return x * y; });
    if (detail::should_record<Real>({&a, &b})) {
        auto* tape = g_active_tape<Real>;
        const int64_t na = a.requires_grad() ? tape->node_of(a) : -1;
        const int64_t nb = b.requires_grad() ? tape->node_of(b) : -1;
        Tensor<Real> av = a, bv = b;
        tape->attach_result(out, {na, nb}, [=](Tape<Real>& t, const Tensor<Real>& g) {
            if (na >= 0) {
                auto gb = detail::binary_map(g, bv, [](Real x, Real y) { return x * y; });
                t.accumulate(na, detail::reduce_to_shape(gb, av.shape()));
            }
            if (nb >= 0) {
                auto ga = detail::binary_map(g, av, [](Real x, Real y) { return x * y; });
                t.accumulate(nb, detail::reduce_to_shape(ga, bv.shape()));
            }
        });
    }
    return out;
}

template <class Real>
Tensor<Real> div(const Tensor<Real>& a, const Tensor<Real>& b) {
    auto out = detail::binary_map(a, b, [](Real x, Real y) { return x / y; });
    if (detail::should_record<Real>({&a, &b})) {
        auto* tape = g_active_tape<Real>;
        const int64_t na = a.requires_grad() ? tape->node_of(a) : -1;
        const int64_t nb = b.requires_grad() ? tape->node_of(b) : -1;
        Tensor<Real> av = a, bv = b;
        tape->attach_result(out, {na, nb}, [=](Tape<Real>& t, const Tensor<Real>& g) {
            if (na >= 0) {
                auto ga = detail::binary_map(g, bv, [](Real x, Real y) { return x / y; });
                t.accumulate(na, detail::reduce_to_shape(ga, av.shape()));
            }
            if (nb >= 0) {
                auto num = detail::binary_map(g, av, [](Real x, Real y) { return x * y; });
                auto gb = detail::binary_map(num, bv, [](Real x, Real y) { return -x / (y * y); });
                t.accumulate(nb, detail::reduce_to_shape(gb, bv.shape()));
            }
        });
    }
    return out;
}

// elementwise max; ties go to the first argument
template <class Real>
Tensor<Real> maximum(const Tensor<Real>& a, const Tensor<Real>& b) {
    auto out = detail::binary_map(a, b, [](Real x, Real y) { return x >= y ? x : y; });
    if (detail::should_record<Real>({&a, &b})) {
        auto* tape = g_active_tape<Real>;
        const int64_t na = a.requires_grad() ? tape->node_of(a) : -1;
        const int64_t nb = b.requires_grad() ? tape->node_of(b) : -1;
        Tensor<Real> av = a, bv = b;
        tape->attach_result(out, {na, nb}, [=](Tape<Real>& t, const Tensor<Real>& g) {
            if (na >= 0) {
                auto mask = detail::binary_map(av, bv, [](Real x, Real y) { return x >= y ? Real(1) : Real(0); });
                auto ga = detail::binary_map(g, mask, [](Real x, Real m) { return x * m; });
                t.accumulate(na, detail::reduce_to_shape(ga, av.shape()));
            }
            if (nb >= 0) {
                auto mask = detail::binary_map(av, bv, [](Real x, Real y) { return x >= y ? Real(0) : Real(1); });
                auto gb = detail::binary_map(g, mask, [](Real x, Real m) { return x * m; });
                t.accumulate(nb, detail::reduce_to_shape(gb, bv.shape()));
            }
        });
    }
    return out;
}

// ---------------------------------------------------------- unary ops

namespace detail {

template <class Real, class Fwd, class Grad>
Tensor<Real> unary_op(const Tensor<Real>& a, Fwd&& fwd, Grad&& grad_from_in) {
    auto out = unary_map(a, fwd);
    if (should_record<Real>({&a})) {
        auto* tape = g_active_tape<Real>;
        const int64_t na = tape->node_of(a);
        Tensor<Real> av = a;
        Tensor<Real> ov = out;
        tape->attach_result(out, {na}, [na, av, ov, grad_from_in](Tape<Real>& t, const Tensor<Real>& g) {
            auto ga = Tensor<Real>::zeros(av.shape());
            const auto* px = av.data();
            const auto* py = ov.data();
            const auto* pg = g.data();
            auto* po = ga.data();
            const int64_t n = av.numel();
            for (int64_t i = 0; i < n; ++i) po[i] = pg[i] * grad_from_in(px[i], py[i]);
            t.accumulate(na, ga);
        });
    }
    return out;
}

template <class Real>
Real sigmoid_scalar(Real x) {
    if (x >= Real(0)) {
        const Real e = std::exp(-x);
        return Real(1) / (Real(1) + e);
    }
    const Real e = std::exp(x);
    return e / (Real(1) + e);
}

template <class Real>
Real softplus_scalar(Real x) {
    const Real ax = x > Real(0) ? x : Real(0);
    return ax + std::log1p(std::exp(-std::abs(x)));
}

} // namespace detail

template <class Real>
Tensor<Real> neg(const Tensor<Real>& a) {
    return detail::unary_op(
        a, [](Real x) { return -x; }, [](Real, Real) { return Real(-1); });
}

template <class Real>
Tensor<Real> exp(const Tensor<Real>& a) {
    return detail::unary_op(
        a, [](Real x) { return std::exp(x); }, [](Real, Real y) { return y; });
}

template <class Real>
Tensor<Real> log(const Tensor<Real>& a) {
    for (Real v : a.raw()) {
        if (!(v > Real(0))) throw NumericError("log of non-positive value");
    }
    return detail::unary_op(
        a, [](Real x) { return std::log(x); }, [](Real x, Real) { return Real(1) / x; });
}

template <class Real>
Tensor<Real> sqrt(const Tensor<Real>& a) {
    for (Real v : a.raw()) {
        if (v < Real(0)) throw NumericError("sqrt of negative value");
    }
    return detail::unary_op(
        a, [](Real x) { return std::sqrt(x); },
        [](Real, Real y) { return Real(1) / (Real(2) * y); });
}

template <class Real>
Tensor<Real> tanh(const Tensor<Real>& a) {
    return detail::unary_op(
        a, [](Real x) { return std::tanh(x); }, [](Real, Real y) { return Real(1) - y * y; });
}

template <class Real>
Tensor<Real> sigmoid(const Tensor<Real>& a) {
    return detail::unary_op(
        a, [](Real x) { return detail::sigmoid_scalar(x); },
        [](Real, Real y) { return y * (Real(1) - y); });
}

template <class Real>
Tensor<Real> silu(const Tensor<Real>& a) {
    return detail::unary_op(
        a, [](Real x) { return x * detail::sigmoid_scalar(x); },
        [](Real x, Real) {
            const Real s = detail::sigmoid_scalar(x);
            return s * (Real(1) + x * (Real(1) - s));
        });
}

template <class Real>
Tensor<Real> gelu(const Tensor<Real>& a) {
    // exact erf form
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt_2pi = 0.3989422804014326779;
    return detail::unary_op(
        a,
        [](Real x) {
            return static_cast<Real>(0.5 * static_cast<double>(x) *
                                     (1.0 + std::erf(static_cast<double>(x) * inv_sqrt2)));
        },
        [](Real x, Real) {
            const double xd = static_cast<double>(x);
            const double cdf = 0.5 * (1.0 + std::erf(xd * inv_sqrt2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * xd * xd);
            return static_cast<Real>(cdf + xd * pdf);
        });
}

template <class Real>
Tensor<Real> softplus(const Tensor<Real>& a) {
    return detail::unary_op(
        a, [](Real x) { return detail::softplus_scalar(x); },
        [](Real x, Real) { return detail::sigmoid_scalar(x); });
}

// gradient is 1 strictly inside (lo, hi), 0 elsewhere
template <class Real>
Tensor<Real> clip(const Tensor<Real>& a, Real lo, Real hi) {
    return detail::unary_op(
        a, [lo, hi](Real x) { return std::min(hi, std::max(lo, x)); },
        [lo, hi](Real x, Real) { return (x > lo && x < hi) ? Real(1) : Real(0); });
}

// y = a*x + b elementwise with constants
template <class Real>
Tensor<Real> affine(const Tensor<Real>& x, Real a, Real b) {
    return detail::unary_op(
        x, [a, b](Real v) { return a * v + b; }, [a](Real, Real) { return a; });
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& x, Real a) {
    return affine(x, a, Real(0));
}

// ---------------------------------------------------------- reductions

template <class Real>
Tensor<Real> sum_all(const Tensor<Real>& a) {
    Real acc = Real(0);
    for (Real v : a.raw()) acc += v;
    auto out = Tensor<Real>::scalar(acc);
    if (detail::should_record<Real>({&a})) {
        auto* tape = g_active_tape<Real>;
        const int64_t na = tape->node_of(a);
        Shape sa = a.shape();
        tape->attach_result(out, {na}, [na, sa](Tape<Real>& t, const Tensor<Real>& g) {
            auto ga = Tensor<Real>::full(sa, g.at(0));
            t.accumulate(na, ga);
        });
    }
    return out;
}

template <class Real>
Tensor<Real> mean_all(const Tensor<Real>& a) {
    const Real inv = Real(1) / static_cast<Real>(a.numel());
    return scale(sum_all(a), inv);
}

namespace detail {
inline int64_t normalize_axis(int64_t axis, int64_t ndim) {
    if (axis < 0) axis += ndim;
    if (axis < 0 || axis >= ndim) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(ndim));
    }
    return axis;
}

struct AxisSplit {
    int64_t outer, len, inner;
};

inline AxisSplit axis_split(const Shape& s, int64_t axis) {
    AxisSplit sp{1, s[static_cast<size_t>(axis)], 1};
    for (int64_t i = 0; i < axis; ++i) sp.outer *= s[static_cast<size_t>(i)];
    for (int64_t i = axis + 1; i < static_cast<int64_t>(s.size()); ++i) sp.inner *= s[static_cast<size_t>(i)];
    return sp;
}

inline Shape drop_or_keep_axis(const Shape& s, int64_t axis, bool keepdim) {
    Shape out = s;
    if (keepdim) {
        out[static_cast<size_t>(axis)] = 1;
    } else {
        out.erase(out.begin() + static_cast<size_t>(axis));
        if (out.empty()) out = {1};
    }
    return out;
}
} // namespace detail

template <class Real>
Tensor<Real> sum_axis(const Tensor<Real>& a, int64_t axis, bool keepdim = false) {
    axis = detail::normalize_axis(axis, a.ndim());
    const auto sp = detail::axis_split(a.shape(), axis);
    auto out = Tensor<Real>::zeros(detail::drop_or_keep_axis(a.shape(), axis, keepdim));
    const auto* src = a.data();
    auto* dst = out.data();
    for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t k = 0; k < sp.len; ++k) {
            const Real* row = src + (o * sp.len + k) * sp.inner;
            Real* orow = dst + o * sp.inner;
            for (int64_t i = 0; i < sp.inner; ++i) orow[i] += row[i];
        }
    }
    if (detail::should_record<Real>({&a})) {
        auto* tape = g_active_tape<Real>;
        const int64_t na = tape->node_of(a);
        Shape sa = a.shape();
        tape->attach_result(out, {na}, [na, sa, sp](Tape<Real>& t, const Tensor<Real>& g) {
            auto ga = Tensor<Real>::zeros(sa);
            const auto* pg = g.data();
            auto* po = ga.data();
            for (int64_t o = 0; o < sp.outer; ++o) {
                for (int64_t k = 0; k < sp.len; ++k) {
                    Real* row = po + (o * sp.len + k) * sp.inner;
                    const Real* grow = pg + o * sp.inner;
                    for (int64_t i = 0; i < sp.inner; ++i) row[i] += grow[i];
                }
            }
            t.accumulate(na, ga);
        });
    }
    return out;
}

template <class Real>
Tensor<Real> mean_axis(const Tensor<Real>& a, int64_t axis, bool keepdim = false) {
    const int64_t ax = detail::normalize_axis(axis, a.ndim());
    const Real inv = Real(1) / static_cast<Real>(a.shape()[static_cast<size_t>(ax)]);
    return scale(sum_axis(a, ax, keepdim), inv);
}

// max along axis; gradient flows to the first maximal element
template <class Real>
Tensor<Real> max_axis(const Tensor<Real>& a, int64_t axis, bool keepdim = false) {
    axis = detail::normalize_axis(axis, a.ndim());
    const auto sp = detail::axis_split(a.shape(), axis);
    auto out = Tensor<Real>::zeros(detail::drop_or_keep_axis(a.shape(), axis, keepdim));
    std::vector<int64_t> argmax(static_cast<size_t>(sp.outer * sp.inner), 0);
    const auto* src = a.data();
    auto* dst = out.data();
    for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t i = 0; i < sp.inner; ++i) {
            Real best = src[(o * sp.len) * sp.inner + i];
            int64_t bk = 0;
            for (int64_t k = 1; k < sp.len; ++k) {
                const Real v = src[(o * sp.len + k) * sp.inner + i];
                if (v > best) {
                    best = v;
                    bk = k;
                }
            }
            dst[o * sp.inner + i] = best;
            argmax[static_cast<size_t>(o * sp.inner + i)] = bk;
        }
    }
    if (detail::should_record<Real>({&a})) {
        auto* tape = g_active_tape<Real>;
        const int64_t na = tape->node_of(a);
        Shape sa = a.shape();
        tape->attach_result(out, {na}, [na, sa, sp, argmax](Tape<Real>& t, const Tensor<Real>& g) {
            auto ga = Tensor<Real>::zeros(sa);
            const auto* pg = g.data();
            auto* po = ga.data();
            for (int64_t o = 0; o < sp.outer; ++o) {
                for (int64_t i = 0; i < sp.inner; ++i) {
                    const int64_t k = argmax[static_cast<size_t>(o * sp.inner + i)];
                    po[(o * sp.len + k) * sp.inner + i] += pg[o * sp.inner + i];
                }
            }
            t.accumulate(na, ga);
        });
    }
    return out;
}

// ------------------------------------------------------- structural ops

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape) {
    auto out = a.reshaped_view(std::move(shape));
    if (detail::should_record<Real>({&a})) {
        auto* tape = g_active_tape<Real>;
        const int64_t na = tape->node_of(a);
        Shape sa = a.shape();
        // fresh storage for the recorded result so the node identity is unambiguous
        out = Tensor<Real>::from(out.shape(), a.raw());
        tape->attach_result(out, {na}, [na, sa](Tape<Real>& t, const Tensor<Real>& g) {
            t.accumulate(na, g.reshaped_view(sa));
        });
    }
    return out;
}

template <class Real>
Tensor<Real> permute(const Tensor<Real>& a, const std::vector<int64_t>& perm) {
    const int64_t nd = a.ndim();
    if (static_cast<int64_t>(perm.size()) != nd) {
        throw ShapeError("permute rank mismatch for " + shape_str(a.shape()));
    }
    Shape os(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) os[i] = a.shape()[static_cast<size_t>(perm[i])];
    auto out = Tensor<Real>::zeros(os);

    std::vector<int64_t> in_strides(static_cast<size_t>(nd), 1);
    for (int64_t i = nd - 2; i >= 0; --i) {
        in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(i + 1)] * a.shape()[static_cast<size_t>(i + 1)];
    }
    std::vector<int64_t> src_stride(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) src_stride[i] = in_strides[static_cast<size_t>(perm[i])];

    const auto* src = a.data();
    auto* dst = out.data();
    std::vector<int64_t> idx(perm.size(), 0);
    int64_t soff = 0;
    const int64_t n = out.numel();
    for (int64_t lin = 0; lin < n; ++lin) {
        dst[lin] = src[soff];
        for (int64_t d = nd - 1; d >= 0; --d) {
            idx[static_cast<size_t>(d)]++;
            soff += src_stride[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < os[static_cast<size_t>(d)]) break;
            soff -= src_stride[static_cast<size_t>(d)] * os[static_cast<size_t>(d)];
            idx[static_cast<size_t>(d)] = 0;
        }
    }
    if (detail::should_record<Real>({&a})) {
        auto* tape = g_active_tape<Real>;
        const int64_t na = tape->node_of(a);
        std::vector<int64_t> inv(perm.size());
        for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int64_t>(i);
        tape->attach_result(out, {na}, [na, inv](Tape<Real>& t, const Tensor<Real>& g) {
            NoGrad<Real> ng;
            t.accumulate(na, permute(g, inv));
        });
    }
    return out;
}

template <class Real>
Tensor<Real> transpose_last2(const Tensor<Real>& a) {
    std::vector<int64_t> perm(static_cast<size_t>(a.ndim()));
    std::iota(perm.begin(), perm.end(), 0);
    std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
    return permute(a, perm);
}

template <class Real>
Tensor<Real> slice(const Tensor<Real>& a, int64_t axis, int64_t start, int64_t len) {
    axis = detail::normalize_axis(axis, a.ndim());
    const int64_t alen = a.shape()[static_cast<size_t>(axis)];
    if (start < 0 || len <= 0 || start + len > alen) {
        throw ShapeError("slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of range for axis length " + std::to_string(alen));
    }
    const auto sp = detail::axis_split(a.shape(), axis);
    Shape os = a.shape();
    os[static_cast<size_t>(axis)] = len;
    auto out = Tensor<Real>::zeros(os);
    const auto* src = a.data();
    auto* dst = out.data();
    for (int64_t o = 0; o < sp.outer; ++o) {
        const Real* block = src + (o * sp.len + start) * sp.inner;
        Real* oblock = dst + o * len * sp.inner;
        std::copy(block, block + len * sp.inner, oblock);
    }
    if (detail::should_record<Real>({&a})) {
        auto* tape = g_active_tape<Real>;
        const int64_t na = tape->node_of(a);
        Shape sa = a.shape();
        tape->attach_result(out, {na}, [na, sa, sp, axis, start, len](Tape<Real>& t, const Tensor<Real>& g) {
            auto ga = Tensor<Real>::zeros(sa);
            const auto* pg = g.data();
            auto* po = ga.data();
            for (int64_t o = 0; o < sp.outer; ++o) {
                const Real* gb = pg + o * len * sp.inner;
                Real* ob = po + (o * sp.len + start) * sp.inner;
                for (int64_t i = 0; i < len * sp.inner; ++i) ob[i] += gb[i];
            }
            t.accumulate(na, ga);
        });
    }
    return out;
}

template <class Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts, int64_t axis) {
    if (parts.empty()) throw UsageError("concat of zero tensors");
    const int64_t nd = parts[0].ndim();
    axis = detail::normalize_axis(axis, nd);
    int64_t total = 0;
    for (const auto& p : parts) {
        if (p.ndim() != nd) throw ShapeError("concat rank mismatch");
        for (int64_t d = 0; d < nd; ++d) {
            if (d != axis && p.shape()[static_cast<size_t>(d)] != parts[0].shape()[static_cast<size_t>(d)]) {
                throw ShapeError("concat shape mismatch: " + shape_str(p.shape()) + " vs " +
                                 shape_str(parts[0].shape()));
            }
        }
        total += p.shape()[static_cast<size_t>(axis)];
    }
    Shape os = parts[0].shape();
    os[static_cast<size_t>(axis)] = total;
    auto out = Tensor<Real>::zeros(os);
    const auto sp = detail::axis_split(os, axis);
    auto* dst = out.data();
    int64_t off = 0;
    for (const auto& p : parts) {
        const int64_t plen = p.shape()[static_cast<size_t>(axis)];
        const auto* src = p.data();
        for (int64_t o = 0; o < sp.outer; ++o) {
            std::copy(src + o * plen * sp.inner, src + (o + 1) * plen * sp.inner,
                      dst + (o * sp.len + off) * sp.inner);
        }
        off += plen;
    }
    bool rec = false;
    for (const auto& p : parts) rec = rec || p.requires_grad();
    if (rec && g_active_tape<Real> != nullptr) {
        auto* tape = g_active_tape<Real>;
        std::vector<int64_t> ids;
        std::vector<int64_t> lens;
        for (const auto& p : parts) {
            ids.push_back(p.requires_grad() ? tape->node_of(p) : -1);
            lens.push_back(p.shape()[static_cast<size_t>(axis)]);
        }
        tape->attach_result(out, ids, [ids, lens, axis](Tape<Real>& t, const Tensor<Real>& g) {
            NoGrad<Real> ng;
            int64_t off2 = 0;
            for (size_t i = 0; i < ids.size(); ++i) {
                if (ids[i] >= 0) t.accumulate(ids[i], slice(g, axis, off2, lens[i]));
                off2 += lens[i];
            }
        });
    }
    return out;
}

// out.data[i] = a.data[indices[i]]; backward scatter-adds. The workhorse
// behind patch extraction, token tiling and point gathering.
template <class Real>
Tensor<Real> take(const Tensor<Real>& a, Shape out_shape, const std::vector<int64_t>& indices) {
    if (shape_numel(out_shape) != static_cast<int64_t>(indices.size())) {
        throw ShapeError("take: index count does not match output shape " + shape_str(out_shape));
    }
    const int64_t n_in = a.numel();
    for (int64_t idx : indices) {
        if (idx < 0 || idx >= n_in) throw UsageError("take index " + std::to_string(idx) + " out of range");
    }
    auto out = Tensor<Real>::zeros(std::move(out_shape));
    const auto* src = a.data();
    auto* dst = out.data();
    for (size_t i = 0; i < indices.size(); ++i) dst[i] = src[indices[i]];
    if (detail::should_record<Real>({&a})) {
        auto* tape = g_active_tape<Real>;
        const int64_t na = tape->node_of(a);
        Shape sa = a.shape();
        auto idx_copy = indices;
        tape->attach_result(out, {na}, [na, sa, idx_copy](Tape<Real>& t, const Tensor<Real>& g) {
            auto ga = Tensor<Real>::zeros(sa);
            const auto* pg = g.data();
            auto* po = ga.data();
            for (size_t i = 0; i < idx_copy.size(); ++i) po[idx_copy[i]] += pg[i];
            t.accumulate(na, ga);
        });
    }
    return out;
}

// rows of a 2-D table; gradient scatters into the selected rows only
template <class Real>
Tensor<Real> embedding_rows(const Tensor<Real>& table, const std::vector<int64_t>& ids) {
    if (table.ndim() != 2) throw ShapeError("embedding table must be 2-D, got " + shape_str(table.shape()));
    const int64_t vocab = table.shape()[0];
    const int64_t dim = table.shape()[1];
    for (int64_t id : ids) {
        if (id < 0 || id >= vocab) {
            throw UsageError("embedding id " + std::to_string(id) + " out of range [0," + std::to_string(vocab) + ")");
        }
    }
    auto out = Tensor<Real>::zeros({static_cast<int64_t>(ids.size()), dim});
    const auto* src = table.data();
    auto* dst = out.data();
    for (size_t i = 0; i < ids.size(); ++i) {
        std::copy(src + ids[i] * dim, src + (ids[i] + 1) * dim, dst + static_cast<int64_t>(i) * dim);
    }
    if (detail::should_record<Real>({&table})) {
        auto* tape = g_active_tape<Real>;
        const int64_t nt = tape->node_of(table);
        Shape st = table.shape();
        auto ids_copy = ids;
        tape->attach_result(out, {nt}, [nt, st, ids_copy, dim](Tape<Real>& t, const Tensor<Real>& g) {
            auto gt = Tensor<Real>::zeros(st);
            const auto* pg = g.data();
            auto* po = gt.data();
            for (size_t i = 0; i < ids_copy.size(); ++i) {
                Real* row = po + ids_copy[i] * dim;
                const Real* grow = pg + static_cast<int64_t>(i) * dim;
                for (int64_t d = 0; d < dim; ++d) row[d] += grow[d];
            }
            t.accumulate(nt, gt);
        });
    }
    return out;
}

// ------------------------------------------------------------- matmul

namespace detail {

template <class Real>
using EMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C[batch] = A[batch] * B[batch] with broadcast leading dims, Eigen kernels.
template <class Real>
Tensor<Real> matmul_raw(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.ndim() < 2 || b.ndim() < 2) {
        throw ShapeError("matmul needs rank >= 2: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const int64_t m = a.dim(-2), k = a.dim(-1);
    const int64_t k2 = b.dim(-2), n = b.dim(-1);
    if (k != k2) {
        throw ShapeError("matmul inner dimension mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    Shape abatch(a.shape().begin(), a.shape().end() - 2);
    Shape bbatch(b.shape().begin(), b.shape().end() - 2);
    Shape batch = broadcast_shape(abatch, bbatch);
    Shape os = batch;
    os.push_back(m);
    os.push_back(n);
    auto out = Tensor<Real>::zeros(os);

    const size_t rank = batch.size();
    const auto sa = broadcast_strides(abatch, rank);
    const auto sb = broadcast_strides(bbatch, rank);
    int64_t nbatch = 1;
    for (int64_t d : batch) nbatch *= d;

    std::vector<int64_t> idx(rank, 0);
    int64_t oa = 0, ob = 0;
    const auto* pa = a.data();
    const auto* pb = b.data();
    auto* po = out.data();
    for (int64_t bi = 0; bi < nbatch; ++bi) {
        Eigen::Map<const EMat<Real>> ma(pa + oa * m * k, m, k);
        Eigen::Map<const EMat<Real>> mb(pb + ob * k * n, k, n);
        Eigen::Map<EMat<Real>> mc(po + bi * m * n, m, n);
        mc.noalias() = ma * mb;
        for (int64_t d = static_cast<int64_t>(rank) - 1; d >= 0; --d) {
            idx[static_cast<size_t>(d)]++;
            oa += sa[static_cast<size_t>(d)];
            ob += sb[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < batch[static_cast<size_t>(d)]) break;
            oa -= sa[static_cast<size_t>(d)] * batch[static_cast<size_t>(d)];
            ob -= sb[static_cast<size_t>(d)] * batch[static_cast<size_t>(d)];
            idx[static_cast<size_t>(d)] = 0;
        }
    }
    return out;
}

} // namespace detail

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    auto out = detail::matmul_raw(a, b);
    if (detail::should_record<Real>({&a, &b})) {
        auto* tape = g_active_tape<Real>;
        const int64_t na = a.requires_grad() ? tape->node_of(a) : -1;
        const int64_t nb = b.requires_grad() ? tape->node_of(b) : -1;
        Tensor<Real> av = a, bv = b;
        tape->attach_result(out, {na, nb}, [=](Tape<Real>& t, const Tensor<Real>& g) {
            NoGrad<Real> ng;
            if (na >= 0) {
                auto da = detail::matmul_raw(g, transpose_last2(bv));
                t.accumulate(na, detail::reduce_to_shape(da, av.shape()));
            }
            if (nb >= 0) {
                auto db = detail::matmul_raw(transpose_last2(av), g);
                t.accumulate(nb, detail::reduce_to_shape(db, bv.shape()));
            }
        });
    }
    return out;
}

// ----------------------------------------------------- softmax / layernorm

// numerically stable softmax along axis (max subtraction)
template <class Real>
Tensor<Real> softmax(const Tensor<Real>& a, int64_t axis) {
    axis = detail::normalize_axis(axis, a.ndim());
    const auto sp = detail::axis_split(a.shape(), axis);
    auto out = Tensor<Real>::zeros(a.shape());
    const auto* src = a.data();
    auto* dst = out.data();
    for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t i = 0; i < sp.inner; ++i) {
            const int64_t base = o * sp.len * sp.inner + i;
            Real mx = src[base];
            for (int64_t k = 1; k < sp.len; ++k) mx = std::max(mx, src[base + k * sp.inner]);
            Real denom = Real(0);
            for (int64_t k = 0; k < sp.len; ++k) {
                const Real e = std::exp(src[base + k * sp.inner] - mx);
                dst[base + k * sp.inner] = e;
                denom += e;
            }
            for (int64_t k = 0; k < sp.len; ++k) dst[base + k * sp.inner] /= denom;
        }
    }
    if (detail::should_record<Real>({&a})) {
        auto* tape = g_active_tape<Real>;
        const int64_t na = tape->node_of(a);
        Tensor<Real> y = out;
        tape->attach_result(out, {na}, [na, y, sp](Tape<Real>& t, const Tensor<Real>& g) {
            auto ga = Tensor<Real>::zeros(y.shape());
            const auto* py = y.data();
            const auto* pg = g.data();
            auto* po = ga.data();
            for (int64_t o = 0; o < sp.outer; ++o) {
                for (int64_t i = 0; i < sp.inner; ++i) {
                    const int64_t base = o * sp.len * sp.inner + i;
                    Real dot = Real(0);
                    for (int64_t k = 0; k < sp.len; ++k) dot += pg[base + k * sp.inner] * py[base + k * sp.inner];
                    for (int64_t k = 0; k < sp.len; ++k) {
                        po[base + k * sp.inner] = py[base + k * sp.inner] * (pg[base + k * sp.inner] - dot);
                    }
                }
            }
            t.accumulate(na, ga);
        });
    }
    return out;
}

// zero mean, unit variance per slice (population variance + eps); affine
// parameters are the caller's business
template <class Real>
Tensor<Real> layer_norm(const Tensor<Real>& a, int64_t axis, Real eps) {
    if (eps < Real(0)) throw UsageError("layer_norm eps must be >= 0");
    axis = detail::normalize_axis(axis, a.ndim());
    const auto sp = detail::axis_split(a.shape(), axis);
    auto out = Tensor<Real>::zeros(a.shape());
    std::vector<Real> inv_std(static_cast<size_t>(sp.outer * sp.inner));
    const auto* src = a.data();
    auto* dst = out.data();
    const Real invn = Real(1) / static_cast<Real>(sp.len);
    for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t i = 0; i < sp.inner; ++i) {
            const int64_t base = o * sp.len * sp.inner + i;
            Real mean = Real(0);
            for (int64_t k = 0; k < sp.len; ++k) mean += src[base + k * sp.inner];
            mean *= invn;
            Real var = Real(0);
            for (int64_t k = 0; k < sp.len; ++k) {
                const Real d = src[base + k * sp.inner] - mean;
                var += d * d;
            }
            var *= invn;
            const Real istd = Real(1) / std::sqrt(var + eps);
            inv_std[static_cast<size_t>(o * sp.inner + i)] = istd;
            for (int64_t k = 0; k < sp.len; ++k) {
                dst[base + k * sp.inner] = (src[base + k * sp.inner] - mean) * istd;
            }
        }
    }
    if (detail::should_record<Real>({&a})) {
        auto* tape = g_active_tape<Real>;
        const int64_t na = tape->node_of(a);
        Tensor<Real> y = out;
        tape->attach_result(out, {na}, [na, y, sp, inv_std](Tape<Real>& t, const Tensor<Real>& g) {
            // dx = istd * (g - mean(g) - y * mean(g*y))
            auto ga = Tensor<Real>::zeros(y.shape());
            const auto* py = y.data();
            const auto* pg = g.data();
            auto* po = ga.data();
            const Real invn = Real(1) / static_cast<Real>(sp.len);
            for (int64_t o = 0; o < sp.outer; ++o) {
                for (int64_t i = 0; i < sp.inner; ++i) {
                    const int64_t base = o * sp.len * sp.inner + i;
                    Real gmean = Real(0), gymean = Real(0);
                    for (int64_t k = 0; k < sp.len; ++k) {
                        gmean += pg[base + k * sp.inner];
                        gymean += pg[base + k * sp.inner] * py[base + k * sp.inner];
                    }
                    gmean *= invn;
                    gymean *= invn;
                    const Real istd = inv_std[static_cast<size_t>(o * sp.inner + i)];
                    for (int64_t k = 0; k < sp.len; ++k) {
                        po[base + k * sp.inner] =
                            istd * (pg[base + k * sp.inner] - gmean - py[base + k * sp.inner] * gymean);
                    }
                }
            }
            t.accumulate(na, ga);
        });
    }
    return out;
}

// ------------------------------------------------- causal depthwise conv

// y[b,t,c] = bias[c] + sum_j w[c,j] * x[b,t-j,c], zero padded on the left
template <class Real>
Tensor<Real> causal_depthwise_conv1d(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& bias) {
    if (x.ndim() != 3 || w.ndim() != 2) {
        throw ShapeError("conv expects x[b,L,c], w[c,K]: " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    }
    const int64_t B = x.dim(0), L = x.dim(1), C = x.dim(2), K = w.dim(1);
    if (w.dim(0) != C || bias.numel() != C) throw ShapeError("conv channel mismatch");
    auto out = Tensor<Real>::zeros(x.shape());
    const auto* px = x.data();
    const auto* pw = w.data();
    const auto* pb = bias.data();
    auto* po = out.data();
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t t = 0; t < L; ++t) {
            Real* orow = po + (b * L + t) * C;
            for (int64_t c = 0; c < C; ++c) orow[c] = pb[c];
            const int64_t jmax = std::min<int64_t>(K - 1, t);
            for (int64_t j = 0; j <= jmax; ++j) {
                const Real* xrow = px + (b * L + t - j) * C;
                for (int64_t c = 0; c < C; ++c) orow[c] += pw[c * K + j] * xrow[c];
            }
        }
    }
    if (detail::should_record<Real>({&x, &w, &bias})) {
        auto* tape = g_active_tape<Real>;
        const int64_t nx = x.requires_grad() ? tape->node_of(x) : -1;
        const int64_t nw = w.requires_grad() ? tape->node_of(w) : -1;
        const int64_t nb = bias.requires_grad() ? tape->node_of(bias) : -1;
        Tensor<Real> xv = x, wv = w;
        Shape bias_shape = bias.shape();
        tape->attach_result(out, {nx, nw, nb}, [=](Tape<Real>& t, const Tensor<Real>& g) {
            const auto* pg = g.data();
            if (nx >= 0) {
                auto gx = Tensor<Real>::zeros(xv.shape());
                auto* pgx = gx.data();
                const auto* pwv = wv.data();
                for (int64_t b = 0; b < B; ++b) {
                    for (int64_t t2 = 0; t2 < L; ++t2) {
                        const Real* grow = pg + (b * L + t2) * C;
                        const int64_t jmax = std::min<int64_t>(K - 1, t2);
                        for (int64_t j = 0; j <= jmax; ++j) {
                            Real* xrow = pgx + (b * L + t2 - j) * C;
                            for (int64_t c = 0; c < C; ++c) xrow[c] += pwv[c * K + j] * grow[c];
                        }
                    }
                }
                t.accumulate(nx, gx);
            }
            if (nw >= 0) {
                auto gw = Tensor<Real>::zeros(wv.shape());
                auto* pgw = gw.data();
                const auto* pxv = xv.data();
                for (int64_t b = 0; b < B; ++b) {
                    for (int64_t t2 = 0; t2 < L; ++t2) {
                        const Real* grow = pg + (b * L + t2) * C;
                        const int64_t jmax = std::min<int64_t>(K - 1, t2);
                        for (int64_t j = 0; j <= jmax; ++j) {
                            const Real* xrow = pxv + (b * L + t2 - j) * C;
                            for (int64_t c = 0; c < C; ++c) pgw[c * K + j] += xrow[c] * grow[c];
                        }
                    }
                }
                t.accumulate(nw, gw);
            }
            if (nb >= 0) {
                auto gb = Tensor<Real>::zeros(bias_shape);
                auto* pgb = gb.data();
                for (int64_t b = 0; b < B; ++b) {
                    for (int64_t t2 = 0; t2 < L; ++t2) {
                        const Real* grow = pg + (b * L + t2) * C;
                        for (int64_t c = 0; c < C; ++c) pgb[c] += grow[c];
                    }
                }
                t.accumulate(nb, gb);
            }
        });
    }
    return out;
}

// --------------------------------------------------------- grad check

// max over coordinates of |analytic - central difference| /
// (|analytic| + |cd| + 1e-12); f must be scalar-valued
template <class Real, class F>
double grad_check(F&& f, const Tensor<Real>& x_in, Real h) {
    if (h < Real(1e-6) || h > Real(1e-4)) {
        throw UsageError("grad_check step h must lie in [1e-6, 1e-4]");
    }
    auto x = Tensor<Real>::from(x_in.shape(), x_in.raw());
    x.set_requires_grad(true);
    Tensor<Real> analytic;
    {
        Tape<Real> tape;
        TapeScope<Real> scope(tape);
        auto y = f(x);
        if (y.numel() != 1) throw UsageError("grad_check target must be scalar-valued");
        tape.backward(y);
        analytic = tape.grad(x);
    }
    NoGrad<Real> ng;
    double max_err = 0.0;
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) {
        const Real orig = x.data()[i];
        x.data()[i] = orig + h;
        const double fp = static_cast<double>(f(x).at(0));
        x.data()[i] = orig - h;
        const double fm = static_cast<double>(f(x).at(0));
        x.data()[i] = orig;
        const double cd = (fp - fm) / (2.0 * static_cast<double>(h));
        const double an = static_cast<double>(analytic.at(i));
        if (!std::isfinite(cd) || !std::isfinite(an)) {
            throw NumericError("non-finite value in grad_check");
        }
        const double err = std::abs(an - cd) / (std::abs(an) + std::abs(cd) + 1e-12);
        max_err = std::max(max_err, err);
    }
    return max_err;
}

} // namespace xil
