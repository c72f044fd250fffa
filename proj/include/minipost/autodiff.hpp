#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace minipost {

template <typename Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VecX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

// A named trainable tensor. Gradients accumulate here across backward
// passes until zero_grad(); the optimizer consumes them in place.
template <typename Scalar>
struct Parameter {
    std::string name;
    MatX<Scalar> data;
    MatX<Scalar> grad;

    Parameter() = default;
    Parameter(std::string n, MatX<Scalar> init)
        : name(std::move(n)), data(std::move(init)),
          grad(MatX<Scalar>::Zero(data.rows(), data.cols())) {}

    void zero_grad() { grad.setZero(); }
    Eigen::Index size() const { return data.size(); }
};

template <typename Scalar>
class Tape;

// Lightweight handle to a node on a tape.
template <typename Scalar>
class Value {
public:
    Value() = default;

    const MatX<Scalar>& data() const;
    MatX<Scalar> grad() const;  // zeros if the node was never reached
    Scalar scalar() const;      // requires a 1x1 value
    Eigen::Index rows() const { return data().rows(); }
    Eigen::Index cols() const { return data().cols(); }
    bool valid() const { return tape_ != nullptr; }
    Tape<Scalar>* tape() const { return tape_; }
    int id() const { return id_; }

private:
    friend class Tape<Scalar>;
    Value(Tape<Scalar>* t, int id) : tape_(t), id_(id) {}
    Tape<Scalar>* tape_ = nullptr;
    int id_ = -1;
};

// Reverse-mode tape. Operations append nodes in evaluation order, which is
// a topological order by construction; backward() walks the list in
// reverse. One tape per training step, single-threaded; independent tapes
// may run on parallel threads.
//
// Gradient semantics: repeated backward() calls accumulate (no implicit
// zeroing). Only ancestors reachable from the root receive gradient; a
// leaf never propagates further. Parameter leaves accumulate directly into
// the Parameter's persistent grad buffer.
template <typename Scalar>
class Tape {
public:
    using Mat = MatX<Scalar>;
    using BackwardFn = std::function<void(Tape&, int)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Value<Scalar> constant(Mat v) {
        return push(std::move(v), false, nullptr, nullptr);
    }

    Value<Scalar> constant_scalar(Scalar s) {
        Mat m(1, 1);
        m(0, 0) = s;
        return constant(std::move(m));
    }

    Value<Scalar> param(Parameter<Scalar>& p) {
        return push(p.data, true, &p.grad, nullptr);
    }

    // Raw node-creation hook for fused operations defined in other modules.
    // `backward` receives the tape and the id of the created node.
    Value<Scalar> make_node(Mat value, bool requires_grad, BackwardFn backward) {
        return push(std::move(value), requires_grad, nullptr, std::move(backward));
    }

    // Node-local gradients are recomputed per pass; gradients of Parameter
    // leaves accumulate across passes (callers zero them explicitly), which
    // is what "repeated backward calls accumulate" means.
    void backward(Value<Scalar> root) {
        check_handle(root);
        const Node& r = nodes_[static_cast<std::size_t>(root.id())];
        if (r.value.rows() != 1 || r.value.cols() != 1) {
            throw std::invalid_argument(
                "backward: root must be a scalar, got " + shape_str(r.value));
        }
        for (int id = 0; id <= root.id(); ++id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.external_grad) {
                n.grad_touched = false;
            }
        }
        grad_buf(root.id())(0, 0) += Scalar(1);
        for (int id = root.id(); id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (n.backward && n.grad_touched && n.requires_grad) {
                n.backward(*this, id);
            }
        }
    }

    std::size_t size() const { return nodes_.size(); }

    const Mat& value_of(int id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }

    bool requires_grad(int id) const {
        return nodes_.at(static_cast<std::size_t>(id)).requires_grad;
    }

    // Gradient accumulation target; allocates zeros on first touch. For
    // parameter leaves this is the external persistent buffer.
    Mat& grad_buf(int id) {
        Node& n = nodes_.at(static_cast<std::size_t>(id));
        if (n.external_grad) {
            n.grad_touched = true;
            return *n.external_grad;
        }
        if (!n.grad_touched) {
            n.grad.setZero(n.value.rows(), n.value.cols());
            n.grad_touched = true;
        }
        return n.grad;
    }

    bool grad_touched(int id) const {
        return nodes_.at(static_cast<std::size_t>(id)).grad_touched;
    }

    Mat grad_of(int id) const {
        const Node& n = nodes_.at(static_cast<std::size_t>(id));
        if (n.external_grad) {
            return *n.external_grad;
        }
        if (!n.grad_touched) {
            return Mat::Zero(n.value.rows(), n.value.cols());
        }
        return n.grad;
    }

    void check_handle(const Value<Scalar>& v) const {
        if (v.tape() != this || v.id() < 0 ||
            static_cast<std::size_t>(v.id()) >= nodes_.size()) {
            throw std::invalid_argument("Value does not belong to this tape");
        }
    }

    static std::string shape_str(const Mat& m) {
        return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
    }

private:
    struct Node {
        Mat value;
        Mat grad;
        Mat* external_grad = nullptr;
        BackwardFn backward;
        bool requires_grad = false;
        bool grad_touched = false;
    };

    Value<Scalar> push(Mat value, bool requires_grad, Mat* external_grad,
                       BackwardFn backward) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        n.external_grad = external_grad;
        n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Value<Scalar>(this, static_cast<int>(nodes_.size()) - 1);
    }

    std::vector<Node> nodes_;
};

template <typename Scalar>
const MatX<Scalar>& Value<Scalar>::data() const {
    if (!tape_) {
        throw std::logic_error("Value: empty handle");
    }
    return tape_->value_of(id_);
}

template <typename Scalar>
MatX<Scalar> Value<Scalar>::grad() const {
    if (!tape_) {
        throw std::logic_error("Value: empty handle");
    }
    return tape_->grad_of(id_);
}

template <typename Scalar>
Scalar Value<Scalar>::scalar() const {
    const auto& d = data();
    if (d.rows() != 1 || d.cols() != 1) {
        throw std::invalid_argument("Value::scalar: shape is " +
                                    Tape<Scalar>::shape_str(d) + ", want 1x1");
    }
    return d(0, 0);
}

// ---------------------------------------------------------------------------
// operations
// ---------------------------------------------------------------------------

namespace detail {

template <typename Scalar>
Tape<Scalar>& same_tape(const Value<Scalar>& a, const Value<Scalar>& b) {
    a.tape()->check_handle(a);
    a.tape()->check_handle(b);
    return *a.tape();
}

template <typename Scalar>
void require_same_shape(const Value<Scalar>& a, const Value<Scalar>& b,
                        const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument(
            std::string(op) + ": shape mismatch " +
            Tape<Scalar>::shape_str(a.data()) + " vs " +
            Tape<Scalar>::shape_str(b.data()));
    }
}

}  // namespace detail

template <typename Scalar>
Value<Scalar> add(Value<Scalar> a, Value<Scalar> b) {
    auto& t = detail::same_tape(a, b);
    detail::require_same_shape(a, b, "add");
    const int ia = a.id(), ib = b.id();
    const bool rg = t.requires_grad(ia) || t.requires_grad(ib);
    return t.make_node(a.data() + b.data(), rg, [ia, ib](Tape<Scalar>& t, int self) {
        const auto& g = t.grad_buf(self);
        if (t.requires_grad(ia)) t.grad_buf(ia) += g;
        if (t.requires_grad(ib)) t.grad_buf(ib) += g;
    });
}

template <typename Scalar>
Value<Scalar> sub(Value<Scalar> a, Value<Scalar> b) {
    auto& t = detail::same_tape(a, b);
    detail::require_same_shape(a, b, "sub");
    const int ia = a.id(), ib = b.id();
    const bool rg = t.requires_grad(ia) || t.requires_grad(ib);
    return t.make_node(a.data() - b.data(), rg, [ia, ib](Tape<Scalar>& t, int self) {
        const auto& g = t.grad_buf(self);
        if (t.requires_grad(ia)) t.grad_buf(ia) += g;
        if (t.requires_grad(ib)) t.grad_buf(ib) -= g;
    });
}

template <typename Scalar>
Value<Scalar> operator+(Value<Scalar> a, Value<Scalar> b) { return add(a, b); }
template <typename Scalar>
Value<Scalar> operator-(Value<Scalar> a, Value<Scalar> b) { return sub(a, b); }

// Matrix product; `operator*` follows the Eigen convention.
template <typename Scalar>
Value<Scalar> matmul(Value<Scalar> a, Value<Scalar> b) {
    auto& t = detail::same_tape(a, b);
    if (a.cols() != b.rows()) {
        throw std::invalid_argument(
            "matmul: inner dimensions disagree, " +
            Tape<Scalar>::shape_str(a.data()) + " * " +
            Tape<Scalar>::shape_str(b.data()));
    }
    const int ia = a.id(), ib = b.id();
    const bool rg = t.requires_grad(ia) || t.requires_grad(ib);
    return t.make_node(a.data() * b.data(), rg, [ia, ib](Tape<Scalar>& t, int self) {
        const auto& g = t.grad_buf(self);
        if (t.requires_grad(ia)) {
            t.grad_buf(ia).noalias() += g * t.value_of(ib).transpose();
        }
        if (t.requires_grad(ib)) {
            t.grad_buf(ib).noalias() += t.value_of(ia).transpose() * g;
        }
    });
}

template <typename Scalar>
Value<Scalar> operator*(Value<Scalar> a, Value<Scalar> b) { return matmul(a, b); }

// a * b^T without materializing a transpose node (attention scores).
template <typename Scalar>
Value<Scalar> matmul_nt(Value<Scalar> a, Value<Scalar> b) {
    auto& t = detail::same_tape(a, b);
    if (a.cols() != b.cols()) {
        throw std::invalid_argument(
            "matmul_nt: inner dimensions disagree, " +
            Tape<Scalar>::shape_str(a.data()) + " * " +
            Tape<Scalar>::shape_str(b.data()) + "^T");
    }
    const int ia = a.id(), ib = b.id();
    const bool rg = t.requires_grad(ia) || t.requires_grad(ib);
    return t.make_node(a.data() * b.data().transpose(), rg,
                       [ia, ib](Tape<Scalar>& t, int self) {
        const auto& g = t.grad_buf(self);
        if (t.requires_grad(ia)) {
            t.grad_buf(ia).noalias() += g * t.value_of(ib);
        }
        if (t.requires_grad(ib)) {
            t.grad_buf(ib).noalias() += g.transpose() * t.value_of(ia);
        }
    });
}

template <typename Scalar>
Value<Scalar> cwise_mul(Value<Scalar> a, Value<Scalar> b) {
    auto& t = detail::same_tape(a, b);
    detail::require_same_shape(a, b, "cwise_mul");
    const int ia = a.id(), ib = b.id();
    const bool rg = t.requires_grad(ia) || t.requires_grad(ib);
    return t.make_node(a.data().cwiseProduct(b.data()), rg,
                       [ia, ib](Tape<Scalar>& t, int self) {
        const auto& g = t.grad_buf(self);
        if (t.requires_grad(ia)) {
            t.grad_buf(ia).array() += g.array() * t.value_of(ib).array();
        }
        if (t.requires_grad(ib)) {
            t.grad_buf(ib).array() += g.array() * t.value_of(ia).array();
        }
    });
}

template <typename Scalar>
Value<Scalar> scale(Value<Scalar> a, Scalar alpha) {
    auto& t = *a.tape();
    t.check_handle(a);
    const int ia = a.id();
    return t.make_node(a.data() * alpha, t.requires_grad(ia),
                       [ia, alpha](Tape<Scalar>& t, int self) {
        t.grad_buf(ia) += t.grad_buf(self) * alpha;
    });
}

// X + broadcast row vector (bias over rows).
template <typename Scalar>
Value<Scalar> add_rowvec(Value<Scalar> x, Value<Scalar> b) {
    auto& t = detail::same_tape(x, b);
    if (b.rows() != 1 || b.cols() != x.cols()) {
        throw std::invalid_argument("add_rowvec: bias must be 1x" +
                                    std::to_string(x.cols()));
    }
    const int ix = x.id(), ib = b.id();
    const bool rg = t.requires_grad(ix) || t.requires_grad(ib);
    MatX<Scalar> out = x.data();
    out.rowwise() += b.data().row(0);
    return t.make_node(std::move(out), rg, [ix, ib](Tape<Scalar>& t, int self) {
        const auto& g = t.grad_buf(self);
        if (t.requires_grad(ix)) t.grad_buf(ix) += g;
        if (t.requires_grad(ib)) t.grad_buf(ib) += g.colwise().sum();
    });
}

// X with each row scaled elementwise by a learned row vector (norm gain).
template <typename Scalar>
Value<Scalar> mul_rowvec(Value<Scalar> x, Value<Scalar> w) {
    auto& t = detail::same_tape(x, w);
    if (w.rows() != 1 || w.cols() != x.cols()) {
        throw std::invalid_argument("mul_rowvec: gain must be 1x" +
                                    std::to_string(x.cols()));
    }
    const int ix = x.id(), iw = w.id();
    const bool rg = t.requires_grad(ix) || t.requires_grad(iw);
    MatX<Scalar> out = x.data().array().rowwise() * w.data().row(0).array();
    return t.make_node(std::move(out), rg, [ix, iw](Tape<Scalar>& t, int self) {
        const auto& g = t.grad_buf(self);
        if (t.requires_grad(ix)) {
            t.grad_buf(ix).array() +=
                g.array().rowwise() * t.value_of(iw).row(0).array();
        }
        if (t.requires_grad(iw)) {
            t.grad_buf(iw) += (g.array() * t.value_of(ix).array()).colwise().sum().matrix();
        }
    });
}

// Row gather (embedding lookup); repeated ids accumulate on backward.
template <typename Scalar>
Value<Scalar> gather_rows(Value<Scalar> table, std::vector<int> ids) {
    auto& t = *table.tape();
    t.check_handle(table);
    const auto& tb = table.data();
    for (int id : ids) {
        if (id < 0 || id >= tb.rows()) {
            throw std::invalid_argument("gather_rows: row index " +
                                        std::to_string(id) + " out of range [0, " +
                                        std::to_string(tb.rows()) + ")");
        }
    }
    MatX<Scalar> out(static_cast<Eigen::Index>(ids.size()), tb.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        out.row(static_cast<Eigen::Index>(i)) = tb.row(ids[i]);
    }
    const int it = table.id();
    return t.make_node(std::move(out), t.requires_grad(it),
                       [it, ids = std::move(ids)](Tape<Scalar>& t, int self) {
        const auto& g = t.grad_buf(self);
        auto& gt = t.grad_buf(it);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            gt.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
        }
    });
}

// Root-mean-square normalization per row, no learned gain (pair with
// mul_rowvec for the gain).
template <typename Scalar>
Value<Scalar> rms_norm(Value<Scalar> x, Scalar eps = Scalar(1e-5)) {
    auto& t = *x.tape();
    t.check_handle(x);
    const auto& xd = x.data();
    const Eigen::Index d = xd.cols();
    VecX<Scalar> inv_rms =
        ((xd.array().square().rowwise().sum() / Scalar(d)) + eps)
            .rsqrt()
            .matrix();
    MatX<Scalar> out = xd.array().colwise() * inv_rms.array();
    const int ix = x.id();
    return t.make_node(std::move(out), t.requires_grad(ix),
                       [ix, inv_rms = std::move(inv_rms)](Tape<Scalar>& t, int self) {
        const auto& g = t.grad_buf(self);
        const auto& xd = t.value_of(ix);
        const Scalar d = static_cast<Scalar>(xd.cols());
        // dx = r*g - x * (sum(g.x) * r^3 / d) per row
        VecX<Scalar> dot = (g.array() * xd.array()).rowwise().sum().matrix();
        VecX<Scalar> coef =
            (dot.array() * inv_rms.array().cube() / d).matrix();
        t.grad_buf(ix).array() += g.array().colwise() * inv_rms.array() -
                                  xd.array().colwise() * coef.array();
    });
}

// Gaussian error linear unit, tanh approximation.
template <typename Scalar>
Value<Scalar> gelu(Value<Scalar> x) {
    auto& t = *x.tape();
    t.check_handle(x);
    constexpr Scalar k = Scalar(0.7978845608028654);  // sqrt(2/pi)
    constexpr Scalar c = Scalar(0.044715);
    const auto& xd = x.data().array();
    MatX<Scalar> out =
        (Scalar(0.5) * xd * (Scalar(1) + (k * (xd + c * xd.cube())).tanh()))
            .matrix();
    const int ix = x.id();
    return t.make_node(std::move(out), t.requires_grad(ix),
                       [ix](Tape<Scalar>& t, int self) {
        const auto& g = t.grad_buf(self).array();
        const auto& xd = t.value_of(ix).array();
        constexpr Scalar k = Scalar(0.7978845608028654);
        constexpr Scalar c = Scalar(0.044715);
        auto u = k * (xd + c * xd.cube());
        auto th = u.tanh();
        auto sech2 = Scalar(1) - th.square();
        auto dudx = k * (Scalar(1) + Scalar(3) * c * xd.square());
        t.grad_buf(ix).array() +=
            g * (Scalar(0.5) * (Scalar(1) + th) +
                 Scalar(0.5) * xd * sech2 * dudx);
    });
}

// Softmax over each row restricted to columns <= row index. Columns beyond
// the diagonal hold exact zeros, so position t is a function of positions
// <= t only; this is what makes prefix logits bit-stable under suffix
// edits.
template <typename Scalar>
Value<Scalar> causal_row_softmax(Value<Scalar> scores) {
    auto& t = *scores.tape();
    t.check_handle(scores);
    const auto& s = scores.data();
    if (s.rows() != s.cols()) {
        throw std::invalid_argument("causal_row_softmax: scores must be square, got " +
                                    Tape<Scalar>::shape_str(s));
    }
    const Eigen::Index n = s.rows();
    MatX<Scalar> p = MatX<Scalar>::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Index w = i + 1;
        const Scalar m = s.row(i).head(w).maxCoeff();
        RowX<Scalar> e = (s.row(i).head(w).array() - m).exp().matrix();
        p.row(i).head(w) = e / e.sum();
    }
    const int is = scores.id();
    return t.make_node(std::move(p), t.requires_grad(is),
                       [is](Tape<Scalar>& t, int self) {
        const auto& g = t.grad_buf(self);
        const auto& p = t.value_of(self);
        auto& gs = t.grad_buf(is);
        const Eigen::Index n = p.rows();
        for (Eigen::Index i = 0; i < n; ++i) {
            const Eigen::Index w = i + 1;
            const Scalar dot = g.row(i).head(w).cwiseProduct(p.row(i).head(w)).sum();
            gs.row(i).head(w).array() +=
                p.row(i).head(w).array() * (g.row(i).head(w).array() - dot);
        }
    });
}

// Numerically stable row-wise log-softmax (max subtraction). Rejects
// non-finite inputs; for finite inputs the outputs are always finite.
template <typename Scalar>
Value<Scalar> log_softmax(Value<Scalar> logits) {
    auto& t = *logits.tape();
    t.check_handle(logits);
    const auto& z = logits.data();
    if (!z.allFinite()) {
        throw std::invalid_argument("log_softmax: input contains NaN or Inf");
    }
    MatX<Scalar> out(z.rows(), z.cols());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const Scalar m = z.row(i).maxCoeff();
        RowX<Scalar> shifted = z.row(i).array() - m;
        const Scalar lse = std::log(shifted.array().exp().sum());
        out.row(i) = shifted.array() - lse;
    }
    const int iz = logits.id();
    return t.make_node(std::move(out), t.requires_grad(iz),
                       [iz](Tape<Scalar>& t, int self) {
        const auto& g = t.grad_buf(self);
        const auto& ls = t.value_of(self);
        auto& gz = t.grad_buf(iz);
        for (Eigen::Index i = 0; i < ls.rows(); ++i) {
            const Scalar gsum = g.row(i).sum();
            gz.row(i).array() +=
                g.row(i).array() - ls.row(i).array().exp() * gsum;
        }
    });
}

// out[t, 0] = x(t, ids[t]) — picks one column per row (token log-probs).
template <typename Scalar>
Value<Scalar> gather_positions(Value<Scalar> x, std::vector<int> ids) {
    auto& t = *x.tape();
    t.check_handle(x);
    const auto& xd = x.data();
    if (static_cast<Eigen::Index>(ids.size()) != xd.rows()) {
        throw std::invalid_argument("gather_positions: need one index per row");
    }
    MatX<Scalar> out(xd.rows(), 1);
    for (Eigen::Index i = 0; i < xd.rows(); ++i) {
        const int j = ids[static_cast<std::size_t>(i)];
        if (j < 0 || j >= xd.cols()) {
            throw std::invalid_argument("gather_positions: column index " +
                                        std::to_string(j) + " out of range");
        }
        out(i, 0) = xd(i, j);
    }
    const int ix = x.id();
    return t.make_node(std::move(out), t.requires_grad(ix),
                       [ix, ids = std::move(ids)](Tape<Scalar>& t, int self) {
        const auto& g = t.grad_buf(self);
        auto& gx = t.grad_buf(ix);
        for (Eigen::Index i = 0; i < g.rows(); ++i) {
            gx(i, ids[static_cast<std::size_t>(i)]) += g(i, 0);
        }
    });
}

template <typename Scalar>
Value<Scalar> vexp(Value<Scalar> x) {
    auto& t = *x.tape();
    t.check_handle(x);
    MatX<Scalar> out = x.data().array().exp().matrix();
    const int ix = x.id();
    return t.make_node(std::move(out), t.requires_grad(ix),
                       [ix](Tape<Scalar>& t, int self) {
        t.grad_buf(ix).array() +=
            t.grad_buf(self).array() * t.value_of(self).array();
    });
}

// Elementwise clamp to [lo, hi]; gradient passes only strictly inside the
// interval (saturated entries contribute zero).
template <typename Scalar>
Value<Scalar> clamp(Value<Scalar> x, Scalar lo, Scalar hi) {
    auto& t = *x.tape();
    t.check_handle(x);
    MatX<Scalar> out = x.data().cwiseMax(lo).cwiseMin(hi);
    const int ix = x.id();
    return t.make_node(std::move(out), t.requires_grad(ix),
                       [ix, lo, hi](Tape<Scalar>& t, int self) {
        const auto& g = t.grad_buf(self).array();
        const auto& xd = t.value_of(ix).array();
        auto inside = (xd > lo && xd < hi).template cast<Scalar>();
        t.grad_buf(ix).array() += g * inside;
    });
}

// Elementwise minimum; ties route gradient to the first argument, so the
// on-policy case (both branches equal) behaves like the unclipped branch.
template <typename Scalar>
Value<Scalar> minimum(Value<Scalar> a, Value<Scalar> b) {
    auto& t = detail::same_tape(a, b);
    detail::require_same_shape(a, b, "minimum");
    const int ia = a.id(), ib = b.id();
    const bool rg = t.requires_grad(ia) || t.requires_grad(ib);
    return t.make_node(a.data().cwiseMin(b.data()), rg,
                       [ia, ib](Tape<Scalar>& t, int self) {
        const auto& g = t.grad_buf(self).array();
        const auto& ad = t.value_of(ia).array();
        const auto& bd = t.value_of(ib).array();
        auto take_a = (ad <= bd).template cast<Scalar>();
        if (t.requires_grad(ia)) t.grad_buf(ia).array() += g * take_a;
        if (t.requires_grad(ib)) t.grad_buf(ib).array() += g * (Scalar(1) - take_a);
    });
}

// Scalar-valued linear functional sum(C .* x) for a constant C.
template <typename Scalar>
Value<Scalar> dot_const(Value<Scalar> x, MatX<Scalar> c) {
    auto& t = *x.tape();
    t.check_handle(x);
    if (c.rows() != x.rows() || c.cols() != x.cols()) {
        throw std::invalid_argument("dot_const: coefficient shape mismatch");
    }
    MatX<Scalar> out(1, 1);
    out(0, 0) = (x.data().array() * c.array()).sum();
    const int ix = x.id();
    return t.make_node(std::move(out), t.requires_grad(ix),
                       [ix, c = std::move(c)](Tape<Scalar>& t, int self) {
        t.grad_buf(ix) += t.grad_buf(self)(0, 0) * c;
    });
}

template <typename Scalar>
Value<Scalar> sum(Value<Scalar> x) {
    auto& t = *x.tape();
    t.check_handle(x);
    MatX<Scalar> out(1, 1);
    out(0, 0) = x.data().sum();
    const int ix = x.id();
    return t.make_node(std::move(out), t.requires_grad(ix),
                       [ix](Tape<Scalar>& t, int self) {
        t.grad_buf(ix).array() += t.grad_buf(self)(0, 0);
    });
}

template <typename Scalar>
Value<Scalar> add_const(Value<Scalar> x, MatX<Scalar> c) {
    auto& t = *x.tape();
    t.check_handle(x);
    if (c.rows() != x.rows() || c.cols() != x.cols()) {
        throw std::invalid_argument("add_const: shape mismatch");
    }
    const int ix = x.id();
    return t.make_node(x.data() + c, t.requires_grad(ix),
                       [ix](Tape<Scalar>& t, int self) {
        t.grad_buf(ix) += t.grad_buf(self);
    });
}

enum class Reduction { kMean, kSum };

// Masked token-level cross entropy against integer targets. Positions with
// mask 0 are skipped entirely: they contribute no loss and receive exactly
// zero gradient, and their target ids are never read. An all-zero mask
// yields loss 0 (padding-only tails are legal inputs).
template <typename Scalar>
Value<Scalar> cross_entropy(Value<Scalar> logits, std::vector<int> targets,
                            std::vector<std::uint8_t> mask,
                            Reduction reduction = Reduction::kMean) {
    auto& t = *logits.tape();
    t.check_handle(logits);
    const auto& z = logits.data();
    const auto rows = z.rows();
    if (static_cast<Eigen::Index>(targets.size()) != rows ||
        static_cast<Eigen::Index>(mask.size()) != rows) {
        throw std::invalid_argument(
            "cross_entropy: targets/mask must have one entry per row");
    }
    if (!z.allFinite()) {
        throw std::invalid_argument("cross_entropy: logits contain NaN or Inf");
    }
    Eigen::Index active = 0;
    for (Eigen::Index i = 0; i < rows; ++i) {
        if (!mask[static_cast<std::size_t>(i)]) continue;
        const int y = targets[static_cast<std::size_t>(i)];
        if (y < 0 || y >= z.cols()) {
            throw std::invalid_argument("cross_entropy: target id " +
                                        std::to_string(y) + " out of range [0, " +
                                        std::to_string(z.cols()) + ")");
        }
        ++active;
    }
    // log-probs for masked rows only
    MatX<Scalar> ls = MatX<Scalar>::Zero(rows, z.cols());
    Scalar total = Scalar(0);
    for (Eigen::Index i = 0; i < rows; ++i) {
        if (!mask[static_cast<std::size_t>(i)]) continue;
        const Scalar m = z.row(i).maxCoeff();
        RowX<Scalar> shifted = z.row(i).array() - m;
        const Scalar lse = std::log(shifted.array().exp().sum());
        ls.row(i) = shifted.array() - lse;
        total -= ls(i, targets[static_cast<std::size_t>(i)]);
    }
    const Scalar denom =
        (reduction == Reduction::kMean && active > 0) ? Scalar(active) : Scalar(1);
    MatX<Scalar> out(1, 1);
    out(0, 0) = (active == 0) ? Scalar(0) : total / denom;
    const int iz = logits.id();
    return t.make_node(
        std::move(out), t.requires_grad(iz),
        [iz, targets = std::move(targets), mask = std::move(mask),
         ls = std::move(ls), denom](Tape<Scalar>& t, int self) {
            const Scalar g = t.grad_buf(self)(0, 0) / denom;
            auto& gz = t.grad_buf(iz);
            for (Eigen::Index i = 0; i < gz.rows(); ++i) {
                if (!mask[static_cast<std::size_t>(i)]) continue;
                gz.row(i).array() += g * ls.row(i).array().exp();
                gz(i, targets[static_cast<std::size_t>(i)]) -= g;
            }
        });
}

// Number of mask-active rows, exposed for callers combining sum-reduced
// cross entropies into an exact batch token mean.
inline std::size_t mask_active_count(std::span<const std::uint8_t> mask) {
    std::size_t n = 0;
    for (auto m : mask) n += (m != 0);
    return n;
}

}  // namespace minipost
