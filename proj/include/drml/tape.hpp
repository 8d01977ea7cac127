#pragma once

// Reverse-mode differentiation over dense Eigen matrices.
//
// A Tape<Scalar> records matrix-valued nodes in evaluation order; backward()
// sweeps them in reverse and accumulates adjoints. Every primitive is a free
// function templated on the scalar, so the same model code runs on double
// (gradients) and on Dual (gradients plus Hessian-vector products).

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "drml/dual.hpp"

namespace drml::ad {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Thrown when a primitive produces NaN or Inf. `primitive()` names the op.
class NonFiniteError : public std::runtime_error {
public:
    explicit NonFiniteError(std::string primitive)
        : std::runtime_error("non-finite value produced by primitive '" + primitive + "'"),
          primitive_(std::move(primitive)) {}
    const std::string& primitive() const noexcept { return primitive_; }

private:
    std::string primitive_;
};

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

template <typename Scalar>
class Tape;

template <typename Scalar>
struct Var {
    Tape<Scalar>* tape = nullptr;
    std::size_t index = 0;

    const Mat<Scalar>& value() const { return tape->value(index); }
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
};

template <typename Scalar>
class Tape {
public:
    using Matrix = Mat<Scalar>;
    using Backward = std::function<void(Tape&, std::size_t)>;

    Var<Scalar> variable(Matrix v) { return push(std::move(v), true, "variable", nullptr); }
    Var<Scalar> constant(Matrix v) { return push(std::move(v), false, "constant", nullptr); }

    /// Appends a node; rejects non-finite values, naming the primitive.
    Var<Scalar> record(Matrix v, bool needs_grad, const char* primitive, Backward bw) {
        for (Eigen::Index i = 0; i < v.size(); ++i) {
            if (!is_finite(v.data()[i])) throw NonFiniteError(primitive);
        }
        return push(std::move(v), needs_grad, primitive, std::move(bw));
    }

    const Matrix& value(std::size_t i) const { return nodes_[i].value; }
    bool needs_grad(std::size_t i) const { return nodes_[i].needs_grad; }
    bool has_adjoint(std::size_t i) const { return nodes_[i].adjoint.size() != 0; }
    const Matrix& adjoint(std::size_t i) const { return nodes_[i].adjoint; }

    /// Adjoint of `v`, or zeros of the right shape if nothing flowed into it.
    Matrix gradient(Var<Scalar> v) const {
        const auto& n = nodes_[v.index];
        if (n.adjoint.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
        return n.adjoint;
    }

    template <typename Derived>
    void accumulate(std::size_t i, const Eigen::MatrixBase<Derived>& delta) {
        auto& n = nodes_[i];
        if (!n.needs_grad) return;
        if (n.adjoint.size() == 0) {
            n.adjoint = delta;
        } else {
            n.adjoint += delta;
        }
    }

    /// Adds `delta` into rows [offset, offset + delta.rows()) of a column adjoint.
    template <typename Derived>
    void accumulate_rows(std::size_t i, Eigen::Index offset, const Eigen::MatrixBase<Derived>& delta) {
        auto& n = nodes_[i];
        if (!n.needs_grad) return;
        if (n.adjoint.size() == 0) n.adjoint = Matrix::Zero(n.value.rows(), n.value.cols());
        n.adjoint.middleRows(offset, delta.rows()) += delta;
    }

    void backward(Var<Scalar> root) {
        if (root.rows() != 1 || root.cols() != 1) {
            throw ShapeError("backward() requires a 1x1 root");
        }
        for (auto& n : nodes_) n.adjoint.resize(0, 0);
        nodes_[root.index].adjoint = Matrix::Constant(1, 1, Scalar(1.0));
        for (std::size_t i = root.index + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (!n.needs_grad || !n.backward || n.adjoint.size() == 0) continue;
            n.backward(*this, i);
            for (Eigen::Index j = 0; j < n.adjoint.size(); ++j) {
                if (!is_finite(n.adjoint.data()[j])) {
                    throw NonFiniteError(std::string(n.primitive) + " (backward)");
                }
            }
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix adjoint;
        bool needs_grad;
        const char* primitive;
        Backward backward;
    };

    Var<Scalar> push(Matrix v, bool needs_grad, const char* primitive, Backward bw) {
        nodes_.push_back(Node{std::move(v), Matrix(), needs_grad, primitive, std::move(bw)});
        return Var<Scalar>{this, nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise scalar functions. Each provides f, f' and f'' on doubles; the
// lift below carries a Dual tangent through f and f'.

namespace fn {

struct Relu {
    static constexpr const char* name = "relu";
    static double f(double x) { return x > 0.0 ? x : 0.0; }
    static double df(double x) { return x > 0.0 ? 1.0 : 0.0; }  // subgradient 0 at the kink
    static double d2f(double) { return 0.0; }
};

struct Tanh {
    static constexpr const char* name = "tanh";
    static double f(double x) { return std::tanh(x); }
    static double df(double x) {
        const double t = std::tanh(x);
        return 1.0 - t * t;
    }
    static double d2f(double x) {
        const double t = std::tanh(x);
        return -2.0 * t * (1.0 - t * t);
    }
};

struct Square {
    static constexpr const char* name = "square";
    static double f(double x) { return x * x; }
    static double df(double x) { return 2.0 * x; }
    static double d2f(double) { return 2.0; }
};

struct Exp {
    static constexpr const char* name = "exp";
    static double f(double x) { return std::exp(x); }
    static double df(double x) { return std::exp(x); }
    static double d2f(double x) { return std::exp(x); }
};

struct Log {
    static constexpr const char* name = "log";
    static double f(double x) { return std::log(x); }
    static double df(double x) { return 1.0 / x; }
    static double d2f(double x) { return -1.0 / (x * x); }
};

struct Softplus {
    static constexpr const char* name = "softplus";
    static double f(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
    static double df(double x) { return sigmoid(x); }
    static double d2f(double x) {
        const double s = sigmoid(x);
        return s * (1.0 - s);
    }
    static double sigmoid(double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
    }
};

template <class F>
double apply(double x) { return F::f(x); }
template <class F>
Dual apply(const Dual& x) { return {F::f(x.v), F::df(x.v) * x.d}; }

template <class F>
double slope(double x) { return F::df(x); }
template <class F>
Dual slope(const Dual& x) { return {F::df(x.v), F::d2f(x.v) * x.d}; }

}  // namespace fn

// ---------------------------------------------------------------------------
// Primitives

namespace detail {

template <typename Scalar>
void require_same_tape(const Var<Scalar>& a, const Var<Scalar>& b) {
    if (a.tape != b.tape) throw ShapeError("operands recorded on different tapes");
}

template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
    require_same_tape(a, b);
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
    }
}

// Matrix product. Dual operands are split into primal and tangent planes so
// the work runs through the vectorized double kernels:
// (A + eps A')(B + eps B') = AB + eps (A'B + AB').
template <typename DA, typename DB>
auto gemm(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
    using Scalar = typename DA::Scalar;
    if constexpr (std::is_same_v<Scalar, Dual>) {
        const Eigen::MatrixXd av = a.unaryExpr([](const Dual& x) { return x.v; });
        const Eigen::MatrixXd ad = a.unaryExpr([](const Dual& x) { return x.d; });
        const Eigen::MatrixXd bv = b.unaryExpr([](const Dual& x) { return x.v; });
        const Eigen::MatrixXd bd = b.unaryExpr([](const Dual& x) { return x.d; });
        Eigen::MatrixXd cv = av * bv;
        Eigen::MatrixXd cd = ad * bv;
        cd.noalias() += av * bd;
        Mat<Dual> c(cv.rows(), cv.cols());
        for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = Dual(cv.data()[i], cd.data()[i]);
        return c;
    } else {
        Mat<Scalar> c = a * b;
        return c;
    }
}

template <class F, typename Scalar>
Var<Scalar> unary(Var<Scalar> x) {
    auto& t = *x.tape;
    Mat<Scalar> out = x.value().unaryExpr([](const Scalar& s) { return fn::apply<F>(s); });
    return t.record(std::move(out), t.needs_grad(x.index), F::name, [xi = x.index](Tape<Scalar>& tp, std::size_t self) {
        const auto& in = tp.value(xi);
        tp.accumulate(xi, tp.adjoint(self).cwiseProduct(
                              in.unaryExpr([](const Scalar& s) { return fn::slope<F>(s); })));
    });
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> x) { return detail::unary<fn::Relu>(x); }
template <typename Scalar>
Var<Scalar> tanh(Var<Scalar> x) { return detail::unary<fn::Tanh>(x); }
template <typename Scalar>
Var<Scalar> square(Var<Scalar> x) { return detail::unary<fn::Square>(x); }
template <typename Scalar>
Var<Scalar> exp(Var<Scalar> x) { return detail::unary<fn::Exp>(x); }
template <typename Scalar>
Var<Scalar> log(Var<Scalar> x) { return detail::unary<fn::Log>(x); }
template <typename Scalar>
Var<Scalar> softplus(Var<Scalar> x) { return detail::unary<fn::Softplus>(x); }

/// y = x * w + 1 * b, with x (n x in), w (in x out), b (1 x out).
template <typename Scalar>
Var<Scalar> affine(Var<Scalar> x, Var<Scalar> w, Var<Scalar> b) {
    detail::require_same_tape(x, w);
    detail::require_same_tape(x, b);
    if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) {
        throw ShapeError("affine: input has " + std::to_string(x.cols()) + " columns, weight is " +
                         std::to_string(w.rows()) + "x" + std::to_string(w.cols()) + ", bias is " +
                         std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    }
    auto& t = *x.tape;
    Mat<Scalar> out = detail::gemm(x.value(), w.value());
    out.rowwise() += b.value().row(0);
    const bool ng = t.needs_grad(x.index) || t.needs_grad(w.index) || t.needs_grad(b.index);
    return t.record(std::move(out), ng, "affine",
                    [xi = x.index, wi = w.index, bi = b.index](Tape<Scalar>& tp, std::size_t self) {
                        const auto& dy = tp.adjoint(self);
                        if (tp.needs_grad(xi)) tp.accumulate(xi, detail::gemm(dy, tp.value(wi).transpose()));
                        if (tp.needs_grad(wi)) tp.accumulate(wi, detail::gemm(tp.value(xi).transpose(), dy));
                        if (tp.needs_grad(bi)) tp.accumulate(bi, dy.colwise().sum());
                    });
}

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
    detail::require_same_tape(a, b);
    if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
    auto& t = *a.tape;
    Mat<Scalar> out = detail::gemm(a.value(), b.value());
    return t.record(std::move(out), t.needs_grad(a.index) || t.needs_grad(b.index), "matmul",
                    [ai = a.index, bi = b.index](Tape<Scalar>& tp, std::size_t self) {
                        const auto& dy = tp.adjoint(self);
                        if (tp.needs_grad(ai)) tp.accumulate(ai, detail::gemm(dy, tp.value(bi).transpose()));
                        if (tp.needs_grad(bi)) tp.accumulate(bi, detail::gemm(tp.value(ai).transpose(), dy));
                    });
}

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) {
    detail::require_same_shape(a, b, "add");
    auto& t = *a.tape;
    Mat<Scalar> out = a.value() + b.value();
    return t.record(std::move(out), t.needs_grad(a.index) || t.needs_grad(b.index), "add",
                    [ai = a.index, bi = b.index](Tape<Scalar>& tp, std::size_t self) {
                        tp.accumulate(ai, tp.adjoint(self));
                        tp.accumulate(bi, tp.adjoint(self));
                    });
}

template <typename Scalar>
Var<Scalar> operator-(Var<Scalar> a, Var<Scalar> b) {
    detail::require_same_shape(a, b, "sub");
    auto& t = *a.tape;
    Mat<Scalar> out = a.value() - b.value();
    return t.record(std::move(out), t.needs_grad(a.index) || t.needs_grad(b.index), "sub",
                    [ai = a.index, bi = b.index](Tape<Scalar>& tp, std::size_t self) {
                        tp.accumulate(ai, tp.adjoint(self));
                        tp.accumulate(bi, -tp.adjoint(self));
                    });
}

/// Elementwise product.
template <typename Scalar>
Var<Scalar> operator*(Var<Scalar> a, Var<Scalar> b) {
    detail::require_same_shape(a, b, "mul");
    auto& t = *a.tape;
    Mat<Scalar> out = a.value().cwiseProduct(b.value());
    return t.record(std::move(out), t.needs_grad(a.index) || t.needs_grad(b.index), "mul",
                    [ai = a.index, bi = b.index](Tape<Scalar>& tp, std::size_t self) {
                        const auto& dy = tp.adjoint(self);
                        if (tp.needs_grad(ai)) tp.accumulate(ai, dy.cwiseProduct(tp.value(bi)));
                        if (tp.needs_grad(bi)) tp.accumulate(bi, dy.cwiseProduct(tp.value(ai)));
                    });
}

/// Elementwise quotient.
template <typename Scalar>
Var<Scalar> operator/(Var<Scalar> a, Var<Scalar> b) {
    detail::require_same_shape(a, b, "div");
    auto& t = *a.tape;
    Mat<Scalar> out = a.value().cwiseQuotient(b.value());
    return t.record(std::move(out), t.needs_grad(a.index) || t.needs_grad(b.index), "div",
                    [ai = a.index, bi = b.index](Tape<Scalar>& tp, std::size_t self) {
                        const auto& dy = tp.adjoint(self);
                        const auto& den = tp.value(bi);
                        if (tp.needs_grad(ai)) tp.accumulate(ai, dy.cwiseQuotient(den));
                        if (tp.needs_grad(bi)) {
                            tp.accumulate(bi, -dy.cwiseProduct(tp.value(self)).cwiseQuotient(den));
                        }
                    });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> x, double c) {
    auto& t = *x.tape;
    Mat<Scalar> out = x.value() * Scalar(c);
    return t.record(std::move(out), t.needs_grad(x.index), "scale",
                    [xi = x.index, c](Tape<Scalar>& tp, std::size_t self) {
                        tp.accumulate(xi, tp.adjoint(self) * Scalar(c));
                    });
}

template <typename Scalar>
Var<Scalar> shift(Var<Scalar> x, double c) {
    auto& t = *x.tape;
    Mat<Scalar> out = x.value().array() + Scalar(c);
    return t.record(std::move(out), t.needs_grad(x.index), "shift",
                    [xi = x.index](Tape<Scalar>& tp, std::size_t self) {
                        tp.accumulate(xi, tp.adjoint(self));
                    });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> x) {
    auto& t = *x.tape;
    Mat<Scalar> out = Mat<Scalar>::Constant(1, 1, x.value().sum());
    return t.record(std::move(out), t.needs_grad(x.index), "sum",
                    [xi = x.index](Tape<Scalar>& tp, std::size_t self) {
                        const auto& in = tp.value(xi);
                        tp.accumulate(xi, Mat<Scalar>::Constant(in.rows(), in.cols(), tp.adjoint(self)(0, 0)));
                    });
}

template <typename Scalar>
Var<Scalar> mean(Var<Scalar> x) {
    if (x.value().size() == 0) throw ShapeError("mean: empty operand");
    auto& t = *x.tape;
    const double n = static_cast<double>(x.value().size());
    Mat<Scalar> out = Mat<Scalar>::Constant(1, 1, x.value().sum() / Scalar(n));
    return t.record(std::move(out), t.needs_grad(x.index), "mean",
                    [xi = x.index, n](Tape<Scalar>& tp, std::size_t self) {
                        const auto& in = tp.value(xi);
                        tp.accumulate(xi, Mat<Scalar>::Constant(in.rows(), in.cols(), tp.adjoint(self)(0, 0) / Scalar(n)));
                    });
}

/// Column means: (n x c) -> (1 x c). Rows are summed top to bottom.
template <typename Scalar>
Var<Scalar> mean_rows(Var<Scalar> x) {
    if (x.rows() == 0) throw ShapeError("mean_rows: no rows");
    auto& t = *x.tape;
    const double n = static_cast<double>(x.rows());
    Mat<Scalar> out = x.value().colwise().sum() / Scalar(n);
    return t.record(std::move(out), t.needs_grad(x.index), "mean_rows",
                    [xi = x.index, n](Tape<Scalar>& tp, std::size_t self) {
                        const auto rows = tp.value(xi).rows();
                        Mat<Scalar> g = tp.adjoint(self) / Scalar(n);
                        tp.accumulate(xi, g.replicate(rows, 1));
                    });
}

/// Repeats a single row n times: (1 x c) -> (n x c).
template <typename Scalar>
Var<Scalar> tile_rows(Var<Scalar> x, Eigen::Index n) {
    if (x.rows() != 1) throw ShapeError("tile_rows: operand must have one row");
    auto& t = *x.tape;
    Mat<Scalar> out = x.value().replicate(n, 1);
    return t.record(std::move(out), t.needs_grad(x.index), "tile_rows",
                    [xi = x.index](Tape<Scalar>& tp, std::size_t self) {
                        tp.accumulate(xi, tp.adjoint(self).colwise().sum());
                    });
}

template <typename Scalar>
Var<Scalar> hconcat(Var<Scalar> a, Var<Scalar> b) {
    detail::require_same_tape(a, b);
    if (a.rows() != b.rows()) throw ShapeError("hconcat: row counts differ");
    auto& t = *a.tape;
    Mat<Scalar> out(a.rows(), a.cols() + b.cols());
    out << a.value(), b.value();
    return t.record(std::move(out), t.needs_grad(a.index) || t.needs_grad(b.index), "hconcat",
                    [ai = a.index, bi = b.index, ac = a.cols(), bc = b.cols()](Tape<Scalar>& tp,
                                                                              std::size_t self) {
                        const auto& dy = tp.adjoint(self);
                        tp.accumulate(ai, dy.leftCols(ac));
                        tp.accumulate(bi, dy.rightCols(bc));
                    });
}

template <typename Scalar>
Var<Scalar> column(Var<Scalar> x, Eigen::Index j) {
    if (j < 0 || j >= x.cols()) throw ShapeError("column: index out of range");
    auto& t = *x.tape;
    Mat<Scalar> out = x.value().col(j);
    return t.record(std::move(out), t.needs_grad(x.index), "column",
                    [xi = x.index, j](Tape<Scalar>& tp, std::size_t self) {
                        const auto& in = tp.value(xi);
                        Mat<Scalar> g = Mat<Scalar>::Zero(in.rows(), in.cols());
                        g.col(j) = tp.adjoint(self);
                        tp.accumulate(xi, g);
                    });
}

/// Views `rows*cols` consecutive entries of a column vector, starting at
/// `offset`, as a column-major (rows x cols) matrix.
template <typename Scalar>
Var<Scalar> slice(Var<Scalar> vec, Eigen::Index offset, Eigen::Index rows, Eigen::Index cols) {
    if (vec.cols() != 1) throw ShapeError("slice: operand must be a column vector");
    if (offset < 0 || offset + rows * cols > vec.rows()) throw ShapeError("slice: range out of bounds");
    auto& t = *vec.tape;
    Mat<Scalar> out = Eigen::Map<const Mat<Scalar>>(vec.value().data() + offset, rows, cols);
    return t.record(std::move(out), t.needs_grad(vec.index), "slice",
                    [vi = vec.index, offset, rows, cols](Tape<Scalar>& tp, std::size_t self) {
                        tp.accumulate_rows(vi, offset,
                                           Eigen::Map<const Mat<Scalar>>(tp.adjoint(self).data(), rows * cols, 1));
                    });
}

}  // namespace drml::ad
