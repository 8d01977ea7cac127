#pragma once

// Gradients and one-step meta-gradients of scalar losses built on the tape.

#include <functional>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

#include "drml/params.hpp"
#include "drml/tape.hpp"

namespace drml::diff {

/// A scalar-valued loss of a flat parameter column vector.
///
/// Built from a generic callable `(auto& tape, auto theta) -> Var`, which is
/// instantiated for both double and Dual scalars so the same definition serves
/// first- and second-order derivatives.
class ScalarFn {
public:
    using RealFn = std::function<ad::Var<double>(ad::Tape<double>&, ad::Var<double>)>;
    using DualFn = std::function<ad::Var<ad::Dual>(ad::Tape<ad::Dual>&, ad::Var<ad::Dual>)>;

    ScalarFn() = default;

    template <class F>
    explicit ScalarFn(F f) : real_(f), dual_(f) {}

    ad::Var<double> operator()(ad::Tape<double>& t, ad::Var<double> theta) const { return real_(t, theta); }
    ad::Var<ad::Dual> operator()(ad::Tape<ad::Dual>& t, ad::Var<ad::Dual> theta) const {
        return dual_(t, theta);
    }

    explicit operator bool() const { return static_cast<bool>(real_); }

private:
    RealFn real_;
    DualFn dual_;
};

enum class GradientMode { exact, first_order };

GradientMode parse_gradient_mode(const std::string& s);
std::string to_string(GradientMode m);

/// Raised when an inner adaptation step leaves the finite range.
class AdaptationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ValueAndGrad {
    double value = 0.0;
    GradVector grad;
};

struct MetaGradient {
    GradVector grad;
    ParamVector adapted;
    double outer_value = 0.0;
};

/// Loss value without recording backward information.
double value(const ScalarFn& loss, const ParamVector& params);

/// Exact reverse-mode gradient.
ValueAndGrad gradient(const ScalarFn& loss, const ParamVector& params);

/// H(params) * direction, via forward-over-reverse.
Eigen::VectorXd hessian_vector(const ScalarFn& loss, const ParamVector& params,
                               const Eigen::VectorXd& direction);

/// params - inner_lr * grad inner(params).
ParamVector adapt(const ScalarFn& inner_loss, const ParamVector& params, double inner_lr);

/// Derivative of outer(adapt(params)) with respect to params.
///
/// exact:       (I - inner_lr * H_inner(params)) * grad outer(adapted)
/// first_order: grad outer(adapted)
MetaGradient meta_gradient(const ScalarFn& inner_loss, const ScalarFn& outer_loss, const ParamVector& params,
                           double inner_lr, GradientMode mode);

/// Same as meta_gradient but reuses a precomputed adapted point.
MetaGradient meta_gradient_at(const ScalarFn& inner_loss, const ScalarFn& outer_loss, const ParamVector& params,
                              const ParamVector& adapted, double inner_lr, GradientMode mode);

}  // namespace drml::diff
