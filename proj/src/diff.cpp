#include "drml/diff.hpp"

namespace drml::diff {

GradientMode parse_gradient_mode(const std::string& s) {
    if (s == "exact") return GradientMode::exact;
    if (s == "first_order") return GradientMode::first_order;
    throw std::invalid_argument("unknown gradient mode '" + s + "' (expected exact or first_order)");
}

std::string to_string(GradientMode m) { return m == GradientMode::exact ? "exact" : "first_order"; }

namespace {

void require_scalar(const ad::Var<double>& out) {
    if (out.rows() != 1 || out.cols() != 1) throw ad::ShapeError("loss must evaluate to a 1x1 value");
}

}  // namespace

double value(const ScalarFn& loss, const ParamVector& params) {
    ad::Tape<double> tape;
    auto theta = tape.constant(params.values());
    auto out = loss(tape, theta);
    require_scalar(out);
    return out.value()(0, 0);
}

ValueAndGrad gradient(const ScalarFn& loss, const ParamVector& params) {
    ad::Tape<double> tape;
    auto theta = tape.variable(params.values());
    auto out = loss(tape, theta);
    require_scalar(out);
    tape.backward(out);
    return {out.value()(0, 0), GradVector(params.layout(), tape.gradient(theta))};
}

Eigen::VectorXd hessian_vector(const ScalarFn& loss, const ParamVector& params, const Eigen::VectorXd& direction) {
    if (direction.size() != params.size()) throw ad::ShapeError("hessian_vector: direction length mismatch");
    ad::Mat<ad::Dual> seed(params.size(), 1);
    for (Eigen::Index i = 0; i < params.size(); ++i) seed(i, 0) = ad::Dual(params[i], direction[i]);

    ad::Tape<ad::Dual> tape;
    auto theta = tape.variable(std::move(seed));
    auto out = loss(tape, theta);
    if (out.rows() != 1 || out.cols() != 1) throw ad::ShapeError("loss must evaluate to a 1x1 value");
    tape.backward(out);
    const auto g = tape.gradient(theta);
    Eigen::VectorXd hv(params.size());
    for (Eigen::Index i = 0; i < params.size(); ++i) hv[i] = g(i, 0).d;
    return hv;
}

ParamVector adapt(const ScalarFn& inner_loss, const ParamVector& params, double inner_lr) {
    const auto g = gradient(inner_loss, params);
    Eigen::VectorXd next = params.values() - inner_lr * g.grad.values();
    if (!next.allFinite()) throw AdaptationError("inner adaptation step produced non-finite parameters");
    return ParamVector(params.layout(), std::move(next));
}

MetaGradient meta_gradient(const ScalarFn& inner_loss, const ScalarFn& outer_loss, const ParamVector& params,
                           double inner_lr, GradientMode mode) {
    if (!(inner_lr > 0.0)) throw std::invalid_argument("meta_gradient: inner_lr must be positive");
    return meta_gradient_at(inner_loss, outer_loss, params, adapt(inner_loss, params, inner_lr), inner_lr, mode);
}

MetaGradient meta_gradient_at(const ScalarFn& inner_loss, const ScalarFn& outer_loss, const ParamVector& params,
                              const ParamVector& adapted, double inner_lr, GradientMode mode) {
    auto outer = gradient(outer_loss, adapted);
    if (mode == GradientMode::first_order) {
        return {GradVector(params.layout(), outer.grad.values()), adapted, outer.value};
    }
    const Eigen::VectorXd hv = hessian_vector(inner_loss, params, outer.grad.values());
    Eigen::VectorXd g = outer.grad.values() - inner_lr * hv;
    return {GradVector(params.layout(), std::move(g)), adapted, outer.value};
}

}  // namespace drml::diff
