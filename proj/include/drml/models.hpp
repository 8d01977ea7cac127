#pragma once

// Regression MLP and conditional neural process, both written once over the
// scalar-generic tape.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "drml/diff.hpp"
#include "drml/params.hpp"
#include "drml/points.hpp"
#include "drml/rng.hpp"
#include "drml/tape.hpp"

namespace drml::models {

enum class ModelKind { mlp, cnp };
enum class Activation { relu, tanh };

std::string to_string(ModelKind k);
std::string to_string(Activation a);
ModelKind parse_model_kind(const std::string& s);
Activation parse_activation(const std::string& s);

struct ModelSpec {
    ModelKind kind = ModelKind::mlp;
    Activation activation = Activation::relu;
    std::vector<int> widths{1, 40, 40, 1};          // mlp
    std::vector<int> encoder{2, 128, 128, 128};     // cnp: per-point (x, y) encoder
    std::vector<int> decoder{129, 128, 128, 2};     // cnp: (z, x) -> (mean, raw variance)
    double variance_floor = 1e-6;

    static ModelSpec sinusoid_mlp();
    static ModelSpec default_cnp();

    /// Throws std::invalid_argument on inconsistent widths.
    void validate() const;
    Eigen::Index param_count() const;
    std::shared_ptr<const ParamLayout> layout() const;

    /// Canonical JSON text; equal specs give equal strings.
    std::string descriptor() const;
    static ModelSpec from_descriptor(const std::string& json_text);

    bool operator==(const ModelSpec&) const = default;
};

/// sum over layers of (fan_in + 1) * fan_out
Eigen::Index dense_param_count(const std::vector<int>& widths);

/// Glorot-uniform weights, zero biases.
ParamVector init_params(const ModelSpec& spec, Rng& rng);

// ---------------------------------------------------------------------------
// Tape-level building blocks

/// Dense stack; hidden layers use `act`, the last layer is linear.
/// Layer i reads weight (fan_in x fan_out) then bias (1 x fan_out) from `theta`.
template <typename Scalar>
ad::Var<Scalar> dense_stack(const std::vector<int>& widths, Activation act, ad::Var<Scalar> theta,
                            Eigen::Index offset, ad::Var<Scalar> x) {
    auto h = x;
    const std::size_t layers = widths.size() - 1;
    for (std::size_t l = 0; l < layers; ++l) {
        const Eigen::Index fan_in = widths[l];
        const Eigen::Index fan_out = widths[l + 1];
        auto w = ad::slice(theta, offset, fan_in, fan_out);
        offset += fan_in * fan_out;
        auto b = ad::slice(theta, offset, 1, fan_out);
        offset += fan_out;
        h = ad::affine(h, w, b);
        if (l + 1 < layers) h = act == Activation::relu ? ad::relu(h) : ad::tanh(h);
    }
    return h;
}

template <typename Scalar>
ad::Var<Scalar> mlp_apply(const ModelSpec& spec, ad::Var<Scalar> theta, ad::Var<Scalar> x) {
    return dense_stack(spec.widths, spec.activation, theta, 0, x);
}

template <typename Scalar>
struct GaussianPrediction {
    ad::Var<Scalar> mean;      // (m x 1)
    ad::Var<Scalar> variance;  // (m x 1), >= floor
};

/// Context rows sorted by (x, y) so the mean aggregation sums in a fixed order.
Eigen::MatrixXd canonical_context(const PointSet& context);

template <typename Scalar>
GaussianPrediction<Scalar> cnp_apply(const ModelSpec& spec, ad::Tape<Scalar>& tape, ad::Var<Scalar> theta,
                                     const PointSet& context, const Eigen::VectorXd& target_x) {
    const Eigen::MatrixXd ctx = canonical_context(context);
    auto pairs = tape.constant(ctx.template cast<Scalar>());
    auto r = dense_stack(spec.encoder, spec.activation, theta, 0, pairs);
    auto z = ad::mean_rows(r);
    auto xs = tape.constant(Eigen::MatrixXd(target_x).template cast<Scalar>());
    auto input = ad::hconcat(ad::tile_rows(z, target_x.size()), xs);
    auto out = dense_stack(spec.decoder, spec.activation, theta, dense_param_count(spec.encoder), input);
    auto variance = ad::shift(ad::softplus(ad::column(out, 1)), spec.variance_floor);
    return {ad::column(out, 0), variance};
}

/// Mean Gaussian negative log-likelihood of `y` under (mean, variance).
template <typename Scalar>
ad::Var<Scalar> gaussian_nll(ad::Var<Scalar> mean, ad::Var<Scalar> variance, ad::Var<Scalar> y) {
    const double half_log_two_pi = 0.5 * std::log(2.0 * std::numbers::pi);
    auto quad = ad::square(y - mean) / variance;
    auto per_point = ad::scale(ad::log(variance) + quad, 0.5);
    return ad::shift(ad::mean(per_point), half_log_two_pi);
}

// ---------------------------------------------------------------------------
// Evaluation and losses

/// Forward pass of an MLP, one output row per input row.
Eigen::MatrixXd evaluate(const ModelSpec& spec, const ParamVector& params, const Eigen::MatrixXd& inputs);

struct CnpOutput {
    Eigen::VectorXd means;
    Eigen::VectorXd variances;
};

CnpOutput cnp_forward(const ModelSpec& spec, const ParamVector& params, const PointSet& context,
                      const Eigen::VectorXd& target_x);

/// mean over points of (f(x) - y)^2
diff::ScalarFn mlp_task_loss(const ModelSpec& spec, const PointSet& data);

/// Mean Gaussian NLL of the target set given the context set.
diff::ScalarFn cnp_task_loss(const ModelSpec& spec, const PointSet& context, const PointSet& target);

// ---------------------------------------------------------------------------
// Checkpoints
//
// Binary layout, all integers and reals little-endian:
//   bytes 0..7   magic "DRMLCKP1"
//   u32          format version (1)
//   u32          descriptor length L
//   L bytes      ModelSpec::descriptor() (UTF-8 JSON)
//   u64          seed
//   u64          iteration
//   u64          parameter count P
//   P x f64      parameter values in layout order
// A sidecar "<path>.json" carries the same header fields plus free-form metadata.

struct Checkpoint {
    ModelSpec spec;
    std::uint64_t seed = 0;
    std::uint64_t iteration = 0;
    ParamVector params;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt,
                      const std::string& metadata_json = "{}");
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// The sidecar's metadata object as JSON text; "{}" when there is no sidecar.
std::string read_checkpoint_metadata(const std::filesystem::path& path);

}  // namespace drml::models
