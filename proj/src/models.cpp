#include "drml/models.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace drml::models {

using nlohmann::json;

std::string to_string(ModelKind k) { return k == ModelKind::mlp ? "mlp" : "cnp"; }
std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

ModelKind parse_model_kind(const std::string& s) {
    if (s == "mlp") return ModelKind::mlp;
    if (s == "cnp") return ModelKind::cnp;
    throw std::invalid_argument("unknown model kind '" + s + "' (expected mlp or cnp)");
}

Activation parse_activation(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    throw std::invalid_argument("unknown activation '" + s + "' (expected relu or tanh)");
}

ModelSpec ModelSpec::sinusoid_mlp() { return ModelSpec{}; }

ModelSpec ModelSpec::default_cnp() {
    ModelSpec s;
    s.kind = ModelKind::cnp;
    return s;
}

namespace {

void check_widths(const std::vector<int>& widths, const char* what) {
    if (widths.size() < 2) throw std::invalid_argument(std::string(what) + ": need at least two widths");
    for (int w : widths) {
        if (w <= 0) throw std::invalid_argument(std::string(what) + ": widths must be positive");
    }
}

void append_blocks(std::vector<ParamBlock>& blocks, Eigen::Index& offset, const std::vector<int>& widths,
                   const std::string& prefix) {
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        const std::string layer = prefix + "layer" + std::to_string(l);
        blocks.push_back({layer + ".weight", offset, widths[l], widths[l + 1]});
        offset += Eigen::Index(widths[l]) * widths[l + 1];
        blocks.push_back({layer + ".bias", offset, 1, widths[l + 1]});
        offset += widths[l + 1];
    }
}

}  // namespace

void ModelSpec::validate() const {
    if (kind == ModelKind::mlp) {
        check_widths(widths, "mlp");
        return;
    }
    check_widths(encoder, "cnp encoder");
    check_widths(decoder, "cnp decoder");
    if (encoder.front() != 2) throw std::invalid_argument("cnp encoder must consume (x, y) pairs (width 2)");
    if (decoder.front() != encoder.back() + 1) {
        throw std::invalid_argument("cnp decoder input width must be representation width + 1");
    }
    if (decoder.back() != 2) throw std::invalid_argument("cnp decoder must emit (mean, raw variance)");
    if (!(variance_floor > 0.0)) throw std::invalid_argument("cnp variance floor must be positive");
}

Eigen::Index dense_param_count(const std::vector<int>& widths) {
    Eigen::Index n = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) n += Eigen::Index(widths[l] + 1) * widths[l + 1];
    return n;
}

Eigen::Index ModelSpec::param_count() const {
    if (kind == ModelKind::mlp) return dense_param_count(widths);
    return dense_param_count(encoder) + dense_param_count(decoder);
}

std::shared_ptr<const ParamLayout> ModelSpec::layout() const {
    validate();
    std::vector<ParamBlock> blocks;
    Eigen::Index offset = 0;
    if (kind == ModelKind::mlp) {
        append_blocks(blocks, offset, widths, "");
    } else {
        append_blocks(blocks, offset, encoder, "encoder.");
        append_blocks(blocks, offset, decoder, "decoder.");
    }
    return std::make_shared<const ParamLayout>(std::move(blocks));
}

std::string ModelSpec::descriptor() const {
    json j;
    j["kind"] = to_string(kind);
    j["activation"] = to_string(activation);
    if (kind == ModelKind::mlp) {
        j["widths"] = widths;
    } else {
        j["encoder"] = encoder;
        j["decoder"] = decoder;
        j["variance_floor"] = variance_floor;
    }
    return j.dump();
}

ModelSpec ModelSpec::from_descriptor(const std::string& json_text) {
    const json j = json::parse(json_text);
    ModelSpec s;
    s.kind = parse_model_kind(j.at("kind").get<std::string>());
    s.activation = parse_activation(j.at("activation").get<std::string>());
    if (s.kind == ModelKind::mlp) {
        s.widths = j.at("widths").get<std::vector<int>>();
    } else {
        s.encoder = j.at("encoder").get<std::vector<int>>();
        s.decoder = j.at("decoder").get<std::vector<int>>();
        s.variance_floor = j.at("variance_floor").get<double>();
    }
    s.validate();
    return s;
}

ParamVector init_params(const ModelSpec& spec, Rng& rng) {
    auto layout = spec.layout();
    Eigen::VectorXd v = Eigen::VectorXd::Zero(layout->size());
    for (const auto& b : layout->blocks()) {
        if (b.rows == 1 && b.name.ends_with(".bias")) continue;
        const double s = std::sqrt(6.0 / double(b.rows + b.cols));
        std::uniform_real_distribution<double> u(-s, s);
        for (Eigen::Index i = 0; i < b.size(); ++i) v[b.offset + i] = u(rng);
    }
    return ParamVector(std::move(layout), std::move(v));
}

Eigen::MatrixXd canonical_context(const PointSet& context) {
    if (context.empty()) throw std::invalid_argument("context set is empty");
    if (context.y.size() != context.x.size()) throw std::invalid_argument("context x/y lengths differ");
    std::vector<Eigen::Index> order(context.size());
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
        if (context.x[a] != context.x[b]) return context.x[a] < context.x[b];
        return context.y[a] < context.y[b];
    });
    Eigen::MatrixXd m(context.size(), 2);
    for (Eigen::Index i = 0; i < context.size(); ++i) {
        m(i, 0) = context.x[order[i]];
        m(i, 1) = context.y[order[i]];
    }
    return m;
}

namespace {

void check_params(const ModelSpec& spec, const ParamVector& params) {
    if (params.size() != spec.param_count()) {
        throw std::invalid_argument("parameter vector has " + std::to_string(params.size()) +
                                    " entries, model expects " + std::to_string(spec.param_count()));
    }
}

}  // namespace

Eigen::MatrixXd evaluate(const ModelSpec& spec, const ParamVector& params, const Eigen::MatrixXd& inputs) {
    if (spec.kind != ModelKind::mlp) throw std::invalid_argument("evaluate: model is not an mlp");
    spec.validate();
    check_params(spec, params);
    if (inputs.cols() != spec.widths.front()) {
        throw std::invalid_argument("evaluate: input has " + std::to_string(inputs.cols()) +
                                    " columns, model expects " + std::to_string(spec.widths.front()));
    }
    ad::Tape<double> tape;
    auto theta = tape.constant(params.values());
    auto out = mlp_apply(spec, theta, tape.constant(inputs));
    return out.value();
}

CnpOutput cnp_forward(const ModelSpec& spec, const ParamVector& params, const PointSet& context,
                      const Eigen::VectorXd& target_x) {
    if (spec.kind != ModelKind::cnp) throw std::invalid_argument("cnp_forward: model is not a cnp");
    spec.validate();
    check_params(spec, params);
    if (context.empty()) throw std::invalid_argument("cnp_forward: context set is empty");
    ad::Tape<double> tape;
    auto theta = tape.constant(params.values());
    auto pred = cnp_apply(spec, tape, theta, context, target_x);
    return {pred.mean.value().col(0), pred.variance.value().col(0)};
}

diff::ScalarFn mlp_task_loss(const ModelSpec& spec, const PointSet& data) {
    if (spec.kind != ModelKind::mlp) throw std::invalid_argument("mlp_task_loss: model is not an mlp");
    if (data.empty()) throw std::invalid_argument("mlp_task_loss: data set is empty");
    if (spec.widths.front() != 1 || spec.widths.back() != 1) {
        throw std::invalid_argument("mlp_task_loss: regression model must map 1 -> 1");
    }
    Eigen::MatrixXd x = data.x;
    Eigen::MatrixXd y = data.y;
    return diff::ScalarFn([spec, x = std::move(x), y = std::move(y)](auto& tape, auto theta) {
        using Scalar = typename std::decay_t<decltype(tape)>::Matrix::Scalar;
        auto pred = mlp_apply(spec, theta, tape.constant(x.template cast<Scalar>()));
        return ad::mean(ad::square(pred - tape.constant(y.template cast<Scalar>())));
    });
}

diff::ScalarFn cnp_task_loss(const ModelSpec& spec, const PointSet& context, const PointSet& target) {
    if (spec.kind != ModelKind::cnp) throw std::invalid_argument("cnp_task_loss: model is not a cnp");
    if (context.empty()) throw std::invalid_argument("cnp_task_loss: context set is empty");
    if (target.empty()) throw std::invalid_argument("cnp_task_loss: target set is empty");
    Eigen::MatrixXd y = target.y;
    return diff::ScalarFn([spec, context, tx = target.x, y = std::move(y)](auto& tape, auto theta) {
        using Scalar = typename std::decay_t<decltype(tape)>::Matrix::Scalar;
        auto pred = cnp_apply(spec, tape, theta, context, tx);
        return gaussian_nll(pred.mean, pred.variance, tape.constant(y.template cast<Scalar>()));
    });
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::array<char, 8> kMagic{'D', 'R', 'M', 'L', 'C', 'K', 'P', '1'};
constexpr std::uint32_t kVersion = 1;

template <typename U>
void put_le(std::ostream& os, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(std::istream& is) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        const int c = is.get();
        if (c == std::char_traits<char>::eof()) throw std::runtime_error("checkpoint truncated");
        v |= U(static_cast<unsigned char>(c)) << (8 * i);
    }
    return v;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt, const std::string& metadata_json) {
    if (ckpt.params.size() != ckpt.spec.param_count()) {
        throw std::invalid_argument("write_checkpoint: parameters do not match the model spec");
    }
    const std::string desc = ckpt.spec.descriptor();
    {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
        os.write(kMagic.data(), kMagic.size());
        put_le<std::uint32_t>(os, kVersion);
        put_le<std::uint32_t>(os, static_cast<std::uint32_t>(desc.size()));
        os.write(desc.data(), static_cast<std::streamsize>(desc.size()));
        put_le<std::uint64_t>(os, ckpt.seed);
        put_le<std::uint64_t>(os, ckpt.iteration);
        put_le<std::uint64_t>(os, static_cast<std::uint64_t>(ckpt.params.size()));
        for (Eigen::Index i = 0; i < ckpt.params.size(); ++i) {
            put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(ckpt.params[i]));
        }
        if (!os) throw std::runtime_error("failed writing checkpoint: " + path.string());
    }
    json side;
    side["format"] = "DRMLCKP1";
    side["version"] = kVersion;
    side["model"] = json::parse(desc);
    side["seed"] = ckpt.seed;
    side["iteration"] = ckpt.iteration;
    side["param_count"] = ckpt.params.size();
    side["metadata"] = json::parse(metadata_json);
    std::ofstream js(path.string() + ".json", std::ios::trunc);
    js << side.dump(2) << '\n';
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path.string());
    std::array<char, 8> magic{};
    is.read(magic.data(), magic.size());
    if (!is || magic != kMagic) throw std::runtime_error("not a checkpoint file: " + path.string());
    if (get_le<std::uint32_t>(is) != kVersion) throw std::runtime_error("unsupported checkpoint version");
    const auto len = get_le<std::uint32_t>(is);
    std::string desc(len, '\0');
    is.read(desc.data(), len);
    if (!is) throw std::runtime_error("checkpoint truncated");
    Checkpoint c;
    c.spec = ModelSpec::from_descriptor(desc);
    c.seed = get_le<std::uint64_t>(is);
    c.iteration = get_le<std::uint64_t>(is);
    const auto n = get_le<std::uint64_t>(is);
    if (static_cast<Eigen::Index>(n) != c.spec.param_count()) {
        throw std::runtime_error("checkpoint parameter count does not match its model descriptor");
    }
    Eigen::VectorXd v(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = std::bit_cast<double>(get_le<std::uint64_t>(is));
    c.params = ParamVector(c.spec.layout(), std::move(v));
    return c;
}

std::string read_checkpoint_metadata(const std::filesystem::path& path) {
    std::ifstream is(path.string() + ".json");
    if (!is) return "{}";
    const auto side = json::parse(is);
    return side.contains("metadata") ? side["metadata"].dump() : "{}";
}

}  // namespace drml::models
