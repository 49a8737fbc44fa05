#include "lipcert/netgraph.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "lipcert/errors.hpp"

namespace lipcert {

std::string to_string(ActivationKind kind) {
    switch (kind) {
        case ActivationKind::relu: return "relu";
        case ActivationKind::identity: return "identity";
        case ActivationKind::tanh: return "tanh";
        case ActivationKind::sigmoid: return "sigmoid";
    }
    return "unknown";
}

ActivationKind parse_activation(const std::string& name) {
    if (name == "relu") return ActivationKind::relu;
    if (name == "identity") return ActivationKind::identity;
    if (name == "tanh") return ActivationKind::tanh;
    if (name == "sigmoid") return ActivationKind::sigmoid;
    throw FormatError("unknown activation kind \"" + name + "\"");
}

double ActivationSector::apply(double x) const {
    switch (kind) {
        case ActivationKind::relu: return x > 0.0 ? x : 0.0;
        case ActivationKind::identity: return x;
        case ActivationKind::tanh: return std::tanh(x);
        case ActivationKind::sigmoid: return 1.0 / (1.0 + std::exp(-x));
    }
    return x;
}

double ActivationSector::derivative(double x) const {
    switch (kind) {
        case ActivationKind::relu: return x > 0.0 ? 1.0 : 0.0;
        case ActivationKind::identity: return 1.0;
        case ActivationKind::tanh: {
            const double t = std::tanh(x);
            return 1.0 - t * t;
        }
        case ActivationKind::sigmoid: {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 - s);
        }
    }
    return 1.0;
}

void ActivationSector::validate() const {
    if (!(alpha >= 0.0) || !(beta >= alpha) || !std::isfinite(beta))
        throw std::invalid_argument("activation sector must satisfy 0 <= alpha <= beta < inf");
    // The declared sector has to contain the activation's true slopes.
    switch (kind) {
        case ActivationKind::relu:
            if (alpha != 0.0 || beta != 1.0)
                throw std::invalid_argument("relu requires (alpha, beta) = (0, 1)");
            break;
        case ActivationKind::identity:
            if (alpha != 1.0 || beta != 1.0)
                throw std::invalid_argument("identity requires (alpha, beta) = (1, 1)");
            break;
        case ActivationKind::tanh:
            if (alpha != 0.0 || beta < 1.0)
                throw std::invalid_argument("tanh requires alpha = 0 and beta >= 1");
            break;
        case ActivationKind::sigmoid:
            if (alpha != 0.0 || beta < 0.25)
                throw std::invalid_argument("sigmoid requires alpha = 0 and beta >= 1/4");
            break;
    }
}

ResidualBlock ResidualBlock::feedforward(LinOperator W, Vector bias) {
    ResidualBlock b;
    const Index n = W.rows();
    b.H = LinOperator::zero(n, W.cols());
    b.G = LinOperator::identity(n);
    b.W = std::move(W);
    b.w_bias = std::move(bias);
    return b;
}

namespace {

std::string shape_str(const LinOperator& op) {
    return std::to_string(op.rows()) + "x" + std::to_string(op.cols());
}

Index bias_size(const LinOperator& op) {
    if (auto* g = op.conv_geometry()) return g->out_ch;
    return op.rows();
}

void check_bias(const LinOperator& op, const Vector& bias, const char* name) {
    if (bias.size() != 0 && bias.size() != bias_size(op))
        throw ShapeError(std::string(name) + " bias has " + std::to_string(bias.size()) +
                         " entries, expected " + std::to_string(bias_size(op)));
}

bool same_bits(const Vector& a, const Vector& b) {
    return a.size() == b.size() &&
           (a.size() == 0 ||
            std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0);
}

}  // namespace

void ResidualBlock::validate() const {
    if (G.cols() != W.rows())
        throw ShapeError("block: G is " + shape_str(G) + " but W is " + shape_str(W));
    if (H.rows() != G.rows() || H.cols() != W.cols())
        throw ShapeError("block: H is " + shape_str(H) + ", expected " + std::to_string(G.rows()) +
                         "x" + std::to_string(W.cols()));
    check_bias(H, h_bias, "H");
    check_bias(G, g_bias, "G");
    check_bias(W, w_bias, "W");
}

bool operator==(const ResidualBlock& a, const ResidualBlock& b) {
    return a.H == b.H && a.G == b.G && a.W == b.W && same_bits(a.h_bias, b.h_bias) &&
           same_bits(a.g_bias, b.g_bias) && same_bits(a.w_bias, b.w_bias);
}

Index ResidualChain::input_dim() const {
    return std::accumulate(input_shape.begin(), input_shape.end(), Index(1),
                           [](Index a, int b) { return a * b; });
}

void ResidualChain::validate() const {
    if (blocks.empty()) throw std::invalid_argument("chain must have >= 1 block");
    if (num_classes < 2) throw std::invalid_argument("chain must have num_classes >= 2");
    if (input_shape.empty()) throw ShapeError("chain: empty input shape");
    for (int d : input_shape)
        if (d <= 0) throw ShapeError("chain: input shape entries must be positive");
    sector.validate();

    Index dim = input_dim();
    for (std::size_t k = 0; k < blocks.size(); ++k) {
        try {
            blocks[k].validate();
        } catch (const ShapeError& e) {
            throw ShapeError("block " + std::to_string(k) + ": " + e.what());
        }
        if (blocks[k].in_dim() != dim)
            throw ShapeError("block " + std::to_string(k) + " expects input of size " +
                             std::to_string(blocks[k].in_dim()) + " but receives " +
                             std::to_string(dim));
        dim = blocks[k].out_dim();
    }
    if (final_map.cols() != dim)
        throw ShapeError("final map expects input of size " + std::to_string(final_map.cols()) +
                         " but receives " + std::to_string(dim));
    if (final_map.rows() != num_classes)
        throw ShapeError("final map has " + std::to_string(final_map.rows()) + " outputs, expected " +
                         std::to_string(num_classes) + " classes");
    check_bias(final_map, final_bias, "final");
}

bool ResidualChain::has_biases() const {
    if (final_bias.size()) return true;
    for (const auto& b : blocks)
        if (b.h_bias.size() || b.g_bias.size() || b.w_bias.size()) return true;
    return false;
}

bool operator==(const ResidualChain& a, const ResidualChain& b) {
    return a.blocks == b.blocks && a.final_map == b.final_map && same_bits(a.final_bias, b.final_bias) &&
           a.sector == b.sector && a.input_shape == b.input_shape && a.num_classes == b.num_classes;
}

Vector expand_bias(const LinOperator& op, const Vector& bias) {
    if (bias.size() == 0) return Vector::Zero(op.rows());
    if (auto* g = op.conv_geometry()) {
        const Index plane = Index(g->out_h()) * g->out_w();
        Vector out(op.rows());
        for (int c = 0; c < g->out_ch; ++c) out.segment(c * plane, plane).setConstant(bias[c]);
        return out;
    }
    return bias;
}

void Dataset::validate() const {
    if (inputs.cols() < 1) throw std::invalid_argument("dataset must contain at least one sample");
    if (static_cast<Index>(labels.size()) != inputs.cols())
        throw std::invalid_argument("dataset: label count does not match sample count");
    for (int y : labels)
        if (y < 0 || y >= num_classes) throw std::invalid_argument("dataset: label out of range");
}

}  // namespace lipcert
