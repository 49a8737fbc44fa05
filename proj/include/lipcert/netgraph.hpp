#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "lipcert/linop.hpp"

namespace lipcert {

enum class ActivationKind { relu, identity, tanh, sigmoid };

std::string to_string(ActivationKind kind);
ActivationKind parse_activation(const std::string& name);

/// Slope bounds alpha <= (phi(a) - phi(b)) / (a - b) <= beta of the
/// element-wise activation.
struct ActivationSector {
    double alpha = 0.0;
    double beta = 1.0;
    ActivationKind kind = ActivationKind::relu;

    static ActivationSector relu() { return {0.0, 1.0, ActivationKind::relu}; }
    static ActivationSector identity() { return {1.0, 1.0, ActivationKind::identity}; }
    static ActivationSector tanh() { return {0.0, 1.0, ActivationKind::tanh}; }
    static ActivationSector sigmoid() { return {0.0, 0.25, ActivationKind::sigmoid}; }

    /// (alpha + beta) / 2, the slope moved into the skip path.
    double center() const { return 0.5 * (alpha + beta); }
    /// (beta - alpha) / 2, the Lipschitz constant of the re-centred activation.
    double radius() const { return 0.5 * (beta - alpha); }

    double apply(double x) const;
    /// Derivative, with phi'(0) = 0 for relu.
    double derivative(double x) const;

    void validate() const;
    friend bool operator==(const ActivationSector&, const ActivationSector&) = default;
};

/// x -> H x + G phi(W x), plus optional biases. Biases enter the forward
/// pass only; every Lipschitz computation ignores them.
struct ResidualBlock {
    LinOperator H;
    LinOperator G;
    LinOperator W;
    Vector h_bias;  // empty when absent
    Vector g_bias;
    Vector w_bias;

    Index in_dim() const { return W.cols(); }
    Index hidden_dim() const { return W.rows(); }
    Index out_dim() const { return H.rows(); }

    /// Plain layer x -> phi(W x + b).
    static ResidualBlock feedforward(LinOperator W, Vector bias = {});

    void validate() const;
    friend bool operator==(const ResidualBlock& a, const ResidualBlock& b);
};

struct ResidualChain {
    std::vector<ResidualBlock> blocks;
    LinOperator final_map;  // W_L; identity by default
    Vector final_bias;
    ActivationSector sector;
    std::vector<int> input_shape;
    int num_classes = 0;

    Index input_dim() const;
    void validate() const;
    bool has_biases() const;

    friend bool operator==(const ResidualChain& a, const ResidualChain& b);
};

/// Bias of an operator expanded to its output size: conv biases are per
/// output channel, dense biases per row.
Vector expand_bias(const LinOperator& op, const Vector& bias);

/// Reads `manifest.json` + `weights.bin` from a model directory.
ResidualChain parse_model(const std::filesystem::path& dir);

/// Writes a model directory. Weights are stored as float32, so a chain
/// whose weights are float-representable round-trips bit-exactly.
void save_model(const ResidualChain& chain, const std::filesystem::path& dir);

struct Dataset {
    Matrix inputs;             // one sample per column
    std::vector<int> labels;
    int num_classes = 0;
    std::vector<int> input_shape;

    Index size() const { return inputs.cols(); }
    Index input_dim() const { return inputs.rows(); }
    void validate() const;
};

/// Standard IDX image/label pair (magic 2051 / 2049). Pixels are scaled by
/// 1/255. With a class filter only those classes are kept and relabelled
/// 0..|filter|-1 in increasing class order; `limit` caps the kept count.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::optional<std::size_t> limit = std::nullopt,
                 const std::set<int>& class_filter = {});

/// Two interleaved unit half-circles with additive Gaussian noise. The
/// first n/2 points (rounded down) are the upper moon, label 0.
Dataset gen_two_moons(int n, double noise, std::uint64_t seed);

}  // namespace lipcert
