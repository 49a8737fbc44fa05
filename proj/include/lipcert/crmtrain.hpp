#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "lipcert/certify.hpp"
#include "lipcert/liplt.hpp"
#include "lipcert/netgraph.hpp"

namespace lipcert {

enum class GKind { hinge, exp_decay };

std::string to_string(GKind kind);
GKind parse_g_kind(const std::string& name);

struct PgdConfig {
    int steps = 50;
    double step_size = 0.0;  // <= 0 means 2.5 * eps / steps
    int restarts = 1;
    std::uint64_t seed = 0;
    std::optional<std::pair<double, double>> box;  // clip range of valid inputs

    double resolved_step(double eps) const { return step_size > 0.0 ? step_size : 2.5 * eps / steps; }
};

struct CrmConfig {
    double lambda = 0.0;
    double t = 10.0;  // soft-min temperature
    GKind g = GKind::hinge;
    double rbar = 0.2;     // hinge target radius
    double g_scale = 1.0;  // exp_decay scale s

    double lr = 0.05;
    double momentum = 0.9;
    bool cosine = true;
    int epochs = 1;
    int batch_size = 64;

    PairwiseMode mode = PairwiseMode::direct;
    BoundMethod method = BoundMethod::liplt();
    PowerIterConfig train_power = PowerIterConfig::training();
    PowerIterConfig cert_power = PowerIterConfig::certification();
    int norm_refresh_steps = 1;  // full power-iteration budget every n steps, one warm step otherwise

    double eps = 0.1;  // budget used for per-epoch certified accuracy
    PgdConfig pgd;
    std::uint64_t seed = 0;

    double penalty(double r) const;  // g(r)
    double penalty_prime(double r) const;
    void validate() const;
};

struct LossTerms {
    double surrogate_margin = 0.0;  // mean cross-entropy
    double regularizer = 0.0;       // mean of 1{gamma > 0} g(R_soft)
    double total = 0.0;             // surrogate_margin + lambda * regularizer
    std::vector<double> soft_radii;  // per sample
};

/// Warm-start vectors of the power iterations, keyed by norm job.
struct NormCache {
    std::map<std::tuple<int, int, int>, Vector> vectors;
    long step = 0;
};

/// Parameters in a fixed order: per block H, G, W (dense weights row-major,
/// then bias when present), then the final map. Identity and zero
/// operators contribute only their biases.
Vector flatten_parameters(const ResidualChain& chain);
ResidualChain with_parameters(const ResidualChain& chain, const Vector& params);

/// Rejects chains the trainer cannot differentiate (non-dense W, conv, ...).
void check_trainable(const ResidualChain& chain);

LossTerms crm_loss(const ResidualChain& chain, const Dataset& batch, const CrmConfig& cfg,
                   NormCache* cache = nullptr);

struct LossGradient {
    LossTerms loss;
    Vector gradient;  // same layout as flatten_parameters
};

/// Reverse-mode gradient of crm_loss. Spectral norms are differentiated
/// through their converged singular pair, d||A|| = u v^T, with the vectors
/// held fixed.
LossGradient loss_gradient(const ResidualChain& chain, const Dataset& batch, const CrmConfig& cfg,
                           NormCache* cache = nullptr);

struct EpochMetrics {
    int epoch = 0;
    double loss = 0.0;
    double ce = 0.0;
    double reg = 0.0;
    double clean_acc = 0.0;
    double mean_radius = 0.0;
    double cert_acc = 0.0;
};

struct TrainResult {
    ResidualChain chain;
    std::vector<EpochMetrics> history;
};

/// SGD with momentum and cosine-decayed learning rate. Metrics are
/// evaluated on `val` after each epoch with the certification power config.
TrainResult train(const ResidualChain& init, const Dataset& train_data, const Dataset& val,
                  const CrmConfig& cfg, const std::function<void(const EpochMetrics&)>& on_epoch = {});

/// Relu MLP with widths[0] inputs and widths.back() classes, as feedforward
/// blocks plus a dense final map. He-normal weights, zero biases, all
/// rounded to float32.
ResidualChain make_mlp(const std::vector<int>& widths, std::uint64_t seed);

struct AttackResult {
    bool success = false;
    Vector adversarial;
    double distance = 0.0;
    int restart = -1;
    int step = -1;
};

/// l2 PGD ascent on the cross-entropy, projected on the eps-ball (and the
/// input box when set). Returns the first misclassifying iterate.
AttackResult pgd_attack(const ResidualChain& chain, const Vector& x, int y, double eps, const PgdConfig& cfg);

}  // namespace lipcert
