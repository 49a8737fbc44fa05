#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lipcert/linop.hpp"
#include "lipcert/netgraph.hpp"

namespace lipcert {

// ---------------------------------------------------------------------------
// Forward passes

/// Logits of one input.
Vector forward(const ResidualChain& chain, const Vector& x);

/// Logits of a batch, one sample per column.
Matrix forward_batch(const ResidualChain& chain, const Matrix& X);

/// Pre-activations y_0..y_{L-1} followed by the output y_L, computed block by
/// block: y_k = W_k x_k, x_{k+1} = H_k x_k + G_k phi(y_k).
std::vector<Vector> preactivations(const ResidualChain& chain, const Vector& x);

/// The same sequence rebuilt from the loop-transformed form
///   y_{k+1} = W_{k+1} Hh_k..Hh_0 x_0 + sum_j W_{k+1} Hh_k..Hh_{j+1} G_j psi(y_j)
/// with Hh_k = H_k + c G_k W_k, psi(y) = phi(y) - c y and c = (alpha+beta)/2.
/// Bias-free chains only.
std::vector<Vector> loop_transformed_preactivations(const ResidualChain& chain, const Vector& x);

/// Jacobian of the logits at x as a matrix-free operator.
LinOperator jacobian_at(const ResidualChain& chain, const Vector& x);

// ---------------------------------------------------------------------------
// Bounds

enum class BoundKind { naive, liplt, refined_sn, refined_aol, refined_sll };

struct BoundMethod {
    BoundKind kind = BoundKind::liplt;
    Vector q;  // SLL weights; empty means all ones

    static BoundMethod naive() { return {BoundKind::naive, {}}; }
    static BoundMethod liplt() { return {BoundKind::liplt, {}}; }
    static BoundMethod refined_sn() { return {BoundKind::refined_sn, {}}; }
    static BoundMethod refined_aol() { return {BoundKind::refined_aol, {}}; }
    static BoundMethod refined_sll(Vector q = {}) { return {BoundKind::refined_sll, std::move(q)}; }

    bool refined() const { return kind != BoundKind::naive && kind != BoundKind::liplt; }
};

/// "naive", "liplt", "refined:sn", "refined:aol", "refined:sll".
std::string to_string(const BoundMethod& method);
BoundMethod parse_bound_method(const std::string& name);

enum class PairwiseMode { direct, class_sum, sqrt2 };

std::string to_string(PairwiseMode mode);
PairwiseMode parse_pairwise_mode(const std::string& name);

struct BoundReport {
    BoundMethod method;
    PairwiseMode mode = PairwiseMode::direct;
    double L = 0.0;             // whole-network bound
    std::vector<double> per_class;  // filled in class_sum mode
    Matrix pairwise;            // K x K, symmetric, zero diagonal
    double wall_time = 0.0;     // seconds

    /// Mean of the entries above the diagonal.
    double mean_pairwise() const;
};

/// prod_k (||H_k|| + beta ||G_k|| ||W_k||) * ||W_L||.
double naive_bound(const ResidualChain& chain, const PowerIterConfig& cfg);

/// ||H + c G W|| + r ||G|| ||W|| for one block, c the sector centre and r its
/// radius.
double liplt_single(const ResidualBlock& block, const ActivationSector& sector,
                    const PowerIterConfig& cfg);

/// ||H + c G W|| + r ||W^T T W||^(1/2) with the diagonal T >= G^T G built by
/// the method (SN: ||G||^2 I, AOL: row sums of |G^T G|, SLL: q-weighted
/// row sums). refined_sn takes the liplt_single path.
double refined_single(const ResidualBlock& block, const ActivationSector& sector,
                      const BoundMethod& method, const PowerIterConfig& cfg);

/// The diagonal T used by refined_single for AOL/SLL (all-ones q for AOL).
Vector refined_diagonal(const Matrix& G, const Vector& q);

/// Multi-layer loop-transformed bound m_L. Also fills `levels` with
/// m_0..m_L when given.
double liplt_multi(const ResidualChain& chain, const PowerIterConfig& cfg,
                   std::vector<double>* levels = nullptr);

/// Bound of x -> final(chain body(x)) by the given method, with `final`
/// replacing the chain's own final map. Refined methods need a single block.
double network_bound(const ResidualChain& chain, const LinOperator& final,
                     const BoundMethod& method, const PowerIterConfig& cfg);

BoundReport pairwise_lipschitz(const ResidualChain& chain, PairwiseMode mode,
                               const BoundMethod& method, const PowerIterConfig& cfg);

/// sqrt(rho)-Lipschitz block x -> sqrt(rho) x - ((alpha+beta)/sqrt(rho)) W^T T phi(W x),
/// with T chosen from W W^T by the method and scaled so that
/// W W^T <= 2 rho / (alpha+beta)^2 T^-1.
ResidualBlock make_rho_lipschitz_layer(const LinOperator& W, const ActivationSector& sector,
                                       double rho, const BoundMethod& t_choice,
                                       const PowerIterConfig& cfg = {});

// ---------------------------------------------------------------------------
// Oracles

/// Largest Jacobian norm over `n_samples` random inputs: a lower bound on
/// the Lipschitz constant of the logits.
double sampled_lower_bound(const ResidualChain& chain, int n_samples, std::uint64_t seed);

/// Largest difference quotient ||f(x) - f(x')|| / ||x - x'|| over random
/// pairs, for any vector map f.
double sampled_pair_slope(const ResidualChain& chain, int n_pairs, std::uint64_t seed,
                          double spread = 1.0);

/// Max over all 0/1 activation patterns D of ||W_L G D W||_2 for a single
/// relu block with H = 0 and at most 12 hidden units.
double pattern_enum_bound(const ResidualChain& chain);

}  // namespace lipcert
