#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace lipcert {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

enum class OpKind { dense, conv2d, identity, zero, scaled, sum, composition, row_diff, diagonal };

std::string to_string(OpKind kind);

/// Geometry of a 2-D cross-correlation with zero padding. Inputs and outputs
/// are flattened channel-major (c, h, w).
struct Conv2dGeometry {
    int in_ch = 0;
    int out_ch = 0;
    int kh = 0;
    int kw = 0;
    int stride = 1;
    int pad = 0;
    int in_h = 0;
    int in_w = 0;

    int out_h() const { return (in_h + 2 * pad - kh) / stride + 1; }
    int out_w() const { return (in_w + 2 * pad - kw) / stride + 1; }
    Index in_dim() const { return Index(in_ch) * in_h * in_w; }
    Index out_dim() const { return Index(out_ch) * out_h() * out_w(); }
    Index kernel_size() const { return Index(out_ch) * in_ch * kh * kw; }

    void validate() const;
    friend bool operator==(const Conv2dGeometry&, const Conv2dGeometry&) = default;
};

namespace detail {
class OpNode;
}

/// Immutable, matrix-free linear map R^cols -> R^rows with its adjoint.
///
/// Copies are cheap and share the underlying node. Composite operators
/// (sum, scaled, composition) keep references to their operands and never
/// materialise a matrix.
class LinOperator {
public:
    LinOperator();  // 0x0 zero operator

    static LinOperator dense(Matrix m);
    static LinOperator conv2d(const Conv2dGeometry& geom, Vector kernel);
    static LinOperator identity(Index n);
    static LinOperator zero(Index rows, Index cols);
    static LinOperator diagonal(Vector d);

    Index rows() const;  // output dimension
    Index cols() const;  // input dimension
    OpKind kind() const;

    Vector apply(const Vector& x) const;
    Vector apply_adjoint(const Vector& y) const;

    /// Dense matrix of a `dense` operator, nullptr otherwise.
    const Matrix* dense_matrix() const;
    /// Geometry and kernel of a `conv2d` operator, nullptr otherwise.
    const Conv2dGeometry* conv_geometry() const;
    const Vector* conv_kernel() const;
    const Vector* diagonal_values() const;

    /// Explicit matrix, built column by column from forward applications.
    Matrix materialize() const;

    /// Children of composite operators, in application order reversed
    /// (compose({B, A}) reports {B, A}).
    std::vector<LinOperator> operands() const;
    /// Scale factor of a `scaled` operator (1 otherwise).
    double scale() const;

    /// Structural equality with bit-exact weights.
    friend bool operator==(const LinOperator& a, const LinOperator& b);

private:
    explicit LinOperator(std::shared_ptr<const detail::OpNode> node);
    std::shared_ptr<const detail::OpNode> node_;

    friend LinOperator compose(const std::vector<LinOperator>& ops);
    friend LinOperator sum(const LinOperator& a, const LinOperator& b);
    friend LinOperator scaled(double c, const LinOperator& a);
    friend LinOperator row_diff(Index classes, Index i, Index j);
};

/// ops[0] * ops[1] * ... * ops.back(); the last operator is applied first.
LinOperator compose(const std::vector<LinOperator>& ops);
LinOperator sum(const LinOperator& a, const LinOperator& b);
LinOperator scaled(double c, const LinOperator& a);

/// H + c * G * W, the skip path after moving the linear part of the
/// activation into it.
LinOperator scale_shift(const LinOperator& H, const LinOperator& G, const LinOperator& W,
                        double c);

/// The 1 x K row (e_i - e_j)^T.
LinOperator row_diff(Index classes, Index i, Index j);

/// The 1 x K row e_i^T.
LinOperator row_select(Index classes, Index i);

struct PowerIterConfig {
    int max_iters = 500;
    double rel_tol = 1e-12;
    std::uint64_t seed = 0;
    double inflation = 1e-6;  // estimates are multiplied by (1 + inflation)

    void validate() const;

    static PowerIterConfig certification() { return {}; }
    static PowerIterConfig training() { return {10, 1e-12, 0, 1e-6}; }
};

/// Converged singular triple of a power iteration: A v ~= sigma u with unit
/// u and v. `sigma` is the raw estimate, without inflation.
struct SingularTriple {
    double sigma = 0.0;
    Vector u;
    Vector v;
    int iterations = 0;
};

/// Power iteration on A^T A. Starts from `warm_start` when given (and of
/// the right size), else from a seeded uniform direction. When `trace` is
/// non-null the Rayleigh estimate of every iteration is appended to it.
SingularTriple power_iteration(const LinOperator& A, const PowerIterConfig& cfg,
                               const Vector* warm_start = nullptr,
                               std::vector<double>* trace = nullptr);

/// Upper estimate of ||A||_2: the converged power-iteration value times
/// (1 + cfg.inflation).
double spectral_norm(const LinOperator& A, const PowerIterConfig& cfg);

}  // namespace lipcert
