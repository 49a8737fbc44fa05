#include <cmath>
#include <stdexcept>

#include "lipcert/liplt.hpp"

namespace lipcert {

ResidualBlock make_rho_lipschitz_layer(const LinOperator& W, const ActivationSector& sector, double rho,
                                       const BoundMethod& t_choice, const PowerIterConfig& cfg) {
    if (!(rho > 0.0)) throw std::invalid_argument("rho must be > 0");
    sector.validate();
    const double ab = sector.alpha + sector.beta;
    if (!(ab > 0.0)) throw std::invalid_argument("rho layer needs alpha + beta > 0");

    const Matrix w = W.materialize();
    const Index hidden = w.rows();

    // D >= W W^T, diagonal.
    Vector d;
    switch (t_choice.kind) {
        case BoundKind::refined_sn:
        case BoundKind::naive:
        case BoundKind::liplt: {
            // Inflated estimate keeps D >= W W^T despite power iteration
            // approaching sigma_max from below.
            const double s = spectral_norm(W, cfg);
            d = Vector::Constant(hidden, s * s);
            break;
        }
        case BoundKind::refined_aol: d = refined_diagonal(w.transpose(), Vector()); break;
        case BoundKind::refined_sll: d = refined_diagonal(w.transpose(), t_choice.q); break;
    }

    // T = (2 rho / (alpha+beta)^2) D^-1 gives W W^T <= D = 2 rho/(alpha+beta)^2 T^-1.
    // A zero D_ii means row i of W is zero, and T_ii has no effect.
    const double scale = 2.0 * rho / (ab * ab);
    Vector t(hidden);
    for (Index i = 0; i < hidden; ++i) t[i] = d[i] > 0.0 ? scale / d[i] : 0.0;

    const double root = std::sqrt(rho);
    ResidualBlock block;
    block.H = LinOperator::dense(root * Matrix::Identity(w.cols(), w.cols()));
    block.G = LinOperator::dense(-(ab / root) * (w.transpose() * t.asDiagonal()));
    block.W = LinOperator::dense(w);
    return block;
}

}  // namespace lipcert
