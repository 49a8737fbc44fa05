#include <cmath>
#include <stdexcept>

#include "lipcert/errors.hpp"
#include "lipcert/linop.hpp"
#include "lipcert/rng.hpp"

namespace lipcert {

void PowerIterConfig::validate() const {
    if (max_iters < 1) throw std::invalid_argument("power iteration: max_iters must be >= 1");
    if (!(rel_tol > 0.0)) throw std::invalid_argument("power iteration: rel_tol must be > 0");
    if (!(inflation >= 0.0)) throw std::invalid_argument("power iteration: inflation must be >= 0");
}

SingularTriple power_iteration(const LinOperator& A, const PowerIterConfig& cfg,
                               const Vector* warm_start, std::vector<double>* trace) {
    cfg.validate();
    SingularTriple out;
    if (A.rows() == 0 || A.cols() == 0) {
        out.u = Vector::Zero(A.rows());
        out.v = Vector::Zero(A.cols());
        return out;
    }

    Vector v;
    if (warm_start && warm_start->size() == A.cols() && warm_start->norm() > 0.0) {
        v = warm_start->normalized();
    } else {
        Rng rng(cfg.seed);
        v = random_unit_vector(A.cols(), rng);
    }

    auto check_finite = [](const Vector& x) {
        if (!x.allFinite()) throw NumericalError("power iteration: non-finite value encountered");
    };

    // ||A v|| for unit v is the square root of the Rayleigh quotient of A^T A,
    // which never decreases along the iteration.
    Vector w = A.apply(v);
    check_finite(w);
    double sigma = w.norm();
    if (trace) trace->push_back(sigma);

    int it = 0;
    while (it < cfg.max_iters && sigma > 0.0) {
        ++it;
        Vector z = A.apply_adjoint(w / sigma);
        check_finite(z);
        const double zn = z.norm();
        if (zn == 0.0) break;
        v = z / zn;
        w = A.apply(v);
        check_finite(w);
        const double next = w.norm();
        if (trace) trace->push_back(next);
        const bool converged = std::abs(next - sigma) <= cfg.rel_tol * next;
        sigma = next;
        if (converged) break;
    }

    out.sigma = sigma;
    out.iterations = it;
    out.v = v;
    out.u = sigma > 0.0 ? Vector(w / sigma) : Vector(Vector::Zero(A.rows()));
    return out;
}

double spectral_norm(const LinOperator& A, const PowerIterConfig& cfg) {
    return power_iteration(A, cfg).sigma * (1.0 + cfg.inflation);
}

}  // namespace lipcert
