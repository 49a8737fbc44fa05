#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <Eigen/SVD>

#include "lipcert/liplt.hpp"
#include "lipcert/rng.hpp"

namespace lipcert {

double sampled_lower_bound(const ResidualChain& chain, int n_samples, std::uint64_t seed) {
    if (n_samples < 1) throw std::invalid_argument("sampled_lower_bound: n_samples must be >= 1");
    chain.validate();

    // Raw estimates only: each one is at most the Jacobian norm at its point.
    PowerIterConfig probe{200, 1e-10, sub_seed(seed, "probe-start"), 0.0};
    Rng rng(sub_seed(seed, "probe-points"));
    const Index n = chain.input_dim();

    double best = 0.0;
    Vector warm;
    for (int s = 0; s < n_samples; ++s) {
        const Vector x = random_normal_vector(n, rng);
        const SingularTriple t = power_iteration(jacobian_at(chain, x), probe, warm.size() ? &warm : nullptr);
        if (t.sigma > best) best = t.sigma;
        if (t.sigma > 0.0) warm = t.v;
    }
    return best;
}

double sampled_pair_slope(const ResidualChain& chain, int n_pairs, std::uint64_t seed, double spread) {
    if (n_pairs < 1) throw std::invalid_argument("sampled_pair_slope: n_pairs must be >= 1");
    Rng rng(seed);
    const Index n = chain.input_dim();
    std::uniform_real_distribution<double> scale_dist(-6.0, 0.0);
    double best = 0.0;
    for (int s = 0; s < n_pairs; ++s) {
        const Vector x = random_normal_vector(n, rng, spread);
        // Mix of near and far partners.
        const double r = spread * std::pow(10.0, scale_dist(rng));
        const Vector dx = random_normal_vector(n, rng, r);
        const double den = dx.norm();
        if (den == 0.0) continue;
        const double num = (forward(chain, x + dx) - forward(chain, x)).norm();
        best = std::max(best, num / den);
    }
    return best;
}

double pattern_enum_bound(const ResidualChain& chain) {
    chain.validate();
    if (chain.blocks.size() != 1) throw std::invalid_argument("pattern_enum_bound: chain must have one block");
    if (chain.sector.kind != ActivationKind::relu)
        throw std::invalid_argument("pattern_enum_bound: relu activations only");
    const auto& b = chain.blocks[0];
    const Matrix h = b.H.materialize();
    if (!h.isZero(0.0)) throw std::invalid_argument("pattern_enum_bound: H must be zero");
    const Index width = b.hidden_dim();
    if (width > 12) throw std::invalid_argument("pattern_enum_bound: width > 12");

    const Matrix fg = chain.final_map.materialize() * b.G.materialize();
    const Matrix w = b.W.materialize();
    double best = 0.0;
    for (unsigned mask = 0; mask < (1u << width); ++mask) {
        Matrix m = Matrix::Zero(fg.rows(), w.cols());
        for (Index i = 0; i < width; ++i)
            if (mask & (1u << i)) m += fg.col(i) * w.row(i);
        Eigen::JacobiSVD<Matrix> svd(m);
        best = std::max(best, svd.singularValues().size() ? svd.singularValues()[0] : 0.0);
    }
    return best;
}

}  // namespace lipcert
