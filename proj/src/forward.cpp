#include <stdexcept>
#include <string>

#include "lipcert/errors.hpp"
#include "lipcert/liplt.hpp"

namespace lipcert {

namespace {

Vector activate(const ActivationSector& s, const Vector& y) {
    return y.unaryExpr([&](double v) { return s.apply(v); });
}

void add_bias(Vector& v, const LinOperator& op, const Vector& bias) {
    if (bias.size()) v += expand_bias(op, bias);
}

void add_bias(Matrix& m, const LinOperator& op, const Vector& bias) {
    if (bias.size()) m.colwise() += expand_bias(op, bias);
}

Matrix apply_batch(const LinOperator& op, const Matrix& X) {
    if (X.rows() != op.cols())
        throw ShapeError("forward: expected inputs of size " + std::to_string(op.cols()) + ", got " +
                         std::to_string(X.rows()));
    if (auto* m = op.dense_matrix()) return (*m) * X;
    switch (op.kind()) {
        case OpKind::identity: return X;
        case OpKind::zero: return Matrix::Zero(op.rows(), X.cols());
        default: break;
    }
    Matrix out(op.rows(), X.cols());
    for (Index c = 0; c < X.cols(); ++c) out.col(c) = op.apply(X.col(c));
    return out;
}

}  // namespace

std::vector<Vector> preactivations(const ResidualChain& chain, const Vector& x0) {
    std::vector<Vector> ys;
    ys.reserve(chain.blocks.size() + 1);
    Vector x = x0;
    for (const auto& b : chain.blocks) {
        Vector y = b.W.apply(x);
        add_bias(y, b.W, b.w_bias);
        Vector g = b.G.apply(activate(chain.sector, y));
        add_bias(g, b.G, b.g_bias);
        Vector h = b.H.apply(x);
        add_bias(h, b.H, b.h_bias);
        ys.push_back(std::move(y));
        x = h + g;
    }
    Vector out = chain.final_map.apply(x);
    add_bias(out, chain.final_map, chain.final_bias);
    ys.push_back(std::move(out));
    return ys;
}

Vector forward(const ResidualChain& chain, const Vector& x) {
    return std::move(preactivations(chain, x).back());
}

Matrix forward_batch(const ResidualChain& chain, const Matrix& X) {
    Matrix x = X;
    for (const auto& b : chain.blocks) {
        Matrix y = apply_batch(b.W, x);
        add_bias(y, b.W, b.w_bias);
        Matrix phi = y.unaryExpr([&](double v) { return chain.sector.apply(v); });
        Matrix next = apply_batch(b.G, phi);
        add_bias(next, b.G, b.g_bias);
        if (b.H.kind() != OpKind::zero) next += apply_batch(b.H, x);
        add_bias(next, b.H, b.h_bias);
        x = std::move(next);
    }
    Matrix out = apply_batch(chain.final_map, x);
    add_bias(out, chain.final_map, chain.final_bias);
    return out;
}

std::vector<Vector> loop_transformed_preactivations(const ResidualChain& chain, const Vector& x0) {
    if (chain.has_biases())
        throw std::invalid_argument("loop-transformed form is defined for bias-free chains");
    const double c = chain.sector.center();
    const std::size_t L = chain.blocks.size();

    std::vector<LinOperator> hhat;
    hhat.reserve(L);
    for (const auto& b : chain.blocks) hhat.push_back(scale_shift(b.H, b.G, b.W, c));
    auto top = [&](std::size_t k) -> const LinOperator& {
        return k < L ? chain.blocks[k].W : chain.final_map;
    };
    auto psi = [&](const Vector& y) {
        return Vector(activate(chain.sector, y) - c * y);
    };

    std::vector<Vector> ys;
    ys.push_back(chain.blocks[0].W.apply(x0));
    // Each term pushes its seed vector through Hh_{j+1}..Hh_k, then W_{k+1}.
    for (std::size_t k = 0; k < L; ++k) {
        Vector acc = x0;
        for (std::size_t i = 0; i <= k; ++i) acc = hhat[i].apply(acc);
        Vector y = top(k + 1).apply(acc);
        for (std::size_t j = 0; j <= k; ++j) {
            Vector t = chain.blocks[j].G.apply(psi(ys[j]));
            for (std::size_t i = j + 1; i <= k; ++i) t = hhat[i].apply(t);
            y += top(k + 1).apply(t);
        }
        ys.push_back(std::move(y));
    }
    return ys;
}

LinOperator jacobian_at(const ResidualChain& chain, const Vector& x0) {
    std::vector<LinOperator> factors;
    factors.reserve(chain.blocks.size() + 1);
    factors.push_back(chain.final_map);
    std::vector<LinOperator> layers;
    Vector x = x0;
    for (const auto& b : chain.blocks) {
        Vector y = b.W.apply(x);
        add_bias(y, b.W, b.w_bias);
        Vector slope = y.unaryExpr([&](double v) { return chain.sector.derivative(v); });
        LinOperator local = compose({b.G, LinOperator::diagonal(slope), b.W});
        layers.push_back(b.H.kind() == OpKind::zero ? local : sum(b.H, local));

        Vector g = b.G.apply(activate(chain.sector, y));
        add_bias(g, b.G, b.g_bias);
        Vector h = b.H.apply(x);
        add_bias(h, b.H, b.h_bias);
        x = h + g;
    }
    for (auto it = layers.rbegin(); it != layers.rend(); ++it) factors.push_back(*it);
    return compose(factors);
}

}  // namespace lipcert
