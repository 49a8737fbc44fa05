#include "lipcert/linop.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "lipcert/errors.hpp"

namespace lipcert {

std::string to_string(OpKind kind) {
    switch (kind) {
        case OpKind::dense: return "dense";
        case OpKind::conv2d: return "conv2d";
        case OpKind::identity: return "identity";
        case OpKind::zero: return "zero";
        case OpKind::scaled: return "scaled";
        case OpKind::sum: return "sum";
        case OpKind::composition: return "composition";
        case OpKind::row_diff: return "row_diff";
        case OpKind::diagonal: return "diagonal";
    }
    return "unknown";
}

void Conv2dGeometry::validate() const {
    if (in_ch <= 0 || out_ch <= 0 || kh <= 0 || kw <= 0 || in_h <= 0 || in_w <= 0)
        throw ShapeError("conv2d: channel, kernel and input sizes must be positive");
    if (stride <= 0) throw ShapeError("conv2d: stride must be positive");
    if (pad < 0) throw ShapeError("conv2d: padding must be non-negative");
    if (in_h + 2 * pad < kh || in_w + 2 * pad < kw)
        throw ShapeError("conv2d: kernel larger than padded input");
}

namespace detail {

class OpNode {
public:
    OpNode(OpKind kind, Index rows, Index cols) : kind(kind), rows(rows), cols(cols) {}
    virtual ~OpNode() = default;

    virtual Vector apply(const Vector& x) const = 0;
    virtual Vector apply_adjoint(const Vector& y) const = 0;

    const OpKind kind;
    const Index rows;
    const Index cols;
};

namespace {

class DenseNode final : public OpNode {
public:
    explicit DenseNode(Matrix m) : OpNode(OpKind::dense, m.rows(), m.cols()), m(std::move(m)) {}
    Vector apply(const Vector& x) const override { return m * x; }
    Vector apply_adjoint(const Vector& y) const override { return m.transpose() * y; }
    const Matrix m;
};

class ConvNode final : public OpNode {
public:
    ConvNode(const Conv2dGeometry& g, Vector k)
        : OpNode(OpKind::conv2d, g.out_dim(), g.in_dim()), geom(g), kernel(std::move(k)) {}

    Vector apply(const Vector& x) const override {
        const auto& g = geom;
        const int oh = g.out_h(), ow = g.out_w();
        Vector y = Vector::Zero(rows);
        for (int o = 0; o < g.out_ch; ++o) {
            for (int c = 0; c < g.in_ch; ++c) {
                const double* kbase = kernel.data() + (Index(o) * g.in_ch + c) * g.kh * g.kw;
                const double* xbase = x.data() + Index(c) * g.in_h * g.in_w;
                double* ybase = y.data() + Index(o) * oh * ow;
                for (int i = 0; i < oh; ++i) {
                    for (int j = 0; j < ow; ++j) {
                        double acc = 0.0;
                        for (int a = 0; a < g.kh; ++a) {
                            const int r = i * g.stride - g.pad + a;
                            if (r < 0 || r >= g.in_h) continue;
                            for (int b = 0; b < g.kw; ++b) {
                                const int s = j * g.stride - g.pad + b;
                                if (s < 0 || s >= g.in_w) continue;
                                acc += kbase[a * g.kw + b] * xbase[r * g.in_w + s];
                            }
                        }
                        ybase[i * ow + j] += acc;
                    }
                }
            }
        }
        return y;
    }

    Vector apply_adjoint(const Vector& y) const override {
        const auto& g = geom;
        const int oh = g.out_h(), ow = g.out_w();
        Vector x = Vector::Zero(cols);
        for (int o = 0; o < g.out_ch; ++o) {
            for (int c = 0; c < g.in_ch; ++c) {
                const double* kbase = kernel.data() + (Index(o) * g.in_ch + c) * g.kh * g.kw;
                double* xbase = x.data() + Index(c) * g.in_h * g.in_w;
                const double* ybase = y.data() + Index(o) * oh * ow;
                for (int i = 0; i < oh; ++i) {
                    for (int j = 0; j < ow; ++j) {
                        const double v = ybase[i * ow + j];
                        if (v == 0.0) continue;
                        for (int a = 0; a < g.kh; ++a) {
                            const int r = i * g.stride - g.pad + a;
                            if (r < 0 || r >= g.in_h) continue;
                            for (int b = 0; b < g.kw; ++b) {
                                const int s = j * g.stride - g.pad + b;
                                if (s < 0 || s >= g.in_w) continue;
                                xbase[r * g.in_w + s] += kbase[a * g.kw + b] * v;
                            }
                        }
                    }
                }
            }
        }
        return x;
    }

    const Conv2dGeometry geom;
    const Vector kernel;
};

class IdentityNode final : public OpNode {
public:
    explicit IdentityNode(Index n) : OpNode(OpKind::identity, n, n) {}
    Vector apply(const Vector& x) const override { return x; }
    Vector apply_adjoint(const Vector& y) const override { return y; }
};

class ZeroNode final : public OpNode {
public:
    ZeroNode(Index r, Index c) : OpNode(OpKind::zero, r, c) {}
    Vector apply(const Vector&) const override { return Vector::Zero(rows); }
    Vector apply_adjoint(const Vector&) const override { return Vector::Zero(cols); }
};

class DiagonalNode final : public OpNode {
public:
    explicit DiagonalNode(Vector d) : OpNode(OpKind::diagonal, d.size(), d.size()), d(std::move(d)) {}
    Vector apply(const Vector& x) const override { return d.cwiseProduct(x); }
    Vector apply_adjoint(const Vector& y) const override { return d.cwiseProduct(y); }
    const Vector d;
};

class ScaledNode final : public OpNode {
public:
    ScaledNode(double c, LinOperator a)
        : OpNode(OpKind::scaled, a.rows(), a.cols()), c(c), a(std::move(a)) {}
    Vector apply(const Vector& x) const override { return c * a.apply(x); }
    Vector apply_adjoint(const Vector& y) const override { return c * a.apply_adjoint(y); }
    const double c;
    const LinOperator a;
};

class SumNode final : public OpNode {
public:
    SumNode(LinOperator a, LinOperator b)
        : OpNode(OpKind::sum, a.rows(), a.cols()), a(std::move(a)), b(std::move(b)) {}
    Vector apply(const Vector& x) const override { return a.apply(x) + b.apply(x); }
    Vector apply_adjoint(const Vector& y) const override {
        return a.apply_adjoint(y) + b.apply_adjoint(y);
    }
    const LinOperator a;
    const LinOperator b;
};

class CompositionNode final : public OpNode {
public:
    explicit CompositionNode(std::vector<LinOperator> ops)
        : OpNode(OpKind::composition, ops.front().rows(), ops.back().cols()), ops(std::move(ops)) {}
    Vector apply(const Vector& x) const override {
        Vector v = x;
        for (auto it = ops.rbegin(); it != ops.rend(); ++it) v = it->apply(v);
        return v;
    }
    Vector apply_adjoint(const Vector& y) const override {
        Vector v = y;
        for (const auto& op : ops) v = op.apply_adjoint(v);
        return v;
    }
    const std::vector<LinOperator> ops;
};

class RowDiffNode final : public OpNode {
public:
    RowDiffNode(Index k, Index i, Index j) : OpNode(OpKind::row_diff, 1, k), i(i), j(j) {}
    Vector apply(const Vector& x) const override {
        Vector y(1);
        y[0] = x[i] - x[j];
        return y;
    }
    Vector apply_adjoint(const Vector& y) const override {
        Vector x = Vector::Zero(cols);
        x[i] = y[0];
        x[j] = -y[0];
        return x;
    }
    const Index i;
    const Index j;
};

bool same_bits(const double* a, const double* b, Index n) {
    return n == 0 || std::memcmp(a, b, sizeof(double) * static_cast<std::size_t>(n)) == 0;
}

}  // namespace
}  // namespace detail

using namespace detail;

LinOperator::LinOperator() : node_(std::make_shared<ZeroNode>(0, 0)) {}

LinOperator::LinOperator(std::shared_ptr<const OpNode> node) : node_(std::move(node)) {}

LinOperator LinOperator::dense(Matrix m) { return LinOperator(std::make_shared<DenseNode>(std::move(m))); }

LinOperator LinOperator::conv2d(const Conv2dGeometry& geom, Vector kernel) {
    geom.validate();
    if (kernel.size() != geom.kernel_size())
        throw ShapeError("conv2d: kernel has " + std::to_string(kernel.size()) +
                         " entries, geometry needs " + std::to_string(geom.kernel_size()));
    return LinOperator(std::make_shared<ConvNode>(geom, std::move(kernel)));
}

LinOperator LinOperator::identity(Index n) { return LinOperator(std::make_shared<IdentityNode>(n)); }

LinOperator LinOperator::zero(Index rows, Index cols) {
    return LinOperator(std::make_shared<ZeroNode>(rows, cols));
}

LinOperator LinOperator::diagonal(Vector d) {
    return LinOperator(std::make_shared<DiagonalNode>(std::move(d)));
}

Index LinOperator::rows() const { return node_->rows; }
Index LinOperator::cols() const { return node_->cols; }
OpKind LinOperator::kind() const { return node_->kind; }

Vector LinOperator::apply(const Vector& x) const {
    if (x.size() != cols())
        throw ShapeError("apply: expected input of size " + std::to_string(cols()) + ", got " +
                         std::to_string(x.size()));
    return node_->apply(x);
}

Vector LinOperator::apply_adjoint(const Vector& y) const {
    if (y.size() != rows())
        throw ShapeError("apply_adjoint: expected input of size " + std::to_string(rows()) +
                         ", got " + std::to_string(y.size()));
    return node_->apply_adjoint(y);
}

const Matrix* LinOperator::dense_matrix() const {
    auto* d = dynamic_cast<const DenseNode*>(node_.get());
    return d ? &d->m : nullptr;
}

const Conv2dGeometry* LinOperator::conv_geometry() const {
    auto* c = dynamic_cast<const ConvNode*>(node_.get());
    return c ? &c->geom : nullptr;
}

const Vector* LinOperator::conv_kernel() const {
    auto* c = dynamic_cast<const ConvNode*>(node_.get());
    return c ? &c->kernel : nullptr;
}

const Vector* LinOperator::diagonal_values() const {
    auto* d = dynamic_cast<const DiagonalNode*>(node_.get());
    return d ? &d->d : nullptr;
}

Matrix LinOperator::materialize() const {
    if (auto* m = dense_matrix()) return *m;
    Matrix out(rows(), cols());
    Vector e = Vector::Zero(cols());
    for (Index c = 0; c < cols(); ++c) {
        e[c] = 1.0;
        out.col(c) = node_->apply(e);
        e[c] = 0.0;
    }
    return out;
}

std::vector<LinOperator> LinOperator::operands() const {
    switch (kind()) {
        case OpKind::scaled: return {static_cast<const ScaledNode&>(*node_).a};
        case OpKind::sum: {
            auto& s = static_cast<const SumNode&>(*node_);
            return {s.a, s.b};
        }
        case OpKind::composition: return static_cast<const CompositionNode&>(*node_).ops;
        default: return {};
    }
}

double LinOperator::scale() const {
    if (kind() == OpKind::scaled) return static_cast<const ScaledNode&>(*node_).c;
    return 1.0;
}

bool operator==(const LinOperator& a, const LinOperator& b) {
    if (a.node_ == b.node_) return true;
    if (a.kind() != b.kind() || a.rows() != b.rows() || a.cols() != b.cols()) return false;
    switch (a.kind()) {
        case OpKind::dense: {
            const Matrix& x = *a.dense_matrix();
            const Matrix& y = *b.dense_matrix();
            return same_bits(x.data(), y.data(), x.size());
        }
        case OpKind::conv2d:
            return *a.conv_geometry() == *b.conv_geometry() &&
                   same_bits(a.conv_kernel()->data(), b.conv_kernel()->data(), a.conv_kernel()->size());
        case OpKind::diagonal:
            return same_bits(a.diagonal_values()->data(), b.diagonal_values()->data(), a.rows());
        case OpKind::identity:
        case OpKind::zero: return true;
        case OpKind::row_diff: {
            auto& x = static_cast<const RowDiffNode&>(*a.node_);
            auto& y = static_cast<const RowDiffNode&>(*b.node_);
            return x.i == y.i && x.j == y.j;
        }
        case OpKind::scaled:
        case OpKind::sum:
        case OpKind::composition: {
            if (a.scale() != b.scale()) return false;
            auto xa = a.operands();
            auto xb = b.operands();
            if (xa.size() != xb.size()) return false;
            for (std::size_t i = 0; i < xa.size(); ++i)
                if (!(xa[i] == xb[i])) return false;
            return true;
        }
    }
    return false;
}

LinOperator compose(const std::vector<LinOperator>& ops) {
    if (ops.empty()) throw std::invalid_argument("compose: empty operator list");
    for (std::size_t k = 0; k + 1 < ops.size(); ++k) {
        if (ops[k].cols() != ops[k + 1].rows()) {
            std::ostringstream msg;
            msg << "compose: dimension mismatch between operand " << k << " (" << ops[k].rows()
                << "x" << ops[k].cols() << ") and operand " << k + 1 << " (" << ops[k + 1].rows()
                << "x" << ops[k + 1].cols() << ")";
            throw ShapeError(msg.str());
        }
    }
    if (ops.size() == 1) return ops.front();
    return LinOperator(std::make_shared<CompositionNode>(ops));
}

LinOperator sum(const LinOperator& a, const LinOperator& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError("sum: operands have different shapes");
    return LinOperator(std::make_shared<SumNode>(a, b));
}

LinOperator scaled(double c, const LinOperator& a) {
    return LinOperator(std::make_shared<ScaledNode>(c, a));
}

LinOperator scale_shift(const LinOperator& H, const LinOperator& G, const LinOperator& W,
                        double c) {
    if (G.cols() != W.rows() || H.rows() != G.rows() || H.cols() != W.cols())
        throw ShapeError("scale_shift: H, G, W shapes do not match");
    if (c == 0.0) return H;
    LinOperator mixed = scaled(c, compose({G, W}));
    if (H.kind() == OpKind::zero) return mixed;
    return sum(H, mixed);
}

LinOperator row_diff(Index classes, Index i, Index j) {
    if (i == j) throw std::invalid_argument("row_diff: i and j must differ");
    if (i < 0 || j < 0 || i >= classes || j >= classes)
        throw std::out_of_range("row_diff: class index out of range");
    return LinOperator(std::make_shared<RowDiffNode>(classes, i, j));
}

LinOperator row_select(Index classes, Index i) {
    if (i < 0 || i >= classes) throw std::out_of_range("row_select: class index out of range");
    Matrix row = Matrix::Zero(1, classes);
    row(0, i) = 1.0;
    return LinOperator::dense(std::move(row));
}

}  // namespace lipcert
