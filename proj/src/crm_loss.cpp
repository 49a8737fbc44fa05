#include <array>
#include <cmath>
#include <stdexcept>

#include "lipcert/crmtrain.hpp"
#include "lipcert/errors.hpp"
#include "lipcert/parallel.hpp"

namespace lipcert {

std::string to_string(GKind kind) { return kind == GKind::hinge ? "hinge" : "exp"; }

GKind parse_g_kind(const std::string& name) {
    if (name == "hinge") return GKind::hinge;
    if (name == "exp" || name == "exp_decay") return GKind::exp_decay;
    throw std::invalid_argument("unknown g function \"" + name + "\"");
}

double CrmConfig::penalty(double r) const {
    if (g == GKind::hinge) return std::max(0.0, rbar - r);
    return std::exp(-r / g_scale);
}

double CrmConfig::penalty_prime(double r) const {
    if (g == GKind::hinge) return r < rbar ? -1.0 : 0.0;
    return -std::exp(-r / g_scale) / g_scale;
}

void CrmConfig::validate() const {
    if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
    if (!(t > 0.0)) throw std::invalid_argument("temperature t must be > 0");
    if (g == GKind::hinge && !(rbar > 0.0)) throw std::invalid_argument("hinge target rbar must be > 0");
    if (g == GKind::exp_decay && !(g_scale > 0.0)) throw std::invalid_argument("exp scale must be > 0");
    if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must be in [0, 1)");
    if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
    if (method.kind != BoundKind::liplt)
        throw std::invalid_argument("training supports the liplt bound method only");
    if (norm_refresh_steps < 1) throw std::invalid_argument("norm_refresh_steps must be >= 1");
    if (!(eps >= 0.0)) throw std::invalid_argument("eps must be >= 0");
    train_power.validate();
    cert_power.validate();
}

namespace {

bool trainable_kind(OpKind k) { return k == OpKind::dense || k == OpKind::identity || k == OpKind::zero; }

Matrix apply_batch(const LinOperator& op, const Matrix& X) {
    switch (op.kind()) {
        case OpKind::dense: return *op.dense_matrix() * X;
        case OpKind::identity: return X;
        default: return Matrix::Zero(op.rows(), X.cols());
    }
}

Matrix apply_adjoint_batch(const LinOperator& op, const Matrix& Y) {
    switch (op.kind()) {
        case OpKind::dense: return op.dense_matrix()->transpose() * Y;
        case OpKind::identity: return Y;
        default: return Matrix::Zero(op.cols(), Y.cols());
    }
}

/// Gradient storage mirroring the chain: per block H, G, W.
struct Grads {
    std::vector<std::array<Matrix, 3>> weight;
    std::vector<std::array<Vector, 3>> bias;
    Matrix final_weight;
    Vector final_bias;

    explicit Grads(const ResidualChain& chain) {
        auto init_w = [](const LinOperator& op) {
            return op.kind() == OpKind::dense ? Matrix(Matrix::Zero(op.rows(), op.cols())) : Matrix();
        };
        auto init_b = [](const Vector& b) { return Vector(Vector::Zero(b.size())); };
        for (const auto& b : chain.blocks) {
            weight.push_back({init_w(b.H), init_w(b.G), init_w(b.W)});
            bias.push_back({init_b(b.h_bias), init_b(b.g_bias), init_b(b.w_bias)});
        }
        final_weight = init_w(chain.final_map);
        final_bias = init_b(chain.final_bias);
    }

    Vector flatten() const {
        std::vector<double> out;
        auto push_w = [&](const Matrix& m) {
            for (Index r = 0; r < m.rows(); ++r)
                for (Index c = 0; c < m.cols(); ++c) out.push_back(m(r, c));
        };
        auto push_b = [&](const Vector& v) { out.insert(out.end(), v.data(), v.data() + v.size()); };
        for (std::size_t k = 0; k < weight.size(); ++k)
            for (int s = 0; s < 3; ++s) {
                push_w(weight[k][s]);
                push_b(bias[k][s]);
            }
        push_w(final_weight);
        push_b(final_bias);
        return Eigen::Map<Vector>(out.data(), Index(out.size()));
    }
};

void add_outer(Matrix& target, double scale, const Vector& a, const Vector& b) {
    if (target.size()) target.noalias() += scale * a * b.transpose();
}

// ---------------------------------------------------------------------------
// Differentiable LipLT bounds

enum class Tag { constant, w, hhat, g, final };

struct Factor {
    LinOperator op;
    Tag tag;
    int index;
};

struct NormJob {
    std::vector<Factor> factors;
    std::tuple<int, int, int> key;
    double norm = 0.0;  // inflated
    SingularTriple triple;
    double adjoint = 0.0;
};

/// All norms of the recursion for a set of top operators ("targets").
/// Prefix jobs are keyed (-1, level, j), target jobs (target, L, j); j = -1
/// is the pure skip-path product.
class BoundTape {
public:
    BoundTape(const ResidualChain& chain, std::vector<Factor> target_rows)
        : chain_(chain), L_(chain.blocks.size()), targets_(target_rows.size()) {
        const double c = chain.sector.center();
        for (const auto& b : chain.blocks) hhat_.push_back(scale_shift(b.H, b.G, b.W, c));

        {
            NormJob first;
            first.factors = {{chain.blocks[0].W, Tag::w, 0}};
            first.key = {-1, 0, -1};
            jobs_.push_back(std::move(first));
        }
        for (std::size_t k = 0; k + 1 < L_; ++k)
            for (int j = -1; j <= int(k); ++j)
                jobs_.push_back(level_job({{chain.blocks[k + 1].W, Tag::w, int(k + 1)}}, k, j, {-1, int(k + 1), j}));
        for (std::size_t t = 0; t < targets_; ++t) {
            std::vector<Factor> top;
            if (target_rows[t].op.rows() > 0) top.push_back(target_rows[t]);
            top.push_back({chain.final_map, Tag::final, 0});
            for (int j = -1; j <= int(L_ - 1); ++j)
                jobs_.push_back(level_job(top, L_ - 1, j, {int(t), int(L_), j}));
        }
    }

    void evaluate(const PowerIterConfig& cfg, NormCache* cache) {
        const PowerIterConfig& run = cfg;
        parallel_for(jobs_.size(), [&](std::size_t i) {
            NormJob& job = jobs_[i];
            std::vector<LinOperator> ops;
            for (const auto& f : job.factors) ops.push_back(f.op);
            const Vector* warm = nullptr;
            if (cache) {
                auto it = cache->vectors.find(job.key);
                if (it != cache->vectors.end()) warm = &it->second;
            }
            job.triple = power_iteration(compose(ops), run, warm);
            job.norm = job.triple.sigma * (1.0 + run.inflation);
        });
        if (cache)
            for (const auto& job : jobs_) cache->vectors[job.key] = job.triple.v;

        const double r = chain_.sector.radius();
        std::size_t at = 0;
        m_.assign(1, jobs_[at++].norm);
        for (std::size_t k = 0; k + 1 < L_; ++k) {
            double value = jobs_[at++].norm;
            for (std::size_t j = 0; j <= k; ++j) value += r * jobs_[at++].norm * m_[j];
            m_.push_back(value);
        }
        prefix_jobs_ = at;
        bounds_.assign(targets_, 0.0);
        for (std::size_t t = 0; t < targets_; ++t) {
            double value = jobs_[at++].norm;
            for (std::size_t j = 0; j < L_; ++j) value += r * jobs_[at++].norm * m_[j];
            bounds_[t] = value;
        }
    }

    const std::vector<double>& bounds() const { return bounds_; }

    /// Adds d(sum_t adj[t] * bound_t) / d(params) into grads.
    void backward(const std::vector<double>& adj, double inflation, Grads& grads) {
        const double r = chain_.sector.radius();
        std::vector<double> m_adj(L_, 0.0);
        std::size_t at = prefix_jobs_;
        for (std::size_t t = 0; t < targets_; ++t) {
            jobs_[at++].adjoint += adj[t];
            for (std::size_t j = 0; j < L_; ++j, ++at) {
                jobs_[at].adjoint += adj[t] * r * m_[j];
                m_adj[j] += adj[t] * r * jobs_[at].norm;
            }
        }
        // Prefix levels, top-down. Level k+1 occupies jobs [start, start+k+2).
        for (std::size_t k1 = L_ - 1; k1 >= 1; --k1) {
            const std::size_t k = k1 - 1;
            const std::size_t start = 1 + (k * (k + 3)) / 2;
            jobs_[start].adjoint += m_adj[k1];
            for (std::size_t j = 0; j <= k; ++j) {
                jobs_[start + 1 + j].adjoint += m_adj[k1] * r * m_[j];
                m_adj[j] += m_adj[k1] * r * jobs_[start + 1 + j].norm;
            }
        }
        jobs_[0].adjoint += m_adj[0];

        for (auto& job : jobs_) {
            if (job.adjoint == 0.0 || job.triple.sigma == 0.0) continue;
            accumulate(job, job.adjoint * (1.0 + inflation), grads);
        }
    }

private:
    NormJob level_job(std::vector<Factor> top, std::size_t k, int j, std::tuple<int, int, int> key) const {
        NormJob job;
        job.factors = std::move(top);
        for (int i = int(k); i > j; --i) job.factors.push_back({hhat_[std::size_t(i)], Tag::hhat, i});
        if (j >= 0) job.factors.push_back({chain_.blocks[std::size_t(j)].G, Tag::g, j});
        job.key = key;
        return job;
    }

    /// d sigma = u^T dA v; for A = F_1 .. F_p the factor F_q receives
    /// (F_{q-1}^T .. F_1^T u)(F_{q+1} .. F_p v)^T.
    void accumulate(const NormJob& job, double scale, Grads& grads) const {
        const std::size_t p = job.factors.size();
        std::vector<Vector> right(p);
        right[p - 1] = job.triple.v;
        for (std::size_t q = p - 1; q > 0; --q) right[q - 1] = job.factors[q].op.apply(right[q]);
        Vector left = job.triple.u;
        const double c = chain_.sector.center();
        for (std::size_t q = 0; q < p; ++q) {
            const Factor& f = job.factors[q];
            const Vector& b = right[q];
            switch (f.tag) {
                case Tag::constant: break;
                case Tag::final: add_outer(grads.final_weight, scale, left, b); break;
                case Tag::w: add_outer(grads.weight[std::size_t(f.index)][2], scale, left, b); break;
                case Tag::g: add_outer(grads.weight[std::size_t(f.index)][1], scale, left, b); break;
                case Tag::hhat: {
                    const auto& blk = chain_.blocks[std::size_t(f.index)];
                    auto& w = grads.weight[std::size_t(f.index)];
                    add_outer(w[0], scale, left, b);
                    if (w[1].size()) add_outer(w[1], scale * c, left, blk.W.apply(b));
                    if (w[2].size()) add_outer(w[2], scale * c, blk.G.apply_adjoint(left), b);
                    break;
                }
            }
            if (q + 1 < p) left = f.op.apply_adjoint(left);
        }
    }

    const ResidualChain& chain_;
    std::size_t L_;
    std::size_t targets_;
    std::vector<LinOperator> hhat_;
    std::vector<NormJob> jobs_;
    std::size_t prefix_jobs_ = 0;
    std::vector<double> m_;
    std::vector<double> bounds_;
};

std::vector<Factor> target_rows(PairwiseMode mode, Index K) {
    std::vector<Factor> rows;
    switch (mode) {
        case PairwiseMode::direct:
            for (Index i = 0; i < K; ++i)
                for (Index j = i + 1; j < K; ++j) rows.push_back({row_diff(K, i, j), Tag::constant, 0});
            break;
        case PairwiseMode::class_sum:
            for (Index i = 0; i < K; ++i) rows.push_back({row_select(K, i), Tag::constant, 0});
            break;
        case PairwiseMode::sqrt2:
            rows.push_back({LinOperator::zero(0, 0), Tag::constant, 0});  // no row: whole final map
            break;
    }
    return rows;
}

Matrix pairwise_from_targets(PairwiseMode mode, Index K, const std::vector<double>& b) {
    Matrix P = Matrix::Zero(K, K);
    std::size_t n = 0;
    for (Index i = 0; i < K; ++i)
        for (Index j = 0; j < K; ++j) {
            if (i == j) continue;
            switch (mode) {
                case PairwiseMode::direct:
                    if (i < j) {
                        P(i, j) = P(j, i) = b[n++];
                    }
                    break;
                case PairwiseMode::class_sum: P(i, j) = b[std::size_t(i)] + b[std::size_t(j)]; break;
                case PairwiseMode::sqrt2: P(i, j) = std::sqrt(2.0) * b[0]; break;
            }
        }
    return P;
}

std::vector<double> target_adjoints(PairwiseMode mode, const Matrix& dP, std::size_t count) {
    const Index K = dP.rows();
    std::vector<double> adj(count, 0.0);
    std::size_t n = 0;
    for (Index i = 0; i < K; ++i)
        for (Index j = 0; j < K; ++j) {
            if (i == j) continue;
            switch (mode) {
                case PairwiseMode::direct:
                    if (i < j) adj[n++] = dP(i, j) + dP(j, i);
                    break;
                case PairwiseMode::class_sum:
                    adj[std::size_t(i)] += dP(i, j);
                    adj[std::size_t(j)] += dP(i, j);
                    break;
                case PairwiseMode::sqrt2: adj[0] += std::sqrt(2.0) * dP(i, j); break;
            }
        }
    return adj;
}

// ---------------------------------------------------------------------------
// Network forward/backward on a batch

struct Tape {
    std::vector<Matrix> x;    // block inputs x_0..x_{L-1}, then x_L
    std::vector<Matrix> y;    // pre-activations
    std::vector<Matrix> phi;  // activations
    Matrix z;
};

void add_bias(Matrix& m, const Vector& b) {
    if (b.size()) m.colwise() += b;
}

Tape run_forward(const ResidualChain& chain, const Matrix& X) {
    Tape tape;
    tape.x.push_back(X);
    for (const auto& b : chain.blocks) {
        const Matrix& x = tape.x.back();
        Matrix y = apply_batch(b.W, x);
        add_bias(y, b.w_bias);
        Matrix phi = y.unaryExpr([&](double v) { return chain.sector.apply(v); });
        Matrix next = apply_batch(b.G, phi);
        add_bias(next, b.g_bias);
        if (b.H.kind() != OpKind::zero) next += apply_batch(b.H, x);
        add_bias(next, b.h_bias);
        tape.y.push_back(std::move(y));
        tape.phi.push_back(std::move(phi));
        tape.x.push_back(std::move(next));
    }
    tape.z = apply_batch(chain.final_map, tape.x.back());
    add_bias(tape.z, chain.final_bias);
    return tape;
}

void run_backward(const ResidualChain& chain, const Tape& tape, const Matrix& dz, Grads& grads) {
    if (grads.final_weight.size()) grads.final_weight.noalias() += dz * tape.x.back().transpose();
    if (grads.final_bias.size()) grads.final_bias += dz.rowwise().sum();
    Matrix dx = apply_adjoint_batch(chain.final_map, dz);
    for (std::size_t k = chain.blocks.size(); k-- > 0;) {
        const auto& b = chain.blocks[k];
        auto& gw = grads.weight[k];
        auto& gb = grads.bias[k];
        if (gb[0].size()) gb[0] += dx.rowwise().sum();
        if (gb[1].size()) gb[1] += dx.rowwise().sum();
        if (gw[1].size()) gw[1].noalias() += dx * tape.phi[k].transpose();
        Matrix dy = apply_adjoint_batch(b.G, dx);
        dy.array() *= tape.y[k].unaryExpr([&](double v) { return chain.sector.derivative(v); }).array();
        if (gb[2].size()) gb[2] += dy.rowwise().sum();
        if (gw[2].size()) gw[2].noalias() += dy * tape.x[k].transpose();
        if (gw[0].size()) gw[0].noalias() += dx * tape.x[k].transpose();
        Matrix next = apply_adjoint_batch(b.W, dy);
        if (b.H.kind() != OpKind::zero) next += apply_adjoint_batch(b.H, dx);
        dx = std::move(next);
    }
}

LossGradient evaluate(const ResidualChain& chain, const Dataset& batch, const CrmConfig& cfg, NormCache* cache,
                      bool want_gradient) {
    cfg.validate();
    check_trainable(chain);
    if (batch.size() < 1) throw std::invalid_argument("empty batch");
    if (batch.input_dim() != chain.input_dim()) throw ShapeError("batch input size does not match the chain");

    const Index K = chain.num_classes;
    const Index B = batch.size();
    const Tape tape = run_forward(chain, batch.inputs);
    if (!tape.z.allFinite()) throw NumericalError("non-finite logits");

    const bool regularize = cfg.lambda > 0.0;
    std::optional<BoundTape> bounds;
    Matrix P;
    if (regularize) {
        bounds.emplace(chain, target_rows(cfg.mode, K));
        PowerIterConfig power = cfg.train_power;
        if (cache && cache->step % cfg.norm_refresh_steps != 0 && !cache->vectors.empty()) power.max_iters = 1;
        bounds->evaluate(power, cache);
        P = pairwise_from_targets(cfg.mode, K, bounds->bounds());
    }

    LossGradient out;
    Matrix dz = Matrix::Zero(K, B);
    Matrix dP = Matrix::Zero(K, K);
    double ce_total = 0.0, reg_total = 0.0;
    if (regularize) out.loss.soft_radii.resize(std::size_t(B));

    for (Index s = 0; s < B; ++s) {
        const Vector z = tape.z.col(s);
        const int y = batch.labels[std::size_t(s)];
        const double top = z.maxCoeff();
        const Vector e = (z.array() - top).exp();
        const double lse = top + std::log(e.sum());
        ce_total += lse - z[y];
        Vector grad_z = e / e.sum();
        grad_z[y] -= 1.0;

        if (regularize) {
            const Vector row = P.row(y).transpose();
            const double radius = soft_certified_radius(z, y, row, cfg.t);
            out.loss.soft_radii[std::size_t(s)] = radius;
            if (logit_margin(z, y) > 0.0) {
                reg_total += cfg.penalty(radius);
                const double gp = cfg.penalty_prime(radius);
                if (gp != 0.0) {
                    // R = -t^-1 LSE(-t a), a_i = (z_y - z_i) / L_yi; dR/da_i = softmax(-t a)_i.
                    Vector a(K), w(K);
                    double amin = std::numeric_limits<double>::infinity();
                    for (Index i = 0; i < K; ++i)
                        if (i != y) {
                            a[i] = (z[y] - z[i]) / row[i];
                            amin = std::min(amin, a[i]);
                        }
                    double wsum = 0.0;
                    for (Index i = 0; i < K; ++i)
                        if (i != y) wsum += (w[i] = std::exp(-cfg.t * (a[i] - amin)));
                    const double coef = cfg.lambda * gp;
                    for (Index i = 0; i < K; ++i) {
                        if (i == y) continue;
                        const double p = w[i] / wsum;
                        grad_z[y] += coef * p / row[i];
                        grad_z[i] -= coef * p / row[i];
                        dP(y, i) += coef * (-p * a[i] / row[i]) / double(B);
                    }
                }
            }
        }
        dz.col(s) = grad_z / double(B);
    }

    out.loss.surrogate_margin = ce_total / double(B);
    out.loss.regularizer = reg_total / double(B);
    out.loss.total = out.loss.surrogate_margin + cfg.lambda * out.loss.regularizer;
    if (!std::isfinite(out.loss.total)) throw NumericalError("non-finite loss");

    if (want_gradient) {
        Grads grads(chain);
        run_backward(chain, tape, dz, grads);
        if (regularize)
            bounds->backward(target_adjoints(cfg.mode, dP, bounds->bounds().size()), cfg.train_power.inflation,
                             grads);
        out.gradient = grads.flatten();
    }
    if (cache) ++cache->step;
    return out;
}

}  // namespace

void check_trainable(const ResidualChain& chain) {
    chain.validate();
    for (std::size_t k = 0; k < chain.blocks.size(); ++k) {
        const auto& b = chain.blocks[k];
        if (b.W.kind() != OpKind::dense || !trainable_kind(b.H.kind()) || !trainable_kind(b.G.kind()))
            throw std::invalid_argument("block " + std::to_string(k) +
                                        " is not dense; training supports dense chains only");
    }
    if (chain.final_map.kind() != OpKind::dense && chain.final_map.kind() != OpKind::identity)
        throw std::invalid_argument("final map must be dense or identity for training");
}

Vector flatten_parameters(const ResidualChain& chain) {
    Grads g(chain);  // same layout, filled with values instead of zeros
    for (std::size_t k = 0; k < chain.blocks.size(); ++k) {
        const auto& b = chain.blocks[k];
        const LinOperator* ops[3] = {&b.H, &b.G, &b.W};
        const Vector* biases[3] = {&b.h_bias, &b.g_bias, &b.w_bias};
        for (int s = 0; s < 3; ++s) {
            if (g.weight[k][s].size()) g.weight[k][s] = *ops[s]->dense_matrix();
            g.bias[k][s] = *biases[s];
        }
    }
    if (g.final_weight.size()) g.final_weight = *chain.final_map.dense_matrix();
    g.final_bias = chain.final_bias;
    return g.flatten();
}

ResidualChain with_parameters(const ResidualChain& chain, const Vector& params) {
    ResidualChain out = chain;
    Index at = 0;
    auto take_w = [&](LinOperator& op) {
        if (op.kind() != OpKind::dense) return;
        Matrix m(op.rows(), op.cols());
        if (at + m.size() > params.size()) throw std::invalid_argument("parameter vector too short");
        for (Index r = 0; r < m.rows(); ++r)
            for (Index c = 0; c < m.cols(); ++c) m(r, c) = params[at++];
        op = LinOperator::dense(std::move(m));
    };
    auto take_b = [&](Vector& b) {
        if (at + b.size() > params.size()) throw std::invalid_argument("parameter vector too short");
        b = params.segment(at, b.size());
        at += b.size();
    };
    for (auto& b : out.blocks) {
        take_w(b.H);
        take_b(b.h_bias);
        take_w(b.G);
        take_b(b.g_bias);
        take_w(b.W);
        take_b(b.w_bias);
    }
    take_w(out.final_map);
    take_b(out.final_bias);
    if (at != params.size()) throw std::invalid_argument("parameter vector has the wrong length");
    return out;
}

LossTerms crm_loss(const ResidualChain& chain, const Dataset& batch, const CrmConfig& cfg, NormCache* cache) {
    return evaluate(chain, batch, cfg, cache, false).loss;
}

LossGradient loss_gradient(const ResidualChain& chain, const Dataset& batch, const CrmConfig& cfg,
                           NormCache* cache) {
    return evaluate(chain, batch, cfg, cache, true);
}

}  // namespace lipcert
