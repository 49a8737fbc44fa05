#include "lipcert/liplt.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>

#include "lipcert/errors.hpp"
#include "lipcert/parallel.hpp"

namespace lipcert {

std::string to_string(const BoundMethod& method) {
    switch (method.kind) {
        case BoundKind::naive: return "naive";
        case BoundKind::liplt: return "liplt";
        case BoundKind::refined_sn: return "refined:sn";
        case BoundKind::refined_aol: return "refined:aol";
        case BoundKind::refined_sll: return "refined:sll";
    }
    return "unknown";
}

BoundMethod parse_bound_method(const std::string& name) {
    if (name == "naive") return BoundMethod::naive();
    if (name == "liplt") return BoundMethod::liplt();
    if (name == "refined:sn") return BoundMethod::refined_sn();
    if (name == "refined:aol") return BoundMethod::refined_aol();
    if (name == "refined:sll") return BoundMethod::refined_sll();
    throw std::invalid_argument("unknown bound method \"" + name + "\"");
}

std::string to_string(PairwiseMode mode) {
    switch (mode) {
        case PairwiseMode::direct: return "direct";
        case PairwiseMode::class_sum: return "class_sum";
        case PairwiseMode::sqrt2: return "sqrt2";
    }
    return "unknown";
}

PairwiseMode parse_pairwise_mode(const std::string& name) {
    if (name == "direct") return PairwiseMode::direct;
    if (name == "class_sum") return PairwiseMode::class_sum;
    if (name == "sqrt2") return PairwiseMode::sqrt2;
    throw std::invalid_argument("unknown pairwise mode \"" + name + "\"");
}

double BoundReport::mean_pairwise() const {
    const Index K = pairwise.rows();
    double total = 0.0;
    Index count = 0;
    for (Index i = 0; i < K; ++i)
        for (Index j = i + 1; j < K; ++j) {
            total += pairwise(i, j);
            ++count;
        }
    return count ? total / double(count) : 0.0;
}

namespace {

/// Norms that depend only on the chain body, shared by every final map.
struct Prefix {
    std::vector<LinOperator> hhat;  // H_k + c G_k W_k
    std::vector<double> m;          // m_0 .. m_{L-1}
    std::vector<double> naive;      // ||H_k|| + beta ||G_k|| ||W_k||
};

/// Operator W_{k+1} Hh_k .. Hh_{j+1} G_j (j >= 0) or W_{k+1} Hh_k .. Hh_0
/// (j = -1), with `top` standing in for W_{k+1}.
LinOperator level_operator(const ResidualChain& chain, const std::vector<LinOperator>& hhat,
                           const LinOperator& top, std::size_t k, long j) {
    std::vector<LinOperator> ops;
    ops.reserve(k + 3);
    ops.push_back(top);
    for (long i = static_cast<long>(k); i > j; --i) ops.push_back(hhat[static_cast<std::size_t>(i)]);
    if (j >= 0) ops.push_back(chain.blocks[static_cast<std::size_t>(j)].G);
    return compose(ops);
}

/// One level of the recursion: m_{k+1} from the norms of its k+2 operators.
double level_value(const std::vector<double>& norms, const std::vector<double>& m, double radius) {
    double value = norms[0];
    for (std::size_t j = 0; j + 1 < norms.size(); ++j) value += radius * norms[j + 1] * m[j];
    return value;
}

Prefix compute_prefix(const ResidualChain& chain, const PowerIterConfig& cfg, bool want_naive) {
    const auto& s = chain.sector;
    const std::size_t L = chain.blocks.size();
    Prefix p;
    for (const auto& b : chain.blocks) p.hhat.push_back(scale_shift(b.H, b.G, b.W, s.center()));

    // Jobs: m_0 = ||W_0||, then for each level k+1 = 1..L-1 the k+2 operators.
    std::vector<LinOperator> jobs;
    jobs.push_back(chain.blocks[0].W);
    for (std::size_t k = 0; k + 1 < L; ++k)
        for (long j = -1; j <= static_cast<long>(k); ++j)
            jobs.push_back(level_operator(chain, p.hhat, chain.blocks[k + 1].W, k, j));
    if (want_naive)
        for (const auto& b : chain.blocks) {
            jobs.push_back(b.H);
            jobs.push_back(b.G);
            jobs.push_back(b.W);
        }

    std::vector<double> norms(jobs.size());
    parallel_for(jobs.size(), [&](std::size_t i) { norms[i] = spectral_norm(jobs[i], cfg); });

    std::size_t at = 0;
    p.m.push_back(norms[at++]);
    for (std::size_t k = 0; k + 1 < L; ++k) {
        std::vector<double> level(norms.begin() + long(at), norms.begin() + long(at + k + 2));
        at += k + 2;
        p.m.push_back(level_value(level, p.m, s.radius()));
    }
    if (want_naive)
        for (std::size_t k = 0; k < L; ++k, at += 3)
            p.naive.push_back(norms[at] + s.beta * norms[at + 1] * norms[at + 2]);
    return p;
}

double top_level(const ResidualChain& chain, const Prefix& p, const LinOperator& final,
                 const PowerIterConfig& cfg) {
    const std::size_t k = chain.blocks.size() - 1;
    std::vector<double> norms(k + 2);
    for (long j = -1; j <= static_cast<long>(k); ++j)
        norms[static_cast<std::size_t>(j + 1)] = spectral_norm(level_operator(chain, p.hhat, final, k, j), cfg);
    return level_value(norms, p.m, chain.sector.radius());
}

double naive_top(const Prefix& p, const LinOperator& final, const PowerIterConfig& cfg) {
    double value = spectral_norm(final, cfg);
    for (double f : p.naive) value *= f;
    return value;
}

void check_single_block(const ResidualChain& chain, const BoundMethod& method) {
    if (chain.blocks.size() != 1)
        throw std::invalid_argument("method " + to_string(method) +
                                    " is implemented for single-block chains only");
}

/// The block of x -> F (H x + G phi(W x)).
ResidualBlock fold_final(const ResidualBlock& b, const LinOperator& F) {
    ResidualBlock out;
    out.H = b.H.kind() == OpKind::zero ? LinOperator::zero(F.rows(), b.H.cols()) : compose({F, b.H});
    out.G = compose({F, b.G});
    out.W = b.W;
    return out;
}

/// Bound for an arbitrary final map, reusing precomputed body norms.
double bound_with_prefix(const ResidualChain& chain, const Prefix& p, const LinOperator& final,
                         const BoundMethod& method, const PowerIterConfig& cfg) {
    switch (method.kind) {
        case BoundKind::naive: return naive_top(p, final, cfg);
        case BoundKind::liplt: return top_level(chain, p, final, cfg);
        default:
            check_single_block(chain, method);
            return refined_single(fold_final(chain.blocks[0], final), chain.sector, method, cfg);
    }
}

}  // namespace

double naive_bound(const ResidualChain& chain, const PowerIterConfig& cfg) {
    chain.validate();
    const Prefix p = compute_prefix(chain, cfg, true);
    return naive_top(p, chain.final_map, cfg);
}

double liplt_single(const ResidualBlock& block, const ActivationSector& sector,
                    const PowerIterConfig& cfg) {
    block.validate();
    const LinOperator shifted = scale_shift(block.H, block.G, block.W, sector.center());
    const double skip = spectral_norm(shifted, cfg);
    if (sector.radius() == 0.0) return skip;
    return skip + sector.radius() * spectral_norm(block.G, cfg) * spectral_norm(block.W, cfg);
}

Vector refined_diagonal(const Matrix& G, const Vector& q) {
    const Matrix gram = (G.transpose() * G).cwiseAbs();
    const Index n = gram.rows();
    Vector weights = q.size() ? q : Vector::Ones(n);
    if (weights.size() != n)
        throw std::invalid_argument("SLL weights q must have one entry per hidden unit");
    if ((weights.array() <= 0.0).any())
        throw std::invalid_argument("SLL weights q must be strictly positive");
    Vector t(n);
    for (Index i = 0; i < n; ++i) {
        double acc = 0.0;
        for (Index j = 0; j < n; ++j) acc += gram(i, j) * weights[j] / weights[i];
        t[i] = acc;
    }
    return t;
}

double refined_single(const ResidualBlock& block, const ActivationSector& sector,
                      const BoundMethod& method, const PowerIterConfig& cfg) {
    switch (method.kind) {
        case BoundKind::refined_sn: return liplt_single(block, sector, cfg);
        case BoundKind::refined_aol:
        case BoundKind::refined_sll: break;
        default: throw std::invalid_argument("refined_single needs a refined:* method");
    }
    block.validate();
    if (block.G.kind() == OpKind::conv2d)
        throw std::invalid_argument("refined bound: G is a convolution and is not materialised");

    const Vector q = method.kind == BoundKind::refined_sll ? method.q : Vector();
    const Vector t = refined_diagonal(block.G.materialize(), q);
    const LinOperator shifted = scale_shift(block.H, block.G, block.W, sector.center());
    const double skip = spectral_norm(shifted, cfg);
    if (sector.radius() == 0.0) return skip;
    // ||W^T T W||^(1/2) = ||T^(1/2) W||.
    const LinOperator root_t_w = compose({LinOperator::diagonal(t.cwiseSqrt()), block.W});
    return skip + sector.radius() * spectral_norm(root_t_w, cfg);
}

double liplt_multi(const ResidualChain& chain, const PowerIterConfig& cfg, std::vector<double>* levels) {
    chain.validate();
    const Prefix p = compute_prefix(chain, cfg, false);
    const double top = top_level(chain, p, chain.final_map, cfg);
    if (levels) {
        *levels = p.m;
        levels->push_back(top);
    }
    return top;
}

double network_bound(const ResidualChain& chain, const LinOperator& final, const BoundMethod& method,
                     const PowerIterConfig& cfg) {
    chain.validate();
    if (method.refined()) {
        check_single_block(chain, method);
        return refined_single(fold_final(chain.blocks[0], final), chain.sector, method, cfg);
    }
    const Prefix p = compute_prefix(chain, cfg, method.kind == BoundKind::naive);
    return bound_with_prefix(chain, p, final, method, cfg);
}

BoundReport pairwise_lipschitz(const ResidualChain& chain, PairwiseMode mode, const BoundMethod& method,
                               const PowerIterConfig& cfg) {
    const auto start = std::chrono::steady_clock::now();
    chain.validate();
    if (method.refined()) check_single_block(chain, method);

    const Index K = chain.num_classes;
    BoundReport report;
    report.method = method;
    report.mode = mode;
    report.pairwise = Matrix::Zero(K, K);

    Prefix p;
    if (!method.refined()) p = compute_prefix(chain, cfg, method.kind == BoundKind::naive);
    auto bound_for = [&](const LinOperator& final) {
        return bound_with_prefix(chain, p, final, method, cfg);
    };

    report.L = bound_for(chain.final_map);
    switch (mode) {
        case PairwiseMode::direct: {
            std::vector<std::pair<Index, Index>> pairs;
            for (Index i = 0; i < K; ++i)
                for (Index j = i + 1; j < K; ++j) pairs.emplace_back(i, j);
            std::vector<double> values(pairs.size());
            parallel_for(pairs.size(), [&](std::size_t n) {
                const auto [i, j] = pairs[n];
                values[n] = bound_for(compose({row_diff(K, i, j), chain.final_map}));
            });
            for (std::size_t n = 0; n < pairs.size(); ++n) {
                const auto [i, j] = pairs[n];
                report.pairwise(i, j) = report.pairwise(j, i) = values[n];
            }
            break;
        }
        case PairwiseMode::class_sum: {
            report.per_class.assign(static_cast<std::size_t>(K), 0.0);
            parallel_for(static_cast<std::size_t>(K), [&](std::size_t i) {
                report.per_class[i] = bound_for(compose({row_select(K, Index(i)), chain.final_map}));
            });
            for (Index i = 0; i < K; ++i)
                for (Index j = 0; j < K; ++j)
                    if (i != j) report.pairwise(i, j) = report.per_class[i] + report.per_class[j];
            break;
        }
        case PairwiseMode::sqrt2: {
            const double v = std::sqrt(2.0) * report.L;
            for (Index i = 0; i < K; ++i)
                for (Index j = 0; j < K; ++j)
                    if (i != j) report.pairwise(i, j) = v;
            break;
        }
    }
    if (!std::isfinite(report.L) || !report.pairwise.allFinite())
        throw NumericalError("pairwise bound is not finite");
    report.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

}  // namespace lipcert
