#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "lipcert/crmtrain.hpp"
#include "lipcert/errors.hpp"
#include "lipcert/rng.hpp"

namespace lipcert {

namespace {

Dataset take_batch(const Dataset& data, const std::vector<Index>& order, std::size_t begin, std::size_t end) {
    Dataset batch;
    batch.num_classes = data.num_classes;
    batch.input_shape = data.input_shape;
    batch.inputs.resize(data.input_dim(), Index(end - begin));
    for (std::size_t i = begin; i < end; ++i) {
        batch.inputs.col(Index(i - begin)) = data.inputs.col(order[i]);
        batch.labels.push_back(data.labels[std::size_t(order[i])]);
    }
    return batch;
}

double learning_rate(const CrmConfig& cfg, long step, long total) {
    if (!cfg.cosine || total <= 1) return cfg.lr;
    const double pi = std::acos(-1.0);
    return 0.5 * cfg.lr * (1.0 + std::cos(pi * double(step) / double(total)));
}

EpochMetrics evaluate_epoch(const ResidualChain& chain, const Dataset& val, const CrmConfig& cfg) {
    EpochMetrics m;
    if (val.size() == 0) return m;
    const CertificationResult res = certify_dataset(chain, val, cfg.eps, cfg.t, cfg.mode, cfg.method, cfg.cert_power);
    m.clean_acc = res.summary.clean_accuracy;
    m.mean_radius = res.summary.mean_radius;
    m.cert_acc = res.summary.certified_accuracy;
    return m;
}

}  // namespace

TrainResult train(const ResidualChain& init, const Dataset& train_data, const Dataset& val, const CrmConfig& cfg,
                  const std::function<void(const EpochMetrics&)>& on_epoch) {
    cfg.validate();
    check_trainable(init);
    train_data.validate();
    if (train_data.size() == 0) throw std::invalid_argument("empty training set");
    if (train_data.input_dim() != init.input_dim()) throw ShapeError("training data does not match the chain");
    if (val.size()) val.validate();

    TrainResult result{init, {}};
    if (cfg.epochs == 0) return result;

    Vector params = flatten_parameters(init);
    Vector velocity = Vector::Zero(params.size());
    NormCache cache;
    Rng shuffle(sub_seed(cfg.seed, "shuffle"));
    CrmConfig step_cfg = cfg;
    step_cfg.train_power.seed = sub_seed(cfg.seed, "power");

    const std::size_t n = std::size_t(train_data.size());
    const std::size_t per_epoch = (n + std::size_t(cfg.batch_size) - 1) / std::size_t(cfg.batch_size);
    const long total_steps = long(per_epoch) * cfg.epochs;
    long step = 0;
    std::vector<Index> order(n);

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), Index(0));
        std::shuffle(order.begin(), order.end(), shuffle);
        double loss = 0.0, ce = 0.0, reg = 0.0;
        for (std::size_t b = 0; b < n; b += std::size_t(cfg.batch_size)) {
            const std::size_t e = std::min(n, b + std::size_t(cfg.batch_size));
            const Dataset batch = take_batch(train_data, order, b, e);
            const ResidualChain current = with_parameters(init, params);
            const LossGradient lg = loss_gradient(current, batch, step_cfg, &cache);
            if (!lg.gradient.allFinite())
                throw NumericalError("non-finite gradient at epoch " + std::to_string(epoch));
            const double w = double(e - b) / double(n);
            loss += w * lg.loss.total;
            ce += w * lg.loss.surrogate_margin;
            reg += w * lg.loss.regularizer;
            velocity = cfg.momentum * velocity + lg.gradient;
            params -= learning_rate(cfg, step, total_steps) * velocity;
            ++step;
        }
        if (!std::isfinite(loss))
            throw NumericalError("training diverged: non-finite loss at epoch " + std::to_string(epoch));
        result.chain = with_parameters(init, params);
        EpochMetrics m = evaluate_epoch(result.chain, val, cfg);
        m.epoch = epoch;
        m.loss = loss;
        m.ce = ce;
        m.reg = reg;
        result.history.push_back(m);
        if (on_epoch) on_epoch(m);
    }
    return result;
}

ResidualChain make_mlp(const std::vector<int>& widths, std::uint64_t seed) {
    if (widths.size() < 3) throw std::invalid_argument("mlp needs input, >= 1 hidden and output widths");
    for (int w : widths)
        if (w < 1) throw std::invalid_argument("mlp widths must be >= 1");
    Rng rng(sub_seed(seed, "init"));
    auto he = [&](int rows, int cols) {
        Matrix m = random_normal_matrix(rows, cols, rng, std::sqrt(2.0 / cols));
        return Matrix(m.cast<float>().cast<double>());
    };
    ResidualChain chain;
    chain.sector = ActivationSector::relu();
    chain.input_shape = {widths.front()};
    chain.num_classes = widths.back();
    for (std::size_t k = 0; k + 2 < widths.size(); ++k)
        chain.blocks.push_back(ResidualBlock::feedforward(LinOperator::dense(he(widths[k + 1], widths[k])),
                                                          Vector::Zero(widths[k + 1])));
    const int last = widths[widths.size() - 2];
    chain.final_map = LinOperator::dense(he(widths.back(), last));
    chain.final_bias = Vector::Zero(widths.back());
    chain.validate();
    return chain;
}

AttackResult pgd_attack(const ResidualChain& chain, const Vector& x, int y, double eps, const PgdConfig& cfg) {
    if (!(eps > 0.0)) throw std::invalid_argument("pgd: eps must be > 0");
    if (cfg.steps < 1 || cfg.restarts < 1) throw std::invalid_argument("pgd: steps and restarts must be >= 1");
    if (x.size() != chain.input_dim()) throw ShapeError("pgd: input size does not match the chain");

    AttackResult out;
    out.adversarial = x;
    auto misclassified = [&](const Vector& p) { return logit_margin(forward(chain, p), y) <= 0.0; };
    if (misclassified(x)) {
        out.success = true;
        out.restart = 0;
        out.step = 0;
        return out;
    }

    auto clip = [&](Vector p) {
        if (cfg.box) p = p.cwiseMax(cfg.box->first).cwiseMin(cfg.box->second);
        return p;
    };
    auto project = [&](const Vector& p) {
        Vector d = p - x;
        const double norm = d.norm();
        if (norm > eps) d *= eps / norm;
        return clip(x + d);
    };

    const double alpha = cfg.resolved_step(eps);
    Rng rng(sub_seed(cfg.seed, "pgd"));
    for (int r = 0; r < cfg.restarts; ++r) {
        Vector p = x;
        if (r > 0) {
            // Uniform in the ball: direction times eps * u^(1/n).
            std::uniform_real_distribution<double> unif(0.0, 1.0);
            const Vector dir = random_unit_vector(x.size(), rng);
            p = project(x + dir * eps * std::pow(unif(rng), 1.0 / double(x.size())));
        }
        for (int s = 1; s <= cfg.steps; ++s) {
            const Vector z = forward(chain, p);
            const double top = z.maxCoeff();
            Vector g = (z.array() - top).exp();
            g /= g.sum();
            g[y] -= 1.0;
            const Vector grad = jacobian_at(chain, p).apply_adjoint(g);
            const double gn = grad.norm();
            if (!(gn > 0.0)) break;
            p = project(p + alpha * grad / gn);
            if (misclassified(p)) {
                out.success = true;
                out.adversarial = p;
                out.distance = (p - x).norm();
                out.restart = r;
                out.step = s;
                return out;
            }
        }
    }
    return out;
}

}  // namespace lipcert
