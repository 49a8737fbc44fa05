#include <gtest/gtest.h>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lipcert/crmtrain.hpp"
#include "lipcert/parallel.hpp"
#include "test_util.hpp"

using namespace lipcert;

namespace {

Dataset batch_of(const Matrix& x, std::vector<int> labels, int K = 2) {
    Dataset d;
    d.inputs = x;
    d.labels = std::move(labels);
    d.num_classes = K;
    d.input_shape = {int(x.rows())};
    return d;
}

double cross_entropy(const Vector& z, int y) {
    const double top = z.maxCoeff();
    return top + std::log((z.array() - top).exp().sum()) - z[y];
}

/// Dense residual chain with biases, all blocks trainable.
ResidualChain residual_chain(Rng& rng, int in, int hidden, int blocks, int K) {
    std::vector<ResidualBlock> bs;
    for (int k = 0; k < blocks; ++k) {
        auto b = testutil::block(random_normal_matrix(in, in, rng, 0.5), random_normal_matrix(in, hidden, rng, 0.5),
                                 random_normal_matrix(hidden, in, rng, 0.7));
        b.w_bias = random_normal_vector(hidden, rng, 0.3);
        b.g_bias = random_normal_vector(in, rng, 0.1);
        bs.push_back(b);
    }
    auto c = testutil::chain_of(bs, LinOperator::dense(random_normal_matrix(K, in, rng)));
    c.final_bias = random_normal_vector(K, rng, 0.1);
    return c;
}

/// Central differences of crm_loss along every parameter.
Vector fd_gradient(const ResidualChain& chain, const Dataset& batch, const CrmConfig& cfg, double h = 1e-5) {
    const Vector p = flatten_parameters(chain);
    Vector g(p.size());
    for (Index i = 0; i < p.size(); ++i) {
        Vector a = p, b = p;
        a[i] += h;
        b[i] -= h;
        g[i] = (crm_loss(with_parameters(chain, a), batch, cfg).total -
                crm_loss(with_parameters(chain, b), batch, cfg).total) /
               (2 * h);
    }
    return g;
}

double rel_error(const Vector& a, const Vector& ref) { return (a - ref).norm() / std::max(ref.norm(), 1e-12); }

CrmConfig exact_norms(CrmConfig cfg) {
    cfg.train_power = PowerIterConfig::certification();
    return cfg;
}

}  // namespace

TEST(CrmLoss, LambdaZeroIsCrossEntropy) {
    Rng rng(51);
    const auto chain = make_mlp({3, 5, 4}, 1);
    const Matrix x = random_normal_matrix(3, 6, rng);
    const Dataset d = batch_of(x, {0, 1, 2, 3, 0, 1}, 4);
    CrmConfig cfg;
    const auto terms = crm_loss(chain, d, cfg);
    double ce = 0.0;
    for (Index s = 0; s < 6; ++s) ce += cross_entropy(forward(chain, x.col(s)), d.labels[std::size_t(s)]) / 6.0;
    EXPECT_NEAR(terms.total, ce, 1e-14);
    EXPECT_EQ(terms.surrogate_margin, terms.total);
    EXPECT_EQ(terms.regularizer, 0.0);
}

TEST(CrmLoss, MisclassifiedBatchHasNoRegularizer) {
    Rng rng(52);
    const auto chain = make_mlp({2, 6, 2}, 2);
    const Matrix x = random_normal_matrix(2, 8, rng);
    std::vector<int> wrong;
    for (Index s = 0; s < 8; ++s) {
        Index pred;
        forward(chain, x.col(s)).maxCoeff(&pred);
        wrong.push_back(1 - int(pred));
    }
    CrmConfig cfg;
    cfg.lambda = 5.0;
    cfg.rbar = 100.0;
    const auto terms = crm_loss(chain, batch_of(x, wrong), cfg);
    EXPECT_EQ(terms.regularizer, 0.0);
    EXPECT_EQ(terms.total, terms.surrogate_margin);
}

TEST(CrmLoss, SaturatedHingeContributesNothing) {
    Rng rng(53);
    const auto chain = make_mlp({2, 6, 2}, 3);
    const Vector x = random_normal_vector(2, rng);
    Index pred;
    const Vector z = forward(chain, x);
    z.maxCoeff(&pred);
    CrmConfig cfg;
    cfg.lambda = 0.7;
    cfg.rbar = 1e-9;
    const auto terms = crm_loss(chain, batch_of(x, {int(pred)}), cfg);
    ASSERT_GT(terms.soft_radii[0], cfg.rbar);
    EXPECT_EQ(terms.regularizer, 0.0);
    EXPECT_NEAR(terms.total, cross_entropy(z, int(pred)), 1e-12);
}

TEST(CrmLoss, HingeRegularizerByHand) {
    Rng rng(54);
    const auto chain = make_mlp({2, 6, 3}, 4);
    const Vector x = random_normal_vector(2, rng);
    const Vector z = forward(chain, x);
    Index pred;
    z.maxCoeff(&pred);
    const int y = int(pred);
    CrmConfig cfg;
    cfg.lambda = 0.3;
    cfg.rbar = 50.0;
    cfg.t = 5.0;
    cfg.train_power = PowerIterConfig::certification();
    const auto terms = crm_loss(chain, batch_of(x, {y}, 3), cfg);
    const auto L = pairwise_lipschitz(chain, PairwiseMode::direct, BoundMethod::liplt(), cfg.train_power);
    double s = 0.0;
    for (int i = 0; i < 3; ++i)
        if (i != y) s += std::exp(-cfg.t * (z[y] - z[i]) / L.pairwise(y, i));
    const double soft = -std::log(s) / cfg.t;
    EXPECT_NEAR(terms.soft_radii[0], soft, 1e-9 * std::abs(soft));
    EXPECT_NEAR(terms.regularizer, cfg.rbar - soft, 1e-9);
    EXPECT_NEAR(terms.total, cross_entropy(z, y) + cfg.lambda * (cfg.rbar - soft), 1e-9);
}

TEST(LossGradient, ZeroWeightsGiveSoftmaxMinusOneHot) {
    auto chain = make_mlp({3, 4, 3}, 5);
    chain = with_parameters(chain, Vector::Zero(flatten_parameters(chain).size()));
    const auto lg = loss_gradient(chain, batch_of(Vector::Ones(3), {1}, 3), CrmConfig{});
    const Vector tail = lg.gradient.tail(3);  // final bias is last
    EXPECT_NEAR(tail[0], 1.0 / 3, 1e-15);
    EXPECT_NEAR(tail[1], 1.0 / 3 - 1.0, 1e-15);
    EXPECT_NEAR(tail[2], 1.0 / 3, 1e-15);
}

TEST(LossGradient, CrossEntropyMatchesFiniteDifferences) {
    for (int seed = 0; seed < 10; ++seed) {
        Rng rng(600 + seed);
        const auto chain = make_mlp({2, 8, 2}, seed);
        const Dataset d = batch_of(random_normal_vector(2, rng), {seed % 2});
        const CrmConfig cfg;
        EXPECT_LE(rel_error(loss_gradient(chain, d, cfg).gradient, fd_gradient(chain, d, cfg)), 1e-4) << seed;
    }
}

TEST(LossGradient, FullLossMatchesFiniteDifferencesAllModes) {
    for (auto mode : {PairwiseMode::direct, PairwiseMode::class_sum, PairwiseMode::sqrt2})
        for (int seed = 0; seed < 3; ++seed) {
            Rng rng(700 + seed);
            const auto chain = make_mlp({2, 8, 3}, 10 + seed);
            const Matrix x = random_normal_matrix(2, 4, rng);
            std::vector<int> y;
            for (Index s = 0; s < 4; ++s) {
                Index p;
                forward(chain, x.col(s)).maxCoeff(&p);
                y.push_back(s == 3 ? int((p + 1) % 3) : int(p));
            }
            CrmConfig cfg = exact_norms({});
            cfg.lambda = 0.5;
            cfg.mode = mode;
            cfg.rbar = 10.0;
            const Dataset d = batch_of(x, y, 3);
            EXPECT_LE(rel_error(loss_gradient(chain, d, cfg).gradient, fd_gradient(chain, d, cfg)), 1e-3)
                << to_string(mode) << " " << seed;
        }
}

TEST(LossGradient, ResidualChainsMatchFiniteDifferences) {
    for (int seed = 0; seed < 3; ++seed) {
        Rng rng(800 + seed);
        const auto chain = residual_chain(rng, 3, 4, 3, 3);
        const Matrix x = random_normal_matrix(3, 3, rng);
        std::vector<int> y;
        for (Index s = 0; s < 3; ++s) {
            Index p;
            forward(chain, x.col(s)).maxCoeff(&p);
            y.push_back(int(p));
        }
        CrmConfig cfg = exact_norms({});
        cfg.lambda = 1.0;
        cfg.g = GKind::exp_decay;
        cfg.g_scale = 0.5;
        const Dataset d = batch_of(x, y, 3);
        EXPECT_LE(rel_error(loss_gradient(chain, d, cfg).gradient, fd_gradient(chain, d, cfg)), 1e-3) << seed;
    }
}

TEST(LossGradient, RejectsConvBlocks) {
    Conv2dGeometry g{1, 1, 2, 2, 1, 0, 3, 3};
    ResidualBlock b;
    b.W = LinOperator::conv2d(g, Vector::Ones(4));
    b.G = LinOperator::identity(4);
    b.H = LinOperator::zero(4, 9);
    ResidualChain c;
    c.blocks = {b};
    c.input_shape = {1, 3, 3};
    c.num_classes = 2;
    c.final_map = LinOperator::dense(Matrix::Ones(2, 4));
    EXPECT_THROW(loss_gradient(c, batch_of(Vector::Ones(9), {0}), CrmConfig{}), std::invalid_argument);
}

TEST(Parameters, FlattenRoundTrip) {
    Rng rng(55);
    const auto chain = residual_chain(rng, 3, 4, 2, 2);
    const Vector p = flatten_parameters(chain);
    EXPECT_TRUE(with_parameters(chain, p) == chain);
    EXPECT_THROW(with_parameters(chain, Vector(p.head(p.size() - 1))), std::invalid_argument);
}

TEST(Train, ZeroEpochsIsNoOp) {
    const auto init = make_mlp({2, 4, 2}, 6);
    CrmConfig cfg;
    cfg.epochs = 0;
    const auto res = train(init, gen_two_moons(20, 0.1, 0), Dataset{}, cfg);
    EXPECT_TRUE(res.chain == init);
    EXPECT_TRUE(res.history.empty());
}

TEST(Train, LossDecreasesOnMoons) {
    CrmConfig cfg;
    cfg.epochs = 5;
    cfg.lr = 0.05;
    cfg.lambda = 0.1;
    const Dataset data = gen_two_moons(400, 0.1, 1);
    const auto res = train(make_mlp({2, 16, 16, 2}, 1), data, data, cfg);
    ASSERT_EQ(res.history.size(), 5u);
    EXPECT_LT(res.history.back().loss, res.history.front().loss);
    for (std::size_t e = 1; e < 5; ++e) EXPECT_LE(res.history[e].loss, res.history[e - 1].loss) << e;
}

TEST(Train, DeterministicForFixedSeed) {
    set_worker_count(1);
    CrmConfig cfg;
    cfg.epochs = 3;
    cfg.lambda = 0.1;
    cfg.seed = 9;
    const Dataset data = gen_two_moons(100, 0.1, 2);
    const auto a = train(make_mlp({2, 8, 8, 2}, 9), data, data, cfg);
    const auto b = train(make_mlp({2, 8, 8, 2}, 9), data, data, cfg);
    EXPECT_TRUE(a.chain == b.chain);
    for (std::size_t e = 0; e < 3; ++e) {
        EXPECT_EQ(a.history[e].loss, b.history[e].loss);
        EXPECT_EQ(a.history[e].mean_radius, b.history[e].mean_radius);
    }
}

TEST(Train, LambdaZeroMatchesPlainSgdReference) {
    // Independent CE backprop for a relu MLP with SGD + momentum + cosine lr.
    const Dataset data = gen_two_moons(90, 0.15, 4);
    CrmConfig cfg;
    cfg.epochs = 4;
    cfg.batch_size = 16;
    cfg.seed = 4;
    const auto init = make_mlp({2, 6, 5, 2}, 4);
    const auto got = train(init, data, Dataset{}, cfg).chain;

    std::vector<Matrix> W{*init.blocks[0].W.dense_matrix(), *init.blocks[1].W.dense_matrix(),
                          *init.final_map.dense_matrix()};
    std::vector<Vector> b{init.blocks[0].w_bias, init.blocks[1].w_bias, init.final_bias};
    std::vector<Matrix> vW(3);
    std::vector<Vector> vb(3);
    for (int l = 0; l < 3; ++l) {
        vW[l] = Matrix::Zero(W[l].rows(), W[l].cols());
        vb[l] = Vector::Zero(b[l].size());
    }
    Rng shuffle(sub_seed(cfg.seed, "shuffle"));
    const int n = 90, per_epoch = (n + 15) / 16;
    const long total = long(per_epoch) * cfg.epochs;
    long step = 0;
    std::vector<Index> order(n);
    for (int e = 0; e < cfg.epochs; ++e) {
        std::iota(order.begin(), order.end(), Index(0));
        std::shuffle(order.begin(), order.end(), shuffle);
        for (int s0 = 0; s0 < n; s0 += 16) {
            const int s1 = std::min(n, s0 + 16);
            std::vector<Matrix> gW(3);
            std::vector<Vector> gb(3);
            for (int l = 0; l < 3; ++l) {
                gW[l] = Matrix::Zero(W[l].rows(), W[l].cols());
                gb[l] = Vector::Zero(b[l].size());
            }
            for (int s = s0; s < s1; ++s) {
                std::vector<Vector> a{data.inputs.col(order[std::size_t(s)])}, pre;
                for (int l = 0; l < 3; ++l) {
                    pre.push_back(W[l] * a.back() + b[l]);
                    a.push_back(l < 2 ? Vector(pre.back().cwiseMax(0.0)) : pre.back());
                }
                Vector d = (a.back().array() - a.back().maxCoeff()).exp();
                d /= d.sum();
                d[data.labels[std::size_t(order[std::size_t(s)])]] -= 1.0;
                d /= double(s1 - s0);
                for (int l = 2; l >= 0; --l) {
                    gW[l] += d * a[l].transpose();
                    gb[l] += d;
                    if (l > 0) d = (W[l].transpose() * d).cwiseProduct(Vector((pre[l - 1].array() > 0).cast<double>()));
                }
            }
            const double lr = 0.5 * cfg.lr * (1 + std::cos(std::acos(-1.0) * double(step) / double(total)));
            for (int l = 0; l < 3; ++l) {
                vW[l] = cfg.momentum * vW[l] + gW[l];
                vb[l] = cfg.momentum * vb[l] + gb[l];
                W[l] -= lr * vW[l];
                b[l] -= lr * vb[l];
            }
            ++step;
        }
    }
    EXPECT_LE((W[0] - *got.blocks[0].W.dense_matrix()).norm(), 1e-10 * W[0].norm());
    EXPECT_LE((W[2] - *got.final_map.dense_matrix()).norm(), 1e-10 * W[2].norm());
    EXPECT_LE((b[1] - got.blocks[1].w_bias).norm(), 1e-10 * (1 + b[1].norm()));
}

TEST(Train, RejectsBadConfig) {
    CrmConfig cfg;
    cfg.lambda = -1;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.method = BoundMethod::naive();
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    EXPECT_EQ(parse_g_kind("exp"), GKind::exp_decay);
    EXPECT_THROW(parse_g_kind("square"), std::invalid_argument);
}

namespace {

/// z = (w^T x, -w^T x) as an identity-skip chain with a dense final map.
ResidualChain linear_binary(const Vector& w) {
    const Index n = w.size();
    Matrix f(2, n);
    f.row(0) = w.transpose();
    f.row(1) = -w.transpose();
    return testutil::chain_of({testutil::block(Matrix::Identity(n, n), Matrix::Zero(n, n), Matrix::Identity(n, n))},
                              LinOperator::dense(f));
}

}  // namespace

TEST(Pgd, LinearModelFlipsInOneStep) {
    Vector w(3);
    w << 1, -2, 2;
    const auto chain = linear_binary(w);
    Vector x(3);
    x << 1, 0, 0.5;  // w^T x = 2, distance to boundary 2/3
    PgdConfig cfg;
    cfg.steps = 1;
    cfg.step_size = 0.7;
    const auto res = pgd_attack(chain, x, 0, 0.7, cfg);
    ASSERT_TRUE(res.success);
    EXPECT_EQ(res.step, 1);
    const Vector delta = res.adversarial - x;
    EXPECT_NEAR(delta.normalized().dot(-w.normalized()), 1.0, 1e-12);
    EXPECT_LE(res.distance, 0.7 + 1e-12);
}

TEST(Pgd, FailsInsideCertifiedRadius) {
    Vector w(2);
    w << 3, 4;
    const auto chain = linear_binary(w);
    Vector x(2);
    x << 1, 1;
    const Vector z = forward(chain, x);
    const auto rep = pairwise_lipschitz(chain, PairwiseMode::direct, BoundMethod::liplt(), {});
    const double radius = certified_radius(z, 0, rep.pairwise.row(0).transpose());
    EXPECT_NEAR(radius, 7.0 / 5.0, 1e-5);
    PgdConfig cfg;
    cfg.restarts = 10;
    EXPECT_FALSE(pgd_attack(chain, x, 0, radius * 0.99, cfg).success);
    EXPECT_TRUE(pgd_attack(chain, x, 0, radius * 1.1, cfg).success);
}

TEST(Pgd, MisclassifiedInputSucceedsAtZeroDistance) {
    Vector w(2);
    w << 1, 1;
    const auto res = pgd_attack(linear_binary(w), Vector::Ones(2), 1, 0.1, PgdConfig{});
    EXPECT_TRUE(res.success);
    EXPECT_EQ(res.distance, 0.0);
    EXPECT_THROW(pgd_attack(linear_binary(w), Vector::Ones(2), 0, 0.0, PgdConfig{}), std::invalid_argument);
}

TEST(Pgd, BoxIsRespected) {
    Vector w(2);
    w << 1, 1;
    PgdConfig cfg;
    cfg.box = std::make_pair(0.0, 1.0);
    cfg.restarts = 3;
    const auto res = pgd_attack(linear_binary(w), Vector::Constant(2, 0.2), 0, 5.0, cfg);
    EXPECT_TRUE(res.success);
    EXPECT_GE(res.adversarial.minCoeff(), 0.0);
    EXPECT_LE(res.adversarial.maxCoeff(), 1.0);
}

TEST(Pgd, AgreesWithRestartReimplementation) {
    const Dataset data = gen_two_moons(200, 0.1, 5);
    CrmConfig cfg;
    cfg.epochs = 40;
    cfg.lambda = 0.1;
    cfg.seed = 5;
    const auto chain = train(make_mlp({2, 16, 16, 2}, 5), data, Dataset{}, cfg).chain;
    const double eps = 0.1;
    const auto cert = certify_dataset(chain, data, eps, 10.0, PairwiseMode::direct, BoundMethod::liplt(), {});

    // Reference: finite-difference gradients, normalized steps, uniform restarts.
    auto reference = [&](const Vector& x, int y, Rng& rng) {
        const double alpha = 2.5 * eps / 50;
        for (int r = 0; r < 10; ++r) {
            Vector p = x;
            if (r > 0) p += random_unit_vector(2, rng) * eps * std::sqrt(std::uniform_real_distribution<double>(0, 1)(rng));
            for (int s = 0; s < 50; ++s) {
                Vector g(2);
                for (int i = 0; i < 2; ++i) {
                    Vector e = Vector::Zero(2);
                    e[i] = 1e-7;
                    g[i] = (cross_entropy(forward(chain, p + e), y) - cross_entropy(forward(chain, p - e), y)) / 2e-7;
                }
                if (g.norm() == 0) break;
                p += alpha * g.normalized();
                if ((p - x).norm() > eps) p = x + (p - x) * (eps / (p - x).norm());
                if (logit_margin(forward(chain, p), y) <= 0) return true;
            }
        }
        return logit_margin(forward(chain, x), y) <= 0;
    };

    PgdConfig pgd;
    pgd.restarts = 10;
    Rng rng(77);
    int agree = 0, lib_success = 0;
    for (Index s = 0; s < data.size(); ++s) {
        const int y = data.labels[std::size_t(s)];
        const bool lib = pgd_attack(chain, data.inputs.col(s), y, eps, pgd).success;
        const bool ref = reference(data.inputs.col(s), y, rng);
        agree += lib == ref;
        lib_success += lib;
        if (cert.records[std::size_t(s)].verified) {
            EXPECT_FALSE(lib) << s;
            EXPECT_FALSE(ref) << s;
        }
    }
    EXPECT_GE(agree, int(0.95 * double(data.size())));
    EXPECT_LE(double(lib_success) / double(data.size()), 1.0 - cert.summary.certified_accuracy);
}
