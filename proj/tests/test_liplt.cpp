#include <gtest/gtest.h>

#include <unistd.h>

#include <Eigen/Eigenvalues>

#include "lipcert/liplt.hpp"
#include "test_util.hpp"

using namespace lipcert;
using testutil::block;
using testutil::chain_of;
using testutil::svd_norm;

namespace {

Matrix diag2(double a, double b) {
    Matrix m = Matrix::Zero(2, 2);
    m.diagonal() << a, b;
    return m;
}

Matrix scalar(double v) { return Matrix::Constant(1, 1, v); }

const PowerIterConfig kCfg{};
// No inflation: exact-arithmetic examples.
const PowerIterConfig kExact{500, 1e-12, 0, 0.0};
const double kInfl = 1.0 + 1e-6;

}  // namespace

// ---------------------------------------------------------------------------
// Single-block bounds

TEST(LipltSingle, LinearIdentityPath) {
    const auto b = block(Matrix::Identity(2, 2), Matrix::Zero(2, 2), Matrix::Identity(2, 2));
    EXPECT_NEAR(liplt_single(b, ActivationSector::relu(), kExact), 1.0, 1e-9);
}

TEST(LipltSingle, ScaledRelu) {
    const auto b = block(Matrix::Zero(2, 2), Matrix::Identity(2, 2), diag2(2, 1));
    EXPECT_NEAR(liplt_single(b, ActivationSector::relu(), kExact), 2.0, 1e-9);
}

TEST(LipltSingle, ScalarLoopTransform) {
    // h(x) = x - relu(x): loop transform gives 1, naive gives 2.
    const auto b = block(scalar(1), scalar(-1), scalar(1));
    EXPECT_NEAR(liplt_single(b, ActivationSector::relu(), kExact), 1.0, 1e-9);
    const auto chain = chain_of({b}, LinOperator::dense(Matrix::Identity(2, 1)));
    EXPECT_NEAR(naive_bound(chain, kExact), 2.0, 1e-9);
    // Scalar with G = +1: |1 + 1/2| + 1/2 = 2, equal to naive.
    EXPECT_NEAR(liplt_single(block(scalar(1), scalar(1), scalar(1)), ActivationSector::relu(), kExact), 2.0, 1e-9);
}

TEST(LipltSingle, BetweenSampledAndNaive) {
    Rng rng(21);
    for (int trial = 0; trial < 3; ++trial) {
        const auto b = block(random_normal_matrix(16, 16, rng, 0.25), random_normal_matrix(16, 16, rng, 0.25),
                             random_normal_matrix(16, 16, rng, 0.25));
        const auto chain = chain_of({b}, LinOperator::identity(16));
        const double lt = liplt_single(b, chain.sector, kCfg);
        EXPECT_LE(lt, naive_bound(chain, kCfg) * (1 + 1e-12));
        EXPECT_LE(sampled_lower_bound(chain, 1000, 7 + trial), lt);
    }
}

TEST(LipltSingle, SigmoidSector) {
    // Sector (0, 1/4): centre 1/8, radius 1/8.
    const auto b = block(scalar(1), scalar(-4), scalar(1));
    EXPECT_NEAR(liplt_single(b, ActivationSector::sigmoid(), kExact), 0.5 + 0.5, 1e-9);
}

// ---------------------------------------------------------------------------
// Refined bounds

TEST(Refined, SnEqualsLipltSingle) {
    Rng rng(22);
    const auto b = block(random_normal_matrix(6, 5, rng), random_normal_matrix(6, 7, rng),
                         random_normal_matrix(7, 5, rng));
    EXPECT_EQ(refined_single(b, ActivationSector::relu(), BoundMethod::refined_sn(), kCfg),
              liplt_single(b, ActivationSector::relu(), kCfg));
}

TEST(Refined, AolIdentityCase) {
    const auto b = block(Matrix::Zero(2, 2), Matrix::Identity(2, 2), Matrix::Identity(2, 2));
    EXPECT_NEAR(refined_single(b, ActivationSector::relu(), BoundMethod::refined_aol(), kExact), 1.0, 1e-9);
    EXPECT_EQ(refined_diagonal(Matrix::Identity(2, 2), Vector()), Vector::Ones(2));
}

TEST(Refined, DiagonalDominatesGramAndUpperBounds) {
    Rng rng(23);
    for (int trial = 0; trial < 5; ++trial) {
        const Matrix g = random_normal_matrix(6, 8, rng, 0.4);
        const auto b = block(random_normal_matrix(6, 5, rng, 0.4), g, random_normal_matrix(8, 5, rng, 0.4));
        Vector q = Vector::Ones(8);
        if (trial % 2) q = (random_normal_vector(8, rng).array().abs() + 0.1).matrix();
        const Vector t = refined_diagonal(g, q);
        const Matrix gap = Matrix(t.asDiagonal()) - g.transpose() * g;
        Eigen::SelfAdjointEigenSolver<Matrix> eig(gap);
        EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-10);
        const auto chain = chain_of({b}, LinOperator::identity(6));
        for (auto m : {BoundMethod::refined_aol(), BoundMethod::refined_sll(q)}) {
            const double refined = refined_single(b, chain.sector, m, kCfg);
            EXPECT_GE(refined, sampled_lower_bound(chain, 500, trial));
            EXPECT_GT(refined, 0.0);
        }
    }
}

TEST(Refined, SllWithUnitWeightsMatchesAol) {
    Rng rng(24);
    const auto b = block(random_normal_matrix(4, 3, rng), random_normal_matrix(4, 5, rng),
                         random_normal_matrix(5, 3, rng));
    EXPECT_EQ(refined_single(b, ActivationSector::relu(), BoundMethod::refined_sll(Vector::Ones(5)), kCfg),
              refined_single(b, ActivationSector::relu(), BoundMethod::refined_aol(), kCfg));
}

// ---------------------------------------------------------------------------
// Multi-layer recursion

TEST(LipltMulti, DiagonalSkipProduct) {
    const auto b0 = block(diag2(2, 0.5), Matrix::Zero(2, 2), Matrix::Identity(2, 2));
    const auto b1 = block(diag2(0.5, 2), Matrix::Zero(2, 2), Matrix::Identity(2, 2));
    const auto chain = chain_of({b0, b1}, LinOperator::identity(2));
    EXPECT_NEAR(liplt_multi(chain, kExact), 1.0, 1e-9);
    EXPECT_NEAR(naive_bound(chain, kExact), 4.0, 1e-8);
}

TEST(LipltMulti, OneBlockBase) {
    Rng rng(25);
    const auto b = block(random_normal_matrix(4, 3, rng), random_normal_matrix(4, 5, rng),
                         random_normal_matrix(5, 3, rng));
    const auto chain = chain_of({b}, LinOperator::identity(4));
    std::vector<double> levels;
    const double m1 = liplt_multi(chain, kCfg, &levels);
    ASSERT_EQ(levels.size(), 2u);
    EXPECT_NEAR(m1, liplt_single(b, chain.sector, kCfg), 1e-9 * m1);
    EXPECT_NEAR(levels[0], svd_norm(*b.W.dense_matrix()) * kInfl, 1e-9);
}

TEST(LipltMulti, MatchesHandUnrolledRecursion) {
    Rng rng(26);
    const int n = 16, L = 4;
    std::vector<ResidualBlock> blocks;
    std::vector<Matrix> H, G, W;
    for (int k = 0; k < L; ++k) {
        H.push_back(random_normal_matrix(n, n, rng, 0.25));
        G.push_back(random_normal_matrix(n, n, rng, 0.25));
        W.push_back(random_normal_matrix(n, n, rng, 0.25));
        blocks.push_back(block(H[k], G[k], W[k]));
    }
    const Matrix F = random_normal_matrix(3, n, rng, 0.25);
    const auto chain = chain_of(blocks, LinOperator::dense(F));

    // Explicit matrices and SVD norms; the library inflates every norm once.
    const double c = 0.5, r = 0.5;
    auto nrm = [&](const Matrix& m) { return svd_norm(m) * kInfl; };
    std::vector<Matrix> hh;
    for (int k = 0; k < L; ++k) hh.push_back(H[k] + c * G[k] * W[k]);
    auto top = [&](int level) { return level < L ? W[std::size_t(level)] : F; };
    auto prod = [&](int k, int j) {  // Hh_k ... Hh_{j+1}
        Matrix p = Matrix::Identity(n, n);
        for (int i = k; i > j; --i) p = p * hh[std::size_t(i)];
        return p;
    };
    std::vector<double> m{nrm(W[0])};
    for (int level = 1; level <= L; ++level) {
        const int k = level - 1;
        double v = nrm(top(level) * prod(k, -1));
        for (int j = 0; j <= k; ++j) v += r * nrm(top(level) * prod(k, j) * G[std::size_t(j)]) * m[std::size_t(j)];
        m.push_back(v);
    }
    const double got = liplt_multi(chain, kCfg);
    EXPECT_LE(std::abs(got - m.back()) / m.back(), 1e-10);
    EXPECT_LE(got, naive_bound(chain, kCfg));
}

TEST(LipltMulti, OrderingOnRandomChains) {
    Rng rng(27);
    for (int trial = 0; trial < 5; ++trial) {
        const auto chain = testutil::random_chain(rng, 3, 10, trial % 2 == 0);
        const double lt = liplt_multi(chain, kCfg);
        EXPECT_LE(lt, naive_bound(chain, kCfg) * (1 + 1e-9));
        EXPECT_LE(sampled_lower_bound(chain, 200, trial), lt);
    }
}

// ---------------------------------------------------------------------------
// Pairwise bounds

TEST(Pairwise, LinearNetworkIsExact) {
    Rng rng(28);
    const Matrix a = random_normal_matrix(4, 5, rng);
    const auto chain = chain_of({block(Matrix::Identity(5, 5), Matrix::Zero(5, 5), Matrix::Identity(5, 5))},
                                LinOperator::dense(a));
    const auto rep = pairwise_lipschitz(chain, PairwiseMode::direct, BoundMethod::liplt(), kCfg);
    for (Index i = 0; i < 4; ++i)
        for (Index j = 0; j < 4; ++j)
            if (i != j) EXPECT_NEAR(rep.pairwise(i, j), (a.row(i) - a.row(j)).norm() * kInfl, 1e-9);
}

TEST(Pairwise, SymmetricZeroDiagonalAllModes) {
    Rng rng(29);
    const auto chain = testutil::random_chain(rng, 2, 8, true, 5);
    for (auto mode : {PairwiseMode::direct, PairwiseMode::class_sum, PairwiseMode::sqrt2})
        for (auto method : {BoundMethod::naive(), BoundMethod::liplt()}) {
            const auto rep = pairwise_lipschitz(chain, mode, method, kCfg);
            ASSERT_EQ(rep.pairwise.rows(), 5);
            EXPECT_TRUE(rep.pairwise.isApprox(rep.pairwise.transpose(), 0.0));
            EXPECT_TRUE(rep.pairwise.diagonal().isZero(0.0));
            EXPECT_TRUE((rep.pairwise.array() >= 0).all());
        }
}

TEST(Pairwise, ModeRelations) {
    Rng rng(30);
    const auto chain = testutil::random_chain(rng, 2, 8, true, 4);
    const auto direct = pairwise_lipschitz(chain, PairwiseMode::direct, BoundMethod::liplt(), kCfg);
    const auto sum = pairwise_lipschitz(chain, PairwiseMode::class_sum, BoundMethod::liplt(), kCfg);
    const auto root2 = pairwise_lipschitz(chain, PairwiseMode::sqrt2, BoundMethod::liplt(), kCfg);
    ASSERT_EQ(sum.per_class.size(), 4u);
    for (Index i = 0; i < 4; ++i)
        for (Index j = 0; j < 4; ++j) {
            if (i == j) continue;
            EXPECT_NEAR(sum.pairwise(i, j), sum.per_class[std::size_t(i)] + sum.per_class[std::size_t(j)], 1e-12);
            EXPECT_NEAR(root2.pairwise(i, j), std::sqrt(2.0) * root2.L, 1e-12);
            EXPECT_LE(direct.pairwise(i, j), sum.pairwise(i, j) * (1 + 1e-9));
        }
    EXPECT_NEAR(root2.L, liplt_multi(chain, kCfg), 1e-9 * root2.L);
}

TEST(Pairwise, RefinedRequiresSingleBlock) {
    Rng rng(31);
    const auto chain = testutil::random_chain(rng, 2, 6, true);
    EXPECT_THROW(pairwise_lipschitz(chain, PairwiseMode::direct, BoundMethod::refined_aol(), kCfg),
                 std::invalid_argument);
    const auto one = testutil::random_chain(rng, 1, 6, true);
    const auto ref = pairwise_lipschitz(one, PairwiseMode::direct, BoundMethod::refined_aol(), kCfg);
    EXPECT_GT(ref.mean_pairwise(), 0.0);
}

TEST(Pairwise, MethodStrings) {
    for (std::string s : {"naive", "liplt", "refined:sn", "refined:aol", "refined:sll"})
        EXPECT_EQ(to_string(parse_bound_method(s)), s);
    for (std::string s : {"direct", "class_sum", "sqrt2"}) EXPECT_EQ(to_string(parse_pairwise_mode(s)), s);
    EXPECT_THROW(parse_bound_method("lp"), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Loop transform and Jacobian

TEST(LoopTransform, MatchesDirectForward) {
    Rng rng(32);
    for (auto sector : {ActivationSector::relu(), ActivationSector::tanh(), ActivationSector::sigmoid()}) {
        auto chain = testutil::random_chain(rng, 3, 9, true);
        chain.sector = sector;
        const Vector x = random_normal_vector(chain.input_dim(), rng);
        const auto direct = preactivations(chain, x);
        const auto looped = loop_transformed_preactivations(chain, x);
        ASSERT_EQ(direct.size(), looped.size());
        for (std::size_t k = 0; k < direct.size(); ++k)
            EXPECT_LE((direct[k] - looped[k]).norm(), 1e-10 * (1 + direct[k].norm()));
    }
}

TEST(Jacobian, MatchesFiniteDifferences) {
    Rng rng(33);
    auto chain = testutil::random_chain(rng, 2, 7, true);
    chain.sector = ActivationSector::tanh();
    const Vector x = random_normal_vector(chain.input_dim(), rng);
    const Matrix J = jacobian_at(chain, x).materialize();
    const double h = 1e-6;
    for (Index i = 0; i < x.size(); ++i) {
        Vector e = Vector::Zero(x.size());
        e[i] = h;
        const Vector col = (forward(chain, x + e) - forward(chain, x - e)) / (2 * h);
        EXPECT_LE((col - J.col(i)).norm(), 1e-6);
    }
}

// ---------------------------------------------------------------------------
// rho-Lipschitz layers

TEST(RhoLayer, IdentityWeightIsOneLipschitz) {
    const auto b = make_rho_lipschitz_layer(LinOperator::dense(Matrix::Identity(2, 2)), ActivationSector::relu(), 1.0,
                                            BoundMethod::refined_sn());
    const auto chain = chain_of({b}, LinOperator::identity(2));
    EXPECT_LE(sampled_pair_slope(chain, 1000, 1), 1.0 + 1e-9);
    // T = 2 I here, G = -W^T T.
    EXPECT_LE((b.G.materialize() + 2.0 * Matrix::Identity(2, 2)).norm(), 1e-5);
}

TEST(RhoLayer, SlopesScaleWithRho) {
    Rng rng(34);
    for (double rho : {0.25, 1.0, 4.0})
        for (auto choice : {BoundMethod::refined_sn(), BoundMethod::refined_aol()}) {
            const auto b = make_rho_lipschitz_layer(LinOperator::dense(random_normal_matrix(8, 8, rng)),
                                                    ActivationSector::relu(), rho, choice);
            const auto chain = chain_of({b}, LinOperator::identity(8));
            EXPECT_LE(sampled_pair_slope(chain, 1000, 2), std::sqrt(rho) * (1 + 1e-6));
            EXPECT_LE(sampled_lower_bound(chain, 300, 3), std::sqrt(rho) * (1 + 1e-6));
        }
}

TEST(RhoLayer, BoundIsTightForScaledOrthogonalWeights) {
    Rng rng(35);
    Eigen::HouseholderQR<Matrix> qr(random_normal_matrix(8, 8, rng));
    const Matrix q = 3.0 * Matrix(qr.householderQ());
    for (double rho : {0.25, 1.0, 4.0}) {
        const auto b = make_rho_lipschitz_layer(LinOperator::dense(q), ActivationSector::relu(), rho,
                                                BoundMethod::refined_sn());
        EXPECT_LE(liplt_single(b, ActivationSector::relu(), kExact), std::sqrt(rho) * (1 + 1e-6));
    }
}

TEST(RhoLayer, RandomWeightBoundIsSound) {
    Rng rng(36);
    const auto b = make_rho_lipschitz_layer(LinOperator::dense(random_normal_matrix(8, 8, rng)),
                                            ActivationSector::relu(), 1.0, BoundMethod::refined_sn());
    const auto chain = chain_of({b}, LinOperator::identity(8));
    EXPECT_GE(liplt_single(b, chain.sector, kCfg), sampled_lower_bound(chain, 500, 4));
}

// ---------------------------------------------------------------------------
// Oracles

TEST(Oracles, LinearSampledBoundReachesNorm) {
    Rng rng(37);
    const Matrix a = random_normal_matrix(5, 6, rng);
    const auto chain = chain_of({block(Matrix::Identity(6, 6), Matrix::Zero(6, 6), Matrix::Identity(6, 6))},
                                LinOperator::dense(a));
    const double lower = sampled_lower_bound(chain, 10000, 1);
    EXPECT_GE(lower, 0.99 * svd_norm(a));
    EXPECT_LE(lower, svd_norm(a) * (1 + 1e-9));
}

TEST(Oracles, ScalarResidualApproachesOne) {
    const auto chain = chain_of({block(scalar(1), scalar(-1), scalar(1))}, LinOperator::dense(Matrix::Identity(2, 1)));
    EXPECT_NEAR(sampled_lower_bound(chain, 100, 2), 1.0, 1e-9);
}

TEST(Oracles, PatternEnumerationExamples) {
    const auto c1 = chain_of({block(Matrix::Zero(2, 2), Matrix::Identity(2, 2), diag2(2, 1))}, LinOperator::identity(2));
    EXPECT_NEAR(pattern_enum_bound(c1), 2.0, 1e-12);
    const auto c2 = chain_of({block(Matrix::Zero(1, 2), Matrix::Ones(1, 2), Matrix::Identity(2, 2))},
                             LinOperator::dense(Matrix::Identity(2, 1)));
    EXPECT_NEAR(pattern_enum_bound(c2), std::sqrt(2.0), 1e-12);
}

TEST(Oracles, PatternEnumerationSandwich) {
    Rng rng(38);
    const auto b = block(Matrix::Zero(3, 4), random_normal_matrix(3, 6, rng), random_normal_matrix(6, 4, rng));
    const auto chain = chain_of({b}, LinOperator::identity(3));
    const double pe = pattern_enum_bound(chain);
    EXPECT_LE(sampled_lower_bound(chain, 1000, 5), pe * (1 + 1e-9));
    const double lt = liplt_single(b, chain.sector, kCfg);
    EXPECT_LE(pe, lt * (1 + 1e-9));
    EXPECT_LE(lt, naive_bound(chain, kCfg) * (1 + 1e-9));
}

TEST(Oracles, PatternEnumerationPreconditions) {
    Rng rng(39);
    EXPECT_THROW(pattern_enum_bound(testutil::random_chain(rng, 2, 4, false)), std::invalid_argument);
    const auto wide = chain_of({block(Matrix::Zero(2, 2), random_normal_matrix(2, 13, rng),
                                      random_normal_matrix(13, 2, rng))},
                               LinOperator::identity(2));
    EXPECT_THROW(pattern_enum_bound(wide), std::invalid_argument);
}
