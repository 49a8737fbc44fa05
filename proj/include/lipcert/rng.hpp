#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include <Eigen/Dense>

namespace lipcert {

using Rng = std::mt19937_64;

/// Derives an independent seed for a named consumer ("power", "shuffle",
/// "pgd", ...) so every component can be reproduced on its own from the one
/// top-level seed.
std::uint64_t sub_seed(std::uint64_t seed, std::string_view stream);

/// Uniform direction on the unit sphere of dimension n.
Eigen::VectorXd random_unit_vector(Eigen::Index n, Rng& rng);

Eigen::VectorXd random_normal_vector(Eigen::Index n, Rng& rng, double stddev = 1.0);

Eigen::MatrixXd random_normal_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng,
                                     double stddev = 1.0);

}  // namespace lipcert
