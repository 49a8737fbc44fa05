#include "lipcert/rng.hpp"

namespace lipcert {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace

std::uint64_t sub_seed(std::uint64_t seed, std::string_view stream) {
    // FNV-1a over the stream name, then mixed with the seed.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : stream) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return splitmix64(seed ^ splitmix64(h));
}

Eigen::VectorXd random_normal_vector(Eigen::Index n, Rng& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = dist(rng);
    return v;
}

Eigen::VectorXd random_unit_vector(Eigen::Index n, Rng& rng) {
    Eigen::VectorXd v = random_normal_vector(n, rng);
    double norm = v.norm();
    while (norm == 0.0) {
        v = random_normal_vector(n, rng);
        norm = v.norm();
    }
    return v / norm;
}

Eigen::MatrixXd random_normal_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng,
                                     double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Eigen::MatrixXd m(rows, cols);
    // Row-major fill order so the values match the on-disk layout.
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = dist(rng);
    return m;
}

}  // namespace lipcert
