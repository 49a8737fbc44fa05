#pragma once

#include <vector>

#include "lipcert/liplt.hpp"
#include "lipcert/netgraph.hpp"

namespace lipcert {

struct MarginInfo {
    Vector logits;
    int label = 0;
    double margin = 0.0;  // z_y - max_{j != y} z_j
    bool correct = false;
};

MarginInfo margin_info(const Vector& z, int y);

/// z_y - max_{j != y} z_j.
double logit_margin(const Vector& z, int y);

/// t^-1 log sum_i exp(t x_i), computed with max subtraction.
double lse_scaled(const Vector& x, double t);

/// min_{i != y} (z_y - z_i) / L_yi, or 0 when the margin is not positive.
/// `row` holds L_y. (its y-th entry is ignored).
double certified_radius(const Vector& z, int y, const Vector& row);

/// -t^-1 log sum_{i != y} exp(-t (z_y - z_i) / L_yi).
double soft_certified_radius(const Vector& z, int y, const Vector& row, double t);

struct CertRecord {
    Index index = 0;
    int label = 0;
    int prediction = 0;
    double margin = 0.0;
    double radius_lower = 0.0;
    double soft_radius = 0.0;
    bool verified = false;
    bool on_boundary = false;  // margin exactly 0
};

struct CertSummary {
    Index count = 0;
    double eps = 0.0;
    double clean_accuracy = 0.0;
    double certified_accuracy = 0.0;
    double mean_radius = 0.0;  // over all samples, misclassified count as 0
    std::vector<double> quantile_levels{0.05, 0.25, 0.5, 0.75, 0.95};
    std::vector<double> radius_quantiles;  // over correctly classified samples
};

struct CertificationResult {
    BoundReport bounds;
    std::vector<CertRecord> records;
    CertSummary summary;
};

/// Certifies every sample of `data` against one precomputed pairwise report.
CertificationResult certify_with_bounds(const ResidualChain& chain, const Dataset& data, double eps,
                                        double t, const BoundReport& bounds);

CertificationResult certify_dataset(const ResidualChain& chain, const Dataset& data, double eps, double t,
                                    PairwiseMode mode, const BoundMethod& method,
                                    const PowerIterConfig& cfg);

/// Fraction of records with radius_lower > eps.
double certified_accuracy(const std::vector<CertRecord>& records, double eps);

/// Linear-interpolation quantile (the "linear" rule of numpy.quantile).
double quantile(std::vector<double> values, double level);

}  // namespace lipcert
