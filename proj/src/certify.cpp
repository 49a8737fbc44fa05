#include "lipcert/certify.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "lipcert/parallel.hpp"

namespace lipcert {

namespace {

void check_label(const Vector& z, int y) {
    if (z.size() < 2) throw std::invalid_argument("logit vector needs K >= 2 entries");
    if (y < 0 || y >= z.size()) throw std::out_of_range("label out of range");
}

void check_row(const Vector& z, int y, const Vector& row) {
    if (row.size() != z.size()) throw std::invalid_argument("Lipschitz row must have K entries");
    for (Index i = 0; i < row.size(); ++i)
        if (i != y && !(row[i] > 0.0)) throw std::invalid_argument("pairwise Lipschitz bounds must be > 0");
}

}  // namespace

double logit_margin(const Vector& z, int y) {
    check_label(z, y);
    double other = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < z.size(); ++j)
        if (j != y) other = std::max(other, z[j]);
    return z[y] - other;
}

MarginInfo margin_info(const Vector& z, int y) {
    MarginInfo m;
    m.logits = z;
    m.label = y;
    m.margin = logit_margin(z, y);
    m.correct = m.margin > 0.0;
    return m;
}

double lse_scaled(const Vector& x, double t) {
    if (!(t > 0.0)) throw std::invalid_argument("lse_scaled: t must be > 0");
    if (x.size() == 0) throw std::invalid_argument("lse_scaled: empty input");
    const double top = x.maxCoeff();
    return top + std::log((t * (x.array() - top)).exp().sum()) / t;
}

double certified_radius(const Vector& z, int y, const Vector& row) {
    check_label(z, y);
    if (logit_margin(z, y) <= 0.0) return 0.0;
    check_row(z, y, row);
    double best = std::numeric_limits<double>::infinity();
    for (Index i = 0; i < z.size(); ++i)
        if (i != y) best = std::min(best, (z[y] - z[i]) / row[i]);
    return best;
}

double soft_certified_radius(const Vector& z, int y, const Vector& row, double t) {
    check_label(z, y);
    if (!(t > 0.0)) throw std::invalid_argument("soft radius: t must be > 0");
    check_row(z, y, row);
    Vector neg(z.size() - 1);
    for (Index i = 0, n = 0; i < z.size(); ++i)
        if (i != y) neg[n++] = -(z[y] - z[i]) / row[i];
    return -lse_scaled(neg, t);
}

double certified_accuracy(const std::vector<CertRecord>& records, double eps) {
    if (records.empty()) return 0.0;
    const auto n = std::count_if(records.begin(), records.end(),
                                 [&](const CertRecord& r) { return r.radius_lower > eps; });
    return double(n) / double(records.size());
}

double quantile(std::vector<double> values, double level) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    const double pos = level * double(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - double(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

CertificationResult certify_with_bounds(const ResidualChain& chain, const Dataset& data, double eps, double t,
                                        const BoundReport& bounds) {
    if (!(eps >= 0.0)) throw std::invalid_argument("eps must be >= 0");
    if (!(t > 0.0)) throw std::invalid_argument("t must be > 0");
    data.validate();
    if (bounds.pairwise.rows() != chain.num_classes)
        throw std::invalid_argument("bound report does not match the chain's class count");

    CertificationResult result;
    result.bounds = bounds;
    const Matrix logits = forward_batch(chain, data.inputs);
    result.records.resize(static_cast<std::size_t>(data.size()));
    parallel_for(result.records.size(), [&](std::size_t s) {
        const Vector z = logits.col(Index(s));
        const int y = data.labels[s];
        const Vector row = bounds.pairwise.row(y).transpose();
        CertRecord& r = result.records[s];
        r.index = Index(s);
        r.label = y;
        Index pred;
        z.maxCoeff(&pred);
        r.prediction = int(pred);
        r.margin = logit_margin(z, y);
        r.on_boundary = r.margin == 0.0;
        r.radius_lower = certified_radius(z, y, row);
        r.soft_radius = soft_certified_radius(z, y, row, t);
        r.verified = r.radius_lower > eps;
    });

    CertSummary& s = result.summary;
    s.count = data.size();
    s.eps = eps;
    std::vector<double> radii;
    double total_radius = 0.0;
    Index correct = 0;
    for (const auto& r : result.records) {
        total_radius += r.radius_lower;
        if (r.margin > 0.0) {
            ++correct;
            radii.push_back(r.radius_lower);
        }
    }
    s.clean_accuracy = double(correct) / double(s.count);
    s.certified_accuracy = certified_accuracy(result.records, eps);
    s.mean_radius = total_radius / double(s.count);
    for (double level : s.quantile_levels) s.radius_quantiles.push_back(quantile(radii, level));
    return result;
}

CertificationResult certify_dataset(const ResidualChain& chain, const Dataset& data, double eps, double t,
                                    PairwiseMode mode, const BoundMethod& method,
                                    const PowerIterConfig& cfg) {
    if (!(eps >= 0.0)) throw std::invalid_argument("eps must be >= 0");
    return certify_with_bounds(chain, data, eps, t, pairwise_lipschitz(chain, mode, method, cfg));
}

}  // namespace lipcert
