#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "lipcert/errors.hpp"
#include "lipcert/netgraph.hpp"
#include "lipcert/rng.hpp"

namespace lipcert {

namespace fs = std::filesystem;

namespace {

constexpr std::uint32_t kImageMagic = 2051;
constexpr std::uint32_t kLabelMagic = 2049;

std::vector<unsigned char> read_all(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t at) {
    return (std::uint32_t(b[at]) << 24) | (std::uint32_t(b[at + 1]) << 16) |
           (std::uint32_t(b[at + 2]) << 8) | std::uint32_t(b[at + 3]);
}

}  // namespace

Dataset load_idx(const fs::path& images_path, const fs::path& labels_path,
                 std::optional<std::size_t> limit, const std::set<int>& class_filter) {
    const auto images = read_all(images_path);
    const auto labels = read_all(labels_path);

    if (images.size() < 16) throw FormatError(images_path.string() + ": truncated header");
    if (labels.size() < 8) throw FormatError(labels_path.string() + ": truncated header");
    if (read_be32(images, 0) != kImageMagic)
        throw FormatError(images_path.string() + ": bad magic " + std::to_string(read_be32(images, 0)));
    if (read_be32(labels, 0) != kLabelMagic)
        throw FormatError(labels_path.string() + ": bad magic " + std::to_string(read_be32(labels, 0)));

    const std::size_t count = read_be32(images, 4);
    const std::size_t rows = read_be32(images, 8);
    const std::size_t cols = read_be32(images, 12);
    const std::size_t label_count = read_be32(labels, 4);
    if (count != label_count)
        throw FormatError("count mismatch: " + std::to_string(count) + " images but " +
                          std::to_string(label_count) + " labels");
    const std::size_t dim = rows * cols;
    if (images.size() < 16 + count * dim) throw FormatError(images_path.string() + ": truncated payload");
    if (labels.size() < 8 + count) throw FormatError(labels_path.string() + ": truncated payload");

    // Relabel map for the class filter.
    std::vector<int> relabel(256, -1);
    int max_label = 0;
    for (std::size_t i = 0; i < count; ++i) max_label = std::max<int>(max_label, labels[8 + i]);
    if (class_filter.empty()) {
        for (int c = 0; c < 256; ++c) relabel[c] = c;
    } else {
        int next = 0;
        for (int c : class_filter) {
            if (c < 0 || c > 255) throw std::invalid_argument("class filter entry out of range");
            relabel[c] = next++;
        }
    }

    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < count && (!limit || keep.size() < *limit); ++i)
        if (relabel[labels[8 + i]] >= 0) keep.push_back(i);

    Dataset ds;
    ds.input_shape = {1, static_cast<int>(rows), static_cast<int>(cols)};
    ds.num_classes = class_filter.empty() ? std::max(2, max_label + 1) : static_cast<int>(class_filter.size());
    ds.inputs.resize(static_cast<Index>(dim), static_cast<Index>(keep.size()));
    ds.labels.reserve(keep.size());
    for (std::size_t s = 0; s < keep.size(); ++s) {
        const std::size_t i = keep[s];
        const unsigned char* px = &images[16 + i * dim];
        for (std::size_t p = 0; p < dim; ++p) ds.inputs(Index(p), Index(s)) = px[p] / 255.0;
        ds.labels.push_back(relabel[labels[8 + i]]);
    }
    if (ds.size() == 0) throw FormatError("dataset is empty after filtering");
    return ds;
}

Dataset gen_two_moons(int n, double noise, std::uint64_t seed) {
    if (n < 2) throw std::invalid_argument("two moons: n must be >= 2");
    if (!(noise >= 0.0)) throw std::invalid_argument("two moons: noise must be >= 0");

    const int n_upper = n / 2;
    const int n_lower = n - n_upper;
    auto angle = [](int i, int count) {
        return count > 1 ? std::numbers::pi * i / (count - 1) : 0.0;
    };

    Dataset ds;
    ds.num_classes = 2;
    ds.input_shape = {2};
    ds.inputs.resize(2, n);
    ds.labels.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n_upper; ++i) {
        const double t = angle(i, n_upper);
        ds.inputs(0, i) = std::cos(t);
        ds.inputs(1, i) = std::sin(t);
        ds.labels[i] = 0;
    }
    for (int i = 0; i < n_lower; ++i) {
        const double t = angle(i, n_lower);
        ds.inputs(0, n_upper + i) = 1.0 - std::cos(t);
        ds.inputs(1, n_upper + i) = 0.5 - std::sin(t);
        ds.labels[n_upper + i] = 1;
    }
    if (noise > 0.0) {
        Rng rng(seed);
        std::normal_distribution<double> dist(0.0, noise);
        for (int i = 0; i < n; ++i) {
            ds.inputs(0, i) += dist(rng);
            ds.inputs(1, i) += dist(rng);
        }
    }
    return ds;
}

}  // namespace lipcert
