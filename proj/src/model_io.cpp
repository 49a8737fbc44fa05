#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"
#include "lipcert/errors.hpp"
#include "lipcert/netgraph.hpp"

namespace lipcert {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kManifestVersion = 1;

float decode_le_float(const unsigned char* p) {
    const std::uint32_t bits = std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
                               (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
    float f;
    std::memcpy(&f, &bits, sizeof f);
    return f;
}

void encode_le_float(float f, std::string& out) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof bits);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

// ---------------------------------------------------------------------------
// Reading

class WeightBlob {
public:
    explicit WeightBlob(std::vector<unsigned char> bytes) : bytes_(std::move(bytes)) {}

    std::size_t element_count() const { return bytes_.size() / 4; }

    Vector slice(std::size_t offset, std::size_t len, const std::string& what) const {
        if (offset + len > element_count())
            throw FormatError(what + ": slice [" + std::to_string(offset) + ", " +
                              std::to_string(offset + len) + ") exceeds weights.bin (" +
                              std::to_string(element_count()) + " elements)");
        Vector v(static_cast<Index>(len));
        for (std::size_t i = 0; i < len; ++i) v[Index(i)] = decode_le_float(&bytes_[4 * (offset + i)]);
        return v;
    }

private:
    std::vector<unsigned char> bytes_;
};

template <typename T>
T field(const json& j, const char* key, const std::string& what) {
    if (!j.contains(key)) throw FormatError(what + ": missing field \"" + key + "\"");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw FormatError(what + ": field \"" + key + "\" has the wrong type");
    }
}

std::size_t required_elements(const json& desc) {
    std::size_t end = 0;
    if (desc.contains("offset")) end = desc["offset"].get<std::size_t>() + desc.value("len", std::size_t(0));
    if (desc.contains("bias_offset"))
        end = std::max(end, desc["bias_offset"].get<std::size_t>() + desc.value("bias_len", std::size_t(0)));
    return end;
}

struct ParsedOp {
    LinOperator op;
    Vector bias;
};

ParsedOp parse_operator(const json& desc, const WeightBlob& blob, const std::string& what) {
    if (!desc.is_object()) throw FormatError(what + ": operator descriptor must be an object");
    const auto kind = field<std::string>(desc, "kind", what);
    ParsedOp out;

    auto weights = [&](std::size_t expected) {
        const auto offset = field<std::size_t>(desc, "offset", what);
        const auto len = field<std::size_t>(desc, "len", what);
        if (len != expected)
            throw FormatError(what + ": len " + std::to_string(len) + " does not match shape (" +
                              std::to_string(expected) + " elements)");
        return blob.slice(offset, len, what);
    };

    if (kind == "dense") {
        const auto rows = field<Index>(desc, "rows", what);
        const auto cols = field<Index>(desc, "cols", what);
        if (rows <= 0 || cols <= 0) throw FormatError(what + ": dense shape must be positive");
        Vector flat = weights(static_cast<std::size_t>(rows * cols));
        Matrix m(rows, cols);
        for (Index r = 0; r < rows; ++r)
            for (Index c = 0; c < cols; ++c) m(r, c) = flat[r * cols + c];
        out.op = LinOperator::dense(std::move(m));
    } else if (kind == "conv2d") {
        Conv2dGeometry g;
        g.in_ch = field<int>(desc, "in_ch", what);
        g.out_ch = field<int>(desc, "out_ch", what);
        g.kh = field<int>(desc, "kh", what);
        g.kw = field<int>(desc, "kw", what);
        g.stride = field<int>(desc, "stride", what);
        g.pad = field<int>(desc, "pad", what);
        g.in_h = field<int>(desc, "in_h", what);
        g.in_w = field<int>(desc, "in_w", what);
        try {
            g.validate();
        } catch (const ShapeError& e) {
            throw FormatError(what + ": " + e.what());
        }
        out.op = LinOperator::conv2d(g, weights(static_cast<std::size_t>(g.kernel_size())));
    } else if (kind == "identity") {
        const auto rows = field<Index>(desc, "rows", what);
        const auto cols = desc.value("cols", rows);
        if (rows <= 0 || rows != cols) throw FormatError(what + ": identity must be square");
        out.op = LinOperator::identity(rows);
    } else if (kind == "zero") {
        const auto rows = field<Index>(desc, "rows", what);
        const auto cols = field<Index>(desc, "cols", what);
        if (rows <= 0 || cols <= 0) throw FormatError(what + ": zero shape must be positive");
        out.op = LinOperator::zero(rows, cols);
    } else {
        throw FormatError(what + ": unknown operator kind \"" + kind + "\"");
    }

    if (desc.contains("bias_offset")) {
        const auto offset = field<std::size_t>(desc, "bias_offset", what);
        const auto len = field<std::size_t>(desc, "bias_len", what);
        out.bias = blob.slice(offset, len, what + " bias");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Writing

class BlobWriter {
public:
    json describe(const LinOperator& op, const Vector& bias, const std::string& what) {
        json d;
        d["kind"] = to_string(op.kind());
        switch (op.kind()) {
            case OpKind::dense: {
                const Matrix& m = *op.dense_matrix();
                d["rows"] = m.rows();
                d["cols"] = m.cols();
                d["offset"] = count_;
                d["len"] = m.size();
                for (Index r = 0; r < m.rows(); ++r)
                    for (Index c = 0; c < m.cols(); ++c) push(m(r, c));
                break;
            }
            case OpKind::conv2d: {
                const auto& g = *op.conv_geometry();
                d["in_ch"] = g.in_ch;
                d["out_ch"] = g.out_ch;
                d["kh"] = g.kh;
                d["kw"] = g.kw;
                d["stride"] = g.stride;
                d["pad"] = g.pad;
                d["in_h"] = g.in_h;
                d["in_w"] = g.in_w;
                d["offset"] = count_;
                d["len"] = g.kernel_size();
                for (double k : *op.conv_kernel()) push(k);
                break;
            }
            case OpKind::identity:
            case OpKind::zero:
                d["rows"] = op.rows();
                d["cols"] = op.cols();
                break;
            default:
                throw std::invalid_argument(what + ": operator kind \"" + to_string(op.kind()) +
                                            "\" cannot be stored");
        }
        if (bias.size()) {
            d["bias_offset"] = count_;
            d["bias_len"] = bias.size();
            for (double b : bias) push(b);
        }
        return d;
    }

    const std::string& bytes() const { return bytes_; }

private:
    void push(double x) {
        encode_le_float(static_cast<float>(x), bytes_);
        ++count_;
    }
    std::string bytes_;
    std::size_t count_ = 0;
};

}  // namespace

ResidualChain parse_model(const fs::path& dir) {
    const fs::path manifest_path = dir / "manifest.json";
    const fs::path weights_path = dir / "weights.bin";
    if (!fs::exists(manifest_path)) throw FormatError("missing file " + manifest_path.string());
    if (!fs::exists(weights_path)) throw FormatError("missing file " + weights_path.string());

    json manifest;
    {
        std::ifstream in(manifest_path);
        try {
            manifest = json::parse(in);
        } catch (const json::parse_error& e) {
            throw FormatError("manifest.json: " + std::string(e.what()));
        }
    }
    std::vector<unsigned char> bytes;
    {
        std::ifstream in(weights_path, std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }

    const std::string what = "manifest.json";
    if (field<int>(manifest, "version", what) != kManifestVersion)
        throw FormatError("manifest.json: unsupported version");

    // The blob must hold exactly the elements the descriptors reference.
    std::size_t required = 0;
    const json& blocks_json = manifest.contains("blocks") ? manifest["blocks"] : json::array();
    if (!blocks_json.is_array()) throw FormatError("manifest.json: \"blocks\" must be an array");
    for (const auto& b : blocks_json)
        for (const char* key : {"H", "G", "W"})
            if (b.contains(key)) required = std::max(required, required_elements(b[key]));
    if (manifest.contains("final")) required = std::max(required, required_elements(manifest["final"]));
    if (bytes.size() != 4 * required)
        throw FormatError("binary length mismatch: weights.bin has " + std::to_string(bytes.size()) +
                          " bytes, manifest requires " + std::to_string(4 * required));
    WeightBlob blob(std::move(bytes));

    ResidualChain chain;
    chain.sector.kind = parse_activation(field<std::string>(manifest, "activation", what));
    chain.sector.alpha = field<double>(manifest, "alpha", what);
    chain.sector.beta = field<double>(manifest, "beta", what);
    chain.input_shape = field<std::vector<int>>(manifest, "input_shape", what);
    chain.num_classes = field<int>(manifest, "num_classes", what);

    for (std::size_t k = 0; k < blocks_json.size(); ++k) {
        const std::string name = "block " + std::to_string(k);
        const auto& b = blocks_json[k];
        ResidualBlock block;
        auto H = parse_operator(field<json>(b, "H", name), blob, name + " H");
        auto G = parse_operator(field<json>(b, "G", name), blob, name + " G");
        auto W = parse_operator(field<json>(b, "W", name), blob, name + " W");
        block.H = H.op;
        block.h_bias = H.bias;
        block.G = G.op;
        block.g_bias = G.bias;
        block.W = W.op;
        block.w_bias = W.bias;
        chain.blocks.push_back(std::move(block));
    }

    if (manifest.contains("final")) {
        auto F = parse_operator(manifest["final"], blob, "final");
        chain.final_map = F.op;
        chain.final_bias = F.bias;
    } else {
        const Index n = chain.blocks.empty() ? chain.input_dim() : chain.blocks.back().out_dim();
        chain.final_map = LinOperator::identity(n);
    }

    try {
        chain.validate();
    } catch (const std::invalid_argument& e) {
        throw FormatError(std::string("invalid model: ") + e.what());
    }
    return chain;
}

void save_model(const ResidualChain& chain, const fs::path& dir) {
    chain.validate();

    BlobWriter writer;
    json manifest;
    manifest["version"] = kManifestVersion;
    manifest["activation"] = to_string(chain.sector.kind);
    manifest["alpha"] = chain.sector.alpha;
    manifest["beta"] = chain.sector.beta;
    manifest["input_shape"] = chain.input_shape;
    manifest["num_classes"] = chain.num_classes;
    json blocks = json::array();
    for (std::size_t k = 0; k < chain.blocks.size(); ++k) {
        const auto& b = chain.blocks[k];
        const std::string name = "block " + std::to_string(k);
        json entry;
        entry["H"] = writer.describe(b.H, b.h_bias, name + " H");
        entry["G"] = writer.describe(b.G, b.g_bias, name + " G");
        entry["W"] = writer.describe(b.W, b.w_bias, name + " W");
        blocks.push_back(std::move(entry));
    }
    manifest["blocks"] = std::move(blocks);
    manifest["final"] = writer.describe(chain.final_map, chain.final_bias, "final");

    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create model directory " + dir.string() + ": " + ec.message());

    std::ofstream m(dir / "manifest.json");
    if (!m) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
    m << manifest.dump(2) << "\n";
    std::ofstream w(dir / "weights.bin", std::ios::binary);
    if (!w) throw std::runtime_error("cannot write " + (dir / "weights.bin").string());
    w.write(writer.bytes().data(), static_cast<std::streamsize>(writer.bytes().size()));
    if (!m || !w) throw std::runtime_error("failed writing model to " + dir.string());
}

}  // namespace lipcert
