#include "cavlab/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "cavlab/errors.hpp"

namespace cavlab {

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t element_count(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
    for (auto e : shape_) {
        if (e == 0) throw InvalidArgument("tensor extents must be positive, got " + to_string(shape_));
    }
    data_.assign(element_count(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto e : shape_) {
        if (e == 0) throw InvalidArgument("tensor extents must be positive, got " + to_string(shape_));
    }
    if (element_count(shape_) != data_.size()) {
        throw ShapeMismatch("shape " + to_string(shape_) + " does not match " +
                            std::to_string(data_.size()) + " elements");
    }
}

std::span<float> Tensor::channel(std::size_t c) {
    const std::size_t plane = shape_[1] * shape_[2];
    return std::span<float>(data_).subspan(c * plane, plane);
}

std::span<const float> Tensor::channel(std::size_t c) const {
    const std::size_t plane = shape_[1] * shape_[2];
    return std::span<const float>(data_).subspan(c * plane, plane);
}

Tensor Tensor::reshaped(Shape shape) const {
    if (element_count(shape) != data_.size()) {
        throw ShapeMismatch("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ShapeMismatch(std::string(what) + ": shape " + to_string(a.shape()) + " vs " +
                            to_string(b.shape()));
    }
}

double dot(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) throw ShapeMismatch("dot: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
    return acc;
}

double dot(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "dot");
    return dot(a.values(), b.values());
}

double squared_norm(std::span<const float> a) { return dot(a, a); }

double norm(const Tensor& t) { return std::sqrt(squared_norm(t.values())); }

double cosine(const Tensor& a, const Tensor& b) {
    const double na = norm(a);
    const double nb = norm(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

Normalized normalize(const Tensor& v, double bias) {
    const double n = norm(v);
    if (!(n > 0.0) || !std::isfinite(n)) throw ZeroVector();
    Tensor out(v.shape());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] / n);
    return {std::move(out), bias / n, n};
}

Tensor pool(const Tensor& z, PoolMode mode) {
    if (z.rank() != 3) throw ShapeMismatch("pool expects a [C,H,W] tensor, got " + to_string(z.shape()));
    const std::size_t channels = z.dim(0);
    const std::size_t plane = z.dim(1) * z.dim(2);
    Tensor out({channels});
    for (std::size_t c = 0; c < channels; ++c) {
        auto ch = z.channel(c);
        if (mode == PoolMode::Max) {
            out[c] = *std::max_element(ch.begin(), ch.end());
            continue;
        }
        double acc = 0.0;
        for (float v : ch) acc += v;
        if (mode == PoolMode::Mean) acc /= static_cast<double>(plane);
        out[c] = static_cast<float>(acc);
    }
    return out;
}

Tensor expand_channels(const Tensor& alpha, std::size_t height, std::size_t width) {
    if (alpha.rank() != 1) throw ShapeMismatch("expand_channels expects a rank-1 tensor");
    Tensor out({alpha.size(), height, width});
    for (std::size_t c = 0; c < alpha.size(); ++c) {
        auto ch = out.channel(c);
        std::fill(ch.begin(), ch.end(), alpha[c]);
    }
    return out;
}

void axpy(float alpha, const Tensor& x, Tensor& y) {
    require_same_shape(x, y, "axpy");
    float* yd = y.data();
    const float* xd = x.data();
    for (std::size_t i = 0; i < x.size(); ++i) yd[i] += alpha * xd[i];
}

Tensor scaled(const Tensor& t, float factor) {
    Tensor out = t;
    for (auto& v : out.values()) v *= factor;
    return out;
}

Tensor subtract(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "subtract");
    Tensor out = a;
    for (std::size_t i = 0; i < a.size(); ++i) out[i] -= b[i];
    return out;
}

namespace {

constexpr char kMagic[4] = {'C', 'A', 'V', 'T'};

void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in, const std::string& origin) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw SchemaError(origin, "truncated tensor header");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
    if (t.rank() > 255) throw InvalidArgument("tensor rank exceeds 255");
    out.write(kMagic, 4);
    out.put(static_cast<char>(t.rank()));
    for (auto e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (float v : t.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
    if (!out) throw DataError("failed writing tensor");
}

Tensor read_tensor(std::istream& in, const std::string& origin) {
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
        throw SchemaError(origin, "missing CAVT magic bytes");
    }
    const int rank = in.get();
    if (rank == std::char_traits<char>::eof() || rank == 0) throw SchemaError(origin, "invalid tensor rank");
    Shape shape(static_cast<std::size_t>(rank));
    for (auto& e : shape) {
        e = get_u32(in, origin);
        if (e == 0) throw SchemaError(origin, "zero tensor extent");
    }
    const std::size_t n = element_count(shape);
    if (n > (std::size_t{1} << 31)) throw SchemaError(origin, "tensor too large");
    std::vector<float> data(n);
    for (auto& v : data) v = std::bit_cast<float>(get_u32(in, origin));
    return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path + " for writing");
    write_tensor(out, t);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw SchemaError(path, "cannot open tensor file");
    return read_tensor(in, path);
}

}  // namespace cavlab
