#ifndef CAVLAB_TENSOR_HPP
#define CAVLAB_TENSOR_HPP

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace cavlab {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

/// Dense row-major float tensor. Images are [3,H,W], activations [C,H,W],
/// masks and attribution maps [H,W].
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> data);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<float> values() noexcept { return data_; }
    std::span<const float> values() const noexcept { return data_; }
    float* data() noexcept { return data_.data(); }
    const float* data() const noexcept { return data_.data(); }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    float& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    float at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
    float& at(std::size_t c, std::size_t h, std::size_t w) {
        return data_[(c * shape_[1] + h) * shape_[2] + w];
    }
    float at(std::size_t c, std::size_t h, std::size_t w) const {
        return data_[(c * shape_[1] + h) * shape_[2] + w];
    }

    // Plane view of channel c of a rank-3 tensor.
    std::span<float> channel(std::size_t c);
    std::span<const float> channel(std::size_t c) const;

    Tensor reshaped(Shape shape) const;
    bool all_finite() const noexcept;

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<float> data_;
};

void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

/// Sum of elementwise products, accumulated in double in flat index order.
double dot(const Tensor& a, const Tensor& b);
double dot(std::span<const float> a, std::span<const float> b);
double squared_norm(std::span<const float> a);
double norm(const Tensor& t);
double cosine(const Tensor& a, const Tensor& b);

struct Normalized {
    Tensor direction;
    double bias = 0.0;
    double norm_before = 0.0;
};

/// Returns (v/||v||, b/||v||); the decision 1[v·z + b > 0] is unchanged.
Normalized normalize(const Tensor& v, double bias = 0.0);

enum class PoolMode { Sum, Mean, Max };

/// Per-channel spatial reduction of a [C,H,W] tensor.
Tensor pool(const Tensor& z, PoolMode mode);

/// v_{c,h,w} = alpha_c.
Tensor expand_channels(const Tensor& alpha, std::size_t height, std::size_t width);

void axpy(float alpha, const Tensor& x, Tensor& y);
Tensor scaled(const Tensor& t, float factor);
Tensor subtract(const Tensor& a, const Tensor& b);

// Binary format: "CAVT", u8 rank, rank x u32 LE extents, f32 LE data.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in, const std::string& origin = "<stream>");
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace cavlab

#endif  // CAVLAB_TENSOR_HPP
