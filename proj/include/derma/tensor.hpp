#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace derma {

/// Dense n-dimensional array of 32-bit floats, row-major.
/// Shapes are lists of positive extents; data length always equals the
/// shape product.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);  // zero-filled
    Tensor(std::vector<int> shape, std::vector<float> data);

    static Tensor full(std::vector<int> shape, float value);
    static Tensor scalar(float value);

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int axis) const;
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::vector<float>& storage() { return data_; }
    const std::vector<float>& storage() const { return data_; }

    float& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    float operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    /// Value of a single-element tensor.
    float item() const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

    /// Reinterpret as a new shape with the same element count.
    Tensor reshaped(std::vector<int> shape) const;

    std::string shape_str() const;

private:
    std::vector<int> shape_;
    std::vector<float> data_;
};

/// Product of extents; throws std::invalid_argument on a non-positive extent.
std::int64_t shape_product(const std::vector<int>& shape);

std::string shape_to_string(const std::vector<int>& shape);

}  // namespace derma
