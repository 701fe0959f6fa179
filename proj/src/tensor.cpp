#include "derma/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace derma {

std::int64_t shape_product(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) {
            throw std::invalid_argument("tensor shape has non-positive extent " + std::to_string(d) +
                                        " in " + shape_to_string(shape));
        }
        n *= d;
    }
    return n;
}

std::string shape_to_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ')';
    return os.str();
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(shape_product(shape_)), 0.0f);
}

Tensor::Tensor(std::vector<int> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != shape_product(shape_)) {
        throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                    " does not match shape " + shape_to_string(shape_));
    }
}

Tensor Tensor::full(std::vector<int> shape, float value) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = value;
    return t;
}

Tensor Tensor::scalar(float value) { return Tensor({1}, {value}); }

int Tensor::dim(int axis) const {
    if (axis < 0 || axis >= rank()) {
        throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for rank " +
                                    std::to_string(rank()));
    }
    return shape_[static_cast<std::size_t>(axis)];
}

float Tensor::item() const {
    if (data_.size() != 1) {
        throw std::invalid_argument("item() requires a single-element tensor, got " + shape_str());
    }
    return data_[0];
}

bool Tensor::all_finite() const {
    for (float v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Tensor Tensor::reshaped(std::vector<int> shape) const {
    if (shape_product(shape) != size()) {
        throw std::invalid_argument("cannot reshape " + shape_str() + " to " + shape_to_string(shape));
    }
    return Tensor(std::move(shape), data_);
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

}  // namespace derma
