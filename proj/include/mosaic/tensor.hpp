#pragma once
// Dense row-major tensor of doubles. Data is shared between copies
// (shallow copy); use clone() when a private buffer is needed.

#include <cstdint>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace mosaic {

namespace detail {
inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}
}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(count(shape_), 0.0)) {}

    Tensor(std::vector<int> shape, std::vector<double> values)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(std::move(values))) {
        detail::require(count(shape_) == static_cast<std::int64_t>(data_->size()),
                        "tensor: shape does not match data length");
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor full(std::vector<int> shape, double v) {
        Tensor t(std::move(shape));
        for (double& x : *t.data_) x = v;
        return t;
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor ones(std::vector<int> shape) { return full(std::move(shape), 1.0); }

    bool defined() const { return data_ != nullptr; }
    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    int ndim() const { return static_cast<int>(shape_.size()); }
    std::int64_t numel() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

    // 2-d conveniences; 1-d tensors count as a single row.
    int rows() const { return ndim() == 2 ? shape_[0] : 1; }
    int cols() const { return ndim() == 2 ? shape_[1] : static_cast<int>(numel()); }

    const double* ptr() const { return data_->data(); }
    double* mut() { return data_->data(); }

    double at(int i) const { return (*data_)[static_cast<std::size_t>(i)]; }
    double at(int r, int c) const { return (*data_)[static_cast<std::size_t>(r) * cols() + c]; }
    double& at(int i) { return (*data_)[static_cast<std::size_t>(i)]; }
    double& at(int r, int c) { return (*data_)[static_cast<std::size_t>(r) * cols() + c]; }

    double item() const {
        detail::require(numel() == 1, "tensor: item() needs a single-element tensor");
        return (*data_)[0];
    }

    Tensor clone() const {
        if (!defined()) return Tensor();
        return Tensor(shape_, *data_);
    }

    Tensor reshaped(std::vector<int> shape) const {
        detail::require(count(shape) == numel(), "tensor: reshape changes element count");
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        t.requires_grad = requires_grad;
        return t;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    static std::int64_t count(const std::vector<int>& shape) {
        std::int64_t n = 1;
        for (int d : shape) {
            detail::require(d > 0, "tensor: dimensions must be positive");
            n *= d;
        }
        return n;
    }

    bool requires_grad = false;

private:
    std::vector<int> shape_;
    std::shared_ptr<std::vector<double>> data_;
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

}  // namespace mosaic
