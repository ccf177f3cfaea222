#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace adv2 {

// Dense row-major tensor of doubles. Images are (C,H,W), attribution maps
// (H,W), parameter matrices (out,in), conv weights (Cout,Cin,Kh,Kw).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<std::size_t>(count(shape_)), 0.0);
    }
    Tensor(std::vector<int> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != static_cast<std::size_t>(count(shape_)))
            throw std::invalid_argument("tensor: data size does not match shape");
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, double v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(int c, int y, int x) {
        return data_[(static_cast<std::size_t>(c) * dim(1) + y) * dim(2) + x];
    }
    double at(int c, int y, int x) const {
        return data_[(static_cast<std::size_t>(c) * dim(1) + y) * dim(2) + x];
    }
    double& at(int y, int x) { return data_[static_cast<std::size_t>(y) * dim(1) + x]; }
    double at(int y, int x) const { return data_[static_cast<std::size_t>(y) * dim(1) + x]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    double min() const;
    double max() const;
    double sum() const;
    double mean() const { return empty() ? 0.0 : sum() / static_cast<double>(size()); }
    double abs_max() const;

    std::string shape_str() const;

    static std::int64_t count(const std::vector<int>& shape) {
        std::int64_t n = 1;
        for (int d : shape) {
            if (d < 0) throw std::invalid_argument("tensor: negative dimension");
            n *= d;
        }
        return shape.empty() ? 0 : n;
    }

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

// Elementwise helpers used by optimizer loops and tests (non-autograd path).
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, double s);
Tensor operator+(const Tensor& a, double s);

void axpy(Tensor& y, double alpha, const Tensor& x);  // y += alpha * x
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor sign(const Tensor& a);
double linf_dist(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& a);

// Quantized content hash for regression fixtures (stable across minor FP
// reassociation; values rounded to `quantum` before hashing).
std::uint64_t tensor_hash(const Tensor& t, double quantum = 1e-6);

}  // namespace adv2
