#include "adv2/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace adv2 {

double Tensor::min() const {
    if (empty()) return 0.0;
    return *std::min_element(data_.begin(), data_.end());
}

double Tensor::max() const {
    if (empty()) return 0.0;
    return *std::max_element(data_.begin(), data_.end());
}

double Tensor::sum() const {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
}

double Tensor::abs_max() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::fabs(v));
    return m;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << ",";
        os << shape_[i];
    }
    os << ")";
    return os.str();
}

static void check_same(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string("tensor ") + op + ": shape mismatch " +
                                    a.shape_str() + " vs " + b.shape_str());
}

Tensor operator+(const Tensor& a, const Tensor& b) {
    check_same(a, b, "+");
    Tensor r = a;
    for (std::size_t i = 0; i < r.size(); ++i) r[i] += b[i];
    return r;
}

Tensor operator-(const Tensor& a, const Tensor& b) {
    check_same(a, b, "-");
    Tensor r = a;
    for (std::size_t i = 0; i < r.size(); ++i) r[i] -= b[i];
    return r;
}

Tensor operator*(const Tensor& a, const Tensor& b) {
    check_same(a, b, "*");
    Tensor r = a;
    for (std::size_t i = 0; i < r.size(); ++i) r[i] *= b[i];
    return r;
}

Tensor operator*(const Tensor& a, double s) {
    Tensor r = a;
    for (std::size_t i = 0; i < r.size(); ++i) r[i] *= s;
    return r;
}

Tensor operator+(const Tensor& a, double s) {
    Tensor r = a;
    for (std::size_t i = 0; i < r.size(); ++i) r[i] += s;
    return r;
}

void axpy(Tensor& y, double alpha, const Tensor& x) {
    check_same(y, x, "axpy");
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += alpha * x[i];
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    Tensor r = a;
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = std::min(hi, std::max(lo, r[i]));
    return r;
}

Tensor sign(const Tensor& a) {
    Tensor r = a;
    for (std::size_t i = 0; i < r.size(); ++i)
        r[i] = (r[i] > 0.0) ? 1.0 : (r[i] < 0.0 ? -1.0 : 0.0);
    return r;
}

double linf_dist(const Tensor& a, const Tensor& b) {
    check_same(a, b, "linf");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

double l2_norm(const Tensor& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * a[i];
    return std::sqrt(s);
}

std::uint64_t tensor_hash(const Tensor& t, double quantum) {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a
    auto mix = [&h](std::uint64_t v) {
        for (int b = 0; b < 8; ++b) {
            h ^= (v >> (8 * b)) & 0xff;
            h *= 1099511628211ull;
        }
    };
    for (int d : t.shape()) mix(static_cast<std::uint64_t>(d));
    for (std::size_t i = 0; i < t.size(); ++i) {
        double q = std::nearbyint(t[i] / quantum);
        mix(static_cast<std::uint64_t>(static_cast<std::int64_t>(q)));
    }
    return h;
}

}  // namespace adv2
