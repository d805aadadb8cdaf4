#include "affordgen/tensor.hpp"

#include <cmath>
#include <sstream>

namespace afford {

namespace {

int64_t product(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d <= 0) raise(ErrorCode::Dimension, "nonpositive tensor dimension in " + shape_to_string(shape));
        n *= d;
    }
    return n;
}

} // namespace

Tensor::Tensor(std::vector<int64_t> shape)
    : shape_(std::move(shape)), data_(static_cast<size_t>(product(shape_)), 0.0) {}

Tensor::Tensor(std::vector<int64_t> shape, std::vector<double> values) : shape_(std::move(shape)) {
    const int64_t n = product(shape_);
    if (n != static_cast<int64_t>(values.size())) {
        raise(ErrorCode::Dimension, "value count " + std::to_string(values.size()) +
                                        " does not match shape " + shape_to_string(shape_));
    }
    data_ = std::move(values);
}

Tensor Tensor::full(std::vector<int64_t> shape, double value) {
    Tensor t(std::move(shape));
    t.fill(value);
    return t;
}

Tensor Tensor::he_normal(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : t.data_) v = rng.normal(0.0, stddev);
    return t;
}

Tensor Tensor::random_normal(std::vector<int64_t> shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape));
    for (double& v : t.data_) v = rng.normal(0.0, stddev);
    return t;
}

void Tensor::fill(double value) {
    for (double& v : data_) v = value;
}

Tensor Tensor::reshaped(std::vector<int64_t> new_shape) const {
    if (product(new_shape) != numel()) {
        raise(ErrorCode::Dimension, "cannot reshape " + shape_str() + " to " + shape_to_string(new_shape));
    }
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.data_ = data_;
    return t;
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

std::string shape_to_string(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* where) {
    if (!a.same_shape(b)) {
        raise(ErrorCode::Dimension,
              std::string(where) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
}

void debug_check_finite(const Tensor& t, const char* where) {
#ifndef NDEBUG
    if (!t.all_finite()) {
        raise(ErrorCode::Contract, std::string(where) + ": non-finite value detected");
    }
#else
    (void)t;
    (void)where;
#endif
}

const char* error_tag(ErrorCode code) {
    switch (code) {
        case ErrorCode::Dimension: return "E_DIM";
        case ErrorCode::Contract: return "E_CONTRACT";
        case ErrorCode::Input: return "E_INPUT";
        case ErrorCode::State: return "E_STATE";
        case ErrorCode::Format: return "E_FORMAT";
        case ErrorCode::NotFound: return "E_NOT_FOUND";
        case ErrorCode::Config: return "E_CONFIG";
        case ErrorCode::Divergence: return "E_DIVERGENCE";
        case ErrorCode::Degenerate: return "E_DEGENERATE";
        case ErrorCode::MetricUndefined: return "E_METRIC_UNDEFINED";
        case ErrorCode::Io: return "E_IO";
    }
    return "E_UNKNOWN";
}

} // namespace afford
