#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace stackunet {

/// Dense float32 NCHW tensor. Contiguous, value-semantic.
struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<float> data;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_)
        : n(n_), c(c_), h(h_), w(w_), data(size_t(n_) * c_ * h_ * w_, 0.0f) {}

    size_t size() const { return data.size(); }
    size_t plane() const { return size_t(h) * w; }
    size_t sample_size() const { return size_t(c) * h * w; }

    float* ptr(int in, int ic = 0) { return data.data() + (size_t(in) * c + ic) * plane(); }
    const float* ptr(int in, int ic = 0) const {
        return data.data() + (size_t(in) * c + ic) * plane();
    }

    float& at(int in, int ic, int iy, int ix) {
        return data[((size_t(in) * c + ic) * h + iy) * w + ix];
    }
    float at(int in, int ic, int iy, int ix) const {
        return data[((size_t(in) * c + ic) * h + iy) * w + ix];
    }

    void fill(float v) { std::fill(data.begin(), data.end(), v); }

    bool same_shape(const Tensor& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }

    std::string shape_str() const {
        return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
               std::to_string(w);
    }

    void release() {
        data.clear();
        data.shrink_to_fit();
    }
};

}  // namespace stackunet
