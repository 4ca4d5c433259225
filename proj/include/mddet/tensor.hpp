#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace mddet {

// Dense 4-D array in (batch, channels, height, width) order, row-major.
// The single value carrier for activations, weights and gradients.
struct Tensor4 {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<double> v;

    Tensor4() = default;
    Tensor4(int n_, int c_, int h_, int w_, double fill = 0.0)
        : n(n_), c(c_), h(h_), w(w_),
          v(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {
        if (n_ < 0 || c_ < 0 || h_ < 0 || w_ < 0)
            throw std::invalid_argument("Tensor4: negative dimension");
    }

    std::size_t size() const { return v.size(); }

    std::size_t index(int i, int j, int y, int x) const {
        return ((static_cast<std::size_t>(i) * c + j) * h + y) * w + x;
    }

    double& at(int i, int j, int y, int x) { return v[index(i, j, y, x)]; }
    double at(int i, int j, int y, int x) const { return v[index(i, j, y, x)]; }

    bool same_shape(const Tensor4& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }

    std::string shape_str() const {
        return std::to_string(n) + "x" + std::to_string(c) + "x" +
               std::to_string(h) + "x" + std::to_string(w);
    }

    void fill(double x) { std::fill(v.begin(), v.end(), x); }
};

inline void require_same_shape(const Tensor4& a, const Tensor4& b, const char* where) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(where) + ": shape mismatch " +
                                    a.shape_str() + " vs " + b.shape_str());
}

}  // namespace mddet
