#pragma once

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "headlab/tensor.hpp"

namespace testutil {

using headlab::Shape;
using headlab::Tape;
using headlab::Tensor;

// Central finite-difference check for a scalar-valued graph. `forward` must
// rebuild the graph from the params' current values on the tape it is given.
// Runs in double so the oracle itself is not drowned by rounding noise; the
// same templated code paths are what the float instantiation executes.
template <typename F>
void check_gradients(std::vector<Tensor<double>> params, F&& forward, double h = 1e-3) {
    for (auto& p : params) p.zero_grad();  // callers may reuse tensors across checks
    Tape<double> tape;
    Tensor<double> loss = forward(tape);
    tape.backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) analytic.push_back(p.grad());

    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& vals = params[pi].data();
        for (size_t i = 0; i < vals.size(); ++i) {
            const double keep = vals[i];
            vals[i] = keep + h;
            Tape<double> tp;
            const double fp = forward(tp).item();
            tp.clear();
            vals[i] = keep - h;
            Tape<double> tm;
            const double fm = forward(tm).item();
            tm.clear();
            vals[i] = keep;
            const double fd = (fp - fm) / (2.0 * h);
            const double g = analytic[pi][i];
            const double tol = std::max(1e-6, 1e-4 * std::max(std::abs(g), std::abs(fd)));
            INFO("param " << pi << " coord " << i << ": analytic=" << g << " fd=" << fd);
            REQUIRE(std::abs(g - fd) <= tol);
        }
    }
}

// Brute-force triple-loop product, double accumulation.
inline std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b,
                                         int m, int k, int n) {
    std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            for (int p = 0; p < k; ++p)
                c[static_cast<size_t>(i * n + j)] += a[static_cast<size_t>(i * k + p)] * b[static_cast<size_t>(p * n + j)];
    return c;
}

template <typename T>
void require_close(const std::vector<T>& got, const std::vector<double>& want, double tol) {
    REQUIRE(got.size() == want.size());
    for (size_t i = 0; i < got.size(); ++i) {
        INFO("index " << i);
        REQUIRE_THAT(static_cast<double>(got[i]), Catch::Matchers::WithinAbs(want[i], tol));
    }
}

template <typename T>
bool bitwise_equal(const std::vector<T>& a, const std::vector<T>& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

template <typename T>
bool all_finite(const std::vector<T>& v) {
    for (T x : v)
        if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
}

}  // namespace testutil
