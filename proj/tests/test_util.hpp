#pragma once

#include "padapt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace padapt::testutil {

inline void fill_randn(Tensor& t, float stddev, std::mt19937& rng) {
    std::normal_distribution<float> dist(0.0f, stddev);
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = dist(rng);
}

inline Tensor randn(Shape shape, float stddev, std::mt19937& rng, bool requires_grad = true) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    fill_randn(t, stddev, rng);
    return t;
}

struct GradCheck {
    double max_rel_err = 0.0;
    int64_t coords_checked = 0;
};

// Central finite differences (eps = 1e-3) against tape gradients. make_out
// rebuilds the computation from the params' current values on the given tape;
// its output is reduced to a scalar via a fixed random weighting. The analytic
// pass backpropagates through that same weighting; the finite-difference pass
// reduces in double precision to keep f32 rounding out of the difference.
// eval_ref, when provided, recomputes the same outputs in double precision
// from the params' current values; the finite differences then probe the exact
// real-valued function instead of its f32 rounding.
inline GradCheck finite_diff_check(std::vector<Tensor> params,
                                   const std::function<Tensor(Tape&)>& make_out,
                                   int64_t max_coords, uint64_t seed,
                                   const std::function<std::vector<double>()>& eval_ref = {}) {
    const float eps = 1e-3f;
    std::mt19937 rng(static_cast<uint32_t>(seed) ^ 0x5f3759dfu);

    for (Tensor& p : params) {
        p.set_requires_grad(true);
        p.ensure_grad();
        p.zero_grad();
    }

    // fixed reduction weights, shaped after a probe evaluation
    std::vector<float> weights;
    {
        Tape g;
        Tensor out = make_out(g);
        std::normal_distribution<float> dist(0.0f, 1.0f);
        weights.resize(static_cast<size_t>(out.numel()));
        for (float& w : weights) w = dist(rng);
    }

    {
        Tape g;
        Tensor out = make_out(g);
        Tensor w = Tensor::from(out.shape(), weights);
        g.backward(g.sum(g.mul(out, w)));
    }
    std::vector<std::vector<float>> analytic;
    for (Tensor& p : params) analytic.push_back(p.grad_vec());

    auto eval = [&]() -> double {
        double acc = 0.0;
        if (eval_ref) {
            std::vector<double> out = eval_ref();
            for (size_t i = 0; i < out.size(); ++i)
                acc += out[i] * static_cast<double>(weights[i]);
        } else {
            Tape g;
            Tensor out = make_out(g);
            for (int64_t i = 0; i < out.numel(); ++i)
                acc += static_cast<double>(out.data()[i]) *
                       static_cast<double>(weights[static_cast<size_t>(i)]);
        }
        return acc;
    };

    GradCheck result;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        std::vector<int64_t> coords(static_cast<size_t>(p.numel()));
        for (int64_t i = 0; i < p.numel(); ++i) coords[static_cast<size_t>(i)] = i;
        if (static_cast<int64_t>(coords.size()) > max_coords) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(static_cast<size_t>(max_coords));
        }
        for (int64_t c : coords) {
            const float orig = p.data()[c];
            p.data()[c] = orig + eps;
            const double x_hi = p.data()[c];
            const double up = eval();
            p.data()[c] = orig - eps;
            const double x_lo = p.data()[c];
            const double down = eval();
            p.data()[c] = orig;
            const double fd = (up - down) / (x_hi - x_lo);
            const double an = analytic[pi][static_cast<size_t>(c)];
            const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-6});
            result.max_rel_err = std::max(result.max_rel_err, std::fabs(fd - an) / denom);
            ++result.coords_checked;
        }
    }
    return result;
}

}  // namespace padapt::testutil
