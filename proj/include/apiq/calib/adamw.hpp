#pragma once

#include <cmath>
#include <vector>

#include "apiq/linalg/tensor.hpp"

namespace apiq::calib {

struct AdamWConfig {
    double lr = 1e-3;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Moments for one parameter tensor, kept in double.
struct AdamWState {
    std::vector<double> m, v;
    std::size_t step = 0;
};

// Decoupled weight decay: p <- p * (1 - lr*wd) - lr * mhat / (sqrt(vhat) + eps).
template <typename T>
void adamw_step(Tensor<T>& param, const Tensor<T>& grad, AdamWState& st, const AdamWConfig& cfg)
{
    require_same_shape(param.shape(), grad.shape(), "adamw_step");
    const std::size_t n = param.numel();
    if (st.m.empty()) {
        st.m.assign(n, 0.0);
        st.v.assign(n, 0.0);
    }
    if (st.m.size() != n) throw DimensionError("adamw_step: optimizer state does not match parameter");
    ++st.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    const double decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (std::size_t i = 0; i < n; ++i) {
        const double g = grad[i];
        st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
        st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g * g;
        const double mh = st.m[i] / bc1, vh = st.v[i] / bc2;
        const double p = static_cast<double>(param[i]) * decay - cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
        param[i] = static_cast<T>(p);
    }
}

} // namespace apiq::calib
