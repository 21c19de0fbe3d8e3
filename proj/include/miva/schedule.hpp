#pragma once

#include <cmath>
#include <vector>

#include "common.hpp"

namespace miva {

// Variance-preserving noise schedule: alpha[t]^2 + sigma[t]^2 = 1 for all t,
// built from a linear beta ramp, plus the uniformly spaced DDIM sub-schedule.
struct NoiseSchedule {
    int T = 1000;
    std::vector<double> alpha;  // decreasing in t
    std::vector<double> sigma;  // increasing in t
    std::vector<int> ddim_steps;  // strictly increasing list of sampling steps

    static NoiseSchedule linear(int T = 1000, int ddim = 50, double beta1 = 1e-4,
                                double betaT = 2e-2) {
        NoiseSchedule s;
        s.T = T;
        s.alpha.resize(T);
        s.sigma.resize(T);
        double log_abar = 0.0;
        for (int t = 0; t < T; t++) {
            double beta = beta1 + (betaT - beta1) * (T > 1 ? double(t) / double(T - 1) : 0.0);
            log_abar += std::log1p(-beta);
            double abar = std::exp(log_abar);
            s.alpha[t] = std::sqrt(abar);
            s.sigma[t] = std::sqrt(1.0 - abar);
        }
        MIVA_CHECK(ddim >= 1 && ddim <= T, "ddim step count out of range");
        int stride = T / ddim;
        for (int k = ddim - 1; k >= 0; k--) s.ddim_steps.push_back(T - 1 - k * stride);
        return s;
    }

    // Timesteps visited by the sampler, noisiest first: tau(0) = T-1.
    int tau(int k) const {
        int n = static_cast<int>(ddim_steps.size());
        MIVA_CHECK(k >= 0 && k < n, "ddim iteration index out of range");
        return ddim_steps[n - 1 - k];
    }
    int num_ddim() const { return static_cast<int>(ddim_steps.size()); }

    double a(int t) const {
        MIVA_CHECK(t >= 0 && t < T, "step out of range: %d", t);
        return alpha[t];
    }
    double s(int t) const {
        MIVA_CHECK(t >= 0 && t < T, "step out of range: %d", t);
        return sigma[t];
    }
};

// x_t = alpha_t * x0 + sigma_t * eps
template <typename T>
Mat<T> forward_diffuse(const Mat<T>& x0, const NoiseSchedule& ns, int t, const Mat<T>& eps) {
    MIVA_CHECK(x0.rows() == eps.rows() && x0.cols() == eps.cols(),
               "forward_diffuse: eps shape mismatch");
    MIVA_CHECK(t >= 0 && t < ns.T, "forward_diffuse: step out of range");
    return (x0 * static_cast<T>(ns.a(t)) + eps * static_cast<T>(ns.s(t))).eval();
}

// Deterministic DDIM update (eta = 0): recover x0hat, re-noise to t_prev.
// t_prev = -1 denotes the terminal clean state (alpha = 1, sigma = 0).
template <typename T>
Mat<T> ddim_step(const Mat<T>& x_t, const NoiseSchedule& ns, int t, int t_prev,
                 const Mat<T>& eps_hat) {
    MIVA_CHECK(t > t_prev, "ddim_step: t must exceed t_prev");
    MIVA_CHECK(x_t.rows() == eps_hat.rows() && x_t.cols() == eps_hat.cols(),
               "ddim_step: eps_hat shape mismatch");
    double at = ns.a(t);
    if (at == 0.0) throw numeric_error("ddim_step: singular step, alpha_t = 0");
    double ap = 1.0, sp = 0.0;
    if (t_prev >= 0) {
        ap = ns.a(t_prev);
        sp = ns.s(t_prev);
    }
    Mat<T> x0hat = (x_t - eps_hat * static_cast<T>(ns.s(t))) / static_cast<T>(at);
    return (x0hat * static_cast<T>(ap) + eps_hat * static_cast<T>(sp)).eval();
}

// One-step clean-signal estimate x0hat = (x_t - sigma_t * eps_hat) / alpha_t.
template <typename T>
Mat<T> one_step_x0(const Mat<T>& x_t, const NoiseSchedule& ns, int t, const Mat<T>& eps_hat) {
    double at = ns.a(t);
    if (at == 0.0) throw numeric_error("one_step_x0: singular step, alpha_t = 0");
    return ((x_t - eps_hat * static_cast<T>(ns.s(t))) / static_cast<T>(at)).eval();
}

}  // namespace miva
