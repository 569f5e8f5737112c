#pragma once

#include <cmath>
#include <vector>

#include "mohawk/tensor.hpp"

namespace mohawk {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.0;
    double eps = 1e-8;
};

// First/second moment estimates per parameter. Moment slots are allocated on
// first use and must keep matching their parameter's shape afterwards.
struct AdamWState {
    i64 step = 0;
    std::vector<Tensor> m;
    std::vector<Tensor> v;
};

// One decoupled-weight-decay Adam update over a parameter group. Parameters
// whose gradient slot is an empty tensor are frozen: neither decayed nor
// moved, and their moments stay untouched.
inline void adamw_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
                       AdamWState& state, const AdamWConfig& cfg) {
    check(params.size() == grads.size(), "adamw_step: params/grads size mismatch");
    check(cfg.lr > 0.0, "adamw_step: lr must be positive");
    check(cfg.eps > 0.0, "adamw_step: eps must be positive");
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
    }
    check(state.m.size() == params.size(), "adamw_step: state size mismatch");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (size_t p = 0; p < params.size(); ++p) {
        const Tensor& g = *grads[p];
        if (g.empty()) continue;
        Tensor& w = *params[p];
        check(g.same_shape(w), "adamw_step: grad/param shape mismatch");
        Tensor& m = state.m[p];
        Tensor& v = state.v[p];
        if (m.empty()) {
            m = Tensor(w.shape);
            v = Tensor(w.shape);
        }
        check(m.same_shape(w) && v.same_shape(w), "adamw_step: moment shape mismatch");
        double* wd = w.ptr();
        double* md = m.ptr();
        double* vd = v.ptr();
        const double* gd = g.ptr();
        const i64 n = w.size();
        for (i64 i = 0; i < n; ++i) {
            wd[i] -= cfg.lr * cfg.weight_decay * wd[i];
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
            const double mhat = md[i] / bc1;
            const double vhat = vd[i] / bc2;
            wd[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

inline void adamw_step(Tensor& param, const Tensor& grad, AdamWState& state,
                       const AdamWConfig& cfg) {
    adamw_step({&param}, {&grad}, state, cfg);
}

// Warmup-stable-decay schedule: linear ramp up over the warmup window,
// flat at base_lr, linear ramp down over the final decay window.
struct WsdSchedule {
    i64 total_steps = 0;
    double warmup_frac = 0.10;
    double decay_frac = 0.10;
    double base_lr = 1.0;

    double lr(i64 step) const {
        check(warmup_frac >= 0.0 && decay_frac >= 0.0 && warmup_frac + decay_frac <= 1.0,
              "WsdSchedule: warmup_frac + decay_frac must be <= 1");
        check(step >= 0 && step <= total_steps, "WsdSchedule: step out of range");
        const double w = warmup_frac * static_cast<double>(total_steps);
        const double d = decay_frac * static_cast<double>(total_steps);
        double up = w > 0.0 ? static_cast<double>(step) / w : 1.0;
        double down = d > 0.0 ? static_cast<double>(total_steps - step) / d : 1.0;
        return base_lr * std::min(std::min(up, down), 1.0);
    }
};

inline double wsd_lr(const WsdSchedule& schedule, i64 step) { return schedule.lr(step); }

// Scales the whole gradient group so its global L2 norm is at most max_norm.
inline double clip_grad_norm(const std::vector<Tensor*>& grads, double max_norm) {
    check(max_norm > 0.0, "clip_grad_norm: max_norm must be positive");
    double sq = 0.0;
    for (const Tensor* g : grads)
        if (!g->empty()) sq += sum_squares(*g);
    double norm = std::sqrt(sq);
    if (norm > max_norm) {
        double s = max_norm / norm;
        for (Tensor* g : grads)
            if (!g->empty()) scale(*g, s);
    }
    return norm;
}

inline double clip_grad_norm(Tensor& grad, double max_norm) {
    return clip_grad_norm(std::vector<Tensor*>{&grad}, max_norm);
}

}  // namespace mohawk
