#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "mohawk/tensor.hpp"

namespace mohawk::mixers {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------
// segsum: out[i][j] = sum of x[j+1..i] for i >= j (0 on the diagonal),
// -inf strictly above the diagonal. exp(segsum(log a)) is the multiplicative
// decay mask; the -inf sentinel never leaves this module un-exp'd.
// ---------------------------------------------------------------------------
inline Tensor segsum(const Tensor& x) {
    check(x.rank() == 1, "segsum: rank-1 tensor required");
    check_input(x.all_finite(), "segsum: non-finite input");
    const i64 t = x.dim(0);
    Tensor out({t, t});
    for (i64 i = 0; i < t; ++i) {
        for (i64 j = i + 1; j < t; ++j) out.at(i, j) = kNegInf;
        out.at(i, i) = 0.0;
        double acc = 0.0;
        for (i64 j = i - 1; j >= 0; --j) {
            acc += x[j + 1];
            out.at(i, j) = acc;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Decay parameterizations. Raw values are unconstrained reals; both forms map
// into (0,1). SigmoidLogit is the library default; ExpNegExp makes small raw
// values mean weak decay, which is what the gradient-descent projections
// initialize with.
// ---------------------------------------------------------------------------
enum class DecayForm { SigmoidLogit, ExpNegExp };

inline double decay_value(DecayForm form, double raw) {
    double a;
    if (form == DecayForm::SigmoidLogit) {
        a = raw >= 0.0 ? 1.0 / (1.0 + std::exp(-raw)) : std::exp(raw) / (1.0 + std::exp(raw));
    } else {
        a = std::exp(-std::exp(raw));
    }
    return a < 1e-300 ? 1e-300 : a;  // keep log(a) finite under extreme raws
}

// d a / d raw
inline double decay_dvalue(DecayForm form, double raw) {
    double a = decay_value(form, raw);
    if (form == DecayForm::SigmoidLogit) return a * (1.0 - a);
    return -std::exp(raw) * a;
}

// ---------------------------------------------------------------------------
// Mixer family parameters. Each family materializes one head's causal T x T
// sequence-transformation matrix.
// ---------------------------------------------------------------------------

struct SsdParams {
    Tensor a_raw;  // (T) decay parameters, see DecayForm
    Tensor b;      // (T, N)
    Tensor c;      // (T, N)
    Tensor d;      // (T) optional feedthrough; empty when absent
    DecayForm form = DecayForm::SigmoidLogit;

    i64 seq_len() const { return a_raw.dim(0); }
    i64 state_size() const { return b.dim(1); }
    bool has_d() const { return !d.empty(); }

    Tensor decays() const {
        Tensor a(a_raw.shape);
        for (i64 t = 0; t < a_raw.size(); ++t) a[t] = decay_value(form, a_raw[t]);
        return a;
    }

    void validate() const {
        check(a_raw.rank() == 1 && b.rank() == 2 && c.rank() == 2, "SsdParams: bad ranks");
        const i64 t = seq_len();
        check(b.dim(0) == t && c.dim(0) == t && b.dim(1) == c.dim(1),
              "SsdParams: inconsistent shapes");
        check(b.dim(1) >= 1, "SsdParams: state size must be >= 1");
        if (has_d()) check(d.rank() == 1 && d.dim(0) == t, "SsdParams: bad D shape");
        check_input(a_raw.all_finite() && b.all_finite() && c.all_finite() &&
                        (!has_d() || d.all_finite()),
                    "SsdParams: non-finite values");
    }
};

struct CausalLowRankParams {
    Tensor a;  // (T, N)
    Tensor b;  // (T, N)

    void validate() const {
        check(a.rank() == 2 && b.rank() == 2 && a.dim(0) == b.dim(0) && a.dim(1) == b.dim(1),
              "CausalLowRankParams: inconsistent shapes");
        check(a.dim(1) <= a.dim(0), "CausalLowRankParams: state size must be <= T");
        check_input(a.all_finite() && b.all_finite(), "CausalLowRankParams: non-finite values");
    }
};

struct RetNetParams {
    Tensor a;  // (T, N)
    Tensor b;  // (T, N)
    double gamma_raw = 0.0;
    DecayForm form = DecayForm::SigmoidLogit;

    double gamma() const { return decay_value(form, gamma_raw); }

    void validate() const {
        check(a.rank() == 2 && b.rank() == 2 && a.dim(0) == b.dim(0) && a.dim(1) == b.dim(1),
              "RetNetParams: inconsistent shapes");
        check_input(a.all_finite() && b.all_finite() && std::isfinite(gamma_raw),
                    "RetNetParams: non-finite values");
    }
};

struct ToeplitzParams {
    Tensor bands;  // (T); bands[k] is the value on the k-th subdiagonal

    void validate() const {
        check(bands.rank() == 1, "ToeplitzParams: rank-1 bands required");
        check_input(bands.all_finite(), "ToeplitzParams: non-finite values");
    }
};

// Time-varying state-space system; step k has matrices A_k (N x N),
// B_k (m x N), C_k (p x N), D_k (p x m).
struct SemiSepSystem {
    std::vector<Tensor> a, b, c, d;

    i64 steps() const { return static_cast<i64>(a.size()); }
    i64 state_size() const { return a.empty() ? 0 : a[0].dim(0); }
    i64 in_dim() const { return b.empty() ? 0 : b[0].dim(0); }
    i64 out_dim() const { return c.empty() ? 0 : c[0].dim(0); }

    void validate() const {
        const size_t t = a.size();
        check(t >= 1 && b.size() == t && c.size() == t && d.size() == t,
              "SemiSepSystem: inconsistent step counts");
        const i64 n = state_size(), m = in_dim(), p = out_dim();
        for (size_t k = 0; k < t; ++k) {
            check(a[k].rank() == 2 && a[k].dim(0) == n && a[k].dim(1) == n,
                  "SemiSepSystem: bad A shape");
            check(b[k].rank() == 2 && b[k].dim(0) == m && b[k].dim(1) == n,
                  "SemiSepSystem: bad B shape");
            check(c[k].rank() == 2 && c[k].dim(0) == p && c[k].dim(1) == n,
                  "SemiSepSystem: bad C shape");
            check(d[k].rank() == 2 && d[k].dim(0) == p && d[k].dim(1) == m,
                  "SemiSepSystem: bad D shape");
        }
    }
};

// ---------------------------------------------------------------------------
// Materializations
// ---------------------------------------------------------------------------

// mask[t][s] = prod a[s+1..t] for t >= s, 0 above; same accumulation order as
// exp(segsum(log a)).
inline void build_decay_mask_into(const Tensor& a, Tensor& mask) {
    const i64 t = a.dim(0);
    check(mask.rank() == 2 && mask.dim(0) == t && mask.dim(1) == t,
          "build_decay_mask: bad workspace shape");
    std::vector<double> loga(static_cast<size_t>(t));
    for (i64 k = 0; k < t; ++k) {
        check(a[k] > 0.0, "ssd: decay values must be positive");
        loga[static_cast<size_t>(k)] = std::log(a[k]);
    }
    for (i64 i = 0; i < t; ++i) {
        double* row = mask.ptr() + i * t;
        for (i64 j = i + 1; j < t; ++j) row[j] = 0.0;
        row[i] = 1.0;
        double acc = 0.0;
        for (i64 j = i - 1; j >= 0; --j) {
            acc += loga[static_cast<size_t>(j + 1)];
            row[j] = std::exp(acc);
        }
    }
}

inline void materialize_ssd_into(const SsdParams& p, Tensor& out, Tensor& mask_ws) {
    p.validate();
    const i64 t = p.seq_len();
    Tensor a = p.decays();
    build_decay_mask_into(a, mask_ws);
    matmul_into(out, p.c, p.b, false, true);  // out = C B^T
    double* o = out.ptr();
    const double* m = mask_ws.ptr();
    for (i64 i = 0; i < t * t; ++i) o[i] *= m[i];
    if (p.has_d())
        for (i64 i = 0; i < t; ++i) o[i * t + i] += p.d[i];
}

inline Tensor materialize_ssd(const SsdParams& p) {
    const i64 t = p.seq_len();
    Tensor out({t, t}), ws({t, t});
    materialize_ssd_into(p, out, ws);
    return out;
}

// Sequential recurrence h_t = a_t h_{t-1} + B_t x_t^T, y_t = C_t h_t
// (+ D_t x_t). O(T N P) time, O(N P) state. `states`, when given, receives
// the post-update h_t for every t (shape T x N x P) for use by the backward
// pass.
inline Tensor scan_ssd(const SsdParams& p, const Tensor& x, Tensor* states = nullptr) {
    p.validate();
    check(x.rank() == 2 && x.dim(0) == p.seq_len(), "scan_ssd: bad input shape");
    check_input(x.all_finite(), "scan_ssd: non-finite input");
    const i64 t = p.seq_len(), n = p.state_size(), pd = x.dim(1);
    Tensor a = p.decays();
    Tensor y({t, pd});
    Tensor h({n, pd});
    if (states) *states = Tensor({t, n, pd});
    for (i64 step = 0; step < t; ++step) {
        const double at = a[step];
        const double* xs = x.ptr() + step * pd;
        for (i64 i = 0; i < n; ++i) {
            const double bi = p.b.at(step, i);
            double* hrow = h.ptr() + i * pd;
            for (i64 j = 0; j < pd; ++j) hrow[j] = at * hrow[j] + bi * xs[j];
        }
        if (states) std::copy(h.ptr(), h.ptr() + n * pd, states->ptr() + step * n * pd);
        double* ys = y.ptr() + step * pd;
        for (i64 j = 0; j < pd; ++j) ys[j] = 0.0;
        for (i64 i = 0; i < n; ++i) {
            const double ci = p.c.at(step, i);
            const double* hrow = h.ptr() + i * pd;
            for (i64 j = 0; j < pd; ++j) ys[j] += ci * hrow[j];
        }
        if (p.has_d()) {
            const double dt = p.d[step];
            for (i64 j = 0; j < pd; ++j) ys[j] += dt * xs[j];
        }
    }
    return y;
}

inline Tensor materialize_lowrank(const CausalLowRankParams& p) {
    p.validate();
    Tensor out = matmul(p.a, p.b, false, true);
    const i64 t = out.dim(0);
    for (i64 i = 0; i < t; ++i)
        for (i64 j = i + 1; j < t; ++j) out.at(i, j) = 0.0;
    return out;
}

inline Tensor retnet_mask(double gamma, i64 t) {
    Tensor mask({t, t});
    for (i64 i = 0; i < t; ++i) {
        double v = 1.0;
        mask.at(i, i) = 1.0;
        for (i64 j = i - 1; j >= 0; --j) {
            v *= gamma;
            mask.at(i, j) = v;
        }
    }
    return mask;
}

inline Tensor materialize_retnet(const RetNetParams& p) {
    p.validate();
    Tensor out = matmul(p.a, p.b, false, true);
    const i64 t = out.dim(0);
    Tensor mask = retnet_mask(p.gamma(), t);
    for (i64 i = 0; i < t * t; ++i) out[i] *= mask[i];
    return out;
}

inline Tensor materialize_toeplitz(const ToeplitzParams& p) {
    p.validate();
    const i64 t = p.bands.dim(0);
    Tensor out({t, t});
    for (i64 i = 0; i < t; ++i)
        for (i64 j = 0; j <= i; ++j) out.at(i, j) = p.bands[i - j];
    return out;
}

// Dense transfer matrix of a time-varying system: diagonal blocks D_k,
// sub-diagonal blocks C_i A_{i-1} ... A_{j+1} B_j^T (1-based steps).
inline Tensor materialize_semisep(const SemiSepSystem& sys) {
    sys.validate();
    const i64 t = sys.steps(), n = sys.state_size(), m = sys.in_dim(), p = sys.out_dim();
    Tensor out({t * p, t * m});
    Tensor z({n, m}), zn({n, m}), blk({p, m});
    for (i64 j = 0; j < t; ++j) {
        // diagonal block
        for (i64 r = 0; r < p; ++r)
            for (i64 c = 0; c < m; ++c) out.at(j * p + r, j * m + c) = sys.d[j].at(r, c);
        // walk the column of blocks below (j, j)
        z = transpose(sys.b[static_cast<size_t>(j)]);  // N x m
        for (i64 i = j + 1; i < t; ++i) {
            matmul_into(blk, sys.c[static_cast<size_t>(i)], z);  // p x m
            for (i64 r = 0; r < p; ++r)
                for (i64 c = 0; c < m; ++c) out.at(i * p + r, j * m + c) = blk.at(r, c);
            if (i + 1 < t) {
                matmul_into(zn, sys.a[static_cast<size_t>(i)], z);
                std::swap(z, zn);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Causal softmax attention matrix (one head)
// ---------------------------------------------------------------------------

struct AttentionMixerInputs {
    Tensor q;  // (T, d)
    Tensor k;  // (T, d)
    double scale = 1.0;
};

inline Tensor causal_softmax_attention(const AttentionMixerInputs& in) {
    check(in.q.rank() == 2 && in.k.rank() == 2 && in.q.same_shape(in.k),
          "causal_softmax_attention: Q/K shape mismatch");
    check_input(in.q.all_finite() && in.k.all_finite(),
                "causal_softmax_attention: non-finite input");
    const i64 t = in.q.dim(0), d = in.q.dim(1);
    Tensor out({t, t});
    std::vector<double> row(static_cast<size_t>(t));
    for (i64 i = 0; i < t; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (i64 j = 0; j <= i; ++j) {
            double s = 0.0;
            for (i64 c = 0; c < d; ++c) s += in.q.at(i, c) * in.k.at(j, c);
            s *= in.scale;
            row[static_cast<size_t>(j)] = s;
            mx = std::max(mx, s);
        }
        double z = 0.0;
        for (i64 j = 0; j <= i; ++j) {
            row[static_cast<size_t>(j)] = std::exp(row[static_cast<size_t>(j)] - mx);
            z += row[static_cast<size_t>(j)];
        }
        for (i64 j = 0; j <= i; ++j) out.at(i, j) = row[static_cast<size_t>(j)] / z;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Backward passes (adjoints wrt the raw parameters)
// ---------------------------------------------------------------------------

struct SsdGrads {
    Tensor a_raw;  // (T)
    Tensor b;      // (T, N)
    Tensor c;      // (T, N)
    Tensor d;      // (T) empty when the params have no D
};

// Adjoint of materialize_ssd. `dm` is the gradient wrt the materialized
// matrix. Needs the decay mask; pass the one produced by
// materialize_ssd_into to avoid recomputation, or leave null.
inline SsdGrads ssd_materialize_backward(const SsdParams& p, const Tensor& dm,
                                         const Tensor* mask_in = nullptr) {
    p.validate();
    const i64 t = p.seq_len();
    check(dm.rank() == 2 && dm.dim(0) == t && dm.dim(1) == t,
          "ssd_materialize_backward: bad dm shape");
    Tensor a = p.decays();
    Tensor mask_local;
    const Tensor* mask = mask_in;
    if (!mask) {
        mask_local = Tensor({t, t});
        build_decay_mask_into(a, mask_local);
        mask = &mask_local;
    }

    Tensor cb = matmul(p.c, p.b, false, true);
    Tensor gm({t, t});  // dm o mask
    for (i64 i = 0; i < t * t; ++i) gm[i] = dm[i] * (*mask)[i];

    SsdGrads g;
    g.b = matmul(gm, p.c, true, false);  // (T,N): dB = (dm o mask)^T C
    g.c = matmul(gm, p.b, false, false);  // dC = (dm o mask) B

    // da_k = (1/a_k) * sum_{t>=k, s<k} (dm o mask o CB^T)[t][s]
    // computed with column prefix sums then row suffix sums.
    g.a_raw = Tensor({t});
    if (t > 1) {
        std::vector<double> split_sum(static_cast<size_t>(t), 0.0);
        std::vector<double> colpref(static_cast<size_t>(t), 0.0);
        for (i64 r = t - 1; r >= 1; --r) {
            const double* gmr = gm.ptr() + r * t;
            const double* cbr = cb.ptr() + r * t;
            double acc = 0.0;
            for (i64 k = 1; k <= r; ++k) {
                acc += gmr[k - 1] * cbr[k - 1];
                colpref[static_cast<size_t>(k)] = acc;
            }
            for (i64 k = 1; k <= r; ++k)
                split_sum[static_cast<size_t>(k)] += colpref[static_cast<size_t>(k)];
        }
        for (i64 k = 1; k < t; ++k) {
            double da = a[k] > 0.0 ? split_sum[static_cast<size_t>(k)] / a[k] : 0.0;
            g.a_raw[k] = da * decay_dvalue(p.form, p.a_raw[k]);
        }
    }

    if (p.has_d()) {
        g.d = Tensor({t});
        for (i64 i = 0; i < t; ++i) g.d[i] = dm.at(i, i);
    }
    return g;
}

// Adjoint of scan_ssd. `states` must be the tensor produced by the forward
// scan. Also returns dX through the output parameter.
inline SsdGrads ssd_scan_backward(const SsdParams& p, const Tensor& x, const Tensor& states,
                                  const Tensor& dy, Tensor& dx) {
    p.validate();
    const i64 t = p.seq_len(), n = p.state_size(), pd = x.dim(1);
    check(dy.rank() == 2 && dy.dim(0) == t && dy.dim(1) == pd, "ssd_scan_backward: bad dy shape");
    check(states.rank() == 3 && states.dim(0) == t && states.dim(1) == n && states.dim(2) == pd,
          "ssd_scan_backward: bad states shape");
    Tensor a = p.decays();

    SsdGrads g;
    g.a_raw = Tensor({t});
    g.b = Tensor({t, n});
    g.c = Tensor({t, n});
    if (p.has_d()) g.d = Tensor({t});
    dx = Tensor({t, pd});

    Tensor lambda({n, pd});  // adjoint of h_t
    for (i64 step = t - 1; step >= 0; --step) {
        const double* dys = dy.ptr() + step * pd;
        const double* hs = states.ptr() + step * n * pd;
        const double* xs = x.ptr() + step * pd;
        double* dxs = dx.ptr() + step * pd;

        // lambda_t = a_{t+1} lambda_{t+1} + C_t dy_t^T   (outer product)
        if (step + 1 < t) {
            const double anext = a[step + 1];
            for (i64 i = 0; i < n * pd; ++i) lambda[i] *= anext;
        }
        for (i64 i = 0; i < n; ++i) {
            const double ci = p.c.at(step, i);
            double* lrow = lambda.ptr() + i * pd;
            for (i64 j = 0; j < pd; ++j) lrow[j] += ci * dys[j];
        }

        // dC_t = h_t dy_t ; dB_t = lambda_t x_t ; dx_t = B_t^T lambda_t
        for (i64 j = 0; j < pd; ++j) dxs[j] = 0.0;
        for (i64 i = 0; i < n; ++i) {
            const double* hrow = hs + i * pd;
            const double* lrow = lambda.ptr() + i * pd;
            const double bi = p.b.at(step, i);
            double dc = 0.0, db = 0.0;
            for (i64 j = 0; j < pd; ++j) {
                dc += hrow[j] * dys[j];
                db += lrow[j] * xs[j];
                dxs[j] += bi * lrow[j];
            }
            g.c.at(step, i) = dc;
            g.b.at(step, i) = db;
        }

        // da_t = <lambda_t, h_{t-1}>
        if (step >= 1) {
            const double* hprev = states.ptr() + (step - 1) * n * pd;
            double da = 0.0;
            for (i64 i = 0; i < n * pd; ++i) da += lambda[i] * hprev[i];
            g.a_raw[step] = da * decay_dvalue(p.form, p.a_raw[step]);
        }

        if (p.has_d()) {
            const double dt = p.d[step];
            double dd = 0.0;
            for (i64 j = 0; j < pd; ++j) {
                dd += dys[j] * xs[j];
                dxs[j] += dt * dys[j];
            }
            g.d[step] = dd;
        }
    }
    return g;
}

}  // namespace mohawk::mixers
