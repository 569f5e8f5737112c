#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <variant>
#include <vector>

#include "mohawk/mixers.hpp"
#include "mohawk/optim.hpp"
#include "mohawk/rng.hpp"
#include "mohawk/svd.hpp"

namespace mohawk::approx {

using mixers::CausalLowRankParams;
using mixers::DecayForm;
using mixers::RetNetParams;
using mixers::SsdParams;
using mixers::ToeplitzParams;

enum class Family { Toeplitz, LowRank, RetNet, SsdNoD, Ssd, SemiSep };

inline const char* family_name(Family f) {
    switch (f) {
        case Family::Toeplitz: return "toeplitz";
        case Family::LowRank: return "lowrank";
        case Family::RetNet: return "retnet";
        case Family::SsdNoD: return "ssd_no_d";
        case Family::Ssd: return "ssd";
        case Family::SemiSep: return "semisep";
    }
    return "?";
}

inline bool parse_family(const std::string& s, Family& out) {
    for (Family f : {Family::Toeplitz, Family::LowRank, Family::RetNet, Family::SsdNoD,
                     Family::Ssd, Family::SemiSep}) {
        if (s == family_name(f)) {
            out = f;
            return true;
        }
    }
    return false;
}

using MixerParams = std::variant<ToeplitzParams, CausalLowRankParams, RetNetParams, SsdParams>;

struct GdConfig {
    i64 steps = 10000;
    std::vector<double> lrs = {0.1, 0.01, 0.001};
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    u64 seed = 0;
    // projections initialize decays near 1, which needs the exp(-exp) form
    DecayForm decay_form = DecayForm::ExpNegExp;
};

struct ProjectionReport {
    Family family = Family::Toeplitz;
    i64 state_size = 0;  // 0 for Toeplitz
    double distance = 0.0;
    double best_lr = std::numeric_limits<double>::quiet_NaN();  // NaN for closed-form families
    std::vector<double> loss_trace;
};

inline double frobenius_dist(const Tensor& m, const Tensor& mt) {
    check(m.same_shape(mt), "frobenius_dist: shape mismatch");
    double s = 0.0;
    for (i64 i = 0; i < m.size(); ++i) {
        const double d = m[i] - mt[i];
        s += d * d;
    }
    return std::sqrt(s);
}

inline Tensor causal_mask_copy(const Tensor& m) {
    check(m.rank() == 2 && m.dim(0) == m.dim(1), "projection targets must be square");
    Tensor out = m;
    for (i64 i = 0; i < m.dim(0); ++i)
        for (i64 j = i + 1; j < m.dim(1); ++j) out.at(i, j) = 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// Toeplitz: per-band mean, the exact Frobenius-optimal causal Toeplitz matrix.
// ---------------------------------------------------------------------------
inline std::pair<ToeplitzParams, ProjectionReport> project_toeplitz(const Tensor& m_in) {
    Tensor m = causal_mask_copy(m_in);
    const i64 t = m.dim(0);
    ToeplitzParams p;
    p.bands = Tensor({t});
    for (i64 k = 0; k < t; ++k) {
        double s = 0.0;
        for (i64 i = k; i < t; ++i) s += m.at(i, i - k);
        p.bands[k] = s / static_cast<double>(t - k);
    }
    ProjectionReport rep;
    rep.family = Family::Toeplitz;
    rep.state_size = 0;
    rep.distance = frobenius_dist(m, mixers::materialize_toeplitz(p));
    return {std::move(p), std::move(rep)};
}

// ---------------------------------------------------------------------------
// Semiseparable truncation: ascending sweep over the below-left submatrices
// H_k = rows k.., columns ..k-1 of the working matrix, each SVD-truncated to
// rank n and written back. Diagonal entries are never touched.
// ---------------------------------------------------------------------------
inline std::pair<Tensor, ProjectionReport> project_semiseparable(const Tensor& m_in, i64 n) {
    Tensor m = causal_mask_copy(m_in);
    const i64 t = m.dim(0);
    check(n >= 1 && n < t, "project_semiseparable: need 1 <= n < T");
    Tensor work = m;
    for (i64 k = 1; k < t - 1; ++k) {
        const i64 rows = t - k, cols = k;
        if (std::min(rows, cols) <= n) continue;  // already at most rank n
        Tensor h({rows, cols});
        for (i64 r = 0; r < rows; ++r)
            for (i64 c = 0; c < cols; ++c) h.at(r, c) = work.at(k + r, c);
        SvdResult sv = svd(h);
        Tensor ht = svd_truncated_reconstruct(sv, n);
        for (i64 r = 0; r < rows; ++r)
            for (i64 c = 0; c < cols; ++c) work.at(k + r, c) = ht.at(r, c);
    }
    ProjectionReport rep;
    rep.family = Family::SemiSep;
    rep.state_size = n;
    rep.distance = frobenius_dist(m, work);
    return {std::move(work), std::move(rep)};
}

// ---------------------------------------------------------------------------
// Gradient-descent projections (lowrank / retnet / ssd_no_d / ssd)
// ---------------------------------------------------------------------------

namespace detail {

struct GdRun {
    MixerParams params;
    double final_loss = std::numeric_limits<double>::infinity();
    double lr = 0.0;
    std::vector<double> trace;
    bool ok = false;
};

inline MixerParams init_gd_params(Family family, i64 t, i64 n, DecayForm form, Rng rng) {
    const double hi = 16.0 / std::sqrt(static_cast<double>(t) * static_cast<double>(n));
    auto mat = [&](i64 r, i64 c) {
        Tensor x({r, c});
        for (i64 i = 0; i < x.size(); ++i) x[i] = rng.uniform(0.0, hi);
        return x;
    };
    switch (family) {
        case Family::LowRank: {
            CausalLowRankParams p;
            p.a = mat(t, n);
            p.b = mat(t, n);
            return p;
        }
        case Family::RetNet: {
            RetNetParams p;
            p.a = mat(t, n);
            p.b = mat(t, n);
            p.form = form;
            p.gamma_raw = rng.uniform(-8.0, -7.0);
            return p;
        }
        case Family::SsdNoD:
        case Family::Ssd: {
            SsdParams p;
            p.form = form;
            p.b = mat(t, n);
            p.c = mat(t, n);
            p.a_raw = Tensor({t});
            for (i64 i = 0; i < t; ++i) p.a_raw[i] = rng.uniform(-8.0, -7.0);
            if (family == Family::Ssd) p.d = Tensor({t});
            return p;
        }
        default: check(false, "init_gd_params: not a GD family");
    }
    return CausalLowRankParams{};
}

// One AdamW run at a fixed learning rate. The loss is the plain Frobenius
// distance (not squared); its gradient at distance zero is taken as zero.
class GdProblem {
public:
    GdProblem(const Tensor& target, MixerParams params)
        : m_(target), t_(target.dim(0)), params_(std::move(params)), mt_({t_, t_}),
          mask_({t_, t_}), diff_({t_, t_}) {
        if (auto* rp = std::get_if<RetNetParams>(&params_)) gamma_param_[0] = rp->gamma_raw;
    }

    double loss() {
        materialize();
        double sq = 0.0;
        for (i64 i = 0; i < t_ * t_; ++i) {
            const double d = mt_[i] - m_[i];
            sq += d * d;
        }
        return std::sqrt(sq);
    }

    // Returns the loss and fills params/grads for the optimizer.
    double loss_and_grads(std::vector<Tensor*>& params, std::vector<Tensor>& grads) {
        materialize();
        double sq = 0.0;
        for (i64 i = 0; i < t_ * t_; ++i) {
            diff_[i] = mt_[i] - m_[i];
            sq += diff_[i] * diff_[i];
        }
        const double dist = std::sqrt(sq);
        if (dist > 0.0) {
            for (i64 i = 0; i < t_ * t_; ++i) diff_[i] /= dist;
        } else {
            diff_.zero();
        }

        params.clear();
        grads.clear();
        if (auto* lp = std::get_if<CausalLowRankParams>(&params_)) {
            for (i64 i = 0; i < t_; ++i)
                for (i64 j = i + 1; j < t_; ++j) diff_.at(i, j) = 0.0;
            grads.push_back(matmul(diff_, lp->b));
            grads.push_back(matmul(diff_, lp->a, true, false));
            params = {&lp->a, &lp->b};
        } else if (auto* rp = std::get_if<RetNetParams>(&params_)) {
            Tensor gm({t_, t_});
            for (i64 i = 0; i < t_ * t_; ++i) gm[i] = diff_[i] * mask_[i];
            grads.push_back(matmul(gm, rp->b));
            grads.push_back(matmul(gm, rp->a, true, false));
            Tensor ab = matmul(rp->a, rp->b, false, true);
            const double gamma = rp->gamma();
            double dgamma = 0.0;
            for (i64 i = 1; i < t_; ++i) {
                double pw = 1.0;  // gamma^(i-j-1)
                for (i64 j = i - 1; j >= 0; --j) {
                    dgamma += diff_.at(i, j) * ab.at(i, j) * static_cast<double>(i - j) * pw;
                    pw *= gamma;
                }
            }
            grads.push_back(
                Tensor::scalar(dgamma * mixers::decay_dvalue(rp->form, rp->gamma_raw)));
            gamma_param_[0] = rp->gamma_raw;
            params = {&rp->a, &rp->b, &gamma_param_};
        } else {
            auto* sp = std::get_if<SsdParams>(&params_);
            mixers::SsdGrads g = mixers::ssd_materialize_backward(*sp, diff_, &mask_);
            grads.push_back(std::move(g.c));
            grads.push_back(std::move(g.b));
            grads.push_back(std::move(g.a_raw));
            params = {&sp->c, &sp->b, &sp->a_raw};
            if (sp->has_d()) {
                grads.push_back(std::move(g.d));
                params.push_back(&sp->d);
            }
        }
        return dist;
    }

    // RetNet keeps its decay in a plain double; copy the optimizer's update
    // back after each step.
    void sync_scalar_params() {
        if (auto* rp = std::get_if<RetNetParams>(&params_)) rp->gamma_raw = gamma_param_[0];
    }

    MixerParams take_params() { return std::move(params_); }

private:
    void materialize() {
        if (auto* lp = std::get_if<CausalLowRankParams>(&params_)) {
            matmul_into(mt_, lp->a, lp->b, false, true);
            for (i64 i = 0; i < t_; ++i)
                for (i64 j = i + 1; j < t_; ++j) mt_.at(i, j) = 0.0;
        } else if (auto* rp = std::get_if<RetNetParams>(&params_)) {
            matmul_into(mt_, rp->a, rp->b, false, true);
            mask_ = mixers::retnet_mask(rp->gamma(), t_);
            for (i64 i = 0; i < t_ * t_; ++i) mt_[i] *= mask_[i];
        } else {
            auto* sp = std::get_if<SsdParams>(&params_);
            mixers::materialize_ssd_into(*sp, mt_, mask_);
        }
    }

    const Tensor& m_;
    i64 t_;
    MixerParams params_;
    Tensor mt_, mask_, diff_;
    Tensor gamma_param_{std::vector<i64>{1}};
};

inline GdRun run_gd(const Tensor& m, const GdConfig& cfg, double lr, const MixerParams& init) {
    GdRun run;
    run.lr = lr;
    GdProblem prob(m, init);
    AdamWState state;
    AdamWConfig oc{.lr = lr, .beta1 = cfg.beta1, .beta2 = cfg.beta2, .weight_decay = 0.0,
                   .eps = cfg.eps};
    run.trace.reserve(static_cast<size_t>(cfg.steps) + 1);
    std::vector<Tensor*> params;
    std::vector<Tensor> grads;
    for (i64 step = 0; step < cfg.steps; ++step) {
        double loss = prob.loss_and_grads(params, grads);
        run.trace.push_back(loss);
        if (!std::isfinite(loss)) return run;  // run stays failed
        std::vector<const Tensor*> gp;
        gp.reserve(grads.size());
        for (auto& g : grads) gp.push_back(&g);
        adamw_step(params, gp, state, oc);
        prob.sync_scalar_params();
    }
    double final_loss = prob.loss();
    run.trace.push_back(final_loss);
    if (!std::isfinite(final_loss)) return run;
    run.final_loss = final_loss;
    run.params = prob.take_params();
    run.ok = true;
    return run;
}

}  // namespace detail

inline std::pair<MixerParams, ProjectionReport> project_gd(const Tensor& m_in, Family family,
                                                           i64 n, const GdConfig& cfg) {
    check(family == Family::LowRank || family == Family::RetNet || family == Family::SsdNoD ||
              family == Family::Ssd,
          "project_gd: family must be lowrank/retnet/ssd_no_d/ssd");
    check(n >= 1, "project_gd: state size must be >= 1");
    check(cfg.steps >= 1 && !cfg.lrs.empty(), "project_gd: bad GdConfig");
    Tensor m = causal_mask_copy(m_in);
    const i64 t = m.dim(0);
    check(family != Family::LowRank || n <= t, "project_gd: lowrank needs n <= T");

    Rng rng = Rng(cfg.seed)
                  .split("project_gd")
                  .split(static_cast<u64>(family))
                  .split(static_cast<u64>(n));
    MixerParams init = detail::init_gd_params(family, t, n, cfg.decay_form, rng);

    detail::GdRun best;
    for (double lr : cfg.lrs) {
        detail::GdRun run = detail::run_gd(m, cfg, lr, init);
        if (!run.ok) continue;
        if (!best.ok || run.final_loss < best.final_loss) best = std::move(run);
    }
    if (!best.ok) throw OptimizationFailureError("project_gd: all learning rates diverged");

    ProjectionReport rep;
    rep.family = family;
    rep.state_size = n;
    rep.distance = best.final_loss;
    rep.best_lr = best.lr;
    rep.loss_trace = std::move(best.trace);
    return {std::move(best.params), std::move(rep)};
}

// ---------------------------------------------------------------------------
// Benchmark over a set of target matrices
// ---------------------------------------------------------------------------

struct BenchRow {
    Family family;
    i64 state_size;  // 0 for Toeplitz
    double mean_distance;
    i64 num_samples;
    i64 seq_len;
};

// One row per (family, state size), mean distance across all targets.
// Projections of distinct targets are independent; results do not depend on
// the jobs count.
inline std::vector<BenchRow> approx_benchmark(const std::vector<Tensor>& targets,
                                              const std::vector<Family>& families,
                                              const std::vector<i64>& state_sizes,
                                              const GdConfig& cfg, int jobs = 1) {
    check(!targets.empty() && !families.empty(), "approx_benchmark: empty inputs");
    const i64 t = targets[0].dim(0);
    for (const Tensor& m : targets)
        check(m.rank() == 2 && m.dim(0) == t && m.dim(1) == t,
              "approx_benchmark: targets must share one square shape");

    struct Task {
        Family family;
        i64 state;
        i64 sample;
    };
    std::vector<Task> tasks;
    std::vector<std::pair<Family, i64>> cells;
    for (Family f : families) {
        if (f == Family::Toeplitz) {
            cells.push_back({f, 0});
            for (i64 s = 0; s < static_cast<i64>(targets.size()); ++s)
                tasks.push_back({f, 0, s});
            continue;
        }
        check(!state_sizes.empty(), "approx_benchmark: state sizes required");
        for (i64 n : state_sizes) {
            cells.push_back({f, n});
            for (i64 s = 0; s < static_cast<i64>(targets.size()); ++s)
                tasks.push_back({f, n, s});
        }
    }

    std::vector<double> dist(tasks.size());
    parallel_for(static_cast<i64>(tasks.size()), jobs, [&](i64 idx) {
        const Task& task = tasks[static_cast<size_t>(idx)];
        const Tensor& m = targets[static_cast<size_t>(task.sample)];
        switch (task.family) {
            case Family::Toeplitz:
                dist[static_cast<size_t>(idx)] = project_toeplitz(m).second.distance;
                break;
            case Family::SemiSep:
                dist[static_cast<size_t>(idx)] =
                    project_semiseparable(m, task.state).second.distance;
                break;
            default: {
                GdConfig sample_cfg = cfg;
                sample_cfg.seed = Rng(cfg.seed).split("bench_sample")
                                      .split(static_cast<u64>(task.sample)).key();
                dist[static_cast<size_t>(idx)] =
                    project_gd(m, task.family, task.state, sample_cfg).second.distance;
            }
        }
    });

    std::vector<BenchRow> rows;
    size_t cursor = 0;
    for (auto [f, n] : cells) {
        double mean = 0.0;
        for (size_t s = 0; s < targets.size(); ++s) mean += dist[cursor++];
        mean /= static_cast<double>(targets.size());
        rows.push_back({f, n, mean, static_cast<i64>(targets.size()), t});
    }
    return rows;
}

}  // namespace mohawk::approx
