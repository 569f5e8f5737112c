#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mohawk/checkpoint.hpp"
#include "mohawk/model.hpp"
#include "mohawk/train.hpp"

namespace mohawk::distill {

using model::Grads;
using model::LayerKind;
using model::Model;
using model::ModelConfig;
using model::SeqCache;

// ---------------------------------------------------------------------------
// Freezing
// ---------------------------------------------------------------------------

enum class Component { Embedding, LmHead, Mlp, LayerNorm, AttentionLayers };

inline const char* component_name(Component c) {
    switch (c) {
        case Component::Embedding: return "embedding";
        case Component::LmHead: return "lm_head";
        case Component::Mlp: return "mlp";
        case Component::LayerNorm: return "layernorm";
        case Component::AttentionLayers: return "attention_layers";
    }
    return "?";
}

inline bool parse_component(const std::string& s, Component& out) {
    for (Component c : {Component::Embedding, Component::LmHead, Component::Mlp,
                        Component::LayerNorm, Component::AttentionLayers}) {
        if (s == component_name(c)) {
            out = c;
            return true;
        }
    }
    return false;
}

inline std::optional<Component> component_of(const std::string& param_name) {
    if (param_name.rfind("embedding.", 0) == 0) return Component::Embedding;
    if (param_name.rfind("lm_head.", 0) == 0) return Component::LmHead;
    if (param_name.find(".mlp.") != std::string::npos) return Component::Mlp;
    if (param_name.find(".ln.") != std::string::npos || param_name.rfind("final_ln.", 0) == 0)
        return Component::LayerNorm;
    if (param_name.find(".attn.") != std::string::npos) return Component::AttentionLayers;
    return std::nullopt;  // mixer parameters are never freezable
}

inline std::vector<char> trainable_mask(const Model& m, const std::set<Component>& freeze) {
    std::vector<char> mask(m.param_count(), 1);
    for (size_t i = 0; i < m.param_count(); ++i) {
        auto c = component_of(m.name(i));
        if (c && freeze.count(*c)) mask[i] = 0;
    }
    return mask;
}

// ---------------------------------------------------------------------------
// Config and metrics
// ---------------------------------------------------------------------------

struct DistillConfig {
    i64 stage1_tokens = 100000;
    i64 stage2_tokens = 200000;
    i64 stage3_tokens = 2000000;
    i64 batch_sequences = 16;
    i64 seq_len = 256;
    double stage1_lr = 5e-4;
    double stage2_lr = 2e-3;
    double stage3_lr = 5e-4;
    double stage3_lr_after_stage12 = 2e-4;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double clip_norm = 1.0;
    double warmup_frac = 0.10;
    double decay_frac = 0.10;
    std::set<Component> freeze;
    std::vector<LayerKind> layer_kinds;  // empty = all ssd
    u64 seed = 0;
    i64 eval_interval_steps = 50;
    i64 checkpoint_interval_steps = 100;
    double heldout_frac = 0.05;
    i64 eval_sequences = 8;
    int jobs = 1;
    i64 max_rollbacks = 3;

    i64 tokens_per_step() const { return batch_sequences * seq_len; }
    i64 steps_for(i64 budget) const { return budget / tokens_per_step(); }
};

struct StageMetrics {
    double stage1_dist = 0.0;
    double stage2_dist = 0.0;
    double kd_loss = 0.0;
    double heldout_ppl = 0.0;
};

struct MetricRow {
    std::string stage;
    i64 tokens;
    StageMetrics metrics;
};

// Per-layer mixer-matrix and block-output distances plus KD loss and student
// perplexity, all on fixed held-out windows. No training state involved, so
// the numbers are identical no matter which driver asks.
struct MetricDetail {
    std::vector<double> stage1_per_layer;
    std::vector<double> stage2_per_layer;
};

inline StageMetrics measure_metrics(const Model& teacher, const Model& student,
                                    const model::SplitCorpus& corpus, const DistillConfig& cfg,
                                    MetricDetail* detail = nullptr) {
    const i64 have = corpus.heldout_size() / cfg.seq_len;
    const i64 count = std::min(cfg.eval_sequences, have);
    check(count >= 1, "measure_metrics: not enough held-out tokens");
    const i64 layers = student.cfg.n_layers;
    std::vector<double> s1(static_cast<size_t>(layers), 0.0);
    std::vector<double> s2(static_cast<size_t>(layers), 0.0);
    i64 ssd_layers = 0;
    for (i64 l = 0; l < layers; ++l)
        if (student.cfg.layer_kinds[static_cast<size_t>(l)] == LayerKind::Ssd) ++ssd_layers;
    double kd = 0.0, ce = 0.0;
    for (i64 s = 0; s < count; ++s) {
        std::vector<i64> seq =
            model::slice_tokens(*corpus.tokens, corpus.train_end + s * cfg.seq_len, cfg.seq_len);
        model::ForwardTrace ttrace, strace;
        Tensor tlogits = model_forward(teacher, seq, {.want_trace = true, .want_matrices = true},
                                       nullptr, &ttrace);
        Tensor slogits = model_forward(student, seq, {.want_trace = true, .want_matrices = true},
                                       nullptr, &strace);
        for (i64 l = 0; l < layers; ++l) {
            if (student.cfg.layer_kinds[static_cast<size_t>(l)] != LayerKind::Ssd) continue;
            const auto& tl = ttrace.layers[static_cast<size_t>(l)];
            const auto& sl = strace.layers[static_cast<size_t>(l)];
            double mix = 0.0;
            for (size_t h = 0; h < tl.head_matrices.size(); ++h) {
                Tensor diff = tl.head_matrices[h];
                axpy(-1.0, sl.head_matrices[h], diff);
                mix += frobenius_norm(diff);
            }
            s1[static_cast<size_t>(l)] += mix / static_cast<double>(count);
            // teacher branch output on the teacher's own block input vs the
            // student branch on that same input: the student runs its layer on
            // u_l from the teacher trace
            Tensor u = tl.block_input;
            model::detail::LnCache ln;
            Tensor z;
            const model::BlockIdx& sb = student.idx.blocks[static_cast<size_t>(l)];
            model::detail::layernorm_forward(u, student.p(sb.ln_scale), student.p(sb.ln_bias), z,
                                             ln);
            model::detail::MixerCache mc;
            Tensor sout = model::detail::mixer_branch_forward(student, sb, z, mc);
            Tensor bdiff = tl.branch_output;
            axpy(-1.0, sout, bdiff);
            s2[static_cast<size_t>(l)] += frobenius_norm(bdiff) / static_cast<double>(count);
        }
        Tensor tprobs;
        model::softmax_rows(tlogits, tprobs);
        kd += model::kd_loss(slogits, tprobs, nullptr) / static_cast<double>(count);
        ce += model::ce_loss(slogits, seq, nullptr) / static_cast<double>(count);
    }
    StageMetrics out;
    if (ssd_layers > 0) {
        for (i64 l = 0; l < layers; ++l) {
            out.stage1_dist += s1[static_cast<size_t>(l)] / static_cast<double>(ssd_layers);
            out.stage2_dist += s2[static_cast<size_t>(l)] / static_cast<double>(ssd_layers);
        }
    }
    out.kd_loss = kd;
    out.heldout_ppl = std::exp(ce);
    if (detail) {
        detail->stage1_per_layer = std::move(s1);
        detail->stage2_per_layer = std::move(s2);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Stages 1 and 2: independent per-layer trainings on teacher inputs
// ---------------------------------------------------------------------------

namespace detail {

struct LayerGroup {
    std::vector<size_t> params;  // indices into Model::params
};

inline LayerGroup stage1_group(const Model& m, const model::BlockIdx& b) {
    return {{b.mixer.wc, b.mixer.wb, b.mixer.wx, b.mixer.wa, b.mixer.ba, b.mixer.conv}};
}
inline LayerGroup stage2_group(const Model& m, const model::BlockIdx& b) {
    return {{b.mixer.wc, b.mixer.wb, b.mixer.wx, b.mixer.wa, b.mixer.ba, b.mixer.conv,
             b.mixer.gate, b.mixer.wo}};
}

// Σ_heads ||A_h - M_h||_F on one teacher layer trace, plus gradients into the
// projection weights. dscale multiplies the upstream gradient (batch mean).
inline double stage1_layer_loss(const Model& student, const model::BlockIdx& b, const Tensor& u,
                                const std::vector<Tensor>& teacher_mats, double dscale,
                                Grads* grads) {
    const i64 t = u.dim(0), h = student.cfg.n_heads, n = student.cfg.state_size();
    model::detail::LnCache ln;
    Tensor z;
    model::detail::layernorm_forward(u, student.p(b.ln_scale), student.p(b.ln_bias), z, ln);
    model::detail::MixerCache mc;
    model::detail::mixer_projections(student, b, z, mc);
    double loss = 0.0;
    Tensor dcp, dbp, dalogits;
    if (grads) {
        dcp = Tensor({t, h * n});
        dbp = Tensor({t, h * n});
        dalogits = Tensor({t, h});
    }
    Tensor mat({t, t}), mask({t, t});
    for (i64 head = 0; head < h; ++head) {
        const mixers::SsdParams& hp = mc.head_params[static_cast<size_t>(head)];
        mixers::materialize_ssd_into(hp, mat, mask);
        Tensor diff = mat;
        axpy(-1.0, teacher_mats[static_cast<size_t>(head)], diff);
        const double dist = frobenius_norm(diff);
        loss += dist;
        if (!grads) continue;
        if (dist > 0.0) scale(diff, dscale / dist);
        else diff.zero();
        mixers::SsdGrads sg = mixers::ssd_materialize_backward(hp, diff, &mask);
        for (i64 i = 0; i < t; ++i) {
            dalogits.at(i, head) += sg.a_raw[i];
            for (i64 s = 0; s < n; ++s) {
                dbp.at(i, head * n + s) += sg.b.at(i, s);
                dcp.at(i, head * n + s) += sg.c.at(i, s);
            }
        }
    }
    if (grads) {
        if (!grads->g[b.mixer.wc].empty())
            matmul_into(grads->g[b.mixer.wc], z, dcp, true, false, 1.0, 1.0);
        if (!grads->g[b.mixer.wb].empty())
            matmul_into(grads->g[b.mixer.wb], z, dbp, true, false, 1.0, 1.0);
        if (!grads->g[b.mixer.wa].empty())
            matmul_into(grads->g[b.mixer.wa], z, dalogits, true, false, 1.0, 1.0);
        if (!grads->g[b.mixer.ba].empty())
            for (i64 i = 0; i < t; ++i)
                for (i64 head = 0; head < h; ++head)
                    grads->g[b.mixer.ba][head] += dalogits.at(i, head);
        // the value path and convolution do not enter the mixer matrix, so
        // their gradient contribution is identically zero
    }
    return loss;
}

// ||teacher_branch - student_branch||_F on one layer, gradients into the full
// stage-2 group.
inline double stage2_layer_loss(const Model& student, const model::BlockIdx& b, const Tensor& u,
                                const Tensor& teacher_branch, double dscale, Grads* grads) {
    model::detail::LnCache ln;
    Tensor z;
    model::detail::layernorm_forward(u, student.p(b.ln_scale), student.p(b.ln_bias), z, ln);
    model::detail::MixerCache mc;
    Tensor out = model::detail::mixer_branch_forward(student, b, z, mc);
    Tensor diff = out;
    axpy(-1.0, teacher_branch, diff);
    const double dist = frobenius_norm(diff);
    if (grads) {
        if (dist > 0.0) scale(diff, dscale / dist);
        else diff.zero();
        Tensor dz(z.shape);  // discarded: inputs are fixed teacher activations
        model::detail::mixer_branch_backward(student, b, z, mc, diff, *grads, dz);
    }
    return dist;
}

}  // namespace detail

// Executes batch updates for stage 1 or 2. Each ssd layer owns its optimizer;
// losses are separable per layer, so any processing order yields identical
// parameters. Exposed as a class so the training-law sweep can snapshot and
// cool down mid-run.
class LayerStageRunner {
public:
    LayerStageRunner(int stage, const Model& teacher, Model& student,
                     const std::vector<uint16_t>& tokens, const DistillConfig& cfg)
        : stage_(stage), teacher_(teacher), student_(student), tokens_(tokens), cfg_(cfg) {
        check(stage == 1 || stage == 2, "LayerStageRunner: stage must be 1 or 2");
        model::SplitCorpus corpus = model::split_corpus(tokens, cfg.heldout_frac);
        max_offset_ = corpus.train_end - cfg.seq_len;
        check(max_offset_ >= 0, "LayerStageRunner: corpus shorter than one sequence");
        for (i64 l = 0; l < student.cfg.n_layers; ++l)
            if (student.cfg.layer_kinds[static_cast<size_t>(l)] == LayerKind::Ssd)
                ssd_layers_.push_back(l);
        opt.assign(ssd_layers_.size(), {});
        trainable_.assign(student.param_count(), 0);
        for (i64 l : ssd_layers_) {
            const model::BlockIdx& b = student.idx.blocks[static_cast<size_t>(l)];
            for (size_t pi : group_of(b).params) trainable_[pi] = 1;
        }
    }

    const char* stage_name() const { return stage_ == 1 ? "stage1" : "stage2"; }

    // One full-batch update at the given learning rate; `step` keys the data.
    void step(i64 step, double lr) {
        std::vector<i64> offs = model::batch_offsets(cfg_.seed, stage_name(), step,
                                                     cfg_.batch_sequences, max_offset_);
        std::vector<model::ForwardTrace> traces(static_cast<size_t>(cfg_.batch_sequences));
        parallel_for(cfg_.batch_sequences, cfg_.jobs, [&](i64 bi) {
            std::vector<i64> seq =
                model::slice_tokens(tokens_, offs[static_cast<size_t>(bi)], cfg_.seq_len);
            model::ForwardOptions fo;
            fo.want_trace = true;
            fo.want_matrices = stage_ == 1;
            model_forward(teacher_, seq, fo, nullptr, &traces[static_cast<size_t>(bi)]);
        });
        const double inv_batch = 1.0 / static_cast<double>(cfg_.batch_sequences);
        for (size_t li = 0; li < ssd_layers_.size(); ++li) {
            const i64 l = ssd_layers_[li];
            const model::BlockIdx& b = student_.idx.blocks[static_cast<size_t>(l)];
            std::vector<Grads> partial(static_cast<size_t>(cfg_.batch_sequences));
            parallel_for(cfg_.batch_sequences, cfg_.jobs, [&](i64 bi) {
                Grads g = Grads::like(student_, &trainable_);
                const auto& lt = traces[static_cast<size_t>(bi)].layers[static_cast<size_t>(l)];
                if (stage_ == 1)
                    detail::stage1_layer_loss(student_, b, lt.block_input, lt.head_matrices,
                                              inv_batch, &g);
                else
                    detail::stage2_layer_loss(student_, b, lt.block_input, lt.branch_output,
                                              inv_batch, &g);
                partial[static_cast<size_t>(bi)] = std::move(g);
            });
            Grads grads = Grads::like(student_, &trainable_);
            for (auto& p : partial) grads.accumulate(p);

            std::vector<Tensor*> gp, pp;
            std::vector<const Tensor*> gc;
            for (size_t pi : group_of(b).params) {
                gp.push_back(&grads.g[pi]);
                pp.push_back(&student_.params[pi]);
                gc.push_back(&grads.g[pi]);
            }
            clip_grad_norm(gp, cfg_.clip_norm);
            if (lr > 0.0)
                adamw_step(pp, gc, opt[li],
                           {.lr = lr, .beta1 = cfg_.beta1, .beta2 = cfg_.beta2,
                            .weight_decay = cfg_.weight_decay, .eps = 1e-8});
        }
    }

    std::vector<AdamWState> opt;  // per ssd layer

private:
    detail::LayerGroup group_of(const model::BlockIdx& b) const {
        return stage_ == 1 ? detail::stage1_group(student_, b) : detail::stage2_group(student_, b);
    }

    int stage_;
    const Model& teacher_;
    Model& student_;
    const std::vector<uint16_t>& tokens_;
    const DistillConfig& cfg_;
    i64 max_offset_ = 0;
    std::vector<i64> ssd_layers_;
    std::vector<char> trainable_;
};

inline void run_layer_stage(int stage, const Model& teacher, Model& student,
                            const std::vector<uint16_t>& tokens, i64 budget_tokens,
                            const DistillConfig& cfg, double base_lr,
                            std::vector<MetricRow>* metrics_out = nullptr) {
    const i64 total_steps = cfg.steps_for(budget_tokens);
    model::SplitCorpus corpus = model::split_corpus(tokens, cfg.heldout_frac);
    LayerStageRunner runner(stage, teacher, student, tokens, cfg);
    auto log_metrics = [&](i64 step) {
        if (!metrics_out) return;
        metrics_out->push_back({runner.stage_name(), step * cfg.tokens_per_step(),
                                measure_metrics(teacher, student, corpus, cfg)});
    };
    log_metrics(0);
    if (total_steps == 0) return;
    WsdSchedule sched{.total_steps = total_steps, .warmup_frac = cfg.warmup_frac,
                      .decay_frac = cfg.decay_frac, .base_lr = base_lr};
    for (i64 step = 1; step <= total_steps; ++step) {
        runner.step(step, sched.lr(step));
        if (step % cfg.eval_interval_steps == 0 || step == total_steps) log_metrics(step);
    }
}

inline void stage1_matrix_orientation(const Model& teacher, Model& student,
                                      const std::vector<uint16_t>& tokens, i64 budget_tokens,
                                      const DistillConfig& cfg,
                                      std::vector<MetricRow>* metrics_out = nullptr) {
    run_layer_stage(1, teacher, student, tokens, budget_tokens, cfg, cfg.stage1_lr, metrics_out);
}

inline void stage2_hidden_alignment(const Model& teacher, Model& student,
                                    const std::vector<uint16_t>& tokens, i64 budget_tokens,
                                    const DistillConfig& cfg,
                                    std::vector<MetricRow>* metrics_out = nullptr) {
    run_layer_stage(2, teacher, student, tokens, budget_tokens, cfg, cfg.stage2_lr, metrics_out);
}

// ---------------------------------------------------------------------------
// Stage 3: end-to-end knowledge distillation, with checkpoints and the
// rollback treatment of loss spikes.
// ---------------------------------------------------------------------------

struct Checkpoint {
    Model model;
    AdamWState opt;
    i64 step = 0;
    i64 stage = 0;
    double lr_scale = 1.0;
    i64 rollbacks = 0;
    double reference_loss = std::numeric_limits<double>::infinity();
    u64 rng_key = 0;
    u64 rng_counter = 0;
};

struct Stage3State {
    AdamWState opt;
    i64 step = 0;          // steps completed
    double lr_scale = 1.0;
    i64 rollbacks = 0;
    // rollback target
    Checkpoint last_good;
    double reference_loss = std::numeric_limits<double>::infinity();
    // after a rollback, the retried steps are exempt from the >2x test so a
    // single hard batch cannot exhaust the rollback budget
    i64 spike_exempt_until = 0;
};

inline Checkpoint snapshot_stage3(const Model& student, const Stage3State& st, u64 seed) {
    Checkpoint c;
    c.model = student;
    c.opt = st.opt;
    c.step = st.step;
    c.stage = 3;
    c.lr_scale = st.lr_scale;
    c.rollbacks = st.rollbacks;
    c.reference_loss = st.reference_loss;
    c.rng_key = Rng(seed).key();
    c.rng_counter = 0;
    return c;
}

inline Stage3State stage3_state_from(const Checkpoint& c) {
    Stage3State st;
    st.opt = c.opt;
    st.step = c.step;
    st.lr_scale = c.lr_scale;
    st.rollbacks = c.rollbacks;
    st.last_good = c;
    st.reference_loss = c.reference_loss;
    return st;
}

// Runs stage-3 steps (step+1 .. stop_step]. total_steps fixes the schedule;
// stop_step < total_steps leaves a resumable state behind.
inline void stage3_run(const Model& teacher, Model& student, const std::vector<uint16_t>& tokens,
                       const DistillConfig& cfg, i64 total_steps, i64 stop_step, double base_lr,
                       Stage3State& st, std::vector<MetricRow>* metrics_out = nullptr) {
    model::SplitCorpus corpus = model::split_corpus(tokens, cfg.heldout_frac);
    const i64 max_offset = corpus.train_end - cfg.seq_len;
    check(max_offset >= 0, "stage3: corpus shorter than one sequence");
    WsdSchedule sched{.total_steps = total_steps, .warmup_frac = cfg.warmup_frac,
                      .decay_frac = cfg.decay_frac, .base_lr = base_lr};
    std::vector<char> trainable = trainable_mask(student, cfg.freeze);

    auto log_metrics = [&](i64 step) {
        if (!metrics_out) return;
        metrics_out->push_back({"stage3", step * cfg.tokens_per_step(),
                                measure_metrics(teacher, student, corpus, cfg)});
    };

    if (st.step == 0) {
        log_metrics(0);
        if (total_steps == 0) return;
    }
    if (st.reference_loss == std::numeric_limits<double>::infinity()) {
        st.last_good = snapshot_stage3(student, st, cfg.seed);
    }

    const double inv_batch = 1.0 / static_cast<double>(cfg.batch_sequences);
    while (st.step < stop_step) {
        const i64 step = st.step + 1;
        std::vector<i64> offs =
            model::batch_offsets(cfg.seed, "stage3", step, cfg.batch_sequences, max_offset);
        std::vector<Grads> partial(static_cast<size_t>(cfg.batch_sequences));
        std::vector<double> losses(static_cast<size_t>(cfg.batch_sequences), 0.0);
        std::vector<char> bad(static_cast<size_t>(cfg.batch_sequences), 0);
        parallel_for(cfg.batch_sequences, cfg.jobs, [&](i64 bi) {
            std::vector<i64> seq =
                model::slice_tokens(tokens, offs[static_cast<size_t>(bi)], cfg.seq_len);
            try {
                Tensor tlogits = model_forward(teacher, seq);
                Tensor tprobs;
                model::softmax_rows(tlogits, tprobs);
                SeqCache cache;
                Tensor slogits = model_forward(student, seq, {}, &cache);
                Tensor dlogits;
                losses[static_cast<size_t>(bi)] =
                    model::kd_loss(slogits, tprobs, &dlogits, inv_batch);
                Grads g = Grads::like(student, &trainable);
                model_backward(student, cache, dlogits, g);
                partial[static_cast<size_t>(bi)] = std::move(g);
            } catch (const InvalidInputError&) {
                bad[static_cast<size_t>(bi)] = 1;  // non-finite activations
            }
        });
        double loss = 0.0;
        bool finite = true;
        for (i64 bi = 0; bi < cfg.batch_sequences; ++bi) {
            if (bad[static_cast<size_t>(bi)]) finite = false;
            loss += losses[static_cast<size_t>(bi)] * inv_batch;
        }
        if (!std::isfinite(loss)) finite = false;

        const bool spike =
            !finite || (step > st.spike_exempt_until &&
                        st.reference_loss < std::numeric_limits<double>::infinity() &&
                        loss > 2.0 * st.reference_loss);
        if (spike) {
            if (st.rollbacks >= cfg.max_rollbacks)
                throw TrainingFailureError(
                    "stage3: loss spike after " + std::to_string(cfg.max_rollbacks) +
                    " rollbacks; last good checkpoint at step " +
                    std::to_string(st.last_good.step));
            student = st.last_good.model;
            st.opt = st.last_good.opt;
            st.step = st.last_good.step;
            st.lr_scale = st.last_good.lr_scale * 0.5;
            st.reference_loss = st.last_good.reference_loss;
            st.rollbacks += 1;
            st.spike_exempt_until = step;
            continue;
        }

        Grads grads = Grads::like(student, &trainable);
        for (auto& p : partial) grads.accumulate(p);
        const double lr = sched.lr(step) * st.lr_scale;
        if (lr > 0.0)
            model::apply_update(student, grads, st.opt, lr, cfg.beta1, cfg.beta2,
                                cfg.weight_decay, cfg.clip_norm);
        st.step = step;

        if (step % cfg.checkpoint_interval_steps == 0 || step == total_steps) {
            st.reference_loss = loss;
            st.last_good = snapshot_stage3(student, st, cfg.seed);
        } else if (st.reference_loss == std::numeric_limits<double>::infinity()) {
            st.reference_loss = loss;
        }
        if (step % cfg.eval_interval_steps == 0 || step == total_steps) log_metrics(step);
    }
}

inline void stage3_kd(const Model& teacher, Model& student, const std::vector<uint16_t>& tokens,
                      i64 budget_tokens, const DistillConfig& cfg, double base_lr,
                      std::vector<MetricRow>* metrics_out = nullptr,
                      Stage3State* state_out = nullptr) {
    const i64 total_steps = cfg.steps_for(budget_tokens);
    Stage3State st;
    stage3_run(teacher, student, tokens, cfg, total_steps, total_steps, base_lr, st, metrics_out);
    if (state_out) *state_out = std::move(st);
}

// ---------------------------------------------------------------------------
// Full pipeline
// ---------------------------------------------------------------------------

struct MohawkResult {
    Model student;
    std::vector<MetricRow> metrics;
    StageMetrics final_metrics;
};

inline ModelConfig student_config(const Model& teacher, const DistillConfig& cfg) {
    ModelConfig sc = teacher.cfg;
    sc.layer_kinds = cfg.layer_kinds.empty()
                         ? ModelConfig::all(LayerKind::Ssd, teacher.cfg.n_layers)
                         : cfg.layer_kinds;
    return sc;
}

inline MohawkResult run_mohawk(const DistillConfig& cfg, const Model& teacher,
                               const std::vector<uint16_t>& tokens) {
    MohawkResult out;
    out.student = model::transfer_weights(teacher, student_config(teacher, cfg));
    model::SplitCorpus corpus = model::split_corpus(tokens, cfg.heldout_frac);
    out.metrics.push_back({"init", 0, measure_metrics(teacher, out.student, corpus, cfg)});
    if (cfg.stage1_tokens > 0)
        stage1_matrix_orientation(teacher, out.student, tokens, cfg.stage1_tokens, cfg,
                                  &out.metrics);
    if (cfg.stage2_tokens > 0)
        stage2_hidden_alignment(teacher, out.student, tokens, cfg.stage2_tokens, cfg,
                                &out.metrics);
    if (cfg.stage3_tokens > 0) {
        const double lr = (cfg.stage1_tokens > 0 || cfg.stage2_tokens > 0)
                              ? cfg.stage3_lr_after_stage12
                              : cfg.stage3_lr;
        stage3_kd(teacher, out.student, tokens, cfg.stage3_tokens, cfg, lr, &out.metrics);
    }
    out.final_metrics = measure_metrics(teacher, out.student, corpus, cfg);
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint serialization (bitwise round trip)
// ---------------------------------------------------------------------------

inline std::vector<io::NamedTensor> model_to_arrays(const Model& m) {
    std::vector<io::NamedTensor> arrays;
    Tensor meta({7});
    meta[0] = static_cast<double>(m.cfg.vocab_size);
    meta[1] = static_cast<double>(m.cfg.d_model);
    meta[2] = static_cast<double>(m.cfg.n_layers);
    meta[3] = static_cast<double>(m.cfg.n_heads);
    meta[4] = static_cast<double>(m.cfg.d_mlp);
    meta[5] = static_cast<double>(m.cfg.max_seq_len);
    meta[6] = 0.0;
    arrays.push_back({"config", std::move(meta)});
    Tensor kinds({m.cfg.n_layers});
    for (i64 l = 0; l < m.cfg.n_layers; ++l)
        kinds[l] = m.cfg.layer_kinds[static_cast<size_t>(l)] == LayerKind::Ssd ? 1.0 : 0.0;
    arrays.push_back({"config.layer_kinds", std::move(kinds)});
    for (size_t i = 0; i < m.param_count(); ++i) arrays.push_back({m.name(i), m.p(i)});
    return arrays;
}

inline Model model_from_arrays(const std::vector<io::NamedTensor>& arrays) {
    const Tensor& meta = io::require_array(arrays, "config");
    ModelConfig cfg;
    cfg.vocab_size = static_cast<i64>(meta[0]);
    cfg.d_model = static_cast<i64>(meta[1]);
    cfg.n_layers = static_cast<i64>(meta[2]);
    cfg.n_heads = static_cast<i64>(meta[3]);
    cfg.d_mlp = static_cast<i64>(meta[4]);
    cfg.max_seq_len = static_cast<i64>(meta[5]);
    const Tensor& kinds = io::require_array(arrays, "config.layer_kinds");
    for (i64 l = 0; l < cfg.n_layers; ++l)
        cfg.layer_kinds.push_back(kinds[l] == 1.0 ? LayerKind::Ssd : LayerKind::Attention);
    Model m(cfg);
    for (size_t i = 0; i < m.param_count(); ++i) {
        const Tensor& src = io::require_array(arrays, m.name(i));
        check(src.shape == m.p(i).shape, "checkpoint: shape mismatch for " + m.name(i));
        m.p(i) = src;
    }
    return m;
}

inline void save_model(const std::string& path, const Model& m) {
    io::write_container(path, model_to_arrays(m));
}

inline Model load_model(const std::string& path) {
    return model_from_arrays(io::read_container(path));
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
    std::vector<io::NamedTensor> arrays = model_to_arrays(c.model);
    Tensor meta({7});
    meta[0] = static_cast<double>(c.step);
    meta[1] = static_cast<double>(c.stage);
    meta[2] = c.lr_scale;
    meta[3] = static_cast<double>(c.rollbacks);
    meta[4] = c.reference_loss;
    meta[5] = io::bits_to_double(c.rng_key);
    meta[6] = io::bits_to_double(c.rng_counter);
    arrays.push_back({"ckpt.meta", std::move(meta)});
    Tensor ostep({1});
    ostep[0] = static_cast<double>(c.opt.step);
    arrays.push_back({"adam.step", std::move(ostep)});
    for (size_t i = 0; i < c.opt.m.size(); ++i) {
        if (c.opt.m[i].empty()) continue;
        arrays.push_back({"adam.m." + c.model.name(i), c.opt.m[i]});
        arrays.push_back({"adam.v." + c.model.name(i), c.opt.v[i]});
    }
    io::write_container(path, arrays);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::vector<io::NamedTensor> arrays = io::read_container(path);
    Checkpoint c;
    c.model = model_from_arrays(arrays);
    const Tensor& meta = io::require_array(arrays, "ckpt.meta");
    c.step = static_cast<i64>(meta[0]);
    c.stage = static_cast<i64>(meta[1]);
    c.lr_scale = meta[2];
    c.rollbacks = static_cast<i64>(meta[3]);
    c.reference_loss = meta[4];
    c.rng_key = io::double_to_bits(meta[5]);
    c.rng_counter = io::double_to_bits(meta[6]);
    c.opt.step = static_cast<i64>(io::require_array(arrays, "adam.step")[0]);
    c.opt.m.resize(c.model.param_count());
    c.opt.v.resize(c.model.param_count());
    for (size_t i = 0; i < c.model.param_count(); ++i) {
        const Tensor* mt = io::find_array(arrays, "adam.m." + c.model.name(i));
        if (mt) {
            c.opt.m[i] = *mt;
            c.opt.v[i] = io::require_array(arrays, "adam.v." + c.model.name(i));
        }
    }
    return c;
}

// Materialized attention matrices from held-out windows of the corpus, one
// (layer, head) pick per sample. Targets for the projection benchmark.
inline std::vector<Tensor> capture_attention_matrices(const Model& teacher,
                                                      const std::vector<uint16_t>& tokens,
                                                      i64 count, i64 seq_len,
                                                      double heldout_frac, u64 seed) {
    model::SplitCorpus corpus = model::split_corpus(tokens, heldout_frac);
    const i64 windows = corpus.heldout_size() / seq_len;
    check(windows >= 1, "capture: not enough held-out tokens");
    std::vector<Tensor> out;
    out.reserve(static_cast<size_t>(count));
    for (i64 i = 0; i < count; ++i) {
        Rng rng = Rng(seed).split("capture").split(static_cast<u64>(i));
        const i64 offset = corpus.train_end + (i % windows) * seq_len;
        std::vector<i64> seq = model::slice_tokens(tokens, offset, seq_len);
        model::ForwardTrace trace;
        model_forward(teacher, seq, {.want_trace = true, .want_matrices = true}, nullptr, &trace);
        const i64 layer = rng.uniform_int(teacher.cfg.n_layers);
        const i64 head = rng.uniform_int(teacher.cfg.n_heads);
        out.push_back(std::move(
            trace.layers[static_cast<size_t>(layer)].head_matrices[static_cast<size_t>(head)]));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training-law sweep: one continuous stage-A run per seed with checkpoints at
// the grid budgets; checkpoints taken during warmup are used as-is, later
// ones get a linear cooldown spanning 10% of their tokens; each (possibly
// cooled) checkpoint then seeds one stage-B run per stage-B budget.
// ---------------------------------------------------------------------------

struct SweepConfig {
    int stage_a = 2;  // 1 or 2; stage B is stage_a + 1
    std::vector<i64> stage_a_budgets;
    std::vector<i64> stage_b_budgets;
    std::vector<u64> seeds{0};
};

struct SweepRow {
    i64 stage_a_tokens = 0;
    i64 stage_b_tokens = 0;
    u64 seed = 0;
    StageMetrics metrics;
};

inline std::vector<SweepRow> training_law_sweep(const SweepConfig& sweep,
                                                const DistillConfig& base, const Model& teacher,
                                                const std::vector<uint16_t>& tokens) {
    check(sweep.stage_a == 1 || sweep.stage_a == 2, "sweep: stage_a must be 1 or 2");
    check(!sweep.stage_a_budgets.empty() && !sweep.stage_b_budgets.empty() &&
              !sweep.seeds.empty(),
          "sweep: empty grid");
    model::SplitCorpus corpus = model::split_corpus(tokens, base.heldout_frac);
    std::vector<SweepRow> rows;
    for (u64 seed : sweep.seeds) {
        DistillConfig cfg = base;
        cfg.seed = seed;
        Model student0 = model::transfer_weights(teacher, student_config(teacher, cfg));

        i64 max_budget = 0;
        for (i64 b : sweep.stage_a_budgets) max_budget = std::max(max_budget, b);
        const i64 total_steps = cfg.steps_for(max_budget);
        const double base_lr = sweep.stage_a == 1 ? cfg.stage1_lr : cfg.stage2_lr;
        // continuous run: warmup only, per-checkpoint cooldown instead of decay
        WsdSchedule sched{.total_steps = std::max<i64>(total_steps, 1),
                          .warmup_frac = cfg.warmup_frac, .decay_frac = 0.0, .base_lr = base_lr};
        const i64 warmup_steps =
            static_cast<i64>(cfg.warmup_frac * static_cast<double>(total_steps));

        struct Snap {
            i64 budget;
            Model model;
            std::vector<AdamWState> opt;
            double lr_at;
            i64 step;
        };
        std::vector<Snap> snaps;
        Model student = student0;
        LayerStageRunner runner(sweep.stage_a, teacher, student, tokens, cfg);
        auto want_snapshot = [&](i64 step) {
            for (i64 b : sweep.stage_a_budgets)
                if (cfg.steps_for(b) == step) return true;
            return false;
        };
        if (want_snapshot(0)) {
            for (i64 b : sweep.stage_a_budgets)
                if (cfg.steps_for(b) == 0) snaps.push_back({b, student, runner.opt, 0.0, 0});
        }
        for (i64 step = 1; step <= total_steps; ++step) {
            runner.step(step, sched.lr(step));
            if (want_snapshot(step)) {
                for (i64 b : sweep.stage_a_budgets)
                    if (cfg.steps_for(b) == step)
                        snaps.push_back({b, student, runner.opt, sched.lr(step), step});
            }
        }

        for (Snap& snap : snaps) {
            Model cooled = snap.model;
            const i64 cool_steps = snap.step / 10;
            if (snap.step > warmup_steps && cool_steps > 0) {
                // continue the same stage with linearly vanishing lr on fresh
                // batches past the snapshot step
                Model* target = &cooled;
                LayerStageRunner cool_runner(sweep.stage_a, teacher, *target, tokens, cfg);
                cool_runner.opt = snap.opt;
                for (i64 j = 1; j <= cool_steps; ++j) {
                    const double lr =
                        snap.lr_at * static_cast<double>(cool_steps - j) /
                        static_cast<double>(cool_steps);
                    cool_runner.step(snap.step + j, lr);
                }
            }
            for (i64 b_budget : sweep.stage_b_budgets) {
                Model s = cooled;
                if (sweep.stage_a == 1) {
                    stage2_hidden_alignment(teacher, s, tokens, b_budget, cfg);
                } else {
                    const double lr = snap.budget > 0 ? cfg.stage3_lr_after_stage12
                                                      : cfg.stage3_lr;
                    stage3_kd(teacher, s, tokens, b_budget, cfg, lr);
                }
                SweepRow row;
                row.stage_a_tokens = snap.budget;
                row.stage_b_tokens = b_budget;
                row.seed = seed;
                row.metrics = measure_metrics(teacher, s, corpus, cfg);
                rows.push_back(row);
            }
        }
    }
    return rows;
}

}  // namespace mohawk::distill
