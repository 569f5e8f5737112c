#pragma once

#include <string>
#include <vector>

#include "mohawk/approx.hpp"
#include "mohawk/distill.hpp"
#include "mohawk/gradcheck.hpp"

namespace mohawk::gradsuite {

// Central-difference verification of every trainable loss in the library, on
// random small instances (d <= 16, T <= 8). Returns worst relative error per
// check; the acceptance gate is 1e-4.

constexpr double kTolerance = 1e-4;

struct CheckResult {
    std::string name;
    int instances;
    double max_rel_err;
    double tolerance;
    bool pass;
};

namespace detail {

inline model::ModelConfig random_tiny_cfg(Rng& rng) {
    model::ModelConfig cfg;
    cfg.vocab_size = 11;
    cfg.n_heads = 1 + rng.uniform_int(2);
    cfg.d_model = cfg.n_heads * (rng.uniform() < 0.5 ? 4 : 8);
    cfg.n_layers = 2;
    cfg.d_mlp = 12;
    cfg.max_seq_len = 8;
    cfg.layer_kinds = {model::LayerKind::Ssd,
                       rng.uniform() < 0.5 ? model::LayerKind::Attention : model::LayerKind::Ssd};
    return cfg;
}

inline std::vector<i64> random_tokens(Rng& rng, i64 t, i64 vocab) {
    std::vector<i64> out(static_cast<size_t>(t));
    for (auto& x : out) x = rng.uniform_int(vocab);
    return out;
}

inline model::Model jittered_student(const model::Model& teacher, const model::ModelConfig& cfg,
                                     Rng& rng) {
    model::Model student = model::transfer_weights(teacher, cfg);
    for (i64 l = 0; l < cfg.n_layers; ++l) {
        const model::BlockIdx& b = student.idx.blocks[static_cast<size_t>(l)];
        if (b.kind != model::LayerKind::Ssd) continue;
        Tensor& wa = student.p(b.mixer.wa);
        for (i64 i = 0; i < wa.size(); ++i) wa[i] = rng.uniform(-0.5, 0.5);
        student.p(b.mixer.ba).fill(rng.uniform(0.0, 2.0));
        Tensor& conv = student.p(b.mixer.conv);
        for (i64 i = 0; i < conv.size(); ++i) conv[i] += 0.1 * rng.uniform(-1.0, 1.0);
        Tensor& gate = student.p(b.mixer.gate);
        for (i64 i = 0; i < gate.size(); ++i) gate[i] += 0.2 * rng.uniform(-1.0, 1.0);
    }
    return student;
}

// worst rel err of `grads` vs central differences of loss_fn over the
// parameters selected by `param_idx`
inline double fd_against(model::Model& m, const std::vector<size_t>& param_idx,
                         const model::Grads& grads, const std::function<double()>& loss_fn) {
    double worst = 0.0;
    for (size_t pi : param_idx) {
        Tensor fd(m.p(pi).shape);
        for (i64 j = 0; j < fd.size(); ++j) {
            const double eps = 1e-5;
            const double orig = m.p(pi)[j];
            m.p(pi)[j] = orig + eps;
            const double fp = loss_fn();
            m.p(pi)[j] = orig - eps;
            const double fm = loss_fn();
            m.p(pi)[j] = orig;
            fd[j] = (fp - fm) / (2.0 * eps);
        }
        worst = std::max(worst, max_rel_err(grads.g[pi], fd));
    }
    return worst;
}

}  // namespace detail

inline double check_gd_family(approx::Family family, int instances, u64 seed) {
    double worst = 0.0;
    for (int inst = 0; inst < instances; ++inst) {
        Rng rng = Rng(seed).split("gd").split(static_cast<u64>(family)).split(
            static_cast<u64>(inst));
        const i64 t = 8, n = 1 + rng.uniform_int(3);
        mixers::AttentionMixerInputs in;
        in.q = Tensor({t, 4});
        in.k = Tensor({t, 4});
        for (i64 i = 0; i < in.q.size(); ++i) in.q[i] = rng.uniform(-1.0, 1.0);
        for (i64 i = 0; i < in.k.size(); ++i) in.k[i] = rng.uniform(-1.0, 1.0);
        in.scale = 0.5;
        Tensor m = mixers::causal_softmax_attention(in);

        approx::GdConfig cfg;
        approx::MixerParams init = approx::detail::init_gd_params(
            family, t, n, cfg.decay_form, rng.split("init"));
        approx::detail::GdProblem prob(m, init);
        std::vector<Tensor*> params;
        std::vector<Tensor> grads;
        prob.loss_and_grads(params, grads);
        for (size_t pi = 0; pi < params.size(); ++pi) {
            Tensor base = *params[pi];
            Tensor fd = finite_diff_grad(
                [&](const Tensor& v) {
                    approx::detail::GdProblem p2(m, init);
                    std::vector<Tensor*> ps;
                    std::vector<Tensor> gs;
                    p2.loss_and_grads(ps, gs);
                    *ps[pi] = v;
                    p2.sync_scalar_params();
                    return p2.loss();
                },
                base);
            worst = std::max(worst, max_rel_err(grads[pi], fd));
        }
    }
    return worst;
}

inline double check_stage1(int instances, u64 seed) {
    double worst = 0.0;
    for (int inst = 0; inst < instances; ++inst) {
        Rng rng = Rng(seed).split("stage1").split(static_cast<u64>(inst));
        model::ModelConfig cfg = detail::random_tiny_cfg(rng);
        cfg.layer_kinds[0] = model::LayerKind::Ssd;
        model::Model teacher = model::init_teacher(cfg, rng.next_u64());
        model::Model student = detail::jittered_student(teacher, cfg, rng);
        std::vector<i64> toks = detail::random_tokens(rng, 4 + rng.uniform_int(5), cfg.vocab_size);
        model::ForwardTrace trace;
        model_forward(teacher, toks, {.want_trace = true, .want_matrices = true}, nullptr, &trace);
        const model::BlockIdx& b = student.idx.blocks[0];
        const auto& lt = trace.layers[0];

        std::vector<char> trainable(student.param_count(), 1);
        model::Grads g = model::Grads::like(student, &trainable);
        distill::detail::stage1_layer_loss(student, b, lt.block_input, lt.head_matrices, 1.0, &g);
        std::vector<size_t> group{b.mixer.wc, b.mixer.wb, b.mixer.wx,
                                  b.mixer.wa, b.mixer.ba, b.mixer.conv};
        worst = std::max(worst, detail::fd_against(student, group, g, [&]() {
            return distill::detail::stage1_layer_loss(student, b, lt.block_input,
                                                      lt.head_matrices, 1.0, nullptr);
        }));
    }
    return worst;
}

inline double check_stage2(int instances, u64 seed) {
    double worst = 0.0;
    for (int inst = 0; inst < instances; ++inst) {
        Rng rng = Rng(seed).split("stage2").split(static_cast<u64>(inst));
        model::ModelConfig cfg = detail::random_tiny_cfg(rng);
        cfg.layer_kinds[0] = model::LayerKind::Ssd;
        model::Model teacher = model::init_teacher(cfg, rng.next_u64());
        model::Model student = detail::jittered_student(teacher, cfg, rng);
        std::vector<i64> toks = detail::random_tokens(rng, 4 + rng.uniform_int(5), cfg.vocab_size);
        model::ForwardTrace trace;
        model_forward(teacher, toks, {.want_trace = true}, nullptr, &trace);
        const model::BlockIdx& b = student.idx.blocks[0];
        const auto& lt = trace.layers[0];

        std::vector<char> trainable(student.param_count(), 1);
        model::Grads g = model::Grads::like(student, &trainable);
        distill::detail::stage2_layer_loss(student, b, lt.block_input, lt.branch_output, 1.0, &g);
        std::vector<size_t> group{b.mixer.wc, b.mixer.wb, b.mixer.wx,  b.mixer.wa,
                                  b.mixer.ba, b.mixer.conv, b.mixer.gate, b.mixer.wo};
        worst = std::max(worst, detail::fd_against(student, group, g, [&]() {
            return distill::detail::stage2_layer_loss(student, b, lt.block_input,
                                                      lt.branch_output, 1.0, nullptr);
        }));
    }
    return worst;
}

inline double check_stage3(int instances, u64 seed, bool with_freeze) {
    double worst = 0.0;
    for (int inst = 0; inst < instances; ++inst) {
        Rng rng = Rng(seed).split("stage3").split(static_cast<u64>(inst));
        model::ModelConfig cfg = detail::random_tiny_cfg(rng);
        model::Model teacher = model::init_teacher(cfg, rng.next_u64());
        model::Model student = detail::jittered_student(teacher, cfg, rng);
        std::vector<i64> toks = detail::random_tokens(rng, 4 + rng.uniform_int(5), cfg.vocab_size);
        Tensor tlogits = model_forward(teacher, toks);
        Tensor tprobs;
        model::softmax_rows(tlogits, tprobs);

        std::set<distill::Component> freeze;
        if (with_freeze)
            freeze = {distill::Component::Mlp, distill::Component::Embedding,
                      distill::Component::LmHead};
        std::vector<char> trainable = distill::trainable_mask(student, freeze);
        model::SeqCache cache;
        Tensor slogits = model_forward(student, toks, {}, &cache);
        Tensor dlogits;
        model::kd_loss(slogits, tprobs, &dlogits);
        model::Grads g = model::Grads::like(student, &trainable);
        model_backward(student, cache, dlogits, g);

        std::vector<size_t> checked;
        for (size_t pi = 0; pi < student.param_count(); ++pi) {
            if (!trainable[pi]) {
                check(g.g[pi].empty(), "gradsuite: frozen parameter received gradients");
                continue;
            }
            checked.push_back(pi);
        }
        worst = std::max(worst, detail::fd_against(student, checked, g, [&]() {
            return model::kd_loss(model_forward(student, toks), tprobs, nullptr);
        }));
    }
    return worst;
}

inline double check_teacher_ce(int instances, u64 seed) {
    double worst = 0.0;
    for (int inst = 0; inst < instances; ++inst) {
        Rng rng = Rng(seed).split("teacher_ce").split(static_cast<u64>(inst));
        model::ModelConfig cfg = detail::random_tiny_cfg(rng);
        model::Model teacher = model::init_teacher(cfg, rng.next_u64());
        std::vector<i64> toks = detail::random_tokens(rng, 5 + rng.uniform_int(4), cfg.vocab_size);
        model::SeqCache cache;
        Tensor logits = model_forward(teacher, toks, {}, &cache);
        Tensor dlogits;
        model::ce_loss(logits, toks, &dlogits);
        model::Grads g = model::Grads::like(teacher);
        model_backward(teacher, cache, dlogits, g);
        std::vector<size_t> all;
        for (size_t pi = 0; pi < teacher.param_count(); ++pi) all.push_back(pi);
        worst = std::max(worst, detail::fd_against(teacher, all, g, [&]() {
            return model::ce_loss(model_forward(teacher, toks), toks, nullptr);
        }));
    }
    return worst;
}

inline std::vector<CheckResult> run_all(int instances, u64 seed) {
    std::vector<CheckResult> out;
    auto add = [&](const std::string& name, double err) {
        out.push_back({name, instances, err, kTolerance, err <= kTolerance});
    };
    add("proj_lowrank", check_gd_family(approx::Family::LowRank, instances, seed));
    add("proj_retnet", check_gd_family(approx::Family::RetNet, instances, seed));
    add("proj_ssd_no_d", check_gd_family(approx::Family::SsdNoD, instances, seed));
    add("proj_ssd", check_gd_family(approx::Family::Ssd, instances, seed));
    add("stage1_matrix_orientation", check_stage1(instances, seed));
    add("stage2_hidden_alignment", check_stage2(instances, seed));
    add("stage3_kd", check_stage3(instances, seed, false));
    add("stage3_kd_frozen", check_stage3(instances, seed, true));
    add("teacher_ce", check_teacher_ce(instances, seed));
    return out;
}

}  // namespace mohawk::gradsuite
