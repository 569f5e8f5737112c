#pragma once

#include <cmath>
#include <vector>

#include "mohawk/model.hpp"
#include "mohawk/optim.hpp"

namespace mohawk::model {

// Deterministic batch sampling: the offsets for step k of a given stage are a
// pure function of (seed, stage, k), so interrupted runs resume on the exact
// same data order.
inline std::vector<i64> batch_offsets(u64 seed, const char* stage, i64 step, i64 batch,
                                      i64 max_offset) {
    check(max_offset >= 0, "batch_offsets: corpus shorter than one sequence");
    Rng r = Rng(seed).split("batches").split(stage).split(static_cast<u64>(step));
    std::vector<i64> offs(static_cast<size_t>(batch));
    for (i64 i = 0; i < batch; ++i) offs[static_cast<size_t>(i)] = r.uniform_int(max_offset + 1);
    return offs;
}

inline std::vector<i64> slice_tokens(const std::vector<uint16_t>& tokens, i64 offset, i64 len) {
    std::vector<i64> out(static_cast<size_t>(len));
    for (i64 i = 0; i < len; ++i) out[static_cast<size_t>(i)] = tokens[static_cast<size_t>(offset + i)];
    return out;
}

struct SplitCorpus {
    const std::vector<uint16_t>* tokens;
    i64 train_end;  // [0, train_end) trains, [train_end, size) is held out

    i64 heldout_size() const { return static_cast<i64>(tokens->size()) - train_end; }
};

inline SplitCorpus split_corpus(const std::vector<uint16_t>& tokens, double heldout_frac) {
    check(heldout_frac >= 0.0 && heldout_frac < 1.0, "split_corpus: bad heldout fraction");
    i64 n = static_cast<i64>(tokens.size());
    i64 train_end = n - static_cast<i64>(std::floor(static_cast<double>(n) * heldout_frac));
    return {&tokens, train_end};
}

// Mean next-token CE over fixed non-overlapping held-out windows.
inline double heldout_ce(const Model& m, const SplitCorpus& corpus, i64 seq_len,
                         i64 eval_sequences) {
    const i64 have = corpus.heldout_size() / seq_len;
    const i64 count = std::min(eval_sequences, have);
    check(count >= 1, "heldout_ce: not enough held-out tokens");
    double total = 0.0;
    for (i64 s = 0; s < count; ++s) {
        std::vector<i64> seq = slice_tokens(*corpus.tokens, corpus.train_end + s * seq_len, seq_len);
        Tensor logits = model_forward(m, seq);
        total += ce_loss(logits, seq, nullptr);
    }
    return total / static_cast<double>(count);
}

struct TeacherTrainConfig {
    i64 budget_tokens = 2000000;
    i64 batch_sequences = 16;
    i64 seq_len = 256;
    double lr = 1e-3;
    double warmup_frac = 0.10;
    double decay_frac = 0.10;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double clip_norm = 1.0;
    i64 eval_interval_steps = 50;
    double heldout_frac = 0.05;
    i64 eval_sequences = 32;
    u64 seed = 0;
    int jobs = 1;
};

struct MetricPoint {
    i64 step;
    i64 tokens;
    double train_loss;
    double heldout_ce;
    double heldout_ppl;
};

// Mean-CE training step over one batch: per-sequence grads are computed
// independently (parallelizable) and reduced in batch order.
inline double ce_training_step(const Model& m, const std::vector<uint16_t>& tokens,
                               const std::vector<i64>& offsets, i64 seq_len, Grads& grads,
                               int jobs) {
    const i64 batch = static_cast<i64>(offsets.size());
    std::vector<Grads> partial(static_cast<size_t>(batch));
    std::vector<double> losses(static_cast<size_t>(batch));
    const double inv_batch = 1.0 / static_cast<double>(batch);
    parallel_for(batch, jobs, [&](i64 bi) {
        std::vector<i64> seq = slice_tokens(tokens, offsets[static_cast<size_t>(bi)], seq_len);
        SeqCache cache;
        Tensor logits = model_forward(m, seq, {}, &cache);
        Tensor dlogits;
        losses[static_cast<size_t>(bi)] = ce_loss(logits, seq, &dlogits, inv_batch);
        Grads g = Grads::like(m);
        model_backward(m, cache, dlogits, g);
        partial[static_cast<size_t>(bi)] = std::move(g);
    });
    double loss = 0.0;
    for (i64 bi = 0; bi < batch; ++bi) {
        loss += losses[static_cast<size_t>(bi)] * inv_batch;
        grads.accumulate(partial[static_cast<size_t>(bi)]);
    }
    return loss;
}

inline void apply_update(Model& m, Grads& grads, AdamWState& state, double lr, double beta1,
                         double beta2, double weight_decay, double clip_norm) {
    std::vector<Tensor*> gp;
    std::vector<Tensor*> pp;
    std::vector<const Tensor*> gc;
    for (size_t i = 0; i < m.param_count(); ++i) {
        gp.push_back(&grads.g[i]);
        pp.push_back(&m.params[i]);
        gc.push_back(&grads.g[i]);
    }
    clip_grad_norm(gp, clip_norm);
    adamw_step(pp, gc, state, {.lr = lr, .beta1 = beta1, .beta2 = beta2,
                               .weight_decay = weight_decay, .eps = 1e-8});
}

// Next-token pretraining of the all-attention teacher. A zero budget returns
// the freshly initialized model. Divergence (held-out CE above the initial
// value on three consecutive evals) aborts.
inline Model train_teacher(ModelConfig cfg, const std::vector<uint16_t>& corpus_tokens,
                           const TeacherTrainConfig& tc,
                           std::vector<MetricPoint>* history = nullptr) {
    cfg.layer_kinds = ModelConfig::all(LayerKind::Attention, cfg.n_layers);
    Model m = init_teacher(cfg, tc.seed);
    const i64 per_step = tc.batch_sequences * tc.seq_len;
    const i64 total_steps = tc.budget_tokens / per_step;
    if (total_steps == 0) return m;

    SplitCorpus corpus = split_corpus(corpus_tokens, tc.heldout_frac);
    const i64 max_offset = corpus.train_end - tc.seq_len;
    check(max_offset >= 0, "train_teacher: corpus shorter than one sequence");

    WsdSchedule sched{.total_steps = total_steps, .warmup_frac = tc.warmup_frac,
                      .decay_frac = tc.decay_frac, .base_lr = tc.lr};
    AdamWState opt;
    const double initial_ce = heldout_ce(m, corpus, tc.seq_len, tc.eval_sequences);
    if (history) history->push_back({0, 0, initial_ce, initial_ce, std::exp(initial_ce)});
    int bad_evals = 0;

    for (i64 step = 1; step <= total_steps; ++step) {
        std::vector<i64> offs =
            batch_offsets(tc.seed, "teacher", step, tc.batch_sequences, max_offset);
        Grads grads = Grads::like(m);
        double loss = ce_training_step(m, corpus_tokens, offs, tc.seq_len, grads, tc.jobs);
        double lr = sched.lr(step);
        if (lr > 0.0)
            apply_update(m, grads, opt, lr, tc.beta1, tc.beta2, tc.weight_decay, tc.clip_norm);
        const bool at_eval = step % tc.eval_interval_steps == 0 || step == total_steps;
        if (at_eval) {
            double ce = heldout_ce(m, corpus, tc.seq_len, tc.eval_sequences);
            if (history) history->push_back({step, step * per_step, loss, ce, std::exp(ce)});
            bad_evals = ce > initial_ce ? bad_evals + 1 : 0;
            if (bad_evals >= 3)
                throw TrainingFailureError("train_teacher: diverged (held-out CE above initial "
                                           "for 3 consecutive evals)");
        }
    }
    return m;
}

}  // namespace mohawk::model
