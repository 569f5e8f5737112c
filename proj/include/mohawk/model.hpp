#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "mohawk/mixers.hpp"
#include "mohawk/optim.hpp"
#include "mohawk/rng.hpp"
#include "mohawk/tensor.hpp"

namespace mohawk::model {

enum class LayerKind { Attention, Ssd };

// a(x) = sigmoid(x); transfer initializes the decay near the linear-attention
// limit, a ~ 0.999
constexpr double kTransferDecayLogit = 6.906754778648554;  // log(0.999 / 0.001)
constexpr i64 kConvWidth = 4;
constexpr double kLnEps = 1e-5;

struct ModelConfig {
    i64 vocab_size = 256;
    i64 d_model = 64;
    i64 n_layers = 2;
    i64 n_heads = 4;
    i64 d_mlp = 256;
    i64 max_seq_len = 256;
    std::vector<LayerKind> layer_kinds;  // hybrid layout; must match n_layers

    i64 head_dim() const { return d_model / n_heads; }
    i64 state_size() const { return head_dim(); }  // B and C live in the key/query space

    void validate() const {
        check(vocab_size >= 2 && d_model >= 1 && n_layers >= 1 && n_heads >= 1 && d_mlp >= 1 &&
                  max_seq_len >= 1,
              "ModelConfig: sizes must be positive");
        check(d_model % n_heads == 0, "ModelConfig: d_model must be divisible by n_heads");
        check(static_cast<i64>(layer_kinds.size()) == n_layers,
              "ModelConfig: layer_kinds length must equal n_layers");
    }

    static std::vector<LayerKind> all(LayerKind k, i64 n) {
        return std::vector<LayerKind>(static_cast<size_t>(n), k);
    }
};

// ---------------------------------------------------------------------------
// Parameter tree. Parameters live in one canonically ordered, name-indexed
// vector; per-layer index structs give the hot paths O(1) access.
// ---------------------------------------------------------------------------

struct AttnIdx {
    size_t wq, wk, wv, wo;
};
struct MixerIdx {
    size_t wc, wb, wx, wa, ba, conv, gate, wo;
};
struct BlockIdx {
    LayerKind kind;
    size_t ln_scale, ln_bias;
    AttnIdx attn{};
    MixerIdx mixer{};
    size_t w1, b1, w2, b2;
};
struct ModelIdx {
    size_t tok_emb, pos_emb;
    std::vector<BlockIdx> blocks;
    size_t final_ln_scale, final_ln_bias, lm_head;
};

class Model {
public:
    Model() = default;
    explicit Model(ModelConfig config) : cfg(std::move(config)) {
        cfg.validate();
        const i64 d = cfg.d_model, hd = cfg.head_dim(), n = cfg.state_size(), h = cfg.n_heads;
        idx.tok_emb = add("embedding.token", {cfg.vocab_size, d});
        idx.pos_emb = add("embedding.position", {cfg.max_seq_len, d});
        for (i64 l = 0; l < cfg.n_layers; ++l) {
            const std::string b = "block" + std::to_string(l) + ".";
            BlockIdx bi;
            bi.kind = cfg.layer_kinds[static_cast<size_t>(l)];
            bi.ln_scale = add(b + "ln.scale", {d});
            bi.ln_bias = add(b + "ln.bias", {d});
            if (bi.kind == LayerKind::Attention) {
                bi.attn.wq = add(b + "attn.wq", {d, h * hd});
                bi.attn.wk = add(b + "attn.wk", {d, h * hd});
                bi.attn.wv = add(b + "attn.wv", {d, h * hd});
                bi.attn.wo = add(b + "attn.wo", {d, d});
            } else {
                bi.mixer.wc = add(b + "mixer.wc", {d, h * n});
                bi.mixer.wb = add(b + "mixer.wb", {d, h * n});
                bi.mixer.wx = add(b + "mixer.wx", {d, h * hd});
                bi.mixer.wa = add(b + "mixer.wa", {d, h});
                bi.mixer.ba = add(b + "mixer.ba", {h});
                bi.mixer.conv = add(b + "mixer.conv", {d, kConvWidth});
                bi.mixer.gate = add(b + "mixer.gate", {d});
                bi.mixer.wo = add(b + "mixer.wo", {d, d});
            }
            bi.w1 = add(b + "mlp.w1", {d, cfg.d_mlp});
            bi.b1 = add(b + "mlp.b1", {cfg.d_mlp});
            bi.w2 = add(b + "mlp.w2", {cfg.d_mlp, d});
            bi.b2 = add(b + "mlp.b2", {d});
            idx.blocks.push_back(bi);
        }
        idx.final_ln_scale = add("final_ln.scale", {d});
        idx.final_ln_bias = add("final_ln.bias", {d});
        idx.lm_head = add("lm_head.weight", {d, cfg.vocab_size});
    }

    size_t param_count() const { return params.size(); }
    Tensor& p(size_t i) { return params[i]; }
    const Tensor& p(size_t i) const { return params[i]; }
    const std::string& name(size_t i) const { return names[i]; }

    size_t index_of(const std::string& name) const {
        auto it = lookup.find(name);
        check(it != lookup.end(), "Model: unknown parameter " + name);
        return it->second;
    }

    ModelConfig cfg;
    ModelIdx idx;
    std::vector<std::string> names;
    std::vector<Tensor> params;
    std::unordered_map<std::string, size_t> lookup;

private:
    size_t add(const std::string& name, std::vector<i64> shape) {
        lookup[name] = params.size();
        names.push_back(name);
        params.emplace_back(std::move(shape));
        return params.size() - 1;
    }
};

// Gradient buffers aligned with Model::params; an empty tensor means the
// parameter is frozen and received no gradient entries.
struct Grads {
    std::vector<Tensor> g;

    static Grads like(const Model& m, const std::vector<char>* trainable = nullptr) {
        Grads out;
        out.g.resize(m.param_count());
        for (size_t i = 0; i < m.param_count(); ++i)
            if (!trainable || (*trainable)[i]) out.g[i] = Tensor(m.p(i).shape);
        return out;
    }

    void accumulate(const Grads& other) {
        for (size_t i = 0; i < g.size(); ++i)
            if (!g[i].empty() && !other.g[i].empty()) axpy(1.0, other.g[i], g[i]);
    }

    void scale_all(double s) {
        for (Tensor& t : g)
            if (!t.empty()) scale(t, s);
    }
};

// ---------------------------------------------------------------------------
// Initialization and weight transfer
// ---------------------------------------------------------------------------

inline Model init_teacher(ModelConfig cfg, u64 seed) {
    cfg.layer_kinds = ModelConfig::all(LayerKind::Attention, cfg.n_layers);
    Model m(cfg);
    Rng root = Rng(seed).split("teacher_init");
    for (size_t i = 0; i < m.param_count(); ++i) {
        const std::string& name = m.name(i);
        Tensor& t = m.p(i);
        if (name.find("ln.scale") != std::string::npos) {
            t.fill(1.0);
        } else if (name.find("ln.bias") != std::string::npos ||
                   name.find("mlp.b") != std::string::npos) {
            t.zero();
        } else {
            Rng r = root.split(name);
            for (i64 j = 0; j < t.size(); ++j) t[j] = 0.02 * r.normal();
        }
    }
    return m;
}

// Copies everything the student shares with the teacher: embeddings, final
// norm, LM head, every block's MLP and input norm, attention layers kept by
// the hybrid layout, and per mixer layer the output projection plus the
// query/key/value projections as C/B/X. Convolution starts as the identity,
// the gate at one, decay logits at the linear-attention end.
inline Model transfer_weights(const Model& teacher, const ModelConfig& student_cfg) {
    const ModelConfig& tc = teacher.cfg;
    check(tc.d_model == student_cfg.d_model && tc.n_heads == student_cfg.n_heads &&
              tc.vocab_size == student_cfg.vocab_size && tc.n_layers == student_cfg.n_layers &&
              tc.d_mlp == student_cfg.d_mlp && tc.max_seq_len == student_cfg.max_seq_len,
          "transfer_weights: incompatible teacher/student shapes");
    Model s(student_cfg);
    s.p(s.idx.tok_emb) = teacher.p(teacher.idx.tok_emb);
    s.p(s.idx.pos_emb) = teacher.p(teacher.idx.pos_emb);
    s.p(s.idx.final_ln_scale) = teacher.p(teacher.idx.final_ln_scale);
    s.p(s.idx.final_ln_bias) = teacher.p(teacher.idx.final_ln_bias);
    s.p(s.idx.lm_head) = teacher.p(teacher.idx.lm_head);
    for (i64 l = 0; l < student_cfg.n_layers; ++l) {
        const BlockIdx& tb = teacher.idx.blocks[static_cast<size_t>(l)];
        const BlockIdx& sb = s.idx.blocks[static_cast<size_t>(l)];
        check(tb.kind == LayerKind::Attention, "transfer_weights: teacher must be all-attention");
        s.p(sb.ln_scale) = teacher.p(tb.ln_scale);
        s.p(sb.ln_bias) = teacher.p(tb.ln_bias);
        s.p(sb.w1) = teacher.p(tb.w1);
        s.p(sb.b1) = teacher.p(tb.b1);
        s.p(sb.w2) = teacher.p(tb.w2);
        s.p(sb.b2) = teacher.p(tb.b2);
        if (sb.kind == LayerKind::Attention) {
            s.p(sb.attn.wq) = teacher.p(tb.attn.wq);
            s.p(sb.attn.wk) = teacher.p(tb.attn.wk);
            s.p(sb.attn.wv) = teacher.p(tb.attn.wv);
            s.p(sb.attn.wo) = teacher.p(tb.attn.wo);
        } else {
            s.p(sb.mixer.wc) = teacher.p(tb.attn.wq);
            s.p(sb.mixer.wb) = teacher.p(tb.attn.wk);
            s.p(sb.mixer.wx) = teacher.p(tb.attn.wv);
            s.p(sb.mixer.wo) = teacher.p(tb.attn.wo);
            s.p(sb.mixer.wa).zero();
            s.p(sb.mixer.ba).fill(kTransferDecayLogit);
            Tensor& conv = s.p(sb.mixer.conv);
            conv.zero();
            for (i64 c = 0; c < student_cfg.d_model; ++c) conv.at(c, 0) = 1.0;
            s.p(sb.mixer.gate).fill(1.0);
        }
    }
    return s;
}

// ---------------------------------------------------------------------------
// Layer primitives with caches for the hand-written backward passes
// ---------------------------------------------------------------------------

namespace detail {

struct LnCache {
    Tensor xhat;    // (T, d)
    Tensor invstd;  // (T)
};

inline void layernorm_forward(const Tensor& x, const Tensor& scale, const Tensor& bias,
                              Tensor& z, LnCache& cache) {
    const i64 t = x.dim(0), d = x.dim(1);
    z = Tensor({t, d});
    cache.xhat = Tensor({t, d});
    cache.invstd = Tensor({t});
    for (i64 i = 0; i < t; ++i) {
        const double* xr = x.ptr() + i * d;
        double mu = 0.0;
        for (i64 c = 0; c < d; ++c) mu += xr[c];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (i64 c = 0; c < d; ++c) {
            const double dv = xr[c] - mu;
            var += dv * dv;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + kLnEps);
        cache.invstd[i] = inv;
        double* xh = cache.xhat.ptr() + i * d;
        double* zr = z.ptr() + i * d;
        for (i64 c = 0; c < d; ++c) {
            xh[c] = (xr[c] - mu) * inv;
            zr[c] = scale[c] * xh[c] + bias[c];
        }
    }
}

// dz -> dx (returned into dx, accumulated), plus optional dscale/dbias.
inline void layernorm_backward(const Tensor& dz, const Tensor& scale, const LnCache& cache,
                               Tensor& dx_accum, Tensor* dscale, Tensor* dbias) {
    const i64 t = dz.dim(0), d = dz.dim(1);
    for (i64 i = 0; i < t; ++i) {
        const double* dzr = dz.ptr() + i * d;
        const double* xh = cache.xhat.ptr() + i * d;
        const double inv = cache.invstd[i];
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (i64 c = 0; c < d; ++c) {
            const double dxh = dzr[c] * scale[c];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[c];
        }
        mean_dxhat /= static_cast<double>(d);
        mean_dxhat_xhat /= static_cast<double>(d);
        double* dxr = dx_accum.ptr() + i * d;
        for (i64 c = 0; c < d; ++c) {
            const double dxh = dzr[c] * scale[c];
            dxr[c] += inv * (dxh - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
        if (dscale)
            for (i64 c = 0; c < d; ++c) (*dscale)[c] += dzr[c] * xh[c];
        if (dbias)
            for (i64 c = 0; c < d; ++c) (*dbias)[c] += dzr[c];
    }
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
inline double gelu_deriv(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014326779399461;
    return cdf + x * pdf;
}

struct MlpCache {
    Tensor a1;  // (T, d_mlp) pre-activation
    Tensor h1;  // (T, d_mlp) gelu(a1)
};

inline Tensor mlp_forward(const Model& m, const BlockIdx& b, const Tensor& z, MlpCache& cache) {
    const Tensor& w1 = m.p(b.w1);
    const Tensor& b1 = m.p(b.b1);
    const Tensor& w2 = m.p(b.w2);
    const Tensor& b2 = m.p(b.b2);
    const i64 t = z.dim(0), dm = w1.dim(1), d = w2.dim(1);
    cache.a1 = matmul(z, w1);
    for (i64 i = 0; i < t; ++i)
        for (i64 c = 0; c < dm; ++c) cache.a1.at(i, c) += b1[c];
    cache.h1 = Tensor({t, dm});
    for (i64 i = 0; i < t * dm; ++i) cache.h1[i] = gelu(cache.a1[i]);
    Tensor out = matmul(cache.h1, w2);
    for (i64 i = 0; i < t; ++i)
        for (i64 c = 0; c < d; ++c) out.at(i, c) += b2[c];
    return out;
}

inline void mlp_backward(const Model& m, const BlockIdx& b, const Tensor& z,
                         const MlpCache& cache, const Tensor& dout, Grads& grads,
                         Tensor& dz_accum) {
    const Tensor& w1 = m.p(b.w1);
    const Tensor& w2 = m.p(b.w2);
    const i64 t = dout.dim(0), dm = w1.dim(1), d = w2.dim(1);
    if (!grads.g[b.w2].empty()) matmul_into(grads.g[b.w2], cache.h1, dout, true, false, 1.0, 1.0);
    if (!grads.g[b.b2].empty())
        for (i64 i = 0; i < t; ++i)
            for (i64 c = 0; c < d; ++c) grads.g[b.b2][c] += dout.at(i, c);
    Tensor dh1 = matmul(dout, w2, false, true);
    for (i64 i = 0; i < t * dm; ++i) dh1[i] *= gelu_deriv(cache.a1[i]);
    if (!grads.g[b.w1].empty()) matmul_into(grads.g[b.w1], z, dh1, true, false, 1.0, 1.0);
    if (!grads.g[b.b1].empty())
        for (i64 i = 0; i < t; ++i)
            for (i64 c = 0; c < dm; ++c) grads.g[b.b1][c] += dh1.at(i, c);
    matmul_into(dz_accum, dh1, w1, false, true, 1.0, 1.0);
}

// ---- attention layer (branch after the shared input norm) ----

struct AttnCache {
    Tensor q, k, v;           // (T, d) packed heads
    std::vector<Tensor> p;    // per head (T, T)
    Tensor heads_out;         // (T, d) concatenated A_h V_h
};

inline Tensor attn_branch_forward(const Model& m, const BlockIdx& b, const Tensor& z,
                                  AttnCache& cache) {
    const i64 t = z.dim(0), d = m.cfg.d_model, h = m.cfg.n_heads, hd = m.cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    cache.q = matmul(z, m.p(b.attn.wq));
    cache.k = matmul(z, m.p(b.attn.wk));
    cache.v = matmul(z, m.p(b.attn.wv));
    cache.p.assign(static_cast<size_t>(h), Tensor());
    cache.heads_out = Tensor({t, d});
    std::vector<double> row(static_cast<size_t>(t));
    for (i64 head = 0; head < h; ++head) {
        const double* qp = cache.q.ptr() + head * hd;
        const double* kp = cache.k.ptr() + head * hd;
        Tensor& p = cache.p[static_cast<size_t>(head)];
        p = Tensor({t, t});
        for (i64 i = 0; i < t; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (i64 j = 0; j <= i; ++j) {
                double s = 0.0;
                for (i64 c = 0; c < hd; ++c) s += qp[i * d + c] * kp[j * d + c];
                s *= scale;
                row[static_cast<size_t>(j)] = s;
                mx = std::max(mx, s);
            }
            double zsum = 0.0;
            for (i64 j = 0; j <= i; ++j) {
                row[static_cast<size_t>(j)] = std::exp(row[static_cast<size_t>(j)] - mx);
                zsum += row[static_cast<size_t>(j)];
            }
            double* pr = p.ptr() + i * t;
            for (i64 j = 0; j <= i; ++j) pr[j] = row[static_cast<size_t>(j)] / zsum;
        }
        // heads_out[:, head*hd:(head+1)*hd] = P @ V_head
        gemm_raw(false, false, t, hd, t, 1.0, p.ptr(), t, cache.v.ptr() + head * hd, d, 0.0,
                 cache.heads_out.ptr() + head * hd, d);
    }
    return matmul(cache.heads_out, m.p(b.attn.wo));
}

inline void attn_branch_backward(const Model& m, const BlockIdx& b, const Tensor& z,
                                 const AttnCache& cache, const Tensor& dout, Grads& grads,
                                 Tensor& dz_accum) {
    const i64 t = dout.dim(0), d = m.cfg.d_model, h = m.cfg.n_heads, hd = m.cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    if (!grads.g[b.attn.wo].empty())
        matmul_into(grads.g[b.attn.wo], cache.heads_out, dout, true, false, 1.0, 1.0);
    Tensor dheads = matmul(dout, m.p(b.attn.wo), false, true);  // (T, d)
    Tensor dq({t, d}), dk({t, d}), dv({t, d});
    Tensor dp({t, t}), ds({t, t});
    for (i64 head = 0; head < h; ++head) {
        const Tensor& p = cache.p[static_cast<size_t>(head)];
        // dV_head = P^T dheads_head ; dP = dheads_head V_head^T
        gemm_raw(true, false, t, hd, t, 1.0, p.ptr(), t, dheads.ptr() + head * hd, d, 0.0,
                 dv.ptr() + head * hd, d);
        gemm_raw(false, true, t, t, hd, 1.0, dheads.ptr() + head * hd, d,
                 cache.v.ptr() + head * hd, d, 0.0, dp.ptr(), t);
        // softmax backward restricted to the causal support
        for (i64 i = 0; i < t; ++i) {
            const double* pr = p.ptr() + i * t;
            const double* dpr = dp.ptr() + i * t;
            double dot = 0.0;
            for (i64 j = 0; j <= i; ++j) dot += pr[j] * dpr[j];
            double* dsr = ds.ptr() + i * t;
            for (i64 j = 0; j <= i; ++j) dsr[j] = pr[j] * (dpr[j] - dot);
            for (i64 j = i + 1; j < t; ++j) dsr[j] = 0.0;
        }
        // dQ_head = scale * dS K_head ; dK_head = scale * dS^T Q_head
        gemm_raw(false, false, t, hd, t, scale, ds.ptr(), t, cache.k.ptr() + head * hd, d, 0.0,
                 dq.ptr() + head * hd, d);
        gemm_raw(true, false, t, hd, t, scale, ds.ptr(), t, cache.q.ptr() + head * hd, d, 0.0,
                 dk.ptr() + head * hd, d);
    }
    if (!grads.g[b.attn.wq].empty()) matmul_into(grads.g[b.attn.wq], z, dq, true, false, 1.0, 1.0);
    if (!grads.g[b.attn.wk].empty()) matmul_into(grads.g[b.attn.wk], z, dk, true, false, 1.0, 1.0);
    if (!grads.g[b.attn.wv].empty()) matmul_into(grads.g[b.attn.wv], z, dv, true, false, 1.0, 1.0);
    matmul_into(dz_accum, dq, m.p(b.attn.wq), false, true, 1.0, 1.0);
    matmul_into(dz_accum, dk, m.p(b.attn.wk), false, true, 1.0, 1.0);
    matmul_into(dz_accum, dv, m.p(b.attn.wv), false, true, 1.0, 1.0);
}

// ---- ssd mixer layer (branch after the shared input norm) ----

struct MixerCache {
    Tensor cp, bp;               // (T, H*N) projections
    Tensor a_logits;             // (T, H)
    Tensor xp;                   // (T, d) pre-conv value path
    Tensor xc;                   // (T, d) post-conv
    std::vector<mixers::SsdParams> head_params;  // per head
    std::vector<Tensor> head_x;                  // per head (T, hd)
    std::vector<Tensor> head_states;             // per head (T, N, hd)
    Tensor y;                    // (T, d) concatenated head outputs, pre-gate
    bool injected = false;       // head_states absent; y came from injected matrices
};

inline void mixer_projections(const Model& m, const BlockIdx& b, const Tensor& z,
                              MixerCache& cache) {
    const i64 t = z.dim(0), h = m.cfg.n_heads, n = m.cfg.state_size();
    cache.cp = matmul(z, m.p(b.mixer.wc));
    cache.bp = matmul(z, m.p(b.mixer.wb));
    cache.a_logits = matmul(z, m.p(b.mixer.wa));
    const Tensor& ba = m.p(b.mixer.ba);
    for (i64 i = 0; i < t; ++i)
        for (i64 head = 0; head < h; ++head) cache.a_logits.at(i, head) += ba[head];
    cache.xp = matmul(z, m.p(b.mixer.wx));
    // depthwise causal convolution over the value path
    const Tensor& conv = m.p(b.mixer.conv);
    const i64 d = m.cfg.d_model;
    cache.xc = Tensor({t, d});
    for (i64 i = 0; i < t; ++i)
        for (i64 c = 0; c < d; ++c) {
            double acc = 0.0;
            for (i64 j = 0; j < kConvWidth && j <= i; ++j)
                acc += conv.at(c, j) * cache.xp.at(i - j, c);
            cache.xc.at(i, c) = acc;
        }
    // per-head parameter bundles
    cache.head_params.assign(static_cast<size_t>(h), mixers::SsdParams{});
    for (i64 head = 0; head < h; ++head) {
        mixers::SsdParams& p = cache.head_params[static_cast<size_t>(head)];
        p.form = mixers::DecayForm::SigmoidLogit;
        p.a_raw = Tensor({t});
        p.b = Tensor({t, n});
        p.c = Tensor({t, n});
        for (i64 i = 0; i < t; ++i) {
            p.a_raw[i] = cache.a_logits.at(i, head);
            for (i64 s = 0; s < n; ++s) {
                p.b.at(i, s) = cache.bp.at(i, head * n + s);
                p.c.at(i, s) = cache.cp.at(i, head * n + s);
            }
        }
    }
}

// Full branch forward. When `inject` is non-null its matrices replace the
// per-head mixer matrices (debug mode for plumbing checks).
inline Tensor mixer_branch_forward(const Model& m, const BlockIdx& b, const Tensor& z,
                                   MixerCache& cache, const std::vector<Tensor>* inject = nullptr) {
    const i64 t = z.dim(0), d = m.cfg.d_model, h = m.cfg.n_heads, hd = m.cfg.head_dim();
    mixer_projections(m, b, z, cache);
    cache.head_x.assign(static_cast<size_t>(h), Tensor());
    cache.head_states.assign(static_cast<size_t>(h), Tensor());
    cache.y = Tensor({t, d});
    cache.injected = inject != nullptr;
    for (i64 head = 0; head < h; ++head) {
        Tensor& hx = cache.head_x[static_cast<size_t>(head)];
        hx = Tensor({t, hd});
        for (i64 i = 0; i < t; ++i)
            for (i64 c = 0; c < hd; ++c) hx.at(i, c) = cache.xc.at(i, head * hd + c);
        Tensor hy;
        if (inject) {
            const Tensor& mat = (*inject)[static_cast<size_t>(head)];
            check(mat.rank() == 2 && mat.dim(0) == t && mat.dim(1) == t,
                  "mixer injection: bad matrix shape");
            hy = matmul(mat, hx);
        } else {
            hy = mixers::scan_ssd(cache.head_params[static_cast<size_t>(head)], hx,
                                  &cache.head_states[static_cast<size_t>(head)]);
        }
        for (i64 i = 0; i < t; ++i)
            for (i64 c = 0; c < hd; ++c) cache.y.at(i, head * hd + c) = hy.at(i, c);
    }
    // gate then output projection
    const Tensor& gate = m.p(b.mixer.gate);
    Tensor gy({t, d});
    for (i64 i = 0; i < t; ++i)
        for (i64 c = 0; c < d; ++c) gy.at(i, c) = gate[c] * cache.y.at(i, c);
    return matmul(gy, m.p(b.mixer.wo));
}

inline void mixer_branch_backward(const Model& m, const BlockIdx& b, const Tensor& z,
                                  const MixerCache& cache, const Tensor& dout, Grads& grads,
                                  Tensor& dz_accum) {
    check(!cache.injected, "mixer_branch_backward: cannot backprop through injected matrices");
    const i64 t = dout.dim(0), d = m.cfg.d_model, h = m.cfg.n_heads, hd = m.cfg.head_dim();
    const i64 n = m.cfg.state_size();
    const Tensor& gate = m.p(b.mixer.gate);

    // through W_o and the gate
    Tensor gy({t, d});
    for (i64 i = 0; i < t; ++i)
        for (i64 c = 0; c < d; ++c) gy.at(i, c) = gate[c] * cache.y.at(i, c);
    if (!grads.g[b.mixer.wo].empty())
        matmul_into(grads.g[b.mixer.wo], gy, dout, true, false, 1.0, 1.0);
    Tensor dgy = matmul(dout, m.p(b.mixer.wo), false, true);
    if (!grads.g[b.mixer.gate].empty())
        for (i64 i = 0; i < t; ++i)
            for (i64 c = 0; c < d; ++c) grads.g[b.mixer.gate][c] += dgy.at(i, c) * cache.y.at(i, c);
    Tensor dy({t, d});
    for (i64 i = 0; i < t; ++i)
        for (i64 c = 0; c < d; ++c) dy.at(i, c) = dgy.at(i, c) * gate[c];

    // per-head scan adjoints
    Tensor dcp({t, h * n}), dbp({t, h * n}), dalogits({t, h}), dxc({t, d});
    for (i64 head = 0; head < h; ++head) {
        Tensor dhy({t, hd});
        for (i64 i = 0; i < t; ++i)
            for (i64 c = 0; c < hd; ++c) dhy.at(i, c) = dy.at(i, head * hd + c);
        Tensor dhx;
        mixers::SsdGrads sg = mixers::ssd_scan_backward(
            cache.head_params[static_cast<size_t>(head)], cache.head_x[static_cast<size_t>(head)],
            cache.head_states[static_cast<size_t>(head)], dhy, dhx);
        for (i64 i = 0; i < t; ++i) {
            dalogits.at(i, head) = sg.a_raw[i];
            for (i64 s = 0; s < n; ++s) {
                dbp.at(i, head * n + s) = sg.b.at(i, s);
                dcp.at(i, head * n + s) = sg.c.at(i, s);
            }
            for (i64 c = 0; c < hd; ++c) dxc.at(i, head * hd + c) = dhx.at(i, c);
        }
    }

    // conv backward
    const Tensor& conv = m.p(b.mixer.conv);
    Tensor dxp({t, d});
    for (i64 i = 0; i < t; ++i)
        for (i64 c = 0; c < d; ++c) {
            double acc = 0.0;
            for (i64 j = 0; j < kConvWidth && i + j < t; ++j)
                acc += conv.at(c, j) * dxc.at(i + j, c);
            dxp.at(i, c) = acc;
        }
    if (!grads.g[b.mixer.conv].empty()) {
        Tensor& dconv = grads.g[b.mixer.conv];
        for (i64 c = 0; c < d; ++c)
            for (i64 j = 0; j < kConvWidth; ++j) {
                double acc = 0.0;
                for (i64 i = j; i < t; ++i) acc += dxc.at(i, c) * cache.xp.at(i - j, c);
                dconv.at(c, j) += acc;
            }
    }

    // projection weights and flow into z
    if (!grads.g[b.mixer.wc].empty())
        matmul_into(grads.g[b.mixer.wc], z, dcp, true, false, 1.0, 1.0);
    if (!grads.g[b.mixer.wb].empty())
        matmul_into(grads.g[b.mixer.wb], z, dbp, true, false, 1.0, 1.0);
    if (!grads.g[b.mixer.wx].empty())
        matmul_into(grads.g[b.mixer.wx], z, dxp, true, false, 1.0, 1.0);
    if (!grads.g[b.mixer.wa].empty())
        matmul_into(grads.g[b.mixer.wa], z, dalogits, true, false, 1.0, 1.0);
    if (!grads.g[b.mixer.ba].empty())
        for (i64 i = 0; i < t; ++i)
            for (i64 head = 0; head < h; ++head) grads.g[b.mixer.ba][head] += dalogits.at(i, head);
    matmul_into(dz_accum, dcp, m.p(b.mixer.wc), false, true, 1.0, 1.0);
    matmul_into(dz_accum, dbp, m.p(b.mixer.wb), false, true, 1.0, 1.0);
    matmul_into(dz_accum, dxp, m.p(b.mixer.wx), false, true, 1.0, 1.0);
    matmul_into(dz_accum, dalogits, m.p(b.mixer.wa), false, true, 1.0, 1.0);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Whole-model forward/backward
// ---------------------------------------------------------------------------

struct LayerTrace {
    Tensor block_input;               // u_l (T, d)
    Tensor branch_output;             // sequence-mixing branch output, pre-residual (T, d)
    std::vector<Tensor> head_matrices;  // per head (T, T); attention or materialized ssd
};

struct ForwardTrace {
    Tensor logits;  // (T, vocab)
    std::vector<LayerTrace> layers;
};

struct ForwardOptions {
    bool want_trace = false;
    bool want_matrices = false;
    // per layer, per head replacement matrices for ssd layers (debug mode)
    const std::vector<std::vector<Tensor>>* inject = nullptr;
};

struct SeqCache {
    Tensor x0;  // embedding output (T, d)
    struct BlockCache {
        Tensor x_in;  // block input
        detail::LnCache ln;
        Tensor z;
        detail::AttnCache attn;
        detail::MixerCache mixer;
        detail::MlpCache mlp;
    };
    std::vector<BlockCache> blocks;
    detail::LnCache final_ln;
    Tensor x_final;  // input of the final norm
    Tensor zf;       // final norm output
    std::vector<i64> tokens;
};

inline Tensor model_forward(const Model& m, const std::vector<i64>& tokens,
                            const ForwardOptions& opts = {}, SeqCache* cache = nullptr,
                            ForwardTrace* trace = nullptr) {
    const ModelConfig& cfg = m.cfg;
    const i64 t = static_cast<i64>(tokens.size());
    check(t >= 1 && t <= cfg.max_seq_len, "model_forward: sequence length out of range");
    for (i64 tok : tokens)
        check(tok >= 0 && tok < cfg.vocab_size, "model_forward: token id out of range");
    const i64 d = cfg.d_model;

    SeqCache local;
    SeqCache& c = cache ? *cache : local;
    c.blocks.assign(static_cast<size_t>(cfg.n_layers), {});
    c.tokens = tokens;
    if (trace) {
        trace->layers.assign(static_cast<size_t>(cfg.n_layers), {});
    }

    const Tensor& tok_emb = m.p(m.idx.tok_emb);
    const Tensor& pos_emb = m.p(m.idx.pos_emb);
    Tensor x({t, d});
    for (i64 i = 0; i < t; ++i)
        for (i64 cdim = 0; cdim < d; ++cdim)
            x.at(i, cdim) = tok_emb.at(tokens[static_cast<size_t>(i)], cdim) + pos_emb.at(i, cdim);
    c.x0 = x;

    for (i64 l = 0; l < cfg.n_layers; ++l) {
        const BlockIdx& b = m.idx.blocks[static_cast<size_t>(l)];
        SeqCache::BlockCache& bc = c.blocks[static_cast<size_t>(l)];
        bc.x_in = x;
        detail::layernorm_forward(x, m.p(b.ln_scale), m.p(b.ln_bias), bc.z, bc.ln);
        Tensor branch;
        if (b.kind == LayerKind::Attention) {
            branch = detail::attn_branch_forward(m, b, bc.z, bc.attn);
        } else {
            const std::vector<Tensor>* inj =
                opts.inject ? &(*opts.inject)[static_cast<size_t>(l)] : nullptr;
            branch = detail::mixer_branch_forward(m, b, bc.z, bc.mixer, inj);
        }
        Tensor mlp_out = detail::mlp_forward(m, b, bc.z, bc.mlp);
        // parallel residual: x + mixer(LN(x)) + MLP(LN(x))
        for (i64 i = 0; i < t * d; ++i) x[i] += branch[i] + mlp_out[i];
        check_input(x.all_finite(),
                    "model_forward: non-finite activations in block " + std::to_string(l));
        if (trace) {
            LayerTrace& lt = trace->layers[static_cast<size_t>(l)];
            lt.block_input = bc.x_in;
            lt.branch_output = branch;
            if (opts.want_matrices) {
                if (b.kind == LayerKind::Attention) {
                    lt.head_matrices = bc.attn.p;
                } else if (opts.inject) {
                    lt.head_matrices = (*opts.inject)[static_cast<size_t>(l)];
                } else {
                    lt.head_matrices.clear();
                    for (const auto& hp : bc.mixer.head_params)
                        lt.head_matrices.push_back(mixers::materialize_ssd(hp));
                }
            }
        }
    }

    c.x_final = x;
    detail::layernorm_forward(x, m.p(m.idx.final_ln_scale), m.p(m.idx.final_ln_bias), c.zf,
                              c.final_ln);
    Tensor logits = matmul(c.zf, m.p(m.idx.lm_head));
    if (trace) trace->logits = logits;
    return logits;
}

// Backward from d(loss)/d(logits). Parameters whose grads slot is empty are
// frozen: their leaf gradients are skipped, but gradient still flows through
// them to earlier layers.
inline void model_backward(const Model& m, const SeqCache& c, const Tensor& dlogits,
                           Grads& grads) {
    const ModelConfig& cfg = m.cfg;
    const i64 t = dlogits.dim(0), d = cfg.d_model;
    check(dlogits.dim(1) == cfg.vocab_size, "model_backward: bad dlogits shape");

    if (!grads.g[m.idx.lm_head].empty())
        matmul_into(grads.g[m.idx.lm_head], c.zf, dlogits, true, false, 1.0, 1.0);
    Tensor dzf = matmul(dlogits, m.p(m.idx.lm_head), false, true);
    Tensor dx({t, d});
    detail::layernorm_backward(
        dzf, m.p(m.idx.final_ln_scale), c.final_ln, dx,
        grads.g[m.idx.final_ln_scale].empty() ? nullptr : &grads.g[m.idx.final_ln_scale],
        grads.g[m.idx.final_ln_bias].empty() ? nullptr : &grads.g[m.idx.final_ln_bias]);

    for (i64 l = cfg.n_layers - 1; l >= 0; --l) {
        const BlockIdx& b = m.idx.blocks[static_cast<size_t>(l)];
        const SeqCache::BlockCache& bc = c.blocks[static_cast<size_t>(l)];
        Tensor dz({t, d});
        detail::mlp_backward(m, b, bc.z, bc.mlp, dx, grads, dz);
        if (b.kind == LayerKind::Attention)
            detail::attn_branch_backward(m, b, bc.z, bc.attn, dx, grads, dz);
        else
            detail::mixer_branch_backward(m, b, bc.z, bc.mixer, dx, grads, dz);
        // residual: dx flows through unchanged, plus the norm's contribution
        detail::layernorm_backward(
            dz, m.p(b.ln_scale), bc.ln, dx,
            grads.g[b.ln_scale].empty() ? nullptr : &grads.g[b.ln_scale],
            grads.g[b.ln_bias].empty() ? nullptr : &grads.g[b.ln_bias]);
    }

    if (!grads.g[m.idx.tok_emb].empty() || !grads.g[m.idx.pos_emb].empty()) {
        for (i64 i = 0; i < t; ++i)
            for (i64 cdim = 0; cdim < d; ++cdim) {
                if (!grads.g[m.idx.tok_emb].empty())
                    grads.g[m.idx.tok_emb].at(c.tokens[static_cast<size_t>(i)], cdim) +=
                        dx.at(i, cdim);
                if (!grads.g[m.idx.pos_emb].empty())
                    grads.g[m.idx.pos_emb].at(i, cdim) += dx.at(i, cdim);
            }
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

inline void softmax_rows(const Tensor& logits, Tensor& probs) {
    const i64 t = logits.dim(0), v = logits.dim(1);
    probs = Tensor({t, v});
    for (i64 i = 0; i < t; ++i) {
        const double* lr = logits.ptr() + i * v;
        double mx = lr[0];
        for (i64 j = 1; j < v; ++j) mx = std::max(mx, lr[j]);
        double z = 0.0;
        double* pr = probs.ptr() + i * v;
        for (i64 j = 0; j < v; ++j) {
            pr[j] = std::exp(lr[j] - mx);
            z += pr[j];
        }
        for (i64 j = 0; j < v; ++j) pr[j] /= z;
    }
}

// Next-token cross entropy, mean over the T-1 predicted positions.
// dlogits, when requested, is scaled by loss_scale.
inline double ce_loss(const Tensor& logits, const std::vector<i64>& tokens, Tensor* dlogits,
                      double loss_scale = 1.0) {
    const i64 t = logits.dim(0), v = logits.dim(1);
    check(static_cast<i64>(tokens.size()) == t && t >= 2, "ce_loss: need >= 2 tokens");
    Tensor probs;
    softmax_rows(logits, probs);
    const double count = static_cast<double>(t - 1);
    double loss = 0.0;
    if (dlogits) *dlogits = Tensor({t, v});
    for (i64 i = 0; i + 1 < t; ++i) {
        const i64 target = tokens[static_cast<size_t>(i + 1)];
        const double p = probs.at(i, target);
        loss -= std::log(std::max(p, 1e-300));
        if (dlogits) {
            double* dr = dlogits->ptr() + i * v;
            const double* pr = probs.ptr() + i * v;
            for (i64 j = 0; j < v; ++j) dr[j] = loss_scale * pr[j] / count;
            dr[target] -= loss_scale / count;
        }
    }
    return loss / count;
}

// Soft-target cross entropy against the teacher distribution, mean over all
// positions: -(1/T) sum_t sum_v P_teacher log Q_student.
inline double kd_loss(const Tensor& student_logits, const Tensor& teacher_probs, Tensor* dlogits,
                      double loss_scale = 1.0) {
    const i64 t = student_logits.dim(0), v = student_logits.dim(1);
    check(teacher_probs.dim(0) == t && teacher_probs.dim(1) == v, "kd_loss: shape mismatch");
    Tensor q;
    softmax_rows(student_logits, q);
    double loss = 0.0;
    if (dlogits) *dlogits = Tensor({t, v});
    const double inv_t = 1.0 / static_cast<double>(t);
    for (i64 i = 0; i < t; ++i) {
        const double* pr = teacher_probs.ptr() + i * v;
        const double* qr = q.ptr() + i * v;
        for (i64 j = 0; j < v; ++j) loss -= pr[j] * std::log(std::max(qr[j], 1e-300));
        if (dlogits) {
            double* dr = dlogits->ptr() + i * v;
            for (i64 j = 0; j < v; ++j) dr[j] = loss_scale * (qr[j] - pr[j]) * inv_t;
        }
    }
    return loss * inv_t;
}

// Mean held-out perplexity over non-overlapping windows.
inline double perplexity(const Model& m, const std::vector<uint16_t>& tokens, i64 seq_len,
                         i64 max_sequences) {
    check(seq_len >= 2, "perplexity: seq_len must be >= 2");
    const i64 have = static_cast<i64>(tokens.size()) / seq_len;
    const i64 count = std::min(max_sequences, have);
    check(count >= 1, "perplexity: not enough tokens");
    double total = 0.0;
    for (i64 s = 0; s < count; ++s) {
        std::vector<i64> seq(static_cast<size_t>(seq_len));
        for (i64 i = 0; i < seq_len; ++i)
            seq[static_cast<size_t>(i)] = tokens[static_cast<size_t>(s * seq_len + i)];
        Tensor logits = model_forward(m, seq);
        total += ce_loss(logits, seq, nullptr);
    }
    return std::exp(total / static_cast<double>(count));
}

}  // namespace mohawk::model
