#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mohawk/gradcheck.hpp"
#include "mohawk/mixers.hpp"
#include "mohawk/rng.hpp"
#include "mohawk/svd.hpp"

using namespace mohawk;
using namespace mohawk::mixers;

namespace {

Tensor random_tensor(Rng& rng, std::vector<i64> shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (i64 i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

SsdParams random_ssd(Rng& rng, i64 t, i64 n, bool with_d, DecayForm form = DecayForm::SigmoidLogit) {
    SsdParams p;
    p.form = form;
    p.a_raw = random_tensor(rng, {t}, -2.0, 3.0);
    p.b = random_tensor(rng, {t, n});
    p.c = random_tensor(rng, {t, n});
    if (with_d) p.d = random_tensor(rng, {t});
    return p;
}

bool is_causal(const Tensor& m) {
    for (i64 i = 0; i < m.dim(0); ++i)
        for (i64 j = i + 1; j < m.dim(1); ++j)
            if (m.at(i, j) != 0.0) return false;
    return true;
}

}  // namespace

TEST_CASE("segsum definition") {
    Tensor x({3}, {1.0, 2.0, 3.0});
    Tensor s = segsum(x);
    REQUIRE(s.at(0, 0) == 0.0);
    REQUIRE(s.at(1, 1) == 0.0);
    REQUIRE(s.at(2, 2) == 0.0);
    REQUIRE(s.at(1, 0) == 2.0);
    REQUIRE(s.at(2, 0) == 5.0);
    REQUIRE(s.at(2, 1) == 3.0);
    REQUIRE(s.at(0, 1) == kNegInf);
    REQUIRE(s.at(0, 2) == kNegInf);
    REQUIRE(s.at(1, 2) == kNegInf);

    Tensor z = segsum(Tensor({4}));
    for (i64 i = 0; i < 4; ++i)
        for (i64 j = 0; j < 4; ++j) {
            if (i >= j)
                REQUIRE(z.at(i, j) == 0.0);
            else
                REQUIRE(z.at(i, j) == kNegInf);
        }
}

TEST_CASE("exp(segsum(log a)) equals direct products") {
    Rng rng(31);
    const i64 t = 16;
    Tensor a({t});
    for (i64 i = 0; i < t; ++i) a[i] = rng.uniform(0.1, 1.0);
    Tensor loga({t});
    for (i64 i = 0; i < t; ++i) loga[i] = std::log(a[i]);
    Tensor s = segsum(loga);
    for (i64 i = 0; i < t; ++i)
        for (i64 j = 0; j <= i; ++j) {
            double prod = 1.0;
            for (i64 k = j + 1; k <= i; ++k) prod *= a[k];
            double got = std::exp(s.at(i, j));
            REQUIRE(got == Catch::Approx(prod).epsilon(1e-12));
        }
    // the upper-triangle sentinel maps to exactly zero under exp
    REQUIRE(std::exp(s.at(0, t - 1)) == 0.0);
}

TEST_CASE("materialize_ssd matches the recurrence on a hand case") {
    // N=1, B=C=1, a = (., 1/2, 1/2): rows scale by the decay products
    SsdParams p;
    p.a_raw = Tensor({3});
    p.form = DecayForm::SigmoidLogit;
    // sigmoid(0) = 1/2; a[0] is never used by the mask
    p.a_raw[0] = 5.0;
    p.a_raw[1] = 0.0;
    p.a_raw[2] = 0.0;
    p.b = Tensor::full({3, 1}, 1.0);
    p.c = Tensor::full({3, 1}, 1.0);
    Tensor m = materialize_ssd(p);
    Tensor expect({3, 3}, {1.0, 0.0, 0.0, 0.5, 1.0, 0.0, 0.25, 0.5, 1.0});
    REQUIRE(max_abs_diff(m, expect) < 1e-15);

    // the recurrence itself is the oracle: feed basis vectors through the scan
    for (i64 col = 0; col < 3; ++col) {
        Tensor x({3, 1});
        x.at(col, 0) = 1.0;
        Tensor y = scan_ssd(p, x);
        for (i64 row = 0; row < 3; ++row) REQUIRE(y.at(row, 0) == Catch::Approx(m.at(row, col)));
    }
}

TEST_CASE("ssd with unit decay is causal linear attention") {
    Rng rng(32);
    const i64 t = 12, n = 3;
    SsdParams p = random_ssd(rng, t, n, false);
    p.a_raw.fill(50.0);  // sigmoid saturates to exactly 1
    Tensor m = materialize_ssd(p);
    Tensor cb = matmul(p.c, p.b, false, true);
    for (i64 i = 0; i < t; ++i)
        for (i64 j = 0; j < t; ++j) {
            double want = j <= i ? cb.at(i, j) : 0.0;
            REQUIRE(m.at(i, j) == want);
        }
}

TEST_CASE("materialize and scan agree") {
    Rng rng(33);
    for (int it = 0; it < 30; ++it) {
        i64 t = 1 + rng.uniform_int(32);
        i64 n = 1 + rng.uniform_int(4);
        i64 pd = 1 + rng.uniform_int(4);
        bool with_d = rng.uniform() < 0.5;
        auto form = rng.uniform() < 0.5 ? DecayForm::SigmoidLogit : DecayForm::ExpNegExp;
        SsdParams p = random_ssd(rng, t, n, with_d, form);
        Tensor x = random_tensor(rng, {t, pd});
        Tensor y_scan = scan_ssd(p, x);
        Tensor y_mat = matmul(materialize_ssd(p), x);
        REQUIRE(max_abs_diff(y_scan, y_mat) <= 1e-10);
    }
}

TEST_CASE("scan edge cases") {
    Rng rng(34);
    SsdParams p = random_ssd(rng, 8, 3, true);
    Tensor zero({8, 2});
    REQUIRE(max_abs(scan_ssd(p, zero)) == 0.0);

    SsdParams p1 = random_ssd(rng, 1, 4, true);
    Tensor x1 = random_tensor(rng, {1, 3});
    Tensor y1 = scan_ssd(p1, x1);
    double cb = 0.0;
    for (i64 i = 0; i < 4; ++i) cb += p1.c.at(0, i) * p1.b.at(0, i);
    for (i64 j = 0; j < 3; ++j)
        REQUIRE(y1.at(0, j) == Catch::Approx((cb + p1.d[0]) * x1.at(0, j)));
}

TEST_CASE("semiseparable transfer matrix") {
    Rng rng(35);
    const i64 t = 5, n = 2, m = 2, pdim = 3;
    SemiSepSystem sys;
    for (i64 k = 0; k < t; ++k) {
        sys.a.push_back(random_tensor(rng, {n, n}));
        sys.b.push_back(random_tensor(rng, {m, n}));
        sys.c.push_back(random_tensor(rng, {pdim, n}));
        sys.d.push_back(random_tensor(rng, {pdim, m}));
    }

    SECTION("memoryless limit: A = 0 leaves only D and first sub-blocks") {
        SemiSepSystem sys0 = sys;
        for (auto& a : sys0.a) a.zero();
        Tensor out = materialize_semisep(sys0);
        for (i64 bi = 0; bi < t; ++bi)
            for (i64 bj = 0; bj < t; ++bj) {
                if (bj > bi) continue;
                Tensor want({pdim, m});
                if (bi == bj)
                    want = sys0.d[static_cast<size_t>(bi)];
                else if (bi == bj + 1)
                    want = matmul(sys0.c[static_cast<size_t>(bi)],
                                  transpose(sys0.b[static_cast<size_t>(bj)]));
                for (i64 r = 0; r < pdim; ++r)
                    for (i64 c = 0; c < m; ++c)
                        REQUIRE(out.at(bi * pdim + r, bj * m + c) ==
                                Catch::Approx(want.at(r, c)).margin(1e-14));
            }
    }

    SECTION("order-1 scalar system reproduces materialize_ssd") {
        const i64 tt = 7;
        Rng r2(36);
        SsdParams ssd = random_ssd(r2, tt, 3, false);
        Tensor a = ssd.decays();
        // step k of the system (0-based here) carries decay a_k folded into C
        SemiSepSystem scalar;
        for (i64 k = 0; k < tt; ++k) {
            Tensor ak({1, 1});
            ak.at(0, 0) = a[k];
            Tensor bk({1, 1}), ck({1, 1}), dk({1, 1});
            double cb = 0.0;
            for (i64 i = 0; i < 3; ++i) cb += ssd.c.at(k, i) * ssd.b.at(k, i);
            dk.at(0, 0) = cb;
            scalar.a.push_back(ak);
            scalar.b.push_back(bk);
            scalar.c.push_back(ck);
            scalar.d.push_back(dk);
        }
        // off-diagonal entries need rank-1 factors of <C_t, B_s>; with N=1 that
        // only works for rank-1 C B^T, so use a genuinely rank-1 instance
        SsdParams r1 = ssd;
        Tensor cv = random_tensor(r2, {tt, 1}), bv = random_tensor(r2, {tt, 1});
        r1.b = bv;
        r1.c = cv;
        for (i64 k = 0; k < tt; ++k) {
            scalar.b[static_cast<size_t>(k)].at(0, 0) = bv.at(k, 0);
            scalar.c[static_cast<size_t>(k)].at(0, 0) = a[k] * cv.at(k, 0);
            scalar.d[static_cast<size_t>(k)].at(0, 0) = cv.at(k, 0) * bv.at(k, 0);
        }
        Tensor from_sys = materialize_semisep(scalar);
        Tensor from_ssd = materialize_ssd(r1);
        REQUIRE(max_abs_diff(from_sys, from_ssd) < 1e-12);
    }

    SECTION("sub-diagonal blocks have rank at most N") {
        Tensor out = materialize_semisep(sys);
        for (i64 k = 1; k < t; ++k) {
            i64 rows = (t - k) * pdim, cols = k * m;
            Tensor h({rows, cols});
            for (i64 r = 0; r < rows; ++r)
                for (i64 c = 0; c < cols; ++c) h.at(r, c) = out.at(k * pdim + r, c);
            SvdResult sv = svd(h);
            if (sv.s.size() > n) REQUIRE(sv.s[n] <= 1e-9 * std::max(sv.s[0], 1e-30));
        }
    }
}

TEST_CASE("lowrank, retnet, toeplitz materializations") {
    Rng rng(37);
    const i64 t = 10, n = 3;

    SECTION("retnet at gamma -> 1 equals causal low-rank") {
        RetNetParams rp;
        rp.a = random_tensor(rng, {t, n});
        rp.b = random_tensor(rng, {t, n});
        rp.gamma_raw = 50.0;  // sigmoid saturates to 1
        CausalLowRankParams lp{rp.a, rp.b};
        REQUIRE(max_abs_diff(materialize_retnet(rp), materialize_lowrank(lp)) == 0.0);
    }

    SECTION("identity bands") {
        ToeplitzParams tp;
        tp.bands = Tensor({t});
        tp.bands[0] = 1.0;
        REQUIRE(max_abs_diff(materialize_toeplitz(tp), Tensor::identity(t)) == 0.0);
    }

    SECTION("retnet is ssd with constant decay") {
        RetNetParams rp;
        rp.a = random_tensor(rng, {t, n});
        rp.b = random_tensor(rng, {t, n});
        rp.gamma_raw = 0.7;
        SsdParams sp;
        sp.form = rp.form;
        sp.a_raw = Tensor::full({t}, rp.gamma_raw);
        sp.c = rp.a;  // query analog
        sp.b = rp.b;  // key analog
        REQUIRE(max_abs_diff(materialize_retnet(rp), materialize_ssd(sp)) <= 1e-12);
    }
}

TEST_CASE("causal softmax attention") {
    AttentionMixerInputs in;
    in.q = Tensor({2, 3});
    in.k = Tensor({2, 3});
    in.scale = 1.0 / std::sqrt(3.0);
    Tensor m = causal_softmax_attention(in);
    REQUIRE(m.at(0, 0) == 1.0);
    REQUIRE(m.at(0, 1) == 0.0);
    REQUIRE(m.at(1, 0) == Catch::Approx(0.5));
    REQUIRE(m.at(1, 1) == Catch::Approx(0.5));

    AttentionMixerInputs one;
    one.q = Tensor({1, 4});
    one.k = Tensor({1, 4});
    Tensor m1 = causal_softmax_attention(one);
    REQUIRE(m1.at(0, 0) == 1.0);

    Rng rng(38);
    AttentionMixerInputs r;
    r.q = random_tensor(rng, {9, 4});
    r.k = random_tensor(rng, {9, 4});
    r.scale = 0.5;
    Tensor mr = causal_softmax_attention(r);
    REQUIRE(is_causal(mr));
    for (i64 i = 0; i < 9; ++i) {
        double s = 0.0;
        for (i64 j = 0; j < 9; ++j) s += mr.at(i, j);
        REQUIRE(std::abs(s - 1.0) <= 1e-12);
    }
}

TEST_CASE("all families produce causal matrices") {
    Rng rng(39);
    for (int it = 0; it < 5; ++it) {
        i64 t = 2 + rng.uniform_int(12);
        i64 n = 1 + rng.uniform_int(std::min<i64>(3, t - 1));
        REQUIRE(is_causal(materialize_ssd(random_ssd(rng, t, n, true))));
        CausalLowRankParams lp{random_tensor(rng, {t, n}), random_tensor(rng, {t, n})};
        REQUIRE(is_causal(materialize_lowrank(lp)));
        RetNetParams rp;
        rp.a = random_tensor(rng, {t, n});
        rp.b = random_tensor(rng, {t, n});
        rp.gamma_raw = rng.uniform(-2.0, 2.0);
        REQUIRE(is_causal(materialize_retnet(rp)));
        ToeplitzParams tp{random_tensor(rng, {t})};
        REQUIRE(is_causal(materialize_toeplitz(tp)));
    }
}

TEST_CASE("ssd materialize backward matches finite differences") {
    Rng rng(40);
    for (auto form : {DecayForm::SigmoidLogit, DecayForm::ExpNegExp}) {
        const i64 t = 8, n = 3;
        SsdParams p = random_ssd(rng, t, n, true, form);
        Tensor w = random_tensor(rng, {t, t});  // fixed linear functional

        auto loss_of = [&](const SsdParams& q) { return dot(materialize_ssd(q), w); };
        SsdGrads g = ssd_materialize_backward(p, w);

        SsdParams probe = p;
        Tensor fd_a = finite_diff_grad(
            [&](const Tensor& v) {
                probe.a_raw = v;
                return loss_of(probe);
            },
            p.a_raw);
        probe = p;
        Tensor fd_b = finite_diff_grad(
            [&](const Tensor& v) {
                probe.b = v;
                return loss_of(probe);
            },
            p.b);
        probe = p;
        Tensor fd_c = finite_diff_grad(
            [&](const Tensor& v) {
                probe.c = v;
                return loss_of(probe);
            },
            p.c);
        probe = p;
        Tensor fd_d = finite_diff_grad(
            [&](const Tensor& v) {
                probe.d = v;
                return loss_of(probe);
            },
            p.d);
        REQUIRE(max_rel_err(g.a_raw, fd_a) <= 1e-6);
        REQUIRE(max_rel_err(g.b, fd_b) <= 1e-6);
        REQUIRE(max_rel_err(g.c, fd_c) <= 1e-6);
        REQUIRE(max_rel_err(g.d, fd_d) <= 1e-6);
    }
}

TEST_CASE("ssd scan backward matches finite differences") {
    Rng rng(41);
    const i64 t = 7, n = 3, pd = 2;
    SsdParams p = random_ssd(rng, t, n, true);
    Tensor x = random_tensor(rng, {t, pd});
    Tensor w = random_tensor(rng, {t, pd});

    auto loss_of = [&](const SsdParams& q, const Tensor& xin) {
        return dot(scan_ssd(q, xin), w);
    };

    Tensor states;
    scan_ssd(p, x, &states);
    Tensor dx;
    SsdGrads g = ssd_scan_backward(p, x, states, w, dx);

    SsdParams probe = p;
    Tensor fd_a = finite_diff_grad(
        [&](const Tensor& v) {
            probe.a_raw = v;
            return loss_of(probe, x);
        },
        p.a_raw);
    probe = p;
    Tensor fd_b = finite_diff_grad(
        [&](const Tensor& v) {
            probe.b = v;
            return loss_of(probe, x);
        },
        p.b);
    probe = p;
    Tensor fd_c = finite_diff_grad(
        [&](const Tensor& v) {
            probe.c = v;
            return loss_of(probe, x);
        },
        p.c);
    probe = p;
    Tensor fd_d = finite_diff_grad(
        [&](const Tensor& v) {
            probe.d = v;
            return loss_of(probe, x);
        },
        p.d);
    Tensor fd_x = finite_diff_grad([&](const Tensor& v) { return loss_of(p, v); }, x);
    REQUIRE(max_rel_err(g.a_raw, fd_a) <= 1e-6);
    REQUIRE(max_rel_err(g.b, fd_b) <= 1e-6);
    REQUIRE(max_rel_err(g.c, fd_c) <= 1e-6);
    REQUIRE(max_rel_err(g.d, fd_d) <= 1e-6);
    REQUIRE(max_rel_err(dx, fd_x) <= 1e-6);
}
