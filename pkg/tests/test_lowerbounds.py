import json
import math

import numpy as np
import pytest

from adom_affine.adom import params_for, run
from adom_affine.graphs import star_source
from adom_affine.lowerbounds import (
    AdomSpanTracker,
    SearchTooLarge,
    SpanBudget,
    build_static_instance,
    build_tv_instance,
    compute_rule,
    nesterov_ratio,
    nesterov_residual,
    nesterov_solution,
    span_progress,
    split_matrix,
    star_transfer_rounds,
)
from adom_affine.problems import build_dual, kkt_solve

STATIC_CASES = [(37, 1, 3, 3, 12), (37, 1, 6, 3, 9), (1000, 1, 100, 100, 6), (50, 2, 20, 20, 8), (1e4, 1, 1000, 1000, 6)]


@pytest.fixture(scope="module")
def small_static():
    return build_static_instance(37.0, 1.0, 3.0, 3.0, 12)


class TestNesterov:
    def test_ratio(self):
        assert nesterov_ratio(4.0) == pytest.approx(1 / 3)
        assert nesterov_ratio(1.0) == 0.0
        assert nesterov_solution(9.0, 2) == pytest.approx(0.25)

    def test_residual_partial_sum(self):
        q2 = (1 / 3) ** 2
        k = np.arange(12, 1_000_012, dtype=float)
        assert nesterov_residual(4.0, 10) == pytest.approx(float(np.sum(q2**k)), rel=1e-12)

    def test_residual_examples(self):
        assert nesterov_residual(4.0, 0) == pytest.approx((1 / 3) ** 4 / (1 - 1 / 9))
        assert nesterov_residual(1.0, 5) == 0.0
        assert nesterov_residual(0.5, 5) == 0.0
        with pytest.raises(ValueError):
            nesterov_residual(4.0, -1)

    def test_residual_decreasing(self):
        vals = [nesterov_residual(25.0, N) for N in range(10)]
        assert all(a > b for a, b in zip(vals, vals[1:]))


class TestSplit:
    def test_sum_is_leading_chain_block(self):
        dim = 10
        total = sum(split_matrix(r, dim) for r in (1, 2, 3))
        want = 2 * np.eye(dim) - np.eye(dim, k=1) - np.eye(dim, k=-1)
        np.testing.assert_array_equal(total, want)

    @pytest.mark.parametrize("role", [1, 2, 3])
    def test_psd_and_bounded(self, role):
        ev = np.linalg.eigvalsh(split_matrix(role, 11))
        assert ev.min() >= -1e-12 and ev.max() <= 2 + 1e-12

    def test_compute_rule(self):
        assert compute_rule(1, 0, 6) == 1
        assert compute_rule(2, 1, 6) == 2
        assert compute_rule(3, 2, 6) == 3
        assert compute_rule(1, 3, 6) == 4
        assert compute_rule(1, 1, 6) == 1
        assert compute_rule(2, 0, 6) == 0
        assert compute_rule(3, 5, 6) == 6
        assert compute_rule(1, 6, 6) == 6
        assert compute_rule(0, 2, 6) == 2


class TestStaticInstance:
    @pytest.mark.parametrize("args", STATIC_CASES)
    def test_kappa_formula(self, args):
        L, mu = args[0], args[1]
        inst = build_static_instance(*args)
        beta = 2 * len(inst.S2) * (L - mu) / inst.m + mu * inst.n
        assert inst.kappa_g == pytest.approx(beta / (mu * inst.n))
        assert inst.kappa_g >= L / (512 * mu)

    def test_equal_constants(self):
        inst = build_static_instance(2.0, 2.0, 5.0, 5.0, 6)
        assert inst.kappa_g == 1.0
        assert nesterov_residual(inst.kappa_g, 0) == 0.0

    @pytest.mark.parametrize("args", STATIC_CASES)
    def test_sets_disjoint(self, args):
        inst = build_static_instance(*args)
        sets = [set(inst.S1), set(inst.S2), set(inst.S3)]
        assert all(sets) and not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
        assert {i for i, _ in inst.S1} == {i for i, _ in inst.S2}

    @pytest.mark.parametrize("args", STATIC_CASES)
    def test_node_hessians_in_range(self, args):
        inst = build_static_instance(*args)
        for i in range(inst.n):
            ev = np.linalg.eigvalsh(inst.node_hessian(i))
            assert ev.min() >= inst.mu_F * (1 - 1e-12)
            assert ev.max() <= inst.L_F * (1 + 1e-12)

    def test_global_hessian_structure(self, small_static):
        inst = small_static
        chain = sum(split_matrix(r, inst.dim) for r in (1, 2, 3))
        want = inst.alpha_nb * np.eye(inst.dim) + (inst.beta_nb - inst.alpha_nb) / 4 * chain
        np.testing.assert_allclose(inst.global_hessian(), want, atol=1e-12)
        g = inst.global_linear()
        assert g[0] == pytest.approx(-(inst.beta_nb - inst.alpha_nb) / 4)
        assert np.count_nonzero(g) == 1

    @pytest.mark.parametrize("args", STATIC_CASES)
    def test_bfs_distances_certify(self, args):
        inst = build_static_instance(*args)
        assert inst.Delta_A_bfs >= inst.Delta_A - 1e-9
        assert inst.Delta_W_bfs >= inst.Delta_W - 1e-9

    def test_lifted_problem(self, small_static):
        prob = small_static.to_quadratic_problem()
        x = kkt_solve(prob)
        np.testing.assert_allclose(x, small_static.lifted_solution(), atol=1e-9)

    def test_json(self, small_static):
        doc = json.loads(small_static.to_json())
        assert doc["kappa_g"] == small_static.kappa_g and doc["kind"] == "static"

    @pytest.mark.parametrize("bad", [(1, 2, 3, 3, 6), (2, 1, 0.5, 3, 6), (2, 1, 3, 3, 3)])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            build_static_instance(*bad)


class TestTVInstance:
    @pytest.mark.parametrize("chi,n", [(3, 3), (6, 6), (10, 9), (30, 30)])
    def test_node_count(self, chi, n):
        inst = build_tv_instance(37.0, 1.0, chi, 3.0, 6)
        assert inst.n == n
        assert inst.Delta_W_bfs == star_transfer_rounds(n) == n // 3 + 1

    @pytest.mark.parametrize("n", [3, 6, 9, 12])
    def test_star_ratio(self, n):
        assert star_source(n).chi == pytest.approx(n)

    def test_needs_three(self):
        with pytest.raises(ValueError):
            build_tv_instance(37.0, 1.0, 2.0, 3.0, 6)

    def test_s3_on_far_third(self):
        inst = build_tv_instance(37.0, 1.0, 6.0, 3.0, 6)
        v1, _, v3 = inst.source.thirds
        assert {i for i, _ in inst.S1} <= set(v1)
        assert {i for i, _ in inst.S3} <= set(v3)


class TestSpanProgress:
    def test_zero_budget(self, small_static):
        assert span_progress(small_static, SpanBudget()) == 0

    def test_one_compute(self, small_static):
        assert span_progress(small_static, SpanBudget(computes=1)) == 1

    def test_too_large(self):
        inst = build_static_instance(37.0, 1.0, 3.0, 3.0, 13)
        with pytest.raises(SearchTooLarge):
            span_progress(inst, SpanBudget(1, 1, 1))

    def test_negative_budget(self):
        with pytest.raises(ValueError):
            SpanBudget(-1, 0, 0)

    def test_reducing_comms_shrinks_prefix(self):
        inst = build_static_instance(37.0, 1.0, 6.0, 3.0, 9)
        full = SpanBudget(3, inst.Delta_W_bfs, inst.Delta_A_bfs)
        assert span_progress(inst, full) == 3
        assert span_progress(inst, full.reduced("comms")) < 3
        assert span_progress(inst, full.reduced("mults")) < 3

    def test_monotone_in_budget(self, small_static):
        vals = [span_progress(small_static, SpanBudget(c, c, c)) for c in range(5)]
        assert vals == sorted(vals)

    def test_result_json(self, small_static):
        res = span_progress(small_static, SpanBudget(2, 1, 1), return_result=True)
        doc = json.loads(res.to_json())
        assert doc["prefix"] == res.prefix
        assert doc["certified_bound"] == pytest.approx(nesterov_residual(small_static.kappa_g, max(res.prefix - 1, 0)))


class TestTracker:
    @pytest.mark.parametrize("kind", ["static", "tv"])
    def test_bounds_true_support(self, kind):
        build = build_static_instance if kind == "static" else build_tv_instance
        inst = build(37.0, 1.0, 6.0, 3.0, 9)
        dp = build_dual(inst.to_quadratic_problem(), inst.source)
        tracker = AdomSpanTracker(inst)
        ok = []

        def check(s, info):
            bound = tracker.advance()
            nz = np.flatnonzero(np.abs(info.g.reshape(inst.n, inst.m, inst.dim)).max(axis=(0, 1)) > 1e-13)
            ok.append(nz.size == 0 or nz.max() < bound)

        run(dp, params_for(dp), N=12, callback=check)
        assert all(ok)

    def test_monotone(self, small_static):
        tr = AdomSpanTracker(small_static)
        vals = [tr.advance() for _ in range(10)]
        assert vals == sorted(vals) and vals[0] >= 1
        assert math.isfinite(vals[-1])
