import numpy as np
import pytest

from cptr.errors import RankError, ShapeError
from cptr.reconfig import (
    CptrConfig,
    ReconfigParams,
    cptr_apply,
    cptr_param_gradients,
    cptr_vjp,
    init_identity_params,
    reconfigure,
    refresh_decomposition,
)
from cptr.tensor import TuckerFactors, hosvd, relative_error, tucker_core, tucker_reconstruct

from oracles import central_difference, rel_err


def random_params(rng, ranks, scale=0.3):
    r1, r2, r3 = ranks
    return ReconfigParams(
        core_gate=scale * rng.standard_normal((r1, r2, r3)),
        residual_u=scale * rng.standard_normal((r1, r1)),
        residual_v=scale * rng.standard_normal((r2, r2)),
        residual_z=scale * rng.standard_normal((r3, r3)),
    )


def test_identity_params_shapes():
    p = init_identity_params((2, 2, 2))
    assert p.core_gate.shape == (2, 2, 2) and not p.core_gate.any()
    for m in (p.residual_u, p.residual_v, p.residual_z):
        assert m.shape == (2, 2) and not m.any()


def test_params_validate_shapes():
    with pytest.raises(ShapeError):
        ReconfigParams(np.zeros((2, 2, 2)), np.zeros((2, 2)), np.zeros((3, 3)), np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        ReconfigParams(np.full((1, 1, 1), np.nan), np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))


def test_config_validation():
    with pytest.raises(ValueError):
        CptrConfig((2, 2, 2), refresh_interval=0)
    with pytest.raises(RankError):
        CptrConfig((0, 2, 2))
    with pytest.raises(ValueError):
        CptrConfig((2, 2, 2), decomposition="cp")


class TestReconfigure:
    def test_identity_unchanged(self, rng):
        f = hosvd(rng.standard_normal((3, 3, 3)), (2, 2, 2))
        out = reconfigure(f, init_identity_params((2, 2, 2)))
        for a, b in zip((out.core, *out.factors), (f.core, *f.factors)):
            np.testing.assert_array_equal(a, b)

    def test_gate_one_doubles_core(self, rng):
        f = hosvd(rng.standard_normal((3, 3, 3)), (2, 2, 2))
        p = init_identity_params((2, 2, 2))
        p.core_gate[:] = 1.0
        out = reconfigure(f, p)
        np.testing.assert_array_equal(out.core, 2 * f.core)
        for a, b in zip(out.factors, f.factors):
            np.testing.assert_array_equal(a, b)

    def test_direct_formula(self, rng):
        f = hosvd(rng.standard_normal((3, 3, 3)), (2, 2, 2))
        p = random_params(rng, (2, 2, 2))
        out = reconfigure(f, p)
        np.testing.assert_allclose(out.core, f.core * (1 + p.core_gate), rtol=0, atol=1e-12)
        for got, base, res in zip(out.factors, f.factors, (p.residual_u, p.residual_v, p.residual_z)):
            np.testing.assert_allclose(got, base @ (np.eye(2) + res), rtol=0, atol=1e-12)

    def test_rank_mismatch(self, rng):
        f = hosvd(rng.standard_normal((3, 3, 3)), (2, 2, 2))
        with pytest.raises(ShapeError):
            reconfigure(f, init_identity_params((1, 2, 2)))


class TestApply:
    def test_zero_tensor(self, rng):
        cfg = CptrConfig((2, 2, 2))
        out, _ = cptr_apply(np.zeros((4, 4, 4)), cfg, random_params(rng, (2, 2, 2)))
        assert not out.any()

    def test_identity_full_rank(self, rng):
        w = rng.standard_normal((4, 3, 5))
        out, _ = cptr_apply(w, CptrConfig(w.shape), init_identity_params(w.shape))
        assert relative_error(w, out) <= 1e-8

    def test_identity_truncated_equals_tucker(self, rng):
        w = rng.standard_normal((5, 4, 3))
        ranks = (2, 3, 2)
        out, _ = cptr_apply(w, CptrConfig(ranks), init_identity_params(ranks))
        np.testing.assert_array_equal(out, tucker_reconstruct(hosvd(w, ranks)))

    def test_pipeline_composition(self, rng):
        w = rng.standard_normal((4, 4, 4))
        p = random_params(rng, (2, 2, 2), scale=0.1)
        out, factors = cptr_apply(w, CptrConfig((2, 2, 2)), p)
        f = hosvd(w, (2, 2, 2))
        g = f.core * (1 + p.core_gate)
        u = f.factor_u @ (np.eye(2) + p.residual_u)
        v = f.factor_v @ (np.eye(2) + p.residual_v)
        z = f.factor_z @ (np.eye(2) + p.residual_z)
        expected = np.einsum("pqs,ip,jq,ks->ijk", g, u, v, z)
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)
        np.testing.assert_array_equal(factors.factor_u, f.factor_u)

    def test_homogeneous_in_core_path(self, rng):
        w = rng.standard_normal((4, 3, 3))
        cfg = CptrConfig((2, 2, 2))
        p = random_params(rng, (2, 2, 2))
        p.residual_u[:] = p.residual_v[:] = p.residual_z[:] = 0.0
        q = ReconfigParams(2 * (1 + p.core_gate) - 1, p.residual_u, p.residual_v, p.residual_z)
        a, _ = cptr_apply(w, cfg, p)
        b, _ = cptr_apply(w, cfg, q)
        np.testing.assert_allclose(b, 2 * a, rtol=1e-12, atol=1e-14)

    def test_errors(self, rng):
        with pytest.raises(RankError):
            cptr_apply(np.zeros((2, 2, 2)), CptrConfig((3, 1, 1)), init_identity_params((3, 1, 1)))
        with pytest.raises(ShapeError):
            cptr_apply(np.zeros((2, 2)), CptrConfig((1, 1, 1)), init_identity_params((1, 1, 1)))
        with pytest.raises(ShapeError):
            cptr_apply(np.zeros((2, 2, 2)), CptrConfig((1, 1, 1)), init_identity_params((2, 1, 1)))


class TestGradients:
    def test_zero_upstream(self, rng):
        w = rng.standard_normal((4, 3, 2))
        g = cptr_param_gradients(w, CptrConfig((2, 2, 1)), random_params(rng, (2, 2, 1)), np.zeros_like(w))
        for a in g.arrays().values():
            assert not a.any()

    def test_gate_closed_form(self, rng):
        w = rng.standard_normal((4, 3, 2))
        cfg, p = CptrConfig((3, 2, 2)), random_params(rng, (3, 2, 2))
        up = rng.standard_normal(w.shape)
        g = cptr_param_gradients(w, cfg, p, up)
        f = hosvd(w, cfg.ranks)
        re = reconfigure(f, p)
        projected = tucker_core(up, *re.factors)
        np.testing.assert_allclose(g.core_gate, f.core * projected, rtol=1e-12, atol=1e-14)

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((4, 3, 2))
        ranks = (int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 3)))
        cfg, p = CptrConfig(ranks), random_params(rng, ranks)
        up = rng.standard_normal(w.shape)
        g = cptr_param_gradients(w, cfg, p, up)

        def objective():
            return float(np.sum(up * cptr_apply(w, cfg, p)[0]))

        for name, arr in p.arrays().items():
            fd = central_difference(objective, arr)
            assert rel_err(getattr(g, name), fd).max() <= 1e-4, name

    def test_weight_gradient_with_cached_factors(self, rng):
        w = rng.standard_normal((4, 3, 2))
        cfg, p = CptrConfig((2, 2, 2)), random_params(rng, (2, 2, 2))
        cache = refresh_decomposition(w, cfg)
        up = rng.standard_normal(w.shape)
        _, dw = cptr_vjp(p, cptr_apply(w, cfg, p, cache)[1], up)
        fd = central_difference(lambda: float(np.sum(up * cptr_apply(w, cfg, p, cache)[0])), w)
        assert rel_err(dw, fd).max() <= 1e-4

    def test_upstream_shape_mismatch(self, rng):
        w = rng.standard_normal((4, 3, 2))
        with pytest.raises(ShapeError):
            cptr_param_gradients(w, CptrConfig((1, 1, 1)), init_identity_params((1, 1, 1)), np.zeros((4, 3)))


class TestRefresh:
    @pytest.mark.parametrize("method", ["hosvd", "hooi"])
    def test_bit_stable(self, rng, method):
        w = rng.standard_normal((6, 4, 5))
        cfg = CptrConfig((3, 2, 2), decomposition=method)
        a, b = refresh_decomposition(w, cfg), refresh_decomposition(w.copy(), cfg)
        for x, y in zip((a.core, *a.factors), (b.core, *b.factors)):
            np.testing.assert_array_equal(x, y)

    def test_cache_coherence(self, rng):
        w = rng.standard_normal((4, 4, 4))
        cfg = CptrConfig((2, 3, 2), refresh_interval=1)
        p = random_params(rng, (2, 3, 2))
        cached, _ = cptr_apply(w, cfg, p, refresh_decomposition(w, cfg))
        fresh, _ = cptr_apply(w, cfg, p)
        np.testing.assert_array_equal(cached, fresh)

    def test_stale_cache_shape_checked(self, rng):
        cfg = CptrConfig((2, 2, 2))
        cache = refresh_decomposition(rng.standard_normal((3, 3, 3)), cfg)
        with pytest.raises(ShapeError):
            cptr_apply(rng.standard_normal((4, 3, 3)), cfg, init_identity_params((2, 2, 2)), cache)

    def test_perturbation_stability(self, rng):
        # planted tensor with well separated unfolding spectra
        dims, ranks = (6, 5, 4), (3, 3, 2)
        u, v, z = (np.linalg.qr(rng.standard_normal((d, d)))[0] for d in dims)
        core = np.zeros(dims)
        for i in range(min(dims)):
            core[i, i, i] = 10.0 / (i + 1) ** 2
        w = tucker_reconstruct(TuckerFactors(core, u, v, z))
        cfg = CptrConfig(ranks)
        base = refresh_decomposition(w, cfg)
        delta = rng.standard_normal(dims)
        delta *= 1e-8 * np.linalg.norm(w) / np.linalg.norm(delta)
        moved = refresh_decomposition(w + delta, cfg)
        for a, b in zip(base.factors, moved.factors):
            assert np.abs(a - b).max() <= 1e-6
