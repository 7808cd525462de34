"""Decompose-reconfigure-contract layer with closed-form parameter gradients.

A weight tensor ``w`` is Tucker-decomposed into a core ``g`` and factors
``u, v, z``. The core passes through a multiplicative gate and each factor
through a right residual map::

    g' = g * (1 + core_gate)
    u' = u @ (I + residual_u)      (same for v, z)
    w' = g' x_1 u' x_2 v' x_3 z'

All parameters at zero make both maps the identity, so ``w'`` is the plain
truncated Tucker reconstruction of ``w`` (and ``w`` itself at full ranks).

Between refreshes the factor matrices are held fixed. The core is always the
projection of the *current* ``w`` onto the cached factors, which keeps ``w``
trainable through the layer while gradients never pass through an SVD.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from cptr.errors import RankError, ShapeError
from cptr.tensor import TuckerFactors, hooi, hosvd, tucker_core, tucker_reconstruct

DECOMPOSITIONS = ("hosvd", "hooi")


@dataclass
class ReconfigParams:
    core_gate: np.ndarray
    residual_u: np.ndarray
    residual_v: np.ndarray
    residual_z: np.ndarray

    def __post_init__(self):
        r1, r2, r3 = self.core_gate.shape
        for name, r in (("residual_u", r1), ("residual_v", r2), ("residual_z", r3)):
            if getattr(self, name).shape != (r, r):
                raise ShapeError(f"{name} must be {r}x{r} for core_gate {self.core_gate.shape}")
        for f in fields(self):
            if not np.all(np.isfinite(getattr(self, f.name))):
                raise ShapeError(f"{f.name} has non-finite entries")

    @property
    def ranks(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.core_gate.shape)

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class CptrConfig:
    ranks: tuple[int, int, int]
    refresh_interval: int = 10
    decomposition: str = "hosvd"
    hooi_iters: int = field(default=10, compare=False)

    def __post_init__(self):
        if len(self.ranks) != 3 or min(self.ranks) < 1:
            raise RankError(f"ranks must be three positive integers, got {self.ranks}")
        if self.refresh_interval < 1:
            raise ValueError("refresh_interval must be >= 1")
        if self.decomposition not in DECOMPOSITIONS:
            raise ValueError(f"decomposition must be one of {DECOMPOSITIONS}")

    def validate_for(self, shape) -> None:
        if len(shape) != 3 or any(r > d for r, d in zip(self.ranks, shape)):
            raise RankError(f"ranks {self.ranks} exceed tensor shape {tuple(shape)}")


def init_identity_params(ranks) -> ReconfigParams:
    r1, r2, r3 = (int(r) for r in ranks)
    if min(r1, r2, r3) < 1:
        raise RankError(f"ranks must be positive, got {ranks}")
    return ReconfigParams(
        core_gate=np.zeros((r1, r2, r3)),
        residual_u=np.zeros((r1, r1)),
        residual_v=np.zeros((r2, r2)),
        residual_z=np.zeros((r3, r3)),
    )


def reconfigure(factors: TuckerFactors, params: ReconfigParams) -> TuckerFactors:
    if factors.ranks != params.ranks:
        raise ShapeError(f"factor ranks {factors.ranks} != parameter ranks {params.ranks}")
    u, v, z = factors.factors
    return TuckerFactors(
        core=factors.core * (1.0 + params.core_gate),
        factor_u=u + u @ params.residual_u,
        factor_v=v + v @ params.residual_v,
        factor_z=z + z @ params.residual_z,
    )


def refresh_decomposition(w: np.ndarray, config: CptrConfig) -> TuckerFactors:
    """Decompose ``w`` with the configured method; bit-stable for a fixed ``w``."""
    config.validate_for(w.shape)
    if config.decomposition == "hooi":
        return hooi(w, config.ranks, max_iters=config.hooi_iters)
    return hosvd(w, config.ranks)


def _factors_for(w, config, cache):
    if cache is None:
        return refresh_decomposition(w, config)
    if cache.shape != tuple(w.shape) or cache.ranks != tuple(config.ranks):
        raise ShapeError(f"cached decomposition {cache.shape}/{cache.ranks} does not fit {w.shape}")
    return TuckerFactors(tucker_core(w, *cache.factors), *cache.factors)


def cptr_apply(w: np.ndarray, config: CptrConfig, params: ReconfigParams,
               cache: TuckerFactors | None = None):
    """Return ``(w_prime, factors_used)``.

    With ``cache`` supplied its factor matrices are reused and only the core
    is re-projected from ``w``.
    """
    if w.ndim != 3:
        raise ShapeError(f"expected an order-3 weight, got shape {w.shape}")
    config.validate_for(w.shape)
    if params.ranks != tuple(config.ranks):
        raise ShapeError(f"parameter ranks {params.ranks} != configured {tuple(config.ranks)}")
    factors = _factors_for(w, config, cache)
    return tucker_reconstruct(reconfigure(factors, params)), factors


def cptr_vjp(params: ReconfigParams, factors: TuckerFactors, upstream: np.ndarray):
    """Pull ``upstream = dL/dw'`` back to the parameters and to ``w``.

    ``factors`` are the ones returned by :func:`cptr_apply`. Returns
    ``(param_grads, grad_w)``; ``grad_w`` treats the factor matrices as
    constants and differentiates only the core projection.
    """
    if upstream.shape != factors.shape:
        raise ShapeError(f"upstream {upstream.shape} does not match weight {factors.shape}")
    g = factors.core
    u, v, z = factors.factors
    re = reconfigure(factors, params)
    g2, u2, v2, z2 = re.core, *re.factors

    # dL/dg' = upstream x_1 u'^T x_2 v'^T x_3 z'^T
    d_core = np.einsum("ijk,ip,jq,ks->pqs", upstream, u2, v2, z2, optimize=True)
    d_gate = g * d_core
    d_u2 = np.einsum("ijk,pqs,jq,ks->ip", upstream, g2, v2, z2, optimize=True)
    d_v2 = np.einsum("ijk,pqs,ip,ks->jq", upstream, g2, u2, z2, optimize=True)
    d_z2 = np.einsum("ijk,pqs,ip,jq->ks", upstream, g2, u2, v2, optimize=True)
    grads = ReconfigParams(
        core_gate=d_gate,
        residual_u=u.T @ d_u2,
        residual_v=v.T @ d_v2,
        residual_z=z.T @ d_z2,
    )
    d_g = d_core * (1.0 + params.core_gate)
    grad_w = np.einsum("pqs,ip,jq,ks->ijk", d_g, u, v, z, optimize=True)
    return grads, grad_w


def cptr_param_gradients(w: np.ndarray, config: CptrConfig, params: ReconfigParams,
                         upstream: np.ndarray, cache: TuckerFactors | None = None) -> ReconfigParams:
    """Gradients of ``<upstream, w'>`` with respect to every reconfiguration parameter."""
    if upstream.shape != w.shape:
        raise ShapeError(f"upstream {upstream.shape} does not match weight {w.shape}")
    _, factors = cptr_apply(w, config, params, cache)
    return cptr_vjp(params, factors, upstream)[0]
