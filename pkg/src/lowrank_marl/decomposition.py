"""CP decomposition by power iteration with deflation, refined by alternating
rank-one updates.

The power iteration supplies a starting point for each component in turn,
subtracting every recovered rank-one term before searching for the next.
Alternating minimization then revisits one component at a time and fits it
to the residual left by all the others.

All kernels work on a stack of independent tensors (leading batch axis) so
that many small problems can be solved in one vectorized pass; the public
single-tensor functions run a batch of one.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_rank, check_rng, check_tensor
from .tensor import CPForm, reconstruct

logger = logging.getLogger(__name__)

_TINY = np.finfo(float).tiny


class DegenerateTensorError(ValueError):
    """Raised when a power update keeps producing the zero vector."""


@dataclass(frozen=True)
class DecompConfig:
    """Tuning knobs for :func:`decompose` and :func:`~lowrank_marl.completion.complete`.

    ``power_tolerance`` bounds the summed squared change of the factor vectors
    between two power updates.  Alternating sweeps stop once a sweep lowers the
    objective by less than ``altmin_tolerance`` relative to its previous value.
    """

    rank: int = 1
    power_tolerance: float = 1e-9
    power_max_iters: int = 500
    altmin_max_sweeps: int = 200
    altmin_tolerance: float = 1e-8
    seed: Optional[int] = None
    max_init_retries: int = 10

    def __post_init__(self):
        check_rank(self.rank)
        if self.power_tolerance <= 0 or self.altmin_tolerance <= 0:
            raise ValueError("tolerances must be positive")
        if self.power_max_iters < 1 or self.altmin_max_sweeps < 0:
            raise ValueError("power_max_iters must be >= 1 and altmin_max_sweeps >= 0")
        if self.max_init_retries < 1:
            raise ValueError("max_init_retries must be at least 1")

    def replace(self, **changes) -> "DecompConfig":
        return dataclasses.replace(self, **changes)


# -- batched kernels ----------------------------------------------------------
#
# A batch of order-n tensors has shape (B, d_1, ..., d_n).  Vectors are (B, d_j),
# weights (B, r) and factors (B, r, d_j).


def _bcontract(t: np.ndarray, vectors, skip: Optional[int]) -> np.ndarray:
    """Batched ``T(u^1, .., I, .., u^n)``; identity in mode ``skip`` or none."""
    b, dims = t.shape[0], t.shape[1:]
    n = len(dims)
    out = t
    if skip is None:
        for j in reversed(range(n)):
            out = np.matmul(out.reshape(b, -1, dims[j]), vectors[j][:, :, None])
        return out.reshape(b)
    # trailing modes: (B, M, d) @ (B, d, 1)
    for j in reversed(range(skip + 1, n)):
        out = np.matmul(out.reshape(b, -1, dims[j]), vectors[j][:, :, None])
    # leading modes: (B, 1, d) @ (B, d, M)
    for j in range(skip):
        out = np.matmul(vectors[j][:, None, :], out.reshape(b, dims[j], -1))
    return out.reshape(b, dims[skip])


def _breconstruct(weights: np.ndarray, factors) -> np.ndarray:
    b, r = weights.shape
    dims = tuple(f.shape[2] for f in factors)
    if r == 0:
        return np.zeros((b,) + dims)
    kr = np.ones((b, r, 1))
    for f in factors[1:]:
        kr = (kr[:, :, :, None] * f[:, :, None, :]).reshape(b, r, -1)
    first = factors[0] * weights[:, :, None]
    return np.matmul(first.transpose(0, 2, 1), kr).reshape((b,) + dims)


def _brank_one(w: np.ndarray, vectors) -> np.ndarray:
    out = w[:, None] * vectors[0]
    for v in vectors[1:]:
        out = out[..., None] * v.reshape((v.shape[0],) + (1,) * (out.ndim - 1) + (v.shape[1],))
    return out


def _bnorm(t: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(t.reshape(t.shape[0], -1) ** 2, axis=1))


def _random_unit_vectors(dims, rng, b: int = 1) -> list:
    vs = [rng.standard_normal((b, d)) for d in dims]
    return [v / np.linalg.norm(v, axis=1, keepdims=True) for v in vs]


def _bpower_component(residual, cfg: DecompConfig, rng, live: np.ndarray):
    """Normalized power updates for every batch item flagged in ``live``."""
    b, dims = residual.shape[0], residual.shape[1:]
    n = len(dims)
    us = _random_unit_vectors(dims, rng, b)
    pending = live.copy()
    for _ in range(cfg.max_init_retries):
        active = pending.copy()
        failed = np.zeros(b, dtype=bool)
        for _ in range(cfg.power_max_iters):
            if not active.any():
                break
            change = np.zeros(b)
            for j in range(n):
                v = _bcontract(residual, us, j)
                norm = np.linalg.norm(v, axis=1)
                bad = active & (~np.isfinite(norm) | (norm <= _TINY))
                failed |= bad
                active &= ~bad
                v = v[active] / norm[active, None]
                change[active] += np.sum((v - us[j][active]) ** 2, axis=1)
                us[j][active] = v
            active &= change > cfg.power_tolerance
        pending = failed
        if not pending.any():
            return us
        # fresh random start for the items whose contraction vanished
        fresh = _random_unit_vectors(dims, rng, b)
        for j in range(n):
            us[j][pending] = fresh[j][pending]
    raise DegenerateTensorError(
        f"power update returned the zero vector after {cfg.max_init_retries} random restarts"
    )


def _bpower_iteration(t: np.ndarray, cfg: DecompConfig, rng):
    """Batched power iteration with deflation; zero residuals get weight 0."""
    b, dims = t.shape[0], t.shape[1:]
    residual = t.copy()
    weights = np.zeros((b, cfg.rank))
    factors = [np.zeros((b, cfg.rank, d)) for d in dims]
    for k in range(cfg.rank):
        live = _bnorm(residual) > 0
        us = _bpower_component(residual, cfg, rng, live)
        w = np.where(live, _bcontract(residual, us, None), 0.0)
        residual -= _brank_one(w, us)
        weights[:, k] = w
        for j in range(len(dims)):
            factors[j][:, k] = us[j]
    return weights, factors


def _bcross(factors, vectors, skip: Optional[int]) -> np.ndarray:
    """``prod_{i != skip} <u_k^i, v^i>`` for every item and component: (B, r)."""
    b, r = factors[0].shape[:2]
    prod = np.ones((b, r))
    for i, f in enumerate(factors):
        if i != skip:
            prod *= np.matmul(f, vectors[i][:, :, None])[:, :, 0]
    return prod


def _baltmin_sweep(t, weights, factors) -> None:
    """One in-place pass over every component and mode."""
    r = weights.shape[1]
    n = t.ndim - 1
    for l in range(r):
        others = np.arange(r) != l
        w_other = weights[:, others]
        us = [f[:, l].copy() for f in factors]
        for j in range(n):
            # (T - sum_{k != l} w_k u_k^1 (x) ...)(u_l^1, .., I, .., u_l^n)
            v = _bcontract(t, us, j)
            coef = (w_other * _bcross(factors, us, j)[:, others])[:, None, :]
            v = v - np.matmul(coef, factors[j][:, others])[:, 0]
            norm = np.linalg.norm(v, axis=1)
            ok = np.isfinite(norm) & (norm > _TINY)
            us[j][ok] = v[ok] / norm[ok, None]
            factors[j][:, l] = us[j]
        cross = _bcross(factors, us, None)[:, others]
        weights[:, l] = _bcontract(t, us, None) - np.sum(w_other * cross, axis=1)


def _run_sweeps(objective_fn, sweep_fn, weights, factors, cfg: DecompConfig):
    """Accept/reject loop over alternating sweeps, stopping per batch item.

    A sweep is kept for an item only if it does not raise that item's
    objective; a rejected sweep or a relative gain below
    ``cfg.altmin_tolerance`` retires the item.  Returns the final weights,
    factors and per-item objective histories.
    """
    objective = objective_fn(weights, factors)
    history = [[float(x)] for x in objective]
    active = objective > 0
    for _ in range(cfg.altmin_max_sweeps):
        if not active.any():
            break
        new_w, new_f = weights.copy(), [f.copy() for f in factors]
        sweep_fn(new_w, new_f)
        new_obj = objective_fn(new_w, new_f)
        accept = active & np.isfinite(new_obj) & (new_obj <= objective)
        gain = objective - new_obj
        weights[accept] = new_w[accept]
        for f, nf in zip(factors, new_f):
            f[accept] = nf[accept]
        for i in np.flatnonzero(accept):
            history[i].append(float(new_obj[i]))
        stalled = gain <= cfg.altmin_tolerance * objective
        objective = np.where(accept, new_obj, objective)
        active &= accept & ~stalled & (objective > 0)
    return weights, factors, history


def _baltmin(t, weights, factors, cfg: DecompConfig):
    def objective_fn(w, f):
        return _bnorm(t - _breconstruct(w, f))

    def sweep_fn(w, f):
        _baltmin_sweep(t, w, f)

    return _run_sweeps(objective_fn, sweep_fn, weights.copy(), [f.copy() for f in factors], cfg)


def _to_batch(cp: CPForm):
    return cp.weights[None].copy(), [f[None].copy() for f in cp.factors]


def _from_batch(weights, factors, i: int, history=None) -> CPForm:
    return CPForm(weights[i], [f[i] for f in factors], list(history or []))


# -- public API ---------------------------------------------------------------


def power_iteration_deflation(t, cfg: DecompConfig) -> CPForm:
    """Greedy rank-``cfg.rank`` CP form by power iteration with deflation.

    Each component starts from Gaussian unit vectors and is refined with
    normalized updates ``u^j <- T(u^1, .., I, .., u^n) / ||.||``, sweeping the
    modes in order and using each new vector immediately.  Its weight is the
    full contraction of the current residual, which is then deflated.  Once
    the residual is exactly zero, remaining components get weight 0.

    Raises
    ------
    DegenerateTensorError
        If the input tensor is zero or every restart hits a zero contraction.
    """
    t = check_tensor(t)
    if not np.any(t):
        raise DegenerateTensorError("cannot decompose the zero tensor")
    weights, factors = _bpower_iteration(t[None], cfg, check_rng(cfg.seed))
    return _from_batch(weights, factors, 0)


def alternating_minimization(t, init: CPForm, cfg: DecompConfig) -> CPForm:
    """Refine ``init`` by alternating rank-one updates until the fit stalls.

    Component ``l`` is refitted to ``T - sum_{k != l} w_k u_k^1 (x) ...``, one
    mode at a time, then its weight is set by full contraction.  A sweep that
    would increase ``||T - reconstruct||_F`` is rejected and ends the
    iteration, so the returned objective never exceeds the initial one.  A
    zero contraction leaves the affected vector unchanged.
    """
    t = check_tensor(t)
    if init.shape != t.shape:
        raise ValueError(f"init has shape {init.shape}, tensor has shape {t.shape}")
    weights, factors = _to_batch(init)
    weights, factors, history = _baltmin(t[None], weights, factors, cfg)
    return _from_batch(weights, factors, 0, history[0])


def decompose(t, rank: Optional[int] = None, cfg: Optional[DecompConfig] = None) -> CPForm:
    """Power iteration with deflation followed by alternating minimization."""
    cfg = cfg or DecompConfig()
    if rank is not None:
        cfg = cfg.replace(rank=check_rank(rank))
    t = check_tensor(t)
    init = power_iteration_deflation(t, cfg)
    return alternating_minimization(t, init, cfg)


def decompose_many(tensors, rank: Optional[int] = None, cfg: Optional[DecompConfig] = None) -> list:
    """Decompose a stack of same-shape tensors independently.

    ``tensors`` has shape ``(B, d_1, ..., d_n)``.  Zero tensors are allowed and
    come back as all-zero-weight CP forms.
    """
    cfg = cfg or DecompConfig()
    if rank is not None:
        cfg = cfg.replace(rank=check_rank(rank))
    t = check_tensor(tensors)
    weights, factors = _bpower_iteration(t, cfg, check_rng(cfg.seed))
    weights, factors, history = _baltmin(t, weights, factors, cfg)
    return [_from_batch(weights, factors, i, history[i]) for i in range(t.shape[0])]


def relative_error(t, cp: CPForm) -> float:
    t = np.asarray(t, dtype=float)
    norm = np.linalg.norm(t)
    err = np.linalg.norm(t - reconstruct(cp))
    return float(err / norm) if norm > 0 else float(err)


class CPDecomposition(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`decompose`.

    Parameters
    ----------
    rank : int, default=1
    power_tolerance, power_max_iters, altmin_tolerance, altmin_max_sweeps
        See :class:`DecompConfig`.
    random_state : int or None
        Seed for the Gaussian starting vectors.

    Attributes
    ----------
    cp_ : CPForm
    weights_ : ndarray of shape (rank,)
    factors_ : list of ndarray
    reconstruction_error_ : float
        Relative Frobenius error of the fit.
    n_sweeps_ : int
        Accepted alternating sweeps.

    Examples
    --------
    >>> from lowrank_marl.generation import generate_tensor
    >>> T = generate_tensor((6, 5, 4), rank=2, seed=0)
    >>> est = CPDecomposition(rank=2, random_state=0).fit(T)
    >>> bool(est.reconstruction_error_ < 1e-4)
    True
    """

    def __init__(
        self,
        rank=1,
        *,
        power_tolerance=1e-9,
        power_max_iters=500,
        altmin_tolerance=1e-8,
        altmin_max_sweeps=200,
        random_state=None,
    ):
        self.rank = rank
        self.power_tolerance = power_tolerance
        self.power_max_iters = power_max_iters
        self.altmin_tolerance = altmin_tolerance
        self.altmin_max_sweeps = altmin_max_sweeps
        self.random_state = random_state

    def _config(self) -> DecompConfig:
        return DecompConfig(
            rank=self.rank,
            power_tolerance=self.power_tolerance,
            power_max_iters=self.power_max_iters,
            altmin_max_sweeps=self.altmin_max_sweeps,
            altmin_tolerance=self.altmin_tolerance,
            seed=self.random_state,
        )

    def fit(self, X, y=None):
        X = check_tensor(X)
        self.cp_ = decompose(X, cfg=self._config())
        self.weights_ = self.cp_.weights
        self.factors_ = self.cp_.factors
        self.n_sweeps_ = len(self.cp_.objective_history) - 1
        self.reconstruction_error_ = relative_error(X, self.cp_)
        return self

    def transform(self, X=None):
        """Dense low-rank approximation of the fitted tensor."""
        check_is_fitted(self, "cp_")
        if X is not None and np.shape(X) != self.cp_.shape:
            raise ValueError(f"expected shape {self.cp_.shape}, got {np.shape(X)}")
        return reconstruct(self.cp_)
