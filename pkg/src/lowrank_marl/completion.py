"""Low-rank tensor completion by masked alternating minimization.

Only the entries flagged in the observation mask enter the objective
``||mask * (T - sum_k w_k u_k^1 (x) ... (x) u_k^n)||_F``.  Each factor update
solves the masked least-squares problem for one mode of one component
exactly, coordinate by coordinate.
"""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_mask, check_rank, check_rng, check_tensor
from .decomposition import (
    DecompConfig,
    _baltmin,
    _bcontract,
    _bnorm,
    _bpower_iteration,
    _breconstruct,
    _brank_one,
    _from_batch,
    _run_sweeps,
)
from .tensor import CPForm, reconstruct

logger = logging.getLogger(__name__)

#: Denominators below this leave the corresponding coordinate untouched.
DENOMINATOR_GUARD = 1e-12


def masked_objective(t, mask, cp: CPForm) -> float:
    """``||mask * (t - reconstruct(cp))||_F``."""
    return float(np.linalg.norm(mask * (np.asarray(t, dtype=float) - reconstruct(cp))))


def _bmasked_sweep(t_obs, mask, weights, factors) -> None:
    """One in-place masked pass over every component and mode of a batch.

    Coordinate ``i`` of the unnormalized update is the masked least-squares
    solution ``num_i / den_i``; coordinates whose denominator is below
    :data:`DENOMINATOR_GUARD` keep their previous (weight-scaled) value.
    """
    r, n = weights.shape[1], t_obs.ndim - 1
    residual = t_obs - mask * _breconstruct(weights, factors)
    for l in range(r):
        us = [f[:, l].copy() for f in factors]
        sq = [u * u for u in us]
        # masked residual of every component except l
        excl = residual + mask * _brank_one(weights[:, l], us)
        for j in range(n):
            num = _bcontract(excl, us, j)
            den = _bcontract(mask, sq, j)
            v = weights[:, l, None] * us[j]
            ok = den > DENOMINATOR_GUARD
            v[ok] = num[ok] / den[ok]
            norm = np.linalg.norm(v, axis=1)
            upd = np.isfinite(norm) & (norm > 0)
            us[j][upd] = v[upd] / norm[upd, None]
            sq[j] = us[j] * us[j]
            factors[j][:, l] = us[j]
        den = _bcontract(mask, sq, None)
        ok = den > DENOMINATOR_GUARD
        weights[ok, l] = _bcontract(excl, us, None)[ok] / den[ok]
        residual = excl - mask * _brank_one(weights[:, l], us)


def _bmasked_altmin(t_obs, mask, weights, factors, cfg: DecompConfig):
    def objective_fn(w, f):
        return _bnorm(mask * (t_obs - _breconstruct(w, f)))

    def sweep_fn(w, f):
        _bmasked_sweep(t_obs, mask, w, f)

    return _run_sweeps(objective_fn, sweep_fn, weights.copy(), [f.copy() for f in factors], cfg)


def masked_alternating_minimization(t_observed, mask, init: CPForm, cfg: DecompConfig) -> CPForm:
    """Refine ``init`` against the observed entries only.

    Sweeps that would raise the masked objective are rejected and end the
    iteration.
    """
    t = check_tensor(t_observed)
    omega = check_mask(mask, t.shape)
    weights, factors = init.weights[None].copy(), [f[None].copy() for f in init.factors]
    weights, factors, history = _bmasked_altmin((omega * t)[None], omega[None], weights, factors, cfg)
    return _from_batch(weights, factors, 0, history[0])


def _prepare(cfg, rank):
    cfg = cfg or DecompConfig()
    if rank is not None:
        cfg = cfg.replace(rank=check_rank(rank))
    return cfg


def complete(t_observed, mask, rank: Optional[int] = None, cfg: Optional[DecompConfig] = None) -> CPForm:
    """Fit a rank-``rank`` CP form to the observed entries of a tensor.

    Parameters
    ----------
    t_observed : array_like
        Tensor whose entries are trusted where ``mask`` is 1; other entries
        are ignored.
    mask : array_like of {0, 1}
        Same shape as ``t_observed``.
    rank : int, optional
        Overrides ``cfg.rank``.
    cfg : DecompConfig, optional

    Returns
    -------
    CPForm
        Starts from power iteration on the zero-filled observed tensor.  With
        every entry observed the masked sweeps coincide with the unmasked
        ones, and the unmasked routine is used, so the result is exactly that
        of :func:`~lowrank_marl.decomposition.decompose`.

    Raises
    ------
    ValueError
        If the mask has no observed entry.
    """
    cfg = _prepare(cfg, rank)
    t = check_tensor(t_observed)
    omega = check_mask(mask, t.shape)
    if not omega.any():
        raise ValueError("mask has no observed entries")
    if omega.all():
        weights, factors = _bpower_iteration(t[None], cfg, check_rng(cfg.seed))
        weights, factors, history = _baltmin(t[None], weights, factors, cfg)
        return _from_batch(weights, factors, 0, history[0])
    return complete_many(t[None], omega[None], cfg=cfg)[0]


def complete_many(tensors, masks, rank: Optional[int] = None, cfg: Optional[DecompConfig] = None) -> list:
    """Complete a stack of same-shape tensors, each under its own mask.

    Items with nothing observed, or only zeros observed, come back as
    zero-weight CP forms.
    """
    cfg = _prepare(cfg, rank)
    t = check_tensor(tensors)
    omega = check_mask(masks, t.shape)
    t_obs = omega * t
    weights, factors = _bpower_iteration(t_obs, cfg, check_rng(cfg.seed))
    weights, factors, history = _bmasked_altmin(t_obs, omega, weights, factors, cfg)
    return [_from_batch(weights, factors, i, history[i]) for i in range(t.shape[0])]


class TensorCompletion(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`complete`.

    ``fit(X, mask=...)`` learns the CP form; ``transform`` returns the dense
    completed tensor, optionally clipped to ``[-value_clip, value_clip]``.
    """

    def __init__(
        self,
        rank=1,
        *,
        power_tolerance=1e-9,
        power_max_iters=500,
        altmin_tolerance=1e-8,
        altmin_max_sweeps=200,
        value_clip=None,
        random_state=None,
    ):
        self.rank = rank
        self.power_tolerance = power_tolerance
        self.power_max_iters = power_max_iters
        self.altmin_tolerance = altmin_tolerance
        self.altmin_max_sweeps = altmin_max_sweeps
        self.value_clip = value_clip
        self.random_state = random_state

    def fit(self, X, y=None, mask=None):
        X = check_tensor(X)
        if mask is None:
            mask = np.ones(X.shape)
        cfg = DecompConfig(
            rank=self.rank,
            power_tolerance=self.power_tolerance,
            power_max_iters=self.power_max_iters,
            altmin_max_sweeps=self.altmin_max_sweeps,
            altmin_tolerance=self.altmin_tolerance,
            seed=self.random_state,
        )
        self.mask_ = check_mask(mask, X.shape)
        self.cp_ = complete(X, self.mask_, cfg=cfg)
        self.masked_error_ = self.cp_.objective_history[-1]
        return self

    def transform(self, X=None):
        check_is_fitted(self, "cp_")
        if X is not None and np.shape(X) != self.cp_.shape:
            raise ValueError(f"expected shape {self.cp_.shape}, got {np.shape(X)}")
        out = reconstruct(self.cp_)
        if self.value_clip is not None:
            out = np.clip(out, -self.value_clip, self.value_clip)
        return out
