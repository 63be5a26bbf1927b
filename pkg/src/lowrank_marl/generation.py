"""Random low-rank reward and transition tensors and the two benchmark MDPs."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._validation import check_rank, check_rng
from .decomposition import DecompConfig, alternating_minimization, decompose
from .mdp import TabularMDP
from .tensor import CPForm, reconstruct, truncate

logger = logging.getLogger(__name__)


class TransitionGenerationError(RuntimeError):
    """The normalize/decompose/truncate loop did not reach its tolerance.

    ``tensor`` holds the valid (normalized) iterate with the smallest
    residual, for callers willing to accept an approximate result.
    """

    def __init__(self, message, residual, tensor=None):
        super().__init__(message)
        self.residual = residual
        self.tensor = tensor


@dataclass(frozen=True)
class GenConfig:
    shape: tuple
    rank: int
    weights: Optional[tuple] = None
    seed: Optional[int] = None
    normalize_tolerance: float = 1e-3
    max_normalize_iters: int = 100
    warm_start: bool = False

    def __post_init__(self):
        check_rank(self.rank)
        if self.normalize_tolerance <= 0:
            raise ValueError("normalize_tolerance must be positive")
        if self.weights is not None and len(self.weights) != self.rank:
            raise ValueError("need one weight per component")


def generate_cp(shape: Sequence[int], rank: int, weights=None, seed=None) -> CPForm:
    """Random CP form with standard-normal directions normalized to unit length."""
    rank = check_rank(rank)
    rng = check_rng(seed)
    w = np.ones(rank) if weights is None else np.asarray(weights, dtype=float)
    vectors = [rng.standard_normal((rank, d)) for d in shape]
    factors = [v / np.linalg.norm(v, axis=1, keepdims=True) for v in vectors]
    return CPForm(w, factors)


def generate_tensor(shape: Sequence[int], rank: int, weights=None, seed=None) -> np.ndarray:
    """Dense ``sum_l w_l u_1^l (x) ... (x) u_n^l`` with Gaussian unit directions.

    ``weights`` defaults to all ones.
    """
    return reconstruct(generate_cp(shape, rank, weights, seed))


def normalize_transition(t: np.ndarray) -> np.ndarray:
    """Clamp negatives to 0 and rescale every last-mode slice to sum to 1.

    Slices with no positive mass become uniform.
    """
    t = np.maximum(np.asarray(t, dtype=float), 0.0)
    sums = t.sum(axis=-1, keepdims=True)
    empty = sums <= 0
    out = np.divide(t, sums, out=np.zeros_like(t), where=~empty)
    return np.where(empty, 1.0 / t.shape[-1], out)


WARM_PROGRESS = 0.999


def generate_transition_tensor(cfg: GenConfig, decomp: Optional[DecompConfig] = None) -> np.ndarray:
    """Valid transition tensor within ``cfg.normalize_tolerance`` of rank ``cfg.rank``.

    Starting from a random rank-r tensor, repeat: normalize, decompose at
    rank ``2r``, keep the ``r`` largest components; stop as soon as
    normalizing moves the tensor by at most the tolerance (Frobenius norm).
    The last mode indexes the next state.

    With ``cfg.warm_start`` every round after the first instead refits the
    previous rank-r form to the normalized tensor by alternating minimization.  This
    converges steadily where fresh rank-2r decompositions tend to plateau.  A
    round that fails to shrink the residual by ``WARM_PROGRESS`` is followed by
    a fresh decomposition, which escapes fixed points of the refit.

    Raises
    ------
    TransitionGenerationError
        If the loop does not settle within ``cfg.max_normalize_iters`` rounds.
    """
    rng = check_rng(cfg.seed)
    seeds = rng.integers(0, 2**32, size=cfg.max_normalize_iters + 1)
    decomp = decomp or DecompConfig()
    cp = generate_cp(cfg.shape, cfg.rank, cfg.weights, int(seeds[0]))
    t = reconstruct(cp)
    best, best_residual = None, np.inf
    previous = np.inf
    for i in range(cfg.max_normalize_iters + 1):
        normalized = normalize_transition(t)
        residual = float(np.linalg.norm(normalized - t))
        if residual < best_residual:
            best, best_residual = normalized, residual
        if residual <= cfg.normalize_tolerance:
            logger.debug("transition tensor settled after %d rounds", i)
            return normalized
        if i == cfg.max_normalize_iters:
            break
        progressing = residual < WARM_PROGRESS * previous
        previous = residual
        if cfg.warm_start and i > 0 and progressing:
            cp = alternating_minimization(normalized, cp, decomp.replace(rank=cfg.rank))
        else:
            full = decompose(normalized, 2 * cfg.rank, decomp.replace(seed=int(seeds[i + 1])))
            cp = truncate(full, cfg.rank)
        t = reconstruct(cp)
    raise TransitionGenerationError(
        f"normalization residual {best_residual:.3g} above {cfg.normalize_tolerance} "
        f"after {cfg.max_normalize_iters} rounds",
        best_residual,
        best,
    )


def _approximate_transition(cfg: GenConfig, strict: bool, decomp=None):
    """Run the loop; unless ``strict``, fall back to its best iterate."""
    try:
        return generate_transition_tensor(cfg, decomp), 0.0
    except TransitionGenerationError as err:
        if strict:
            raise
        logger.warning("using approximate transition tensor: %s", err)
        return err.tensor, err.residual


def linspace_weights(rank: int) -> np.ndarray:
    """Experiment-1 reward weights: ``rank`` evenly spaced values from 0.1 to 1."""
    return np.linspace(0.1, 1.0, check_rank(rank))


def _child_seeds(seed, n):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def build_experiment1_mdp(seed, discount: float = 0.9, n_states: int = 20,
                          n_agents: int = 3, n_actions: int = 10, rank: int = 5,
                          normalize_tolerance: float = 1e-3, max_normalize_iters: int = 100,
                          warm_start: bool = False, strict: bool = False,
                          decomp: Optional[DecompConfig] = None) -> TabularMDP:
    """Random MDP whose transition and reward tensors both have rank 5.

    Defaults give 20 states and three agents with 10 actions each.  Reward
    weights are ``linspace(0.1, 1, rank)``.

    At this size the transition loop rarely reaches its tolerance; unless
    ``strict`` is set, the best valid iterate is used and its residual is
    stored in ``metadata["normalize_residual"]``.
    """
    t_seed, r_seed = _child_seeds(seed, 2)
    shape = (n_states,) + (n_actions,) * n_agents
    gen = GenConfig(shape + (n_states,), rank, seed=t_seed, normalize_tolerance=normalize_tolerance,
                    max_normalize_iters=max_normalize_iters, warm_start=warm_start)
    T, residual = _approximate_transition(gen, strict, decomp)
    R = generate_tensor(shape, rank, linspace_weights(rank), r_seed)
    meta = {"generator": "rank5", "seed": seed, "rank": rank, "normalize_residual": residual}
    return TabularMDP(T, R, discount, metadata=meta)


def build_degenerate_mdp(seed, discount: float = 0.9, n_groups: int = 4,
                         states_per_group: int = 4, n_agents: int = 3,
                         n_actions: int = 20, normalize_tolerance: float = 1e-3,
                         max_normalize_iters: int = 100, warm_start: bool = False,
                         strict: bool = False, decomp: Optional[DecompConfig] = None) -> TabularMDP:
    """MDP whose states fall into groups sharing identical dynamics and rewards.

    Each group gets one rank-1 transition slice over (actions, next state),
    produced by the normalize/decompose/truncate loop, and one rank-1 reward
    slice; both are copied to every state of the group.  The full reward
    tensor therefore has rank at most ``n_groups``.
    """
    n_states = n_groups * states_per_group
    actions = (n_actions,) * n_agents
    seeds = _child_seeds(seed, 2 * n_groups)
    T = np.empty((n_states,) + actions + (n_states,))
    R = np.empty((n_states,) + actions)
    worst = 0.0
    for g in range(n_groups):
        block = slice(g * states_per_group, (g + 1) * states_per_group)
        gen = GenConfig((1,) + actions + (n_states,), 1, seed=seeds[2 * g],
                        normalize_tolerance=normalize_tolerance,
                        max_normalize_iters=max_normalize_iters, warm_start=warm_start)
        t_g, residual = _approximate_transition(gen, strict, decomp)
        worst = max(worst, residual)
        T[block] = t_g
        R[block] = generate_tensor(actions, 1, seed=seeds[2 * g + 1])
    meta = {"generator": "degenerate", "seed": seed, "n_groups": n_groups,
            "normalize_residual": worst}
    return TabularMDP(T, R, discount, metadata=meta)


def cp_parameter_count(shape: Sequence[int], rank: int) -> int:
    return rank * sum(shape)


def tesseract_parameter_count(n_states: int, action_sizes: Sequence[int], rank: int) -> int:
    """Factor entries of one rank-``rank`` decomposition per (state, next state) pair."""
    return n_states * n_states * rank * sum(action_sizes)


def n_state_action_pairs(n_states: int, action_sizes: Sequence[int]) -> int:
    return n_states * math.prod(action_sizes)
