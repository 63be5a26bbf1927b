"""Tabular multi-agent MDPs, exact policy evaluation and policy improvement.

Joint actions are addressed either by a tuple of per-agent actions or by
their row-major flat index into ``A_1 x ... x A_n``.  Policies are
deterministic: an integer array holding one flat joint action per state.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np

from ._validation import check_rng, check_tensor
from .tensor import load_tensor, save_tensor

SLICE_SUM_TOL = 1e-8
NEGATIVE_TOL = 1e-12
IMPROVEMENT_TOL = 1e-9


@dataclass(eq=False)
class TabularMDP:
    """Finite MDP with a joint action space ``A_1 x ... x A_n``.

    Parameters
    ----------
    transition : ndarray of shape (S, A_1, ..., A_n, S)
        ``transition[s, a_1, .., a_n, s']`` is ``P(s' | s, a)``.
    reward : ndarray of shape (S, A_1, ..., A_n)
        Deterministic reward ``R(s, a)``.
    discount : float, default=0.9
    initial_distribution : ndarray of shape (S,), optional
        Start-state distribution; uniform when omitted.
    metadata : dict
        Free-form provenance (generator seed and so on), saved alongside.
    """

    transition: np.ndarray
    reward: np.ndarray
    discount: float = 0.9
    initial_distribution: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        T = check_tensor(self.transition, "transition").copy()
        R = check_tensor(self.reward, "reward")
        if T.ndim < 3 or T.shape[:-1] != R.shape or T.shape[-1] != T.shape[0]:
            raise ValueError(
                f"incompatible shapes: transition {T.shape}, reward {R.shape}"
            )
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        if T.min() < -NEGATIVE_TOL:
            raise ValueError(f"transition has negative entry {T.min():.3g}")
        np.maximum(T, 0.0, out=T)
        sums = T.sum(axis=-1)
        if np.max(np.abs(sums - 1.0)) > SLICE_SUM_TOL:
            raise ValueError(
                f"transition slices must sum to 1 (worst deviation {np.max(np.abs(sums - 1.0)):.3g})"
            )
        self.transition = T
        self.reward = R
        S = T.shape[0]
        if self.initial_distribution is None:
            mu = np.full(S, 1.0 / S)
        else:
            mu = np.asarray(self.initial_distribution, dtype=float)
            if mu.shape != (S,) or mu.min() < 0 or abs(mu.sum() - 1.0) > SLICE_SUM_TOL:
                raise ValueError("initial_distribution must be a probability vector over states")
        self.initial_distribution = mu
        self._P = T.reshape(S, -1, S)
        self._R = R.reshape(S, -1)
        self._cdf = None

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def action_sizes(self) -> Tuple[int, ...]:
        return tuple(self.transition.shape[1:-1])

    @property
    def n_joint_actions(self) -> int:
        return math.prod(self.action_sizes)

    @property
    def n_state_actions(self) -> int:
        return self.n_states * self.n_joint_actions

    @property
    def P(self) -> np.ndarray:
        """Transitions as an ``(S, A, S)`` array over flat joint actions."""
        return self._P

    @property
    def R(self) -> np.ndarray:
        """Rewards as an ``(S, A)`` array over flat joint actions."""
        return self._R

    def joint_index(self, action) -> int:
        if np.ndim(action) == 0:
            a = int(action)
            if not 0 <= a < self.n_joint_actions:
                raise IndexError(f"joint action {a} out of range")
            return a
        return int(np.ravel_multi_index(tuple(action), self.action_sizes))

    def joint_action(self, index: int) -> Tuple[int, ...]:
        return tuple(int(i) for i in np.unravel_index(index, self.action_sizes))

    def cdf(self) -> np.ndarray:
        if self._cdf is None:
            self._cdf = np.cumsum(self._P, axis=-1)
        return self._cdf


def check_policy(mdp: TabularMDP, pi) -> np.ndarray:
    pi = np.asarray(pi)
    if pi.shape != (mdp.n_states,) or not np.issubdtype(pi.dtype, np.integer):
        raise ValueError(f"policy must be an integer array of shape ({mdp.n_states},)")
    if pi.min() < 0 or pi.max() >= mdp.n_joint_actions:
        raise ValueError("policy contains an out-of-range joint action")
    return pi.astype(np.int64)


def random_policy(mdp: TabularMDP, rng=None) -> np.ndarray:
    rng = check_rng(rng)
    return rng.integers(0, mdp.n_joint_actions, size=mdp.n_states)


def sample_initial_state(mdp: TabularMDP, rng) -> int:
    return int(rng.choice(mdp.n_states, p=mdp.initial_distribution))


def step(mdp: TabularMDP, s: int, a, rng) -> Tuple[int, float]:
    """Sample ``s' ~ P(. | s, a)`` and return it with the reward ``R(s, a)``."""
    a = mdp.joint_index(a)
    if not 0 <= s < mdp.n_states:
        raise IndexError(f"state {s} out of range")
    cdf = mdp.cdf()[s, a]
    s_next = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(s_next, mdp.n_states - 1), float(mdp.R[s, a])


def evaluate_policy(mdp: TabularMDP, pi) -> Tuple[np.ndarray, np.ndarray]:
    """Exact ``(Q, V)`` of a deterministic policy.

    Solves ``(I - gamma P_pi) V = R_pi`` directly, then
    ``Q(s, a) = R(s, a) + gamma sum_s' P(s' | s, a) V(s')``.

    Returns
    -------
    Q : ndarray of shape (S, A)
    V : ndarray of shape (S,)
    """
    pi = check_policy(mdp, pi)
    S = mdp.n_states
    idx = np.arange(S)
    P_pi = mdp.P[idx, pi]
    R_pi = mdp.R[idx, pi]
    V = np.linalg.solve(np.eye(S) - mdp.discount * P_pi, R_pi)
    if not np.all(np.isfinite(V)):
        raise np.linalg.LinAlgError("policy evaluation produced non-finite values")
    Q = mdp.R + mdp.discount * (mdp.P @ V)
    scale = max(1.0, float(np.max(np.abs(V))))
    if np.max(np.abs(Q[idx, pi] - V)) > 1e-9 * scale:
        raise np.linalg.LinAlgError("Bellman residual above tolerance")
    return Q, V


def iter_policy_improvement(mdp: TabularMDP, pi0) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(pi, Q, V)`` for the start policy and after every improvement step.

    Every state whose value falls short of ``max_a Q(s, a)`` by more than the
    tolerance switches to the greedy action (lowest index on ties).  The
    generator stops once no state is improvable.
    """
    pi = check_policy(mdp, pi0).copy()
    while True:
        Q, V = evaluate_policy(mdp, pi)
        yield pi.copy(), Q, V
        best = Q.max(axis=1)
        tol = IMPROVEMENT_TOL * max(1.0, float(np.max(np.abs(best))))
        improvable = V < best - tol
        if not improvable.any():
            return
        pi[improvable] = np.argmax(Q[improvable], axis=1)


def policy_improvement(mdp: TabularMDP, pi0, max_iters: Optional[int] = None) -> np.ndarray:
    """Improve ``pi0`` for at most ``max_iters`` steps (unbounded when None)."""
    pi = check_policy(mdp, pi0).copy()
    if max_iters is not None and max_iters <= 0:
        return pi
    for i, (pi, _, _) in enumerate(iter_policy_improvement(mdp, pi0)):
        if max_iters is not None and i >= max_iters:
            break
    return pi


def expected_return(mdp: TabularMDP, pi, V: Optional[np.ndarray] = None) -> float:
    """Expected discounted return from the start distribution."""
    if V is None:
        _, V = evaluate_policy(mdp, pi)
    return float(mdp.initial_distribution @ V)


def optimal_policy(mdp: TabularMDP, seed=0) -> Tuple[np.ndarray, float]:
    """Policy improvement to convergence from a seeded random start.

    Returns the optimal policy and its expected discounted return from the
    start distribution, the reference used for regret.
    """
    pi = policy_improvement(mdp, random_policy(mdp, seed))
    return pi, expected_return(mdp, pi)


# -- serialization ------------------------------------------------------------


def save_mdp(directory, mdp: TabularMDP) -> None:
    """Write ``transition.txt``, ``reward.txt`` and ``metadata.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_tensor(d / "transition.txt", mdp.transition)
    save_tensor(d / "reward.txt", mdp.reward)
    meta = {
        "n_states": mdp.n_states,
        "action_sizes": list(mdp.action_sizes),
        "discount": mdp.discount,
        "initial_distribution": mdp.initial_distribution.tolist(),
        **mdp.metadata,
    }
    (d / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_mdp(directory) -> TabularMDP:
    d = Path(directory)
    meta = json.loads((d / "metadata.json").read_text())
    T = load_tensor(d / "transition.txt")
    R = load_tensor(d / "reward.txt")
    if list(R.shape) != [meta["n_states"], *meta["action_sizes"]]:
        raise ValueError(f"{d}: reward shape {R.shape} disagrees with metadata")
    extra = {k: v for k, v in meta.items()
             if k not in ("n_states", "action_sizes", "discount", "initial_distribution")}
    return TabularMDP(T, R, meta["discount"], np.array(meta["initial_distribution"]), extra)
