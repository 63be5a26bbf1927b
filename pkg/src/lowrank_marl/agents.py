"""Model estimators for the three model-based agents.

* :class:`BaselineModel` uses maximum-likelihood transitions and fills
  unvisited rewards with the mean observed reward.
* :class:`FullCPModel` decomposes the normalized count tensor over the full
  state-action space and completes the reward tensor at low CP rank.
* :class:`TesseractModel` decomposes every (state, next state) action slice
  and completes every per-state reward slice separately.

Each estimator follows the scikit-learn convention: ``fit(store)`` reads a
snapshot of an :class:`ExperienceStore` and leaves a :class:`ModelEstimate`
in ``estimate_``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .completion import complete, complete_many
from .decomposition import DecompConfig, decompose, decompose_many
from .generation import normalize_transition
from .mdp import TabularMDP, policy_improvement
from .tensor import reconstruct


class ExperienceStore:
    """Visit counts ``D[s, a, s']`` and last observed rewards ``R[s, a]``."""

    def __init__(self, n_states: int, action_sizes: Sequence[int]):
        self.n_states = int(n_states)
        self.action_sizes = tuple(int(a) for a in action_sizes)
        self.n_joint_actions = math.prod(self.action_sizes)
        self.counts = np.zeros((self.n_states,) + self.action_sizes + (self.n_states,), dtype=np.int64)
        self.rewards = np.zeros((self.n_states,) + self.action_sizes)
        self._visited = np.zeros((self.n_states,) + self.action_sizes, dtype=bool)
        self.n_unique = 0
        self.n_transitions = 0

    def _flat(self, a) -> int:
        if np.ndim(a) == 0:
            return int(a)
        return int(np.ravel_multi_index(tuple(a), self.action_sizes))

    def record(self, s: int, a, r: float, s_next: int) -> None:
        """Count one transition; deterministic rewards make overwriting lossless."""
        a = self._flat(a)
        self.counts.reshape(self.n_states, -1, self.n_states)[s, a, s_next] += 1
        self.rewards.reshape(self.n_states, -1)[s, a] = r
        visited = self._visited.reshape(self.n_states, -1)
        if not visited[s, a]:
            visited[s, a] = True
            self.n_unique += 1
        self.n_transitions += 1

    @property
    def mask(self) -> np.ndarray:
        """1.0 where the state-action pair has been visited."""
        return self._visited.astype(float)

    def copy(self) -> "ExperienceStore":
        out = ExperienceStore(self.n_states, self.action_sizes)
        out.counts = self.counts.copy()
        out.rewards = self.rewards.copy()
        out._visited = self._visited.copy()
        out.n_unique = self.n_unique
        out.n_transitions = self.n_transitions
        return out


def normalize_counts(counts) -> np.ndarray:
    """Per-slice empirical distribution over the last mode; empty slices uniform."""
    counts = np.asarray(counts, dtype=float)
    sums = counts.sum(axis=-1, keepdims=True)
    out = np.divide(counts, sums, out=np.full_like(counts, 1.0 / counts.shape[-1]), where=sums > 0)
    return out


@dataclass
class ModelEstimate:
    transition: np.ndarray
    reward: np.ndarray
    tag: str = "baseline"
    info: dict = field(default_factory=dict)

    def to_mdp(self, discount: float) -> TabularMDP:
        return TabularMDP(self.transition, self.reward, discount)


class _ModelBase(BaseEstimator):
    def _decomp_config(self, rank: int, seed) -> DecompConfig:
        return DecompConfig(
            rank=rank,
            power_tolerance=self.power_tolerance,
            power_max_iters=self.power_max_iters,
            altmin_max_sweeps=self.altmin_max_sweeps,
            altmin_tolerance=self.altmin_tolerance,
            seed=seed,
        )

    def _clip(self, reward: np.ndarray) -> np.ndarray:
        if self.reward_clip is None:
            return reward
        return np.clip(reward, -self.reward_clip, self.reward_clip)

    def to_mdp(self, discount: float) -> TabularMDP:
        check_is_fitted(self, "estimate_")
        return self.estimate_.to_mdp(discount)


class BaselineModel(_ModelBase):
    """Maximum-likelihood transitions, mean-filled rewards."""

    def fit(self, store: ExperienceStore, y=None):
        mask = store.mask.astype(bool)
        fill = float(store.rewards[mask].mean()) if mask.any() else 0.0
        reward = np.where(mask, store.rewards, fill)
        self.estimate_ = ModelEstimate(normalize_counts(store.counts), reward, "baseline")
        return self


class FullCPModel(_ModelBase):
    """Low-rank CP estimates over the whole state-action space.

    Parameters
    ----------
    transition_rank, reward_rank : int
    power_tolerance, power_max_iters, altmin_tolerance, altmin_max_sweeps
        Forwarded to :class:`~lowrank_marl.decomposition.DecompConfig`.
    reward_clip : float or None
        Clip completed rewards to ``[-reward_clip, reward_clip]``; off by default.
    random_state : int or None
    """

    def __init__(self, transition_rank=5, reward_rank=5, *, power_tolerance=1e-9,
                 power_max_iters=500, altmin_tolerance=1e-8, altmin_max_sweeps=200,
                 reward_clip=None, random_state=None):
        self.transition_rank = transition_rank
        self.reward_rank = reward_rank
        self.power_tolerance = power_tolerance
        self.power_max_iters = power_max_iters
        self.altmin_tolerance = altmin_tolerance
        self.altmin_max_sweeps = altmin_max_sweeps
        self.reward_clip = reward_clip
        self.random_state = random_state

    def fit(self, store: ExperienceStore, y=None):
        rng = np.random.default_rng(self.random_state)
        t_seed, r_seed = (int(x) for x in rng.integers(0, 2**32, size=2))
        cp_t = decompose(normalize_counts(store.counts), cfg=self._decomp_config(self.transition_rank, t_seed))
        transition = normalize_transition(reconstruct(cp_t))
        mask = store.mask
        if mask.any():
            cp_r = complete(store.rewards, mask, cfg=self._decomp_config(self.reward_rank, r_seed))
            reward = self._clip(reconstruct(cp_r))
        else:
            reward = np.zeros_like(store.rewards)
        tag = f"full-cp({self.transition_rank},{self.reward_rank})"
        self.estimate_ = ModelEstimate(transition, reward, tag)
        return self


def _reconstruct_all(cps) -> np.ndarray:
    return np.stack([reconstruct(cp) for cp in cps])


class TesseractModel(_ModelBase):
    """One CP decomposition per (state, next state) action slice and per state.

    States with no visited action keep a zero reward slice.
    """

    def __init__(self, rank=5, *, power_tolerance=1e-9, power_max_iters=500,
                 altmin_tolerance=1e-8, altmin_max_sweeps=200, reward_clip=None,
                 random_state=None):
        self.rank = rank
        self.power_tolerance = power_tolerance
        self.power_max_iters = power_max_iters
        self.altmin_tolerance = altmin_tolerance
        self.altmin_max_sweeps = altmin_max_sweeps
        self.reward_clip = reward_clip
        self.random_state = random_state

    def fit(self, store: ExperienceStore, y=None):
        rng = np.random.default_rng(self.random_state)
        t_seed, r_seed = (int(x) for x in rng.integers(0, 2**32, size=2))
        S, actions = store.n_states, store.action_sizes
        # slices T(e_s, I, .., I, e_s') stacked as (S * S', A_1, .., A_n)
        slices = np.moveaxis(normalize_counts(store.counts), -1, 1).reshape((S * S,) + actions)
        cps = decompose_many(slices, cfg=self._decomp_config(self.rank, t_seed))
        approx = np.moveaxis(_reconstruct_all(cps).reshape((S, S) + actions), 1, -1)
        transition = normalize_transition(approx)

        mask = store.mask
        reward = np.zeros_like(store.rewards)
        seen = np.flatnonzero(mask.reshape(S, -1).any(axis=1))
        if seen.size:
            cps_r = complete_many(store.rewards[seen], mask[seen], cfg=self._decomp_config(self.rank, r_seed))
            reward[seen] = self._clip(_reconstruct_all(cps_r))
        self.estimate_ = ModelEstimate(transition, reward, f"tesseract({self.rank})")
        return self


def baseline_model(store: ExperienceStore) -> ModelEstimate:
    return BaselineModel().fit(store).estimate_


def full_cp_model(store: ExperienceStore, transition_rank: int, reward_rank: int,
                  cfg: Optional[DecompConfig] = None) -> ModelEstimate:
    cfg = cfg or DecompConfig()
    model = FullCPModel(transition_rank, reward_rank, power_tolerance=cfg.power_tolerance,
                        power_max_iters=cfg.power_max_iters, altmin_tolerance=cfg.altmin_tolerance,
                        altmin_max_sweeps=cfg.altmin_max_sweeps, random_state=cfg.seed)
    return model.fit(store).estimate_


def tesseract_model(store: ExperienceStore, rank: int, cfg: Optional[DecompConfig] = None) -> ModelEstimate:
    cfg = cfg or DecompConfig()
    model = TesseractModel(rank, power_tolerance=cfg.power_tolerance,
                           power_max_iters=cfg.power_max_iters, altmin_tolerance=cfg.altmin_tolerance,
                           altmin_max_sweeps=cfg.altmin_max_sweeps, random_state=cfg.seed)
    return model.fit(store).estimate_


def plan(model: ModelEstimate, pi, discount: float, n_improvement_iter: int) -> np.ndarray:
    """Policy improvement on the estimated MDP, warm-started from ``pi``."""
    return policy_improvement(model.to_mdp(discount), pi, n_improvement_iter)


@dataclass(frozen=True)
class AgentConfig:
    """One agent of the roster.

    ``kind`` is ``"baseline"``, ``"cp"`` or ``"tesseract"``.  Tesseract agents
    use ``transition_rank`` for both tensors.
    """

    kind: str
    transition_rank: int = 0
    reward_rank: int = 0

    def __post_init__(self):
        if self.kind not in ("baseline", "cp", "tesseract"):
            raise ValueError(f"unknown agent kind {self.kind!r}")
        if self.kind != "baseline" and min(self.transition_rank, self.reward_rank) < 1:
            raise ValueError("decomposition agents need ranks >= 1")

    @classmethod
    def parse(cls, spec: str) -> "AgentConfig":
        """Parse ``baseline``, ``cp:R``, ``cp:RT:RR`` or ``tesseract:R``."""
        parts = spec.strip().split(":")
        kind = parts[0].strip().lower()
        ranks = [int(p) for p in parts[1:]]
        if kind == "baseline":
            if ranks:
                raise ValueError("baseline takes no rank")
            return cls("baseline")
        if kind == "cp" and len(ranks) in (1, 2):
            return cls("cp", ranks[0], ranks[-1])
        if kind == "tesseract" and len(ranks) == 1:
            return cls("tesseract", ranks[0], ranks[0])
        raise ValueError(f"cannot parse agent spec {spec!r}")

    @property
    def name(self) -> str:
        if self.kind == "baseline":
            return "baseline"
        if self.kind == "tesseract":
            return f"tesseract-r{self.transition_rank}"
        if self.transition_rank == self.reward_rank:
            return f"cp-r{self.transition_rank}"
        return f"cp-r{self.transition_rank}-{self.reward_rank}"

    def make_model(self, decomp: DecompConfig, reward_clip=None, random_state=None) -> _ModelBase:
        kwargs = dict(power_tolerance=decomp.power_tolerance, power_max_iters=decomp.power_max_iters,
                      altmin_tolerance=decomp.altmin_tolerance, altmin_max_sweeps=decomp.altmin_max_sweeps,
                      reward_clip=reward_clip, random_state=random_state)
        if self.kind == "baseline":
            return BaselineModel()
        if self.kind == "cp":
            return FullCPModel(self.transition_rank, self.reward_rank, **kwargs)
        return TesseractModel(self.transition_rank, **kwargs)
