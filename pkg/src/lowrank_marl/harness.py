"""Training loop, metrics and result files for the benchmark experiments.

Every repetition builds a fresh MDP, trains each agent of the roster with
epsilon-greedy exploration, refits its model every ``n_train`` episodes and
logs four metrics at each refit.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .agents import AgentConfig, ExperienceStore, ModelEstimate, plan
from .decomposition import DecompConfig
from .generation import build_degenerate_mdp, build_experiment1_mdp
from .mdp import (
    TabularMDP,
    evaluate_policy,
    expected_return,
    optimal_policy,
    random_policy,
    sample_initial_state,
    step,
)
from .tensor import save_tensor

logger = logging.getLogger(__name__)

METRIC_FIELDS = ["episode", "agent", "regret", "reward_sse", "transition_mse", "unique_visited"]

DEFAULT_AGENTS = {
    "rank5": ("baseline", "cp:3", "cp:5", "cp:10", "tesseract:1", "tesseract:5"),
    "degenerate": ("baseline", "cp:4", "cp:8", "tesseract:1", "tesseract:4"),
}


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment run.

    ``eval_episodes = 0`` scores a policy by its exact expected discounted
    return from the start distribution; a positive value averages that many
    greedy rollouts of undiscounted reward instead.
    """

    experiment: str = "rank5"
    agents: Tuple[str, ...] = ()
    n_episodes: int = 200
    n_train: int = 10
    episode_length: int = 150
    eps_start: float = 0.9
    eps_end: float = 0.1
    discount: float = 0.9
    n_improvement_iter: int = 50
    repetitions: int = 20
    base_seed: int = 0
    eval_episodes: int = 0
    power_tolerance: float = 1e-6
    power_max_iters: int = 100
    altmin_tolerance: float = 1e-5
    altmin_max_sweeps: int = 50
    reward_clip: Optional[float] = None
    normalize_tolerance: float = 1e-3
    gen_iters: int = 20
    gen_warm_start: int = 1
    n_jobs: int = 1

    def __post_init__(self):
        if self.experiment not in DEFAULT_AGENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if isinstance(self.agents, str):
            self.agents = tuple(a.strip() for a in self.agents.split(",") if a.strip())
        self.agents = tuple(self.agents) or DEFAULT_AGENTS[self.experiment]
        for spec in self.agents:
            AgentConfig.parse(spec)
        if self.n_train < 1 or self.n_episodes % self.n_train:
            raise ValueError("n_train must divide n_episodes")
        if not (0.0 <= self.eps_end <= 1.0 and 0.0 <= self.eps_start <= 1.0):
            raise ValueError("epsilon endpoints must lie in [0, 1]")
        if self.repetitions < 1 or self.episode_length < 1:
            raise ValueError("repetitions and episode_length must be positive")

    @property
    def agent_configs(self) -> List[AgentConfig]:
        return [AgentConfig.parse(s) for s in self.agents]

    @property
    def decomp(self) -> DecompConfig:
        return DecompConfig(
            power_tolerance=self.power_tolerance,
            power_max_iters=self.power_max_iters,
            altmin_tolerance=self.altmin_tolerance,
            altmin_max_sweeps=self.altmin_max_sweeps,
        )

    @property
    def checkpoints(self) -> List[int]:
        return list(range(self.n_train, self.n_episodes + 1, self.n_train))

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ", ".join(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "ExperimentConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key, value = (p.strip() for p in line.split("=", 1))
            if key not in types:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            values[key] = _coerce(types[key], value)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


def _coerce(type_name, value: str):
    t = str(type_name)
    if value.lower() in ("none", "") and "Optional" in t:
        return None
    if t.startswith("Tuple") or t.startswith("tuple"):
        return tuple(v.strip() for v in value.split(",") if v.strip())
    if "int" in t:
        return int(value)
    if "float" in t:
        return float(value)
    return value


def epsilon(episode: int, cfg: ExperimentConfig) -> float:
    """Linear decay from ``eps_start`` at episode 1 to ``eps_end`` at the last one."""
    if cfg.n_episodes <= 1:
        return cfg.eps_end
    frac = (episode - 1) / (cfg.n_episodes - 1)
    eps = cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac
    lo, hi = sorted((cfg.eps_start, cfg.eps_end))
    return float(min(max(eps, lo), hi))


def run_episode(mdp: TabularMDP, pi, eps: float, episode_length: int,
                store: ExperienceStore, rng: np.random.Generator) -> None:
    """Epsilon-greedy rollout that records every transition in ``store``."""
    s = sample_initial_state(mdp, rng)
    n_actions = mdp.n_joint_actions
    for _ in range(episode_length):
        if rng.random() < eps:
            a = int(rng.integers(n_actions))
        else:
            a = int(pi[s])
        s_next, r = step(mdp, s, a, rng)
        store.record(s, a, r, s_next)
        s = s_next


def evaluate(mdp: TabularMDP, pi, eval_episodes: int, episode_length: int,
             rng: np.random.Generator) -> float:
    """Mean undiscounted total reward of greedy rollouts; touches no store."""
    totals = []
    for _ in range(eval_episodes):
        s = sample_initial_state(mdp, rng)
        total = 0.0
        for _ in range(episode_length):
            s, r = step(mdp, s, int(pi[s]), rng)
            total += r
        totals.append(total)
    return float(np.mean(totals))


def expected_total_reward(mdp: TabularMDP, pi, episode_length: int) -> float:
    """Exact mean of :func:`evaluate` over infinitely many episodes."""
    idx = np.arange(mdp.n_states)
    P_pi = mdp.P[idx, pi]
    R_pi = mdp.R[idx, pi]
    dist = mdp.initial_distribution.copy()
    total = 0.0
    for _ in range(episode_length):
        total += dist @ R_pi
        dist = dist @ P_pi
    return float(total)


def build_mdp(cfg: ExperimentConfig, seed) -> TabularMDP:
    builder = build_experiment1_mdp if cfg.experiment == "rank5" else build_degenerate_mdp
    return builder(seed, cfg.discount, normalize_tolerance=cfg.normalize_tolerance,
                   max_normalize_iters=cfg.gen_iters, warm_start=bool(cfg.gen_warm_start),
                   decomp=cfg.decomp)


@dataclass
class MetricsRow:
    episode: int
    agent: str
    regret: float
    reward_sse: float
    transition_mse: float
    unique_visited: int


@dataclass
class RunResult:
    repetition: int
    rows: List[MetricsRow] = field(default_factory=list)
    seeds: Dict[str, int] = field(default_factory=dict)
    optimal_return: float = 0.0
    seconds: float = 0.0


class _Scorer:
    """Test-time return of a policy under the configured protocol."""

    def __init__(self, mdp: TabularMDP, cfg: ExperimentConfig, rng):
        self.mdp, self.cfg, self.rng = mdp, cfg, rng

    def __call__(self, pi) -> float:
        if self.cfg.eval_episodes <= 0:
            return expected_return(self.mdp, pi)
        return evaluate(self.mdp, pi, self.cfg.eval_episodes, self.cfg.episode_length, self.rng)

    def optimal(self, pi_star) -> float:
        if self.cfg.eval_episodes <= 0:
            return expected_return(self.mdp, pi_star)
        return expected_total_reward(self.mdp, pi_star, self.cfg.episode_length)


def train_agent(mdp: TabularMDP, agent: AgentConfig, cfg: ExperimentConfig, seed: int,
                optimal: float, dump_dir: Optional[Path] = None) -> List[MetricsRow]:
    """Run the epsilon-greedy training loop for one agent and log each refit."""
    explore_rng, model_rng, eval_rng, init_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)
    )
    scorer = _Scorer(mdp, cfg, eval_rng)
    store = ExperienceStore(mdp.n_states, mdp.action_sizes)
    pi = random_policy(mdp, init_rng)
    rows = []
    for episode in range(1, cfg.n_episodes + 1):
        run_episode(mdp, pi, epsilon(episode, cfg), cfg.episode_length, store, explore_rng)
        if episode % cfg.n_train:
            continue
        model = agent.make_model(cfg.decomp, cfg.reward_clip, int(model_rng.integers(2**32)))
        estimate: ModelEstimate = model.fit(store).estimate_
        pi = plan(estimate, pi, cfg.discount, cfg.n_improvement_iter)
        reward_sse = float(np.sum((estimate.reward - mdp.reward) ** 2))
        transition_mse = float(np.mean((estimate.transition - mdp.transition) ** 2))
        if not np.isfinite(reward_sse):
            logger.warning("%s: non-finite reward error at episode %d", agent.name, episode)
        rows.append(MetricsRow(episode, agent.name, scorer(pi) - optimal, reward_sse,
                               transition_mse, store.n_unique))
        if dump_dir is not None:
            d = dump_dir / agent.name
            d.mkdir(parents=True, exist_ok=True)
            save_tensor(d / f"ep{episode:04d}_transition.txt", estimate.transition)
            save_tensor(d / f"ep{episode:04d}_reward.txt", estimate.reward)
    return rows


def repetition_seeds(cfg: ExperimentConfig, rep: int) -> Dict[str, int]:
    """MDP seed ``base_seed + rep``; one independent stream per agent."""
    seeds = {"mdp": cfg.base_seed + rep}
    children = np.random.SeedSequence([cfg.base_seed, rep]).spawn(len(cfg.agents))
    for agent, child in zip(cfg.agent_configs, children):
        seeds[agent.name] = int(child.generate_state(1)[0])
    return seeds


def run_repetition(cfg: ExperimentConfig, rep: int, dump_dir: Optional[Path] = None) -> RunResult:
    start = time.perf_counter()
    seeds = repetition_seeds(cfg, rep)
    mdp = build_mdp(cfg, seeds["mdp"])
    pi_star, _ = optimal_policy(mdp, seed=seeds["mdp"])
    optimal = _Scorer(mdp, cfg, None).optimal(pi_star)
    result = RunResult(rep, seeds=seeds, optimal_return=optimal)
    for agent in cfg.agent_configs:
        sub = None if dump_dir is None else Path(dump_dir) / f"run{rep}"
        result.rows.extend(train_agent(mdp, agent, cfg, seeds[agent.name], optimal, sub))
        logger.info("rep %d: %s done", rep, agent.name)
    result.seconds = time.perf_counter() - start
    return result


def run_experiment(cfg: ExperimentConfig, dump_dir: Optional[Path] = None) -> List[RunResult]:
    """All repetitions, in parallel processes when ``cfg.n_jobs > 1``."""
    reps = range(cfg.repetitions)
    if cfg.n_jobs > 1:
        with ProcessPoolExecutor(cfg.n_jobs) as pool:
            futures = [pool.submit(run_repetition, cfg, rep, dump_dir) for rep in reps]
            return [f.result() for f in futures]
    return [run_repetition(cfg, rep, dump_dir) for rep in reps]


# -- output -------------------------------------------------------------------


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    for row in rows:
        writer.writerow([_fmt(getattr(row, f)) for f in METRIC_FIELDS])
    return buf.getvalue()


def mean_rows(results: List[RunResult]) -> List[MetricsRow]:
    """Average every metric over repetitions, keyed by (episode, agent)."""
    groups: Dict[Tuple[int, str], List[MetricsRow]] = {}
    for res in results:
        for row in res.rows:
            groups.setdefault((row.episode, row.agent), []).append(row)
    out = []
    for (episode, agent), rows in groups.items():
        out.append(MetricsRow(
            episode, agent,
            float(np.mean([r.regret for r in rows])),
            float(np.mean([r.reward_sse for r in rows])),
            float(np.mean([r.transition_mse for r in rows])),
            float(np.mean([r.unique_visited for r in rows])),
        ))
    return out


def write_results(out_dir, cfg: ExperimentConfig, results: List[RunResult]) -> None:
    """``metrics_run{i}.csv``, ``metrics_mean.csv`` and ``manifest.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for res in results:
        (out / f"metrics_run{res.repetition}.csv").write_text(rows_to_csv(res.rows))
    (out / "metrics_mean.csv").write_text(rows_to_csv(mean_rows(results)))
    manifest = [cfg.to_text().rstrip("\n"), ""]
    for res in results:
        seeds = " ".join(f"{k}={v}" for k, v in res.seeds.items())
        manifest.append(f"run{res.repetition}: optimal_return={res.optimal_return!r} {seeds}")
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n")


def read_metrics(path) -> List[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [MetricsRow(int(float(r["episode"])), r["agent"], float(r["regret"]),
                           float(r["reward_sse"]), float(r["transition_mse"]),
                           float(r["unique_visited"]))
                for r in reader]
