"""End-to-end acceptance checks, one test per criterion.

Every test prints a single ``ACn: PASS|FAIL`` line (also echoed in the
terminal summary).  AC5 and AC6 run the full 20-repetition experiments and
take about an hour together on one core.
"""

import time

import numpy as np
import pytest

import test_properties as props
from lowrank_marl.cli import main
from lowrank_marl.completion import complete
from lowrank_marl.decomposition import DecompConfig, decompose, decompose_many, relative_error
from lowrank_marl.generation import generate_cp, generate_tensor, linspace_weights, normalize_transition
from lowrank_marl.harness import ExperimentConfig, run_experiment, write_results
from lowrank_marl.mdp import TabularMDP, evaluate_policy, optimal_policy
from lowrank_marl.tensor import CPForm, reconstruct, save_tensor
from oracles import enumerate_optimal_values

FINAL = 200


def orthonormal_cp(shape, weights, seed):
    cp = generate_cp(shape, len(weights), weights, seed=seed)
    factors = [np.linalg.qr(f.T)[0].T for f in cp.factors]
    return CPForm(np.asarray(weights, dtype=float), factors)


def test_ac1_decomposition_recovery(report):
    start = time.perf_counter()
    errors = []
    for seed in range(20):
        t = reconstruct(orthonormal_cp((20, 10, 10), linspace_weights(5), seed))
        errors.append(relative_error(t, decompose(t, 5, DecompConfig(seed=seed))))
    elapsed = time.perf_counter() - start
    hits = sum(e < 1e-4 for e in errors)
    ok = report("AC1", hits >= 18 and elapsed < 60,
                f"{hits}/20 below 1e-4, worst {max(errors):.2e}, {elapsed:.1f}s")
    assert ok


def test_ac2_completion_recovery(report):
    start = time.perf_counter()
    hits = {}
    for rank in (1, 2):
        errs = []
        for seed in range(20):
            t = generate_tensor((10, 10, 10), rank, seed=seed)
            mask = (np.random.default_rng(1000 + seed).random(t.shape) < 0.5).astype(float)
            approx = reconstruct(complete(t * mask, mask, rank, DecompConfig(seed=seed)))
            errs.append(np.max(np.abs(approx - t)[mask == 0]))
        hits[rank] = sum(e < 1e-4 for e in errs)
    elapsed = time.perf_counter() - start
    ok = report("AC2", min(hits.values()) >= 18 and elapsed < 60,
                f"rank1 {hits[1]}/20, rank2 {hits[2]}/20 below 1e-4 on unobserved entries, {elapsed:.1f}s")
    assert ok


def test_ac3_planning_matches_enumeration(report):
    start = time.perf_counter()
    matches = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        S = int(rng.integers(1, 5))
        T = normalize_transition(rng.random((S, 2, 2, S)) ** 2)
        mdp = TabularMDP(T, rng.standard_normal((S, 2, 2)), float(rng.uniform(0.1, 0.95)))
        pi, _ = optimal_policy(mdp, seed=seed)
        V = evaluate_policy(mdp, pi)[1]
        matches += bool(np.all(np.abs(V - enumerate_optimal_values(mdp)) <= 1e-8))
    elapsed = time.perf_counter() - start
    ok = report("AC3", matches == 50 and elapsed < 60, f"{matches}/50 match enumeration, {elapsed:.1f}s")
    assert ok


def test_ac4_per_state_representability(report):
    slice_err, explicit_err, decomp_err = [], [], []
    S = 20
    for seed in range(20):
        R = generate_tensor((S, 10, 10, 10), 5, linspace_weights(5), seed=seed)
        basis = np.eye(S)
        rebuilt = sum(np.multiply.outer(basis[s], R[s]) for s in range(S))
        slice_err.append(np.max(np.abs(rebuilt - R)))
        # rank-1 model of every state slice, assembled back into one tensor
        slices = decompose_many([R[s] for s in range(S)], 1, DecompConfig(seed=seed))
        A = np.stack([reconstruct(c) for c in slices])
        explicit = CPForm(np.array([c.weights[0] for c in slices]),
                          [basis] + [np.stack([c.factors[j][0] for c in slices]) for j in range(3)])
        explicit_err.append(relative_error(A, explicit))
        decomp_err.append(relative_error(A, decompose(A, S, DecompConfig(seed=seed))))
    hits = sum(e < 1e-3 for e in decomp_err)
    ok = report(
        "AC4",
        max(slice_err) <= 1e-10 and max(explicit_err) < 1e-12 and hits == 20,
        f"slice identity max {max(slice_err):.1e}; explicit rank-{S} form max {max(explicit_err):.1e}; "
        f"decompose at rank {S}: {hits}/20 below 1e-3 (median {np.median(decomp_err):.1e})",
    )
    assert ok


def test_ac7_invariant_suites(report):
    suites = [
        props.test_decomposition_factors_unit_norm,
        props.test_objective_non_increasing,
        props.test_masked_objective_non_increasing,
        props.test_orthogonal_cp_round_trip,
        props.test_policy_improvement_monotone_and_certified,
        props.test_transition_estimates_normalized,
        props.test_unique_visited_non_decreasing,
    ]
    failed = []
    for suite in suites:
        try:
            suite()
        except AssertionError:
            failed.append(suite.__name__)
    ok = report("AC7", not failed,
                f"{len(suites) - len(failed)}/{len(suites)} suites pass at 100 cases each"
                + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok


def _cli_outputs(root):
    src = root / "in"
    src.mkdir()
    t = generate_tensor((6, 5, 4), 2, seed=3)
    save_tensor(src / "t.txt", t)
    save_tensor(src / "mask.txt", (np.random.default_rng(3).random(t.shape) < 0.6).astype(float))
    (src / "cfg.txt").write_text("n_episodes = 6\nn_train = 3\nepisode_length = 20\n"
                                 "agents = baseline, cp:2, tesseract:1\ngen_iters = 2\n")
    out = root / "out"
    commands = [
        ["decompose", "--rank", "2", "--seed", "4", "--in", str(src / "t.txt"), "--out", str(out / "cp.txt")],
        ["complete", "--rank", "2", "--seed", "4", "--in", str(src / "t.txt"), "--mask", str(src / "mask.txt"),
         "--out", str(out / "cc.txt")],
        ["gen-mdp", "--experiment", "degenerate", "--seed", "4", "--out", str(out / "mdp")],
        ["run", "--experiment", "rank5", "--config", str(src / "cfg.txt"), "--reps", "2", "--seed", "4",
         "--out", str(out / "res")],
    ]
    out.mkdir()
    for cmd in commands:
        assert main(cmd) == 0
    return {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


def test_ac8_cli_determinism(report, tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    first, second = _cli_outputs(tmp_path / "a"), _cli_outputs(tmp_path / "b")
    csvs = [k for k in first if k.suffix == ".csv"]
    same = first.keys() == second.keys() and all(first[k] == second[k] for k in first)
    ok = report("AC8", same and len(csvs) >= 3,
                f"{len(first)} output files ({len(csvs)} CSV) byte-identical across reruns: {same}")
    assert ok


def _by(results, episode=None):
    """rows[agent] -> list over repetitions of that agent's rows (optionally one episode)."""
    out = {}
    for res in results:
        per = {}
        for r in res.rows:
            if episode is None or r.episode == episode:
                per.setdefault(r.agent, []).append(r)
        for agent, rows in per.items():
            out.setdefault(agent, []).append(rows if episode is None else rows[0])
    return out


@pytest.mark.slow
def test_ac5_experiment_one(report, tmp_path):
    cfg = ExperimentConfig(experiment="rank5", agents="baseline, cp:5, tesseract:5", repetitions=20)
    start = time.perf_counter()
    results = run_experiment(cfg)
    write_results(tmp_path, cfg, results)
    elapsed = time.perf_counter() - start
    final = _by(results, FINAL)
    mean = {a: {k: np.mean([getattr(r, k) for r in rows]) for k in ("regret", "transition_mse", "unique_visited")}
            for a, rows in final.items()}
    base, cp, tess = mean["baseline"], mean["cp-r5"], mean["tesseract-r5"]

    ok_a = 2 * abs(cp["regret"]) <= abs(base["regret"])
    held = 0
    for rows in _by(results)["cp-r5"]:
        late = [r.reward_sse for r in rows if r.unique_visited >= 4000]
        held += bool(late) and max(late) < 1
    ok_b = held >= 15
    uniq = {a: m["unique_visited"] for a, m in mean.items()}
    ok_c = all(8000 <= u <= 14000 for u in uniq.values())
    # "<" on the first pair, "< or roughly equal" on the second
    ok_d = cp["transition_mse"] < tess["transition_mse"] <= 1.1 * base["transition_mse"]

    ok = report(
        "AC5", ok_a and ok_b and ok_c and ok_d,
        f"(a) regret cp-r5 {cp['regret']:.4f} vs baseline {base['regret']:.4f} [{'ok' if ok_a else 'x'}]; "
        f"(b) SSE<1 after 4000 uniques in {held}/20 [{'ok' if ok_b else 'x'}]; "
        f"(c) uniques {', '.join(f'{a} {u:.0f}' for a, u in uniq.items())} [{'ok' if ok_c else 'x'}]; "
        f"(d) MSE cp {cp['transition_mse']:.2e} tess {tess['transition_mse']:.2e} "
        f"base {base['transition_mse']:.2e} [{'ok' if ok_d else 'x'}]; {elapsed / 60:.1f} min",
    )
    assert ok


@pytest.mark.slow
def test_ac6_degenerate_experiment(report, tmp_path):
    cfg = ExperimentConfig(experiment="degenerate", repetitions=20)
    start = time.perf_counter()
    results = run_experiment(cfg)
    write_results(tmp_path, cfg, results)
    elapsed = time.perf_counter() - start
    final = _by(results, FINAL)
    regret = {a: np.mean([abs(r.regret) for r in rows]) for a, rows in final.items()}
    sse = {a: np.mean([r.reward_sse for r in rows]) for a, rows in final.items()}
    winners, others = ("cp-r4", "cp-r8"), ("baseline", "tesseract-r1", "tesseract-r4")
    ok_regret = all(regret[w] < regret[o] for w in winners for o in others)
    ok_sse = all(sse[w] < sse[o] for w in winners for o in others)
    ok = report(
        "AC6", ok_regret and ok_sse,
        "mean |regret| " + ", ".join(f"{a} {v:.3g}" for a, v in regret.items())
        + "; mean reward SSE " + ", ".join(f"{a} {v:.3g}" for a, v in sse.items())
        + f"; {elapsed / 60:.1f} min",
    )
    assert ok
