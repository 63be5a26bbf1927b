"""Independent reference implementations used only by the tests."""

import itertools

import numpy as np


def brute_contract(t, args):
    """Contraction by explicit loops over every index tuple."""
    t = np.asarray(t, dtype=float)
    free = [j for j, a in enumerate(args) if a is None]
    out = np.zeros([t.shape[j] for j in free])
    for idx in itertools.product(*(range(d) for d in t.shape)):
        coef = t[idx]
        for j, a in enumerate(args):
            if a is not None:
                coef *= a[idx[j]]
        out[tuple(idx[j] for j in free)] += coef
    return out


def brute_reconstruct(weights, factors):
    shape = [f.shape[1] for f in factors]
    out = np.zeros(shape)
    for idx in itertools.product(*(range(d) for d in shape)):
        total = 0.0
        for k, w in enumerate(weights):
            term = w
            for j, f in enumerate(factors):
                term *= f[k, idx[j]]
            total += term
        out[idx] = total
    return out


def value_iteration(mdp, tol=1e-13, max_iters=1_000_000):
    """Optimal state values by repeated Bellman optimality backups."""
    P = mdp.transition.reshape(mdp.n_states, -1, mdp.n_states)
    R = mdp.reward.reshape(mdp.n_states, -1)
    V = np.zeros(mdp.n_states)
    for _ in range(max_iters):
        V_new = np.max(R + mdp.discount * np.einsum("sat,t->sa", P, V), axis=1)
        if np.max(np.abs(V_new - V)) < tol:
            return V_new
        V = V_new
    return V


def policy_value_iteration(mdp, pi, tol=1e-14, max_iters=1_000_000):
    """Value of a fixed deterministic policy by iterating its Bellman operator."""
    S = mdp.n_states
    P = mdp.transition.reshape(S, -1, S)[np.arange(S), pi]
    R = mdp.reward.reshape(S, -1)[np.arange(S), pi]
    V = np.zeros(S)
    for _ in range(max_iters):
        V_new = R + mdp.discount * P @ V
        if np.max(np.abs(V_new - V)) < tol:
            return V_new
        V = V_new
    return V


def solve_policy_value(mdp, pi):
    """Value of a deterministic policy from its Bellman equation, via numpy.linalg.solve."""
    S = mdp.n_states
    P = mdp.transition.reshape(S, -1, S)
    R = mdp.reward.reshape(S, -1)
    P_pi = np.array([P[s, pi[s]] for s in range(S)])
    R_pi = np.array([R[s, pi[s]] for s in range(S)])
    return np.linalg.solve(np.eye(S) - mdp.discount * P_pi, R_pi)


def enumerate_optimal_values(mdp):
    """State-wise best value over every deterministic policy."""
    A = int(np.prod(mdp.action_sizes))
    best = np.full(mdp.n_states, -np.inf)
    for combo in itertools.product(range(A), repeat=mdp.n_states):
        best = np.maximum(best, solve_policy_value(mdp, combo))
    return best
