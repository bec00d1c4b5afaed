"""Exact dynamic-programming oracles over enumerable environments.

These never sample: terminal distributions are obtained by pushing unit mass
through the policy in topological order, targets by normalizing the reward,
and Pareto fronts by exhaustive enumeration. Monte Carlo hypervolume is the
cross-check for the exact sweep.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .envs import Env, State
from .pareto import MetricError, pareto_front, spearman_cor

MASS_FLOOR = 1e-12


class ExactDistribution:
    """Probabilities over terminal states, with the partition value Z when
    the distribution was derived from a reward."""

    def __init__(self, probs: dict, z: float | None = None):
        total = sum(probs.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {total}, not 1")
        self.probs = probs
        self.z = z

    def __getitem__(self, s: State) -> float:
        return self.probs.get(s, 0.0)

    def l1(self, other: "ExactDistribution") -> float:
        keys = set(self.probs) | set(other.probs)
        return sum(abs(self[k] - other[k]) for k in keys)


def exact_policy_distribution(env: Env, policy_fn) -> ExactDistribution:
    """Terminal distribution of a policy by forward DP in topological order.

    ``policy_fn(states)`` returns an (n, n_actions) probability matrix over
    the given non-terminal states (illegal entries zero).
    """
    states = env.enumerate_states()
    non_terminal = [s for s in states if not s.terminal]
    probs = policy_fn(non_terminal)
    row = {s: i for i, s in enumerate(non_terminal)}
    mass = {env.initial_state(): 1.0}
    terminal_mass = {}
    for s in states:
        m = mass.get(s)
        if m is None:
            continue
        if s.terminal:
            terminal_mass[s] = terminal_mass.get(s, 0.0) + m
            continue
        if 0.0 < m < MASS_FLOOR:
            # enumerable desk-scale envs keep masses well above underflow
            raise ArithmeticError(f"probability mass underflow at {s}")
        p = probs[row[s]]
        for a in env.allowed_actions(s):
            if p[a] > 0.0:
                child = env.apply_action(s, a)
                mass[child] = mass.get(child, 0.0) + m * p[a]
    return ExactDistribution(terminal_mass)


def exact_target_distribution(env: Env, reward_fn) -> ExactDistribution:
    """pi*(x) = R(x) / Z over all terminal states."""
    rewards = {}
    for x in env.terminal_states():
        r = float(reward_fn(x))
        if r < 0.0 or not np.isfinite(r):
            raise ValueError(f"reward must be finite and nonnegative, got {r} at {x}")
        rewards[x] = r
    z = sum(rewards.values())
    if z <= 0.0:
        raise MetricError("all-zero reward: target distribution undefined")
    return ExactDistribution({x: r / z for x, r in rewards.items()}, z=z)


def exact_pareto_front(env: Env, oracle):
    """(terminal states, objective rows) of the exact nondominated set."""
    terminals = env.terminal_states()
    ys = np.stack([oracle.evaluate(env, x) for x in terminals])
    keep = pareto_front(ys)
    return [terminals[i] for i in keep], ys[keep]


def mc_hypervolume(points, ref, samples, rng):
    """Monte Carlo hypervolume: (estimate, standard error).

    Uniform samples in the box from ``ref`` to the component-wise maximum;
    the dominated fraction times the box volume estimates the measure.
    """
    if samples < 10_000:
        raise ValueError("use at least 1e4 samples")
    ref = np.asarray(ref, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return 0.0, 0.0
    hi = pts.max(axis=0)
    box = float(np.prod(hi - ref))
    if box == 0.0:
        return 0.0, 0.0
    draws = rng.uniform(ref, hi, size=(samples, ref.size))
    dominated = np.zeros(samples, dtype=bool)
    for p in pts:
        dominated |= np.all(draws <= p, axis=1)
    frac = dominated.mean()
    se = box * float(np.sqrt(frac * (1.0 - frac) / samples))
    return box * frac, se


def policy_for(model, lam=None):
    """Adapter: FlowModel -> policy_fn for :func:`exact_policy_distribution`."""
    return lambda states: model.policy_matrix(states, lam)


def correlation_metric(env: Env, dist: ExactDistribution, reward_fn, test_set) -> float:
    """Spearman correlation between log sampling probability and log reward
    over a test set of terminal states."""
    log_p, log_r = [], []
    for x in test_set:
        p = dist[x]
        r = float(reward_fn(x))
        log_p.append(np.log(max(p, 1e-300)))
        log_r.append(np.log(max(r, 1e-300)))
    return spearman_cor(log_p, log_r)


def stratified_test_set(env: Env, scalar_fn, rng, n_rollouts=5000, n_bins=10, per_bin_cap=None):
    """Terminal states from uniform rollouts, rejection-stratified to a
    roughly uniform histogram over ``scalar_fn`` values."""
    seen = {}
    for _ in range(n_rollouts):
        s = env.initial_state()
        while True:
            acts = env.allowed_actions(s)
            s = env.apply_action(s, acts[int(rng.integers(len(acts)))])
            if s.terminal:
                break
        if s not in seen:
            seen[s] = float(scalar_fn(s))
    items = list(seen.items())
    if not items:
        return []
    vals = np.array([v for _, v in items])
    lo, hi = vals.min(), vals.max()
    if hi <= lo:
        return [s for s, _ in items]
    bins = np.minimum(((vals - lo) / (hi - lo) * n_bins).astype(int), n_bins - 1)
    counts = np.bincount(bins, minlength=n_bins)
    cap = per_bin_cap or max(1, int(np.median(counts[counts > 0])))
    out, used = [], np.zeros(n_bins, dtype=int)
    order = rng.permutation(len(items))
    for i in order:
        b = bins[i]
        if used[b] < cap:
            used[b] += 1
            out.append(items[i][0])
    return out


# -- golden fixtures ---------------------------------------------------------

def write_front_fixture(path, env: Env, oracle, hv_ref) -> dict:
    """Exact Pareto front golden file: spec hash, enumeration count, front
    objective rows, and the exact hypervolume."""
    from .pareto import hypervolume

    states, ys = exact_pareto_front(env, oracle)
    payload = {
        "specHash": env.spec_hash(),
        "terminals": len(env.terminal_states()),
        "front": [[float(v) for v in row] for row in ys],
        "front_states": [list(s.content) for s in states],
        "reference_point": [float(v) for v in hv_ref],
        "HV*": hypervolume(ys, hv_ref),
    }
    Path(path).write_text(json.dumps(payload, indent=1))
    return payload


def load_front_fixture(path, env: Env) -> dict:
    payload = json.loads(Path(path).read_text())
    if payload["specHash"] != env.spec_hash():
        raise ValueError("fixture was generated for a different environment spec")
    if payload["terminals"] != len(env.terminal_states()):
        raise ValueError("fixture enumeration count is stale")
    return payload
