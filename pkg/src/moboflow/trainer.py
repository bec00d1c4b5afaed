"""Training loop for the preference-conditioned flow model.

Implements the hindsight-like off-policy strategy: per-target-preference
replay buffers of the best terminal states seen so far, a preference mixture
between Dirichlet draws and the target set, and minibatches that combine
online rollouts with offline trajectories (replay or dataset objects).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .envs import Env, State, trajectory_states
from .flows import FlowModel, fm_loss_and_grads
from .nn import AdamState, adam_step, clip_global_norm
from .pareto import sample_dirichlet

log = logging.getLogger(__name__)


class DegenerateEnvironmentError(RuntimeError):
    """Candidate sampling could not find any novel object."""


@dataclass
class TrainConfig:
    steps: int = 5000
    online_batch: int = 8
    offline_batch: int = 8
    hindsight: float = 0.2          # gamma: probability of replaying a target preference
    eps_uniform: float = 0.05       # uniform-policy mixture weight for online rollouts
    lr: float = 5e-4
    reward_exponent: float = 8.0
    reward_norm: float = 1.0
    min_reward: float = 1e-4
    alpha: tuple = (1.0, 1.0)       # Dirichlet parameter over preferences
    replay_capacity: int = 1000
    grad_clip: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.hindsight <= 1.0:
            raise ValueError("hindsight gamma must lie in [0, 1]")
        if self.reward_exponent < 1.0:
            raise ValueError("reward exponent must be >= 1")
        if min(self.steps, self.online_batch, self.offline_batch) < 1:
            raise ValueError("counts must be positive")


def shape_reward(acq_value: float, cfg: TrainConfig) -> float:
    """max(min_reward, (clamp(acq, 0, norm) / norm) ** exponent)."""
    if not np.isfinite(acq_value):
        raise ValueError("acquisition value must be finite")
    clipped = min(max(acq_value, 0.0), cfg.reward_norm) / cfg.reward_norm
    return max(cfg.min_reward, clipped ** cfg.reward_exponent)


def sample_preference(cfg: TrainConfig, targets, rng):
    """(lambda, source flag): with probability gamma a uniform member of the
    target set ('hindsight'), else a Dirichlet draw ('dirichlet')."""
    if not targets:
        raise ValueError("target preference set is empty")
    if rng.random() < cfg.hindsight:
        return np.array(targets[int(rng.integers(len(targets)))]), "hindsight"
    return sample_dirichlet(np.asarray(cfg.alpha), rng), "dirichlet"


class ReplayBuffer:
    """Top-k distinct terminal states for one target preference, sorted by
    descending shaped reward (ties broken by insertion order)."""

    def __init__(self, lam_target, capacity: int = 1000):
        self.lam_target = np.asarray(lam_target, dtype=np.float64)
        self.capacity = capacity
        self._entries: list[tuple[float, int, State]] = []  # (reward, seq, state)
        self._rewards: dict[State, float] = {}
        self._seq = 0

    def __len__(self):
        return len(self._entries)

    def insert(self, state: State, reward: float) -> None:
        if not (np.isfinite(reward) and reward > 0.0):
            raise ValueError("replay rewards must be finite and positive")
        old = self._rewards.get(state)
        if old is not None:
            if reward <= old:
                return
            self._entries = [e for e in self._entries if e[2] != state]
        self._rewards[state] = reward
        self._seq += 1
        self._entries.append((reward, self._seq, state))
        self._entries.sort(key=lambda e: (-e[0], e[1]))
        while len(self._entries) > self.capacity:
            r, _, s = self._entries.pop()
            del self._rewards[s]

    def top(self, k: int):
        return [s for _, _, s in self._entries[:k]]

    def states(self):
        return [s for _, _, s in self._entries]


class GFNTrainer:
    """One round of flow-model training against a per-preference reward.

    ``reward_for(lam)`` must return a deterministic map from terminal states
    to shaped rewards (already floored at min_reward).
    """

    def __init__(self, model: FlowModel, env: Env, cfg: TrainConfig, reward_for,
                 targets, dataset_objects, seed: int):
        self.model = model
        self.env = env
        self.cfg = cfg
        self.reward_for = reward_for
        self.targets = [np.asarray(t, dtype=np.float64) for t in targets]
        self.dataset_objects = list(dataset_objects)
        self.seed = seed
        self.replays = [ReplayBuffer(t, cfg.replay_capacity) for t in self.targets]
        self._params = model.trainable_flat()
        self._adam = AdamState(len(self._params), cfg.lr)
        self._reward_cache: dict[tuple, dict[State, float]] = {}
        self._step_count = 0

    def _cached_reward(self, lam) -> callable:
        key = tuple(np.round(np.asarray(lam), 12))
        fn = self.reward_for(np.asarray(lam))
        cache = self._reward_cache.setdefault(key, {})

        def cached(x: State) -> float:
            if x not in cache:
                cache[x] = float(fn(x))
            return cache[x]

        return cached

    def _slot_rngs(self, step: int, n: int, tag: int):
        # per-trajectory streams derived from (seed, step, slot): reproducible
        # regardless of evaluation order
        return [np.random.default_rng((self.seed, step, tag, slot)) for slot in range(n)]

    def step(self) -> dict:
        cfg = self.cfg
        step = self._step_count
        self._step_count += 1
        rng = np.random.default_rng((self.seed, step, 0))
        lam, flag = sample_preference(cfg, self.targets, rng)
        lam_arg = None if self.model.conditioning == "unconditional" else lam

        online = self.model.sample_trajectories(
            cfg.online_batch, lam_arg, cfg.eps_uniform, self._slot_rngs(step, cfg.online_batch, 1))

        offline = []
        off_rngs = self._slot_rngs(step, cfg.offline_batch, 2)
        if flag == "hindsight":
            buf = self.replays[self._target_index(lam)]
            top = buf.top(cfg.offline_batch)
            if top:
                for i, x in enumerate(top):
                    offline.append(self.env.backward_trajectory(x, off_rngs[i]))
            else:
                log.info("empty replay buffer on hindsight draw; falling back to dataset")
        if not offline and self.dataset_objects:
            for i in range(cfg.offline_batch):
                x = self.dataset_objects[int(off_rngs[i].integers(len(self.dataset_objects)))]
                offline.append(self.env.backward_trajectory(x, off_rngs[i]))

        reward = self._cached_reward(lam)
        batch, seen = [], set()
        mean_reward, n_terminal = 0.0, 0
        for traj in online + offline:
            for s in trajectory_states(self.env, traj):
                if s in seen:
                    continue
                seen.add(s)
                r = reward(s) if s.terminal else 0.0
                batch.append((s, r))
                if s.terminal:
                    mean_reward += r
                    n_terminal += 1

        # store every newly sampled terminal in all replay buffers with its
        # per-target reward
        for traj in online:
            x = self.env.apply_action(*traj[-1])
            for buf, t in zip(self.replays, self.targets):
                buf.insert(x, self._cached_reward(t)(x))

        loss, grads = fm_loss_and_grads(self.model, batch, lam_arg)
        grads = clip_global_norm(grads, cfg.grad_clip)
        self._params = adam_step(self._adam, self._params, grads)
        self.model.set_trainable_flat(self._params)
        return {
            "step": step,
            "loss": loss,
            "lam": lam,
            "source": flag,
            "mean_reward": mean_reward / max(n_terminal, 1),
        }

    def _target_index(self, lam) -> int:
        for i, t in enumerate(self.targets):
            if np.array_equal(t, lam):
                return i
        raise ValueError("hindsight preference is not a member of the target set")

    def run(self, steps: int | None = None, callback=None):
        history = []
        for _ in range(steps if steps is not None else self.cfg.steps):
            rec = self.step()
            history.append(rec)
            if callback is not None:
                callback(rec)
        return history


def sample_candidates(model: FlowModel, targets, b: int, seed: int, env: Env,
                      dedup_against=(), attempt_factor: int = 50):
    """A batch of ``b`` terminal states: b/k greedy (eps=0) rollouts per
    target preference, deduplicated against the dataset and the batch.

    If the attempt cap is hit, duplicates of batch members are accepted as a
    last resort (logged); zero novel objects is a degenerate environment.
    """
    known = set(dedup_against)
    targets = [np.asarray(t, dtype=np.float64) for t in targets]
    k = len(targets)
    per = b // k
    counts = [per] * k
    counts[-1] += b - per * k  # last preference takes the remainder
    batch: list[State] = []
    for ti, (lam, want) in enumerate(zip(targets, counts)):
        lam_arg = None if model.conditioning == "unconditional" else lam
        got: list[State] = []
        attempts = 0
        cap = attempt_factor * max(want, 1)
        chunk = max(want, 8)
        while len(got) < want and attempts < cap:
            rngs = [np.random.default_rng((seed, 3, ti, attempts + i)) for i in range(chunk)]
            trajs = model.sample_trajectories(chunk, lam_arg, 0.0, rngs)
            attempts += chunk
            for traj in trajs:
                if len(got) >= want:
                    break
                x = env.apply_action(*traj[-1])
                if x in known:
                    continue
                known.add(x)
                got.append(x)
        if len(got) < want:
            if not batch and not got:
                raise DegenerateEnvironmentError(
                    "attempt cap exhausted with zero novel objects")
            log.warning("attempt cap reached for preference %s; accepting batch duplicates", lam)
            pool = got + batch
            while len(got) < want:
                got.append(pool[len(got) % len(pool)])
        batch.extend(got)
    return batch
