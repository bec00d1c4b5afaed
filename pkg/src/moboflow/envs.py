"""Discrete compositional environments presented as DAGs with enumerable parents.

Two families:

* ``HyperGrid(dims, side)``: states are coordinate vectors in ``{0..side-1}^dims``;
  extend action ``d`` increments coordinate ``d``.
* ``BagBuilder(vocab, max_items)``: states are token multisets with at most
  ``max_items`` items; extend action ``t`` adds one token ``t``.

Actions are integers: ``0..n_extend-1`` are extends, ``n_extend`` is Stop.
Stop marks the state terminal without changing its content, so every terminal
state has a non-terminal twin as its unique parent.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass

import numpy as np

DEFAULT_ENUMERATION_CAP = 200_000


class EnvSizeError(ValueError):
    """State count exceeds the enumeration cap."""


class ContractViolation(ValueError):
    """An operation was called outside its precondition."""


@dataclass(frozen=True)
class State:
    content: tuple
    terminal: bool = False

    def twin(self) -> "State":
        return State(self.content, not self.terminal)


class Env:
    """Common interface; see :class:`HyperGrid` and :class:`BagBuilder`."""

    n_extend: int
    feature_dim: int
    histogram_dim: int
    max_trajectory_length: int
    enumeration_cap: int = DEFAULT_ENUMERATION_CAP

    @property
    def stop_action(self) -> int:
        return self.n_extend

    @property
    def n_actions(self) -> int:
        return self.n_extend + 1

    def initial_state(self) -> State:
        raise NotImplementedError

    def allowed_actions(self, s: State):
        if s.terminal:
            raise ContractViolation("terminal states have no actions")
        acts = [d for d in range(self.n_extend) if self._can_extend(s, d)]
        acts.append(self.stop_action)
        return acts

    def apply_action(self, s: State, a: int) -> State:
        if s.terminal:
            raise ContractViolation("cannot act on a terminal state")
        if a == self.stop_action:
            return State(s.content, True)
        if not (0 <= a < self.n_extend) or not self._can_extend(s, a):
            raise ContractViolation(f"action {a} illegal in state {s}")
        return self._extend(s, a)

    def parents(self, s: State):
        """All (parent, action) pairs with apply_action(parent, action) == s."""
        if s.terminal:
            return [(s.twin(), self.stop_action)]
        return self._content_parents(s)

    def is_initial(self, s: State) -> bool:
        return not s.terminal and s == self.initial_state()

    def enumerate_states(self):
        """Every state exactly once, parents before children (topological)."""
        contents = list(self._enumerate_contents())
        if 2 * len(contents) > self.enumeration_cap:
            raise EnvSizeError(
                f"{2 * len(contents)} states exceed enumeration cap {self.enumeration_cap}"
            )
        contents.sort(key=lambda c: (sum(c), c))
        out = []
        for c in contents:
            out.append(State(c, False))
        for c in contents:
            out.append(State(c, True))
        # terminal twins come last; every extend strictly increases sum(content),
        # and Stop only flips the flag, so this order is topological.
        out.sort(key=lambda s: (sum(s.content), s.terminal, s.content))
        return out

    def terminal_states(self):
        return [s for s in self.enumerate_states() if s.terminal]

    def backward_trajectory(self, x: State, rng) -> list:
        """A complete trajectory ending at terminal ``x``, built by walking
        uniformly random parents back to the initial state."""
        if not x.terminal:
            raise ContractViolation("backward_trajectory requires a terminal state")
        steps = []
        s = x
        while not (not s.terminal and self.is_initial(s)):
            ps = self.parents(s)
            p, a = ps[int(rng.integers(len(ps)))] if len(ps) > 1 else ps[0]
            steps.append((p, a))
            s = p
        steps.reverse()
        return steps

    def featurize(self, s: State) -> np.ndarray:
        raise NotImplementedError

    def featurize_batch(self, states) -> np.ndarray:
        return np.stack([self.featurize(s) for s in states])

    def histogram(self, s: State) -> np.ndarray:
        """Normalized feature histogram of a state (probability vector),
        including a final slack bin for unused capacity."""
        raise NotImplementedError

    def component_multiset(self, s: State) -> dict:
        """Multiset of components used by the diversity metric."""
        raise NotImplementedError

    def spec_hash(self) -> str:
        return hashlib.sha256(self.describe().encode()).hexdigest()[:16]

    def describe(self) -> str:
        raise NotImplementedError


class HyperGrid(Env):
    def __init__(self, dims: int, side: int, enumeration_cap: int = DEFAULT_ENUMERATION_CAP):
        if dims < 1 or side < 2:
            raise ValueError("need dims >= 1 and side >= 2")
        self.dims = dims
        self.side = side
        self.enumeration_cap = enumeration_cap
        self.n_extend = dims
        self.feature_dim = dims * side  # one-hot per dimension
        self.histogram_dim = dims + 1
        self.max_trajectory_length = dims * (side - 1) + 1
        if 2 * side ** dims > enumeration_cap:
            raise EnvSizeError(f"{2 * side ** dims} states exceed cap {enumeration_cap}")

    def initial_state(self) -> State:
        return State((0,) * self.dims, False)

    def _can_extend(self, s: State, d: int) -> bool:
        return s.content[d] < self.side - 1

    def _extend(self, s: State, d: int) -> State:
        c = list(s.content)
        c[d] += 1
        return State(tuple(c), False)

    def _content_parents(self, s: State):
        out = []
        for d in range(self.dims):
            if s.content[d] > 0:
                c = list(s.content)
                c[d] -= 1
                out.append((State(tuple(c), False), d))
        return out

    def _enumerate_contents(self):
        return itertools.product(range(self.side), repeat=self.dims)

    def featurize(self, s: State) -> np.ndarray:
        x = np.zeros(self.feature_dim)
        for d, v in enumerate(s.content):
            x[d * self.side + v] = 1.0
        return x

    def histogram(self, s: State) -> np.ndarray:
        cap = self.dims * (self.side - 1)
        h = np.empty(self.dims + 1)
        h[: self.dims] = np.asarray(s.content, dtype=np.float64) / cap
        h[self.dims] = 1.0 - sum(s.content) / cap
        return h

    def component_multiset(self, s: State) -> dict:
        return {d: v for d, v in enumerate(s.content) if v > 0}

    def describe(self) -> str:
        return f"hypergrid(dims={self.dims},side={self.side})"


class BagBuilder(Env):
    def __init__(self, vocab: int, max_items: int, enumeration_cap: int = DEFAULT_ENUMERATION_CAP):
        if vocab < 1 or max_items < 1:
            raise ValueError("need vocab >= 1 and max_items >= 1")
        self.vocab = vocab
        self.max_items = max_items
        self.enumeration_cap = enumeration_cap
        self.n_extend = vocab
        self.feature_dim = vocab + 1  # normalized counts + fill fraction
        self.histogram_dim = vocab + 1
        self.max_trajectory_length = max_items + 1

    def initial_state(self) -> State:
        return State((0,) * self.vocab, False)

    def _can_extend(self, s: State, t: int) -> bool:
        return sum(s.content) < self.max_items

    def _extend(self, s: State, t: int) -> State:
        c = list(s.content)
        c[t] += 1
        return State(tuple(c), False)

    def _content_parents(self, s: State):
        out = []
        for t in range(self.vocab):
            if s.content[t] > 0:
                c = list(s.content)
                c[t] -= 1
                out.append((State(tuple(c), False), t))
        return out

    def _enumerate_contents(self):
        # all count vectors with sum <= max_items (stars and bars per total)
        def rec(prefix, remaining, slots):
            if slots == 1:
                for v in range(remaining + 1):
                    yield prefix + (v,)
                return
            for v in range(remaining + 1):
                yield from rec(prefix + (v,), remaining - v, slots - 1)

        return rec((), self.max_items, self.vocab)

    def featurize(self, s: State) -> np.ndarray:
        x = np.empty(self.feature_dim)
        x[: self.vocab] = np.asarray(s.content, dtype=np.float64) / self.max_items
        x[self.vocab] = sum(s.content) / self.max_items
        return x

    def histogram(self, s: State) -> np.ndarray:
        h = np.empty(self.vocab + 1)
        h[: self.vocab] = np.asarray(s.content, dtype=np.float64) / self.max_items
        h[self.vocab] = 1.0 - sum(s.content) / self.max_items
        return h

    def component_multiset(self, s: State) -> dict:
        return {t: v for t, v in enumerate(s.content) if v > 0}

    def describe(self) -> str:
        return f"bag(vocab={self.vocab},max_items={self.max_items})"


def make_env(kind: str, **kwargs) -> Env:
    if kind == "hypergrid":
        return HyperGrid(kwargs["dims"], kwargs["side"],
                         kwargs.get("enumeration_cap", DEFAULT_ENUMERATION_CAP))
    if kind == "bag":
        return BagBuilder(kwargs["vocab"], kwargs["max_items"],
                          kwargs.get("enumeration_cap", DEFAULT_ENUMERATION_CAP))
    raise ValueError(f"unknown environment kind {kind!r}")


def validate_trajectory(env: Env, steps) -> None:
    """Assert ``steps`` is a legal complete trajectory: starts at the initial
    state, every transition is a legal edge, and the last action is Stop."""
    if not steps:
        raise ContractViolation("empty trajectory")
    if steps[0][0] != env.initial_state():
        raise ContractViolation("trajectory does not start at the initial state")
    if len(steps) > env.max_trajectory_length:
        raise ContractViolation("trajectory exceeds the environment length cap")
    s = steps[0][0]
    for state, action in steps:
        if state != s:
            raise ContractViolation("trajectory states do not chain")
        if action not in env.allowed_actions(state):
            raise ContractViolation(f"illegal action {action} at {state}")
        s = env.apply_action(state, action)
    if not s.terminal:
        raise ContractViolation("trajectory does not end with Stop")


def trajectory_states(env: Env, steps):
    """All visited states except the initial one, ending with the terminal."""
    out = []
    for state, action in steps:
        nxt = env.apply_action(state, action)
        out.append(nxt)
    return out
