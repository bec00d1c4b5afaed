"""Flow predictor over environment DAGs with preference conditioning.

The model predicts per-action log edge flows log F(s -> s') at non-terminal
states via a shared encoder trunk and an action-indexed edge head (illegal
actions are masked out). A second head predicts the state flow log F(s) for
diagnostics; the sampling policy normalizes edge flows directly.

Conditioning variants:

* ``unconditional`` -- fixed heads, preference ignored.
* ``concat`` -- fixed heads, preference appended to the trunk input.
* ``hypernet`` -- head weights generated from the preference by a
  hypernetwork (one output head per target-layer parameter block).
"""

from __future__ import annotations

import numpy as np

from .envs import ContractViolation, Env, State
from .nn import FeedForwardNet
from .pareto import validate_preference


def logsumexp(terms: np.ndarray):
    m = float(np.max(terms))
    w = np.exp(terms - m)
    s = float(w.sum())
    return m + np.log(s), w / s  # value and softmax weights


class HyperNetwork:
    """MLP trunk with one linear output head per target parameter block."""

    def __init__(self, in_dim, hidden, block_sizes, rng, out_scale=0.1):
        self.trunk = FeedForwardNet.init([in_dim] + list(hidden), rng, final_nonlinear=True)
        self.block_sizes = list(block_sizes)
        w = hidden[-1]
        self.head_weights = []
        self.head_biases = []
        for size in block_sizes:
            bound = out_scale * np.sqrt(6.0 / w)
            self.head_weights.append(rng.uniform(-bound, bound, size=(w, size)))
            self.head_biases.append(np.zeros(size))

    @property
    def n_params(self) -> int:
        return self.trunk.n_params + sum(w.size + b.size for w, b in zip(self.head_weights, self.head_biases))

    def flat_params(self) -> np.ndarray:
        parts = [self.trunk.flat_params()]
        for w, b in zip(self.head_weights, self.head_biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def set_flat_params(self, flat: np.ndarray) -> None:
        n = self.trunk.n_params
        self.trunk.set_flat_params(flat[:n])
        off = n
        for i, (w, b) in enumerate(zip(self.head_weights, self.head_biases)):
            self.head_weights[i] = np.array(flat[off:off + w.size]).reshape(w.shape)
            off += w.size
            self.head_biases[i] = np.array(flat[off:off + b.size])
            off += b.size
        assert off == len(flat)

    def forward(self, lam: np.ndarray):
        """Generated flat parameter vectors per block, plus a backward cache."""
        enc, cache = self.trunk.forward_cached(lam)
        blocks = [enc @ w + b for w, b in zip(self.head_weights, self.head_biases)]
        return blocks, {"trunk": cache, "enc": enc}

    def backward(self, cache, upstream_blocks):
        """Gradient of a scalar loss w.r.t. all hypernetwork parameters, given
        upstream gradients per generated block."""
        enc = cache["enc"]
        grad_enc = np.zeros_like(enc)
        head_grads = []
        for w, up in zip(self.head_weights, upstream_blocks):
            head_grads.append((np.outer(enc, up), up.copy()))
            grad_enc += w @ up
        trunk_grads, _ = self.trunk.backward(cache["trunk"], grad_enc)
        parts = [self.trunk.flat_grads(trunk_grads)]
        for dw, db in head_grads:
            parts.append(dw.ravel())
            parts.append(db)
        return np.concatenate(parts)


def _layer_blocks(layer_sizes):
    """Flat parameter block sizes, one per layer (W and b together)."""
    return [n_in * n_out + n_out for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:])]


class FlowModel:
    CONDITIONINGS = ("unconditional", "concat", "hypernet")

    def __init__(self, env: Env, n_objectives: int, conditioning: str, rng,
                 trunk_width: int = 256, trunk_depth: int = 3, head_hidden: int = 64,
                 hyper_width: int = 100, hyper_depth: int = 3):
        if conditioning not in self.CONDITIONINGS:
            raise ValueError(f"unknown conditioning {conditioning!r}")
        self.env = env
        self.n_objectives = n_objectives
        self.conditioning = conditioning
        in_dim = env.feature_dim + (n_objectives if conditioning == "concat" else 0)
        self.trunk = FeedForwardNet.init([in_dim] + [trunk_width] * trunk_depth, rng,
                                         final_nonlinear=True)
        self.edge_sizes = [trunk_width, head_hidden, env.n_actions]
        self.state_sizes = [trunk_width, head_hidden, 1]
        self._head_rng_state = rng  # reused for head re-initialization
        if conditioning == "hypernet":
            blocks = _layer_blocks(self.edge_sizes) + _layer_blocks(self.state_sizes)
            self.hyper = HyperNetwork(n_objectives, [hyper_width] * hyper_depth, blocks, rng)
            self.edge_head = None
            self.state_head = None
        else:
            self.hyper = None
            self.edge_head = FeedForwardNet.init(self.edge_sizes, rng)
            self.state_head = FeedForwardNet.init(self.state_sizes, rng)

    # -- parameter plumbing -------------------------------------------------

    def trainable_flat(self) -> np.ndarray:
        parts = [self.trunk.flat_params()]
        if self.hyper is not None:
            parts.append(self.hyper.flat_params())
        else:
            parts.append(self.edge_head.flat_params())
            parts.append(self.state_head.flat_params())
        return np.concatenate(parts)

    def set_trainable_flat(self, flat: np.ndarray) -> None:
        n = self.trunk.n_params
        self.trunk.set_flat_params(flat[:n])
        rest = flat[n:]
        if self.hyper is not None:
            self.hyper.set_flat_params(rest)
        else:
            ne = self.edge_head.n_params
            self.edge_head.set_flat_params(rest[:ne])
            self.state_head.set_flat_params(rest[ne:])

    def reinit_heads(self, rng) -> None:
        """Fresh prediction heads (or hypernetwork), trunk untouched."""
        if self.hyper is not None:
            blocks = self.hyper.block_sizes
            hidden = self.hyper.trunk.layer_sizes[1:]
            self.hyper = HyperNetwork(self.n_objectives, hidden, blocks, rng)
        else:
            self.edge_head = FeedForwardNet.init(self.edge_sizes, rng)
            self.state_head = FeedForwardNet.init(self.state_sizes, rng)

    def named_params(self):
        out = [("trunk", self.trunk.flat_params())]
        if self.hyper is not None:
            out.append(("hyper", self.hyper.flat_params()))
        else:
            out.append(("edge_head", self.edge_head.flat_params()))
            out.append(("state_head", self.state_head.flat_params()))
        return out

    # -- heads --------------------------------------------------------------

    def _check_lam(self, lam):
        if self.conditioning == "unconditional":
            return None
        if lam is None:
            raise ValueError(f"{self.conditioning} conditioning requires a preference vector")
        return validate_preference(lam)

    def head_params(self, lam=None):
        """Prediction-head nets for preference ``lam``.

        Returns (edge_head, state_head, hyper_cache); hyper_cache is None
        unless the heads were generated by the hypernetwork.
        """
        lam = self._check_lam(lam)
        if self.hyper is None:
            return self.edge_head, self.state_head, None
        blocks, cache = self.hyper.forward(lam)
        n_edge = len(self.edge_sizes) - 1
        edge_flat = np.concatenate(blocks[:n_edge])
        state_flat = np.concatenate(blocks[n_edge:])
        edge = FeedForwardNet.from_flat(self.edge_sizes, edge_flat)
        state = FeedForwardNet.from_flat(self.state_sizes, state_flat)
        return edge, state, cache

    # -- evaluation ---------------------------------------------------------

    def _trunk_input(self, states, lam):
        x = self.env.featurize_batch(states)
        if self.conditioning == "concat":
            x = np.concatenate([x, np.broadcast_to(lam, (len(states), len(lam)))], axis=1)
        return x

    def edge_log_flows_batch(self, states, lam=None, keep_cache=False):
        """Raw per-action log edge flows for a batch of non-terminal states.

        Entries for illegal actions are meaningless and must be masked by the
        caller via ``env.allowed_actions``.
        """
        for s in states:
            if s.terminal:
                raise ContractViolation("flows are only predicted at non-terminal states")
        lam = self._check_lam(lam)
        edge_head, state_head, hyper_cache = self.head_params(lam)
        x = self._trunk_input(states, lam)
        enc, trunk_cache = self.trunk.forward_cached(x, keep_cache=keep_cache)
        out, edge_cache = edge_head.forward_cached(enc, keep_cache=keep_cache)
        out = np.atleast_2d(out)
        if not keep_cache:
            return out, None
        cache = {
            "trunk": trunk_cache, "edge": edge_cache, "hyper": hyper_cache,
            "edge_head": edge_head, "state_head": state_head,
        }
        return out, cache

    def backward_from_edge_grads(self, cache, grad_out):
        """Backprop d loss / d edge-head outputs into a flat gradient vector
        congruent to :meth:`trainable_flat`."""
        edge_head = cache["edge_head"]
        edge_grads, grad_enc = edge_head.backward(cache["edge"], grad_out)
        trunk_grads, _ = self.trunk.backward(cache["trunk"], grad_enc)
        parts = [self.trunk.flat_grads(trunk_grads)]
        if self.hyper is not None:
            edge_flat = edge_head.flat_grads(edge_grads)
            blocks = []
            off = 0
            n_edge = len(self.edge_sizes) - 1
            for size in self.hyper.block_sizes[:n_edge]:
                blocks.append(edge_flat[off:off + size])
                off += size
            for size in self.hyper.block_sizes[n_edge:]:
                blocks.append(np.zeros(size))  # state head unused by the loss
            parts.append(self.hyper.backward(cache["hyper"], blocks))
        else:
            parts.append(edge_head.flat_grads(edge_grads))
            parts.append(np.zeros(self.state_head.n_params))
        return np.concatenate(parts)

    def log_edge_flows(self, s: State, lam=None):
        """(legal actions, their log flows, diagnostic log state flow)."""
        out, _ = self.edge_log_flows_batch([s], lam)
        acts = self.env.allowed_actions(s)
        lam_v = self._check_lam(lam)
        _, state_head, _ = self.head_params(lam_v)
        x = self._trunk_input([s], lam_v)
        enc = self.trunk.forward(x)
        log_state = float(np.atleast_2d(state_head.forward(enc))[0, 0])
        return acts, out[0, acts], log_state

    def forward_policy(self, s: State, lam=None):
        """Probabilities over allowed actions: softmax of legal log edge flows."""
        out, _ = self.edge_log_flows_batch([s], lam)
        acts = self.env.allowed_actions(s)
        _, probs = logsumexp(out[0, acts])
        return acts, probs

    def policy_matrix(self, states, lam=None):
        """(n, n_actions) action-probability matrix; illegal entries are 0."""
        out, _ = self.edge_log_flows_batch(states, lam)
        probs = np.zeros_like(out)
        for i, s in enumerate(states):
            acts = self.env.allowed_actions(s)
            _, p = logsumexp(out[i, acts])
            probs[i, acts] = p
        return probs

    def sample_trajectories(self, n, lam, eps, rngs):
        """Sample ``n`` complete trajectories in lockstep (one batched forward
        per step). ``rngs`` is one Generator per trajectory slot; ``eps`` is
        the uniform-mixture exploration weight."""
        if not 0.0 <= eps <= 1.0:
            raise ValueError("eps must lie in [0, 1]")
        if len(rngs) != n:
            raise ValueError("need one rng per trajectory slot")
        env = self.env
        current = [env.initial_state() for _ in range(n)]
        steps = [[] for _ in range(n)]
        active = list(range(n))
        while active:
            states = [current[i] for i in active]
            out, _ = self.edge_log_flows_batch(states, lam)
            next_active = []
            for row, i in enumerate(active):
                s = current[i]
                acts = env.allowed_actions(s)
                if len(acts) == 1:
                    a = acts[0]
                else:
                    rng = rngs[i]
                    if eps > 0.0 and rng.random() < eps:
                        a = acts[int(rng.integers(len(acts)))]
                    else:
                        _, probs = logsumexp(out[row, acts])
                        a = acts[int(rng.choice(len(acts), p=probs))]
                steps[i].append((s, a))
                nxt = env.apply_action(s, a)
                if nxt.terminal:
                    current[i] = nxt
                else:
                    current[i] = nxt
                    next_active.append(i)
            active = next_active
        return steps


# -- flow-matching loss -----------------------------------------------------

def fm_residuals(env: Env, log_flows: np.ndarray, rows: dict, batch):
    """Core of the flow-matching objective, usable with any log-flow table.

    ``log_flows`` is an (n_eval, n_actions) matrix of log edge flows for the
    non-terminal states indexed by ``rows``; ``batch`` is a list of
    (state, reward) with reward > 0 for terminal states and 0 for interior
    ones. Returns (loss, d loss / d log_flows).
    """
    grad = np.zeros_like(log_flows)
    loss = 0.0
    n = len(batch)
    if n == 0:
        raise ValueError("empty flow-matching batch")
    for s, reward in batch:
        if env.is_initial(s):
            raise ContractViolation("the initial state has no parents; exclude it from the batch")
        parents = env.parents(s)
        terms = np.array([log_flows[rows[p], a] for p, a in parents])
        inflow, in_w = logsumexp(terms)
        if s.terminal:
            if not reward > 0.0:
                raise ValueError(f"terminal state {s} needs a positive reward")
            outflow = float(np.log(reward))
            out_acts, out_w = None, None
        else:
            if reward != 0.0:
                raise ValueError("interior states must carry zero reward")
            out_acts = env.allowed_actions(s)
            outflow, out_w = logsumexp(log_flows[rows[s], out_acts])
        delta = inflow - outflow
        loss += delta * delta
        coeff = 2.0 * delta / n
        for (p, a), w in zip(parents, in_w):
            grad[rows[p], a] += coeff * w
        if out_acts is not None:
            for a, w in zip(out_acts, out_w):
                grad[rows[s], a] -= coeff * w
    return loss / n, grad


def fm_eval_states(env: Env, batch):
    """Unique non-terminal states whose edge flows the loss needs, with rows."""
    states = []
    rows = {}

    def add(s):
        if s not in rows:
            rows[s] = len(states)
            states.append(s)

    for s, _ in batch:
        if not s.terminal:
            add(s)
        for p, _a in env.parents(s):
            add(p)
    return states, rows


def fm_loss_and_grads(model: FlowModel, batch, lam=None):
    """Flow-matching loss over ``batch`` plus the flat parameter gradient.

    ``batch`` is a list of (state, reward) pairs; states must be non-initial,
    terminal entries carry their (positive) reward, interior entries 0.
    """
    env = model.env
    states, rows = fm_eval_states(env, batch)
    log_flows, cache = model.edge_log_flows_batch(states, lam, keep_cache=True)
    loss, grad_out = fm_residuals(env, log_flows, rows, batch)
    flat_grads = model.backward_from_edge_grads(cache, grad_out)
    return loss, flat_grads


def consistent_log_flows(env: Env, reward_fn, rows):
    """Exactly flow-consistent log edge flows for an enumerable environment.

    Terminal flows equal the reward; each state's flow is split uniformly over
    its parents, which satisfies the flow consistency equation by
    construction. Returns an (n, n_actions) log-flow matrix over ``rows``.
    """
    states = env.enumerate_states()
    flow = {}
    log_flows = np.full((len(rows), env.n_actions), -np.inf)
    for s in reversed(states):
        if s.terminal:
            r = float(reward_fn(s))
            if not r > 0.0:
                raise ValueError("consistent flows need positive terminal rewards")
            flow[s] = r
        else:
            total = 0.0
            for a in env.allowed_actions(s):
                child = env.apply_action(s, a)
                edge = flow[child] / len(env.parents(child))
                total += edge
                if s in rows:
                    log_flows[rows[s], a] = np.log(edge)
            flow[s] = total
    return log_flows
