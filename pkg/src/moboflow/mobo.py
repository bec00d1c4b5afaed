"""Outer Bayesian-optimization loop over a synthetic multi-objective oracle.

Per round: fit the surrogate on the observed dataset, draw target
preferences, train the flow model against shaped acquisition rewards, sample
a candidate batch, evaluate it on the oracle, and log (HV, Div, Cor).
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .envs import ContractViolation, Env, State
from .exact import (correlation_metric, exact_policy_distribution, policy_for,
                    stratified_test_set)
from .flows import FlowModel
from .pareto import (SCALARIZATIONS, MetricError, diversity, hypervolume,
                     pareto_front, sample_dirichlet, validate_preference)
from .surrogate import Acquisition, SurrogateConfig, make_surrogate
from .trainer import GFNTrainer, TrainConfig, sample_candidates, shape_reward

log = logging.getLogger(__name__)


class SyntheticOracle:
    """Objectives f_m(x) = 1 - 0.5 * || p(x) - c_m ||_1 where p(x) is the
    state's normalized feature histogram and c_m are target profiles on the
    histogram simplex. Profiles must be pairwise distinct so objectives
    conflict."""

    def __init__(self, profiles):
        profiles = np.asarray(profiles, dtype=np.float64)
        if profiles.ndim != 2:
            raise ValueError("profiles must be a (M, histogram_dim) matrix")
        for c in profiles:
            validate_preference(c)
        for i in range(len(profiles)):
            for j in range(i + 1, len(profiles)):
                if np.allclose(profiles[i], profiles[j]):
                    raise ValueError("target profiles must be pairwise distinct")
        self.profiles = profiles

    @property
    def n_objectives(self) -> int:
        return len(self.profiles)

    def evaluate(self, env: Env, x: State) -> np.ndarray:
        if not x.terminal:
            raise ContractViolation("the oracle evaluates terminal states only")
        p = env.histogram(x)
        if p.size != self.profiles.shape[1]:
            raise ValueError("profile width does not match the environment histogram")
        f = 1.0 - 0.5 * np.abs(p[None, :] - self.profiles).sum(axis=1)
        # mathematically in [0, 1]; clip float round-off at the boundaries
        return np.clip(f, 0.0, 1.0)


def default_profiles(env: Env, n_objectives: int) -> np.ndarray:
    """Reference conflicting profiles.

    2 objectives: profiles concentrated on opposite feature corners, so the
    objectives fight over the full capacity budget. On a 2-d grid each
    profile splits its mass between one axis and the slack bin (reaching
    either target spends exactly half the step budget). On richer feature
    sets each profile is a point mass on one extreme feature: f_m is then the
    fraction of capacity spent on that feature, the front is exactly the
    objects built from the two corner features alone, and uniform rollouts
    almost never land on it. 4 objectives: the two corner profiles plus a
    uniformity profile and a sparsity (slack-mass) profile.
    """
    h = env.histogram_dim
    c1 = np.zeros(h)
    c2 = np.zeros(h)
    if h == 3:  # 2-d grid: feature, other feature, slack
        c1[0] = c1[-1] = 0.5
        c2[1] = c2[-1] = 0.5
    else:
        c1[0] = 1.0
        c2[h - 2] = 1.0
    if n_objectives == 2:
        return np.stack([c1, c2])
    if n_objectives == 4:
        c3 = np.zeros(h)
        c3[:h - 1] = 1.0 / (h - 1)     # uniformity over features
        c4 = np.zeros(h)
        c4[-1] = 1.0                   # sparsity: all mass on the slack bin
        return np.stack([c1, c2, c3, c4])
    raise ValueError("default profiles exist for 2 or 4 objectives")


class Dataset:
    """Evaluated (object, objective vector) pairs; no duplicate objects."""

    def __init__(self):
        self._objects: list[State] = []
        self._ys: list[np.ndarray] = []
        self._index: dict[State, int] = {}

    def __len__(self):
        return len(self._objects)

    def __contains__(self, x: State):
        return x in self._index

    def add(self, x: State, y: np.ndarray) -> None:
        if x in self._index:
            raise ValueError(f"duplicate object {x}")
        if not np.all(np.isfinite(y)):
            raise ValueError("objective values must be finite")
        self._index[x] = len(self._objects)
        self._objects.append(x)
        self._ys.append(np.asarray(y, dtype=np.float64))

    @property
    def objects(self):
        return list(self._objects)

    @property
    def ys(self) -> np.ndarray:
        return np.stack(self._ys)

    def front(self):
        keep = pareto_front(self.ys)
        return [self._objects[i] for i in keep], self.ys[keep]


@dataclass
class MoboConfig:
    rounds: int = 8
    batch: int = 100
    init_size: int = 200
    k_preferences: int = 5
    alpha: tuple = (1.0, 1.0)
    scalarization: str = "ws"
    beta_ucb: float = 0.1
    surrogate: str = "evidential"
    retrain: str = "heads"      # 'heads' keeps the trunk across rounds; 'full' reinitializes all
    reference_point: tuple | None = None  # default: origin

    def __post_init__(self):
        if self.rounds < 0 or self.batch < 1:
            raise ValueError("need rounds >= 0 and batch >= 1")
        if not 1 <= self.k_preferences <= self.batch:
            raise ValueError("need 1 <= k_preferences <= batch")
        if self.scalarization not in SCALARIZATIONS:
            raise ValueError(f"unknown scalarization {self.scalarization!r}")
        if self.retrain not in ("heads", "full"):
            raise ValueError("retrain must be 'heads' or 'full'")


@dataclass
class RoundReport:
    round_index: int
    candidates: list
    objective_rows: np.ndarray
    hypervolume: float
    batch_diversity: float
    correlation: float
    wall_clock: float
    seed: int


def uniform_rollout(env: Env, rng) -> State:
    s = env.initial_state()
    while True:
        acts = env.allowed_actions(s)
        s = env.apply_action(s, acts[int(rng.integers(len(acts)))])
        if s.terminal:
            return s


def init_dataset(env: Env, oracle: SyntheticOracle, n: int, rng,
                 attempt_factor: int = 200) -> Dataset:
    """``n`` distinct objects from uniform random rollouts, oracle-evaluated."""
    if n < 1:
        raise ValueError("need n >= 1")
    ds = Dataset()
    attempts = 0
    cap = attempt_factor * n
    while len(ds) < n:
        if attempts >= cap:
            raise ValueError(
                f"environment too small: found only {len(ds)} distinct objects in {attempts} rollouts")
        x = uniform_rollout(env, rng)
        attempts += 1
        if x not in ds:
            ds.add(x, oracle.evaluate(env, x))
    return ds


def build_target_preferences(alpha, k: int, rng):
    """k independent Dirichlet draws (redrawn every round)."""
    if k < 1:
        raise ValueError("need k >= 1")
    return [sample_dirichlet(np.asarray(alpha), rng) for _ in range(k)]


def dataset_hypervolume(ds: Dataset, ref) -> float:
    _, ys = ds.front()
    return hypervolume(ys, ref)


def make_reward_for(acq: Acquisition, env: Env, train_cfg: TrainConfig):
    """Per-preference shaped reward on terminal states."""

    def reward_for(lam):
        lam = np.asarray(lam, dtype=np.float64)

        def reward(x: State) -> float:
            return shape_reward(acq.value(env.featurize(x), lam), train_cfg)

        return reward

    return reward_for


class MoboRunner:
    """Runs (and checkpoints) the outer loop for one seed."""

    def __init__(self, cfg: MoboConfig, env: Env, oracle: SyntheticOracle,
                 train_cfg: TrainConfig, seed: int,
                 surrogate_cfg: SurrogateConfig | None = None,
                 model_kwargs: dict | None = None,
                 conditioning: str = "hypernet",
                 out_dir: str | None = None,
                 cor_test_size: int = 500):
        self.cfg = cfg
        self.env = env
        self.oracle = oracle
        self.train_cfg = train_cfg
        self.seed = seed
        self.surrogate_cfg = surrogate_cfg or SurrogateConfig()
        self.model_kwargs = model_kwargs or {}
        self.conditioning = conditioning
        self.out_dir = Path(out_dir) if out_dir else None
        self.cor_test_size = cor_test_size
        self.ref = np.asarray(cfg.reference_point if cfg.reference_point is not None
                              else np.zeros(oracle.n_objectives))
        self.reports: list[RoundReport] = []
        self.dataset = None
        self.model = None
        self._test_set = None
        self._next_round = 0

    # substream seeds: one SeedSequence child per named component and round
    def _rng(self, name: str, round_index: int = 0):
        tags = {"init": 1, "surrogate": 2, "prefs": 3, "model": 4, "gfn": 5,
                "mc": 6, "test": 7, "heads": 8}
        return np.random.default_rng((self.seed, tags[name], round_index))

    def _build_model(self):
        return FlowModel(self.env, self.oracle.n_objectives, self.conditioning,
                         self._rng("model"), **self.model_kwargs)

    def setup(self):
        self.dataset = init_dataset(self.env, self.oracle, self.cfg.init_size,
                                    self._rng("init"))
        self.model = self._build_model()
        self._test_set = stratified_test_set(
            self.env, lambda x: float(self.oracle.evaluate(self.env, x).mean()),
            self._rng("test"), n_rollouts=self.cor_test_size * 4)

    def run(self):
        if self.dataset is None:
            self.setup()
        while self._next_round < self.cfg.rounds:
            try:
                self.run_round(self._next_round + 1)
            except Exception:
                self._checkpoint()
                raise
        return self.reports

    def run_round(self, round_index: int):
        t0 = time.perf_counter()
        cfg = self.cfg
        x = self.env.featurize_batch(self.dataset.objects)
        y = self.dataset.ys
        surrogate = make_surrogate(cfg.surrogate, self.env.feature_dim,
                                   self.oracle.n_objectives, self.surrogate_cfg)
        surrogate.fit(x, y, self._rng("surrogate", round_index))
        acq = Acquisition(surrogate, cfg.scalarization, cfg.beta_ucb,
                          rng=self._rng("mc", round_index))
        targets = build_target_preferences(cfg.alpha, cfg.k_preferences,
                                           self._rng("prefs", round_index))
        if round_index > 1:
            if cfg.retrain == "full":
                self.model = self._build_model()
            self.model.reinit_heads(self._rng("heads", round_index))
        reward_for = make_reward_for(acq, self.env, self.train_cfg)
        trainer = GFNTrainer(self.model, self.env, self.train_cfg, reward_for,
                             targets, self.dataset.objects,
                             seed=int(self._rng("gfn", round_index).integers(2 ** 31)))
        history = trainer.run()
        if self.out_dir:
            self._write_train_csv(round_index, history)
        candidates = sample_candidates(
            self.model, targets, cfg.batch,
            seed=int(self._rng("gfn", round_index).integers(2 ** 31, 2 ** 32)),
            env=self.env, dedup_against=self.dataset.objects)
        ys = np.stack([self.oracle.evaluate(self.env, c) for c in candidates])
        for c, yv in zip(candidates, ys):
            if c not in self.dataset:
                self.dataset.add(c, yv)
        hv = dataset_hypervolume(self.dataset, self.ref)
        div = diversity([self.env.component_multiset(c) for c in candidates])
        cor = self._correlation(targets, reward_for)
        report = RoundReport(round_index, candidates, ys, hv, div, cor,
                             time.perf_counter() - t0, self.seed)
        self.reports.append(report)
        self._next_round = round_index
        if self.out_dir:
            self._checkpoint()
        log.info("round %d: HV=%.6f Div=%.4f Cor=%.4f (%.1fs)",
                 round_index, hv, div, cor, report.wall_clock)
        return report

    def _correlation(self, targets, reward_for) -> float:
        if len(self._test_set) < 3:
            return float("nan")
        vals = []
        for lam in targets:
            lam_arg = None if self.conditioning == "unconditional" else lam
            dist = exact_policy_distribution(self.env, policy_for(self.model, lam_arg))
            try:
                vals.append(correlation_metric(self.env, dist, reward_for(lam),
                                               self._test_set))
            except MetricError:
                # constant ranks (e.g. the whole test set at floor reward or
                # zero policy mass): correlation undefined for this target
                log.warning("degenerate rank variance; skipping Cor for one target")
        return float(np.mean(vals)) if vals else float("nan")

    # -- persistence --------------------------------------------------------

    def _write_train_csv(self, round_index, history):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / f"train_round_{round_index}.csv"
        with open(path, "w") as fh:
            fh.write("step,loss,lam,source,mean_batch_reward\n")
            for rec in history:
                lam = ";".join(f"{v:.12g}" for v in rec["lam"])
                fh.write(f"{rec['step']},{rec['loss']:.12g},{lam},{rec['source']},"
                         f"{rec['mean_reward']:.12g}\n")

    def _checkpoint(self):
        if not self.out_dir:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        state = {
            "next_round": self._next_round,
            "seed": self.seed,
            "spec_hash": self.env.spec_hash(),
            "dataset": [
                {"content": list(x.content), "y": [float(v) for v in yv]}
                for x, yv in zip(self.dataset.objects, self.dataset.ys)
            ],
            "reports": [
                {
                    "round": r.round_index,
                    "hv": r.hypervolume,
                    "div": r.batch_diversity,
                    "cor": r.correlation,
                    "wall_clock": r.wall_clock,
                    "candidates": [list(c.content) for c in r.candidates],
                    "objectives": [[float(v) for v in row] for row in r.objective_rows],
                }
                for r in self.reports
            ],
        }
        (self.out_dir / "checkpoint.json").write_text(json.dumps(state))
        nn.save_params(self.out_dir / "model_params.json", self.model.named_params())

    def resume(self):
        """Load the round checkpoint from ``out_dir`` and continue."""
        state = json.loads((self.out_dir / "checkpoint.json").read_text())
        if state["spec_hash"] != self.env.spec_hash():
            raise ValueError("checkpoint belongs to a different environment spec")
        self.setup()
        ds = Dataset()
        for entry in state["dataset"]:
            ds.add(State(tuple(entry["content"]), True), np.array(entry["y"]))
        self.dataset = ds
        self.reports = [
            RoundReport(r["round"],
                        [State(tuple(c), True) for c in r["candidates"]],
                        np.array(r["objectives"]), r["hv"], r["div"], r["cor"],
                        r["wall_clock"], state["seed"])
            for r in state["reports"]
        ]
        self._next_round = state["next_round"]
        for name, arr in nn.load_params(self.out_dir / "model_params.json"):
            if name == "trunk":
                self.model.trunk.set_flat_params(arr)
            elif name == "hyper":
                self.model.hyper.set_flat_params(arr)
            elif name == "edge_head":
                self.model.edge_head.set_flat_params(arr)
            elif name == "state_head":
                self.model.state_head.set_flat_params(arr)
        return self.run()


def run_mobo(cfg: MoboConfig, env: Env, oracle: SyntheticOracle,
             train_cfg: TrainConfig, seed: int, **kwargs):
    """Convenience wrapper: run all rounds, return (reports, front states, front rows)."""
    runner = MoboRunner(cfg, env, oracle, train_cfg, seed, **kwargs)
    runner.setup()
    reports = runner.run()
    states, ys = runner.dataset.front()
    return reports, states, ys, runner
