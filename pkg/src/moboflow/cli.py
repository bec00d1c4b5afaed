"""Command-line entry point.

Commands::

    moboflow run synthetic|mobo|ablation|oracle-fixtures --config cfg.yaml
             [--seed N] [--out DIR] [--override key.path=value] [--resume]
             [--gamma-sweep]

Outputs per run: ``manifest.json`` (resolved config, code hash, seeds),
``metrics.csv``/``rounds.csv``/``front.csv`` and per-round training curves.
Exit codes: 0 success, 2 config error, 3 runtime abort (checkpoint written).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .envs import State
from .exact import (correlation_metric, exact_policy_distribution,
                    exact_target_distribution, policy_for, stratified_test_set,
                    write_front_fixture)
from .flows import FlowModel
from .mobo import MoboRunner, make_reward_for
from .pareto import SCALARIZATIONS, diversity, hypervolume, pareto_front
from .trainer import GFNTrainer, shape_reward


def fmt(x) -> str:
    return f"{float(x):.12g}"


def code_hash() -> str:
    root = Path(__file__).parent
    h = hashlib.sha256()
    for path in sorted(root.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def write_manifest(out: Path, cfg: RunConfig, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": cfg.raw,
        "env": cfg.env.describe(),
        "spec_hash": cfg.env.spec_hash(),
        "code_hash": code_hash(),
        "seeds": cfg.seeds,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def evenly_spaced_preferences(m: int, n: int = 5):
    if m != 2:
        raise ConfigError("the evenly spaced evaluation grid is defined for 2 objectives")
    ws = np.linspace(1.0, 0.0, n)
    return [np.array([w, 1.0 - w]) for w in ws]


def oracle_reward_for(cfg: RunConfig):
    scal = SCALARIZATIONS[cfg.mobo.scalarization]

    def reward_for(lam):
        lam = np.asarray(lam, dtype=np.float64)

        def reward(x: State) -> float:
            return shape_reward(scal(lam, cfg.oracle.evaluate(cfg.env, x)), cfg.train)

        return reward

    return reward_for


# -- synthetic ----------------------------------------------------------------

def run_synthetic(cfg: RunConfig, out: Path) -> None:
    syn = cfg.synthetic
    n_samples = int(syn.get("samples_per_preference", 1000))
    top_k = int(syn.get("top_k", 100))
    if syn.get("eval_preferences") is not None:
        prefs = [np.asarray(p, dtype=np.float64) for p in syn["eval_preferences"]]
    else:
        prefs = evenly_spaced_preferences(cfg.oracle.n_objectives)
    if cfg.conditioning == "unconditional" and len(prefs) > 1:
        raise ConfigError("unconditional models cannot be evaluated at multiple preferences")
    reward_for = oracle_reward_for(cfg)

    rows = []
    for seed in cfg.seeds:
        rows.append(_synthetic_one_seed(cfg, reward_for, prefs, seed, n_samples, top_k))
    with open(out / "metrics.csv", "w") as fh:
        fh.write("seed,variant,HV,Div,Cor,L1\n")
        for seed, rec in zip(cfg.seeds, rows):
            fh.write(f"{seed},{cfg.conditioning},{fmt(rec['hv'])},{fmt(rec['div'])},"
                     f"{fmt(rec['cor'])},{fmt(rec['l1'])}\n")
        agg = {k: np.array([r[k] for r in rows]) for k in ("hv", "div", "cor", "l1")}
        fh.write("mean,%s,%s,%s,%s,%s\n" % (cfg.conditioning, fmt(agg["hv"].mean()),
                 fmt(agg["div"].mean()), fmt(agg["cor"].mean()), fmt(agg["l1"].mean())))
        fh.write("std,%s,%s,%s,%s,%s\n" % (cfg.conditioning, fmt(agg["hv"].std()),
                 fmt(agg["div"].std()), fmt(agg["cor"].std()), fmt(agg["l1"].std())))
    with open(out / "per_preference.csv", "w") as fh:
        fh.write("seed,lam1,L1,Cor,mean_obj1_top\n")
        for seed, rec in zip(cfg.seeds, rows):
            for lam, l1, c, m1 in rec["per_pref"]:
                fh.write(f"{seed},{fmt(lam[0])},{fmt(l1)},{fmt(c)},{fmt(m1)}\n")


def _synthetic_one_seed(cfg: RunConfig, reward_for, prefs, seed, n_samples, top_k):
    env = cfg.env
    rng_model = np.random.default_rng((seed, 4))
    model = FlowModel(env, cfg.oracle.n_objectives, cfg.conditioning, rng_model,
                      **cfg.model)
    trainer = GFNTrainer(model, env, cfg.train, reward_for, prefs, [], seed=seed)
    trainer.run()
    test_set = stratified_test_set(
        env, lambda x: float(cfg.oracle.evaluate(env, x).mean()),
        np.random.default_rng((seed, 7)))

    all_ys, divs, cors, l1s, per_pref = [], [], [], [], []
    for pi, lam in enumerate(prefs):
        lam_arg = None if cfg.conditioning == "unconditional" else lam
        rngs = [np.random.default_rng((seed, 9, pi, i)) for i in range(n_samples)]
        trajs = model.sample_trajectories(n_samples, lam_arg, 0.0, rngs)
        xs = [env.apply_action(*t[-1]) for t in trajs]
        ys = np.stack([cfg.oracle.evaluate(env, x) for x in xs])
        reward = reward_for(lam)
        order = np.argsort([-reward(x) for x in xs], kind="stable")[:top_k]
        divs.append(diversity([env.component_multiset(xs[i]) for i in order]))
        dist = exact_policy_distribution(env, policy_for(model, lam_arg))
        target = exact_target_distribution(env, reward)
        l1s.append(dist.l1(target))
        cor = correlation_metric(env, dist, reward, test_set)
        cors.append(cor)
        all_ys.append(ys)
        per_pref.append((lam, l1s[-1], cor, float(ys[order, 0].mean())))
    ys_all = np.concatenate(all_ys)
    hv = hypervolume(ys_all[pareto_front(ys_all)], np.zeros(ys_all.shape[1]))
    return {"hv": hv, "div": float(np.mean(divs)), "cor": float(np.mean(cors)),
            "l1": float(np.mean(l1s)), "per_pref": per_pref, "model": model}


# -- mobo ---------------------------------------------------------------------

def run_mobo_cmd(cfg: RunConfig, out: Path, resume=False, gamma_sweep=False) -> int:
    gammas = [0.0, 0.2, 0.5, 1.0] if gamma_sweep else [cfg.train.hindsight]
    agg_rows = []
    for gamma in gammas:
        train = cfg.train
        train.hindsight = gamma
        for seed in cfg.seeds:
            tag = f"seed_{seed}" if not gamma_sweep else f"gamma_{gamma:g}_seed_{seed}"
            seed_dir = out / tag
            runner = MoboRunner(cfg.mobo, cfg.env, cfg.oracle, train, seed,
                                surrogate_cfg=cfg.surrogate,
                                model_kwargs=cfg.model,
                                conditioning=cfg.conditioning,
                                out_dir=seed_dir)
            try:
                if resume and (seed_dir / "checkpoint.json").exists():
                    runner.resume()
                else:
                    runner.setup()
                    runner.run()
            except Exception as exc:  # checkpointed by the runner
                print(f"round aborted ({exc}); checkpoint at {seed_dir}", file=sys.stderr)
                return 3
            _write_round_files(runner, seed_dir)
            for r in runner.reports:
                agg_rows.append((gamma, seed, r.round_index, r.hypervolume,
                                 r.batch_diversity, r.correlation))
    with open(out / "rounds.csv", "w") as fh:
        fh.write("gamma,seed,round,HV,Div,Cor\n")
        for row in agg_rows:
            fh.write(f"{row[0]:g},{row[1]},{row[2]},{fmt(row[3])},{fmt(row[4])},{fmt(row[5])}\n")
    return 0


def _write_round_files(runner: MoboRunner, seed_dir: Path) -> None:
    with open(seed_dir / "metrics.csv", "w") as fh:
        fh.write("round,HV,Div,Cor\n")
        for r in runner.reports:
            fh.write(f"{r.round_index},{fmt(r.hypervolume)},{fmt(r.batch_diversity)},"
                     f"{fmt(r.correlation)}\n")
    states, ys = runner.dataset.front()
    with open(seed_dir / "front.csv", "w") as fh:
        m = ys.shape[1] if len(ys) else runner.oracle.n_objectives
        fh.write(",".join(f"f{i + 1}" for i in range(m)) + ",object\n")
        for s, row in zip(states, ys):
            enc = "|".join(str(v) for v in s.content)
            fh.write(",".join(fmt(v) for v in row) + f",{enc}\n")


# -- ablation -----------------------------------------------------------------

def run_ablation(cfg: RunConfig, out: Path) -> None:
    alpha_grid = cfg.ablation.get("alpha_grid") or [(1, 1, 1, 1), (3, 3, 1, 1), (3, 4, 2, 1)]
    scals = cfg.ablation.get("scalarizations") or ["ws", "tch"]
    m = cfg.oracle.n_objectives
    rows = []
    for alpha in alpha_grid:
        if len(alpha) != m:
            raise ConfigError(f"alpha {alpha} has wrong length for {m} objectives")
        for scal in scals:
            hvs, divs = [], []
            for seed in cfg.seeds:
                mobo_cfg = cfg.mobo
                mobo_cfg.alpha = tuple(alpha)
                mobo_cfg.scalarization = scal
                train = cfg.train
                train.alpha = tuple(alpha)
                runner = MoboRunner(mobo_cfg, cfg.env, cfg.oracle, train, seed,
                                    surrogate_cfg=cfg.surrogate,
                                    model_kwargs=cfg.model,
                                    conditioning=cfg.conditioning)
                runner.setup()
                reports = runner.run()
                hvs.append(reports[-1].hypervolume if reports else 0.0)
                divs.append(float(np.mean([r.batch_diversity for r in reports]))
                            if reports else 0.0)
            rows.append((alpha, scal, np.mean(hvs), np.std(hvs), np.mean(divs), np.std(divs)))
    with open(out / "ablation.csv", "w") as fh:
        fh.write("alpha,scalarization,HV_mean,HV_std,Div_mean,Div_std\n")
        for alpha, scal, hm, hs, dm, ds in rows:
            a = ";".join(f"{v:g}" for v in alpha)
            fh.write(f"{a},{scal},{fmt(hm)},{fmt(hs)},{fmt(dm)},{fmt(ds)}\n")


# -- fixtures -----------------------------------------------------------------

def run_oracle_fixtures(cfg: RunConfig, out: Path) -> None:
    ref = np.asarray(cfg.mobo.reference_point if cfg.mobo.reference_point is not None
                     else np.zeros(cfg.oracle.n_objectives))
    payload = write_front_fixture(out / "front_fixture.json", cfg.env, cfg.oracle, ref)
    print(f"wrote front fixture: {payload['terminals']} terminals, HV*={payload['HV*']:.6g}")


# -- entry point --------------------------------------------------------------

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="moboflow")
    sub = parser.add_subparsers(dest="verb", required=True)
    run = sub.add_parser("run")
    run.add_argument("command",
                     choices=["synthetic", "mobo", "ablation", "oracle-fixtures"])
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", default=None)
    run.add_argument("--override", action="append", default=[])
    run.add_argument("--resume", action="store_true")
    run.add_argument("--gamma-sweep", action="store_true")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config, overrides=args.override)
        if args.seed is not None:
            cfg.seeds = [args.seed]
        out = Path(args.out or cfg.out or "runs/out")
        write_manifest(out, cfg, args.command)
        if args.command == "synthetic":
            run_synthetic(cfg, out)
        elif args.command == "mobo":
            return run_mobo_cmd(cfg, out, resume=args.resume, gamma_sweep=args.gamma_sweep)
        elif args.command == "ablation":
            run_ablation(cfg, out)
        else:
            run_oracle_fixtures(cfg, out)
    except (ConfigError, FileNotFoundError, KeyError, TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
