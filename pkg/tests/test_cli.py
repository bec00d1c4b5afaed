"""Configuration loading and the command-line entry point."""

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from moboflow.cli import (code_hash, evenly_spaced_preferences, fmt, main,
                          oracle_reward_for)
from moboflow.config import ConfigError, apply_overrides, load_config
from moboflow.envs import BagBuilder, HyperGrid

TINY = {
    "env": {"kind": "bag", "vocab": 3, "max_items": 3},
    "objectives": {"count": 2},
    "model": {"conditioning": "hypernet", "trunk_width": 16, "trunk_depth": 2,
              "head_hidden": 8, "hyper_width": 12, "hyper_depth": 2},
    "train": {"steps": 20, "online_batch": 4, "offline_batch": 4},
    "mobo": {"rounds": 1, "batch": 4, "init_size": 12, "k_preferences": 2},
    "surrogate": {"hidden": 16, "depth": 2, "max_iters": 200, "patience": 100,
                  "min_dataset": 10},
    "synthetic": {"samples_per_preference": 50, "top_k": 10},
    "seeds": [0],
}


def write_cfg(tmp_path, extra=None, **kw):
    cfg = json.loads(json.dumps(TINY))
    cfg.update(kw)
    if extra:
        for k, v in extra.items():
            cfg.setdefault(k, {}).update(v)
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


class TestConfig:
    def test_load_defaults(self, tmp_path):
        cfg = load_config(write_cfg(tmp_path))
        assert isinstance(cfg.env, BagBuilder)
        assert cfg.oracle.n_objectives == 2
        assert cfg.train.steps == 20
        assert cfg.mobo.k_preferences == 2
        assert cfg.seeds == [0]

    def test_unknown_section_rejected(self, tmp_path):
        path = write_cfg(tmp_path, extra=None)
        raw = yaml.safe_load(path.read_text())
        raw["experiments"] = {}
        path.write_text(yaml.safe_dump(raw))
        with pytest.raises(ConfigError, match="unknown config section"):
            load_config(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = write_cfg(tmp_path)
        raw = yaml.safe_load(path.read_text())
        raw["train"]["momentum"] = 0.9
        path.write_text(yaml.safe_dump(raw))
        with pytest.raises(ConfigError, match="unknown key train.momentum"):
            load_config(path)

    def test_overrides_take_precedence(self, tmp_path):
        cfg = load_config(write_cfg(tmp_path), overrides=["train.steps=99"])
        assert cfg.train.steps == 99

    def test_override_bad_format(self):
        with pytest.raises(ConfigError):
            apply_overrides({}, ["train.steps"])

    def test_alpha_length_checked(self, tmp_path):
        with pytest.raises(ConfigError, match="alpha length"):
            load_config(write_cfg(tmp_path),
                        overrides=["train.alpha=[1.0, 1.0, 1.0]"])

    def test_default_env_is_grid(self, tmp_path):
        raw = {"seeds": [0]}
        path = tmp_path / "min.yaml"
        path.write_text(yaml.safe_dump(raw))
        cfg = load_config(path)
        assert isinstance(cfg.env, HyperGrid)
        assert cfg.env.dims == 2 and cfg.env.side == 16

    def test_default_k_by_objective_count(self, tmp_path):
        cfg2 = load_config(write_cfg(tmp_path, mobo={"rounds": 1, "batch": 100,
                                                     "init_size": 12}))
        assert cfg2.mobo.k_preferences == 5
        cfg4 = load_config(write_cfg(tmp_path, objectives={"count": 4},
                                     mobo={"rounds": 1, "batch": 100,
                                           "init_size": 12}))
        assert cfg4.mobo.k_preferences == 10

    def test_empty_seeds_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write_cfg(tmp_path, seeds=[]))

    def test_explicit_profiles(self, tmp_path):
        cfg = load_config(write_cfg(tmp_path, objectives={
            "profiles": [[1.0, 0, 0, 0], [0, 0, 1.0, 0]]}))
        assert cfg.oracle.n_objectives == 2


class TestHelpers:
    def test_fmt_12_digits(self):
        assert fmt(1.0 / 3.0) == "0.333333333333"

    def test_evenly_spaced_grid(self):
        prefs = evenly_spaced_preferences(2)
        expected = [(1, 0), (0.75, 0.25), (0.5, 0.5), (0.25, 0.75), (0, 1)]
        for p, e in zip(prefs, expected):
            assert np.allclose(p, e)
        with pytest.raises(ConfigError):
            evenly_spaced_preferences(3)

    def test_code_hash_stable(self):
        assert code_hash() == code_hash()
        assert len(code_hash()) == 16

    def test_oracle_reward_positive(self, tmp_path):
        cfg = load_config(write_cfg(tmp_path))
        reward = oracle_reward_for(cfg)(np.array([0.5, 0.5]))
        for x in cfg.env.terminal_states()[:5]:
            assert reward(x) >= cfg.train.min_reward


class TestCliCommands:
    def test_missing_config_exits_2(self, tmp_path):
        assert main(["run", "mobo", "--config", str(tmp_path / "nope.yaml")]) == 2

    def test_bad_override_exits_2(self, tmp_path):
        path = write_cfg(tmp_path)
        assert main(["run", "mobo", "--config", str(path),
                     "--override", "train.bogus=1"]) == 2

    def test_unconditional_multi_pref_synthetic_exits_2(self, tmp_path, capsys):
        path = write_cfg(tmp_path, model={"conditioning": "unconditional",
                                          "trunk_width": 16, "trunk_depth": 2,
                                          "head_hidden": 8})
        code = main(["run", "synthetic", "--config", str(path),
                     "--out", str(tmp_path / "out")])
        assert code == 2
        assert "config error" in capsys.readouterr().err

    def test_oracle_fixtures(self, tmp_path, capsys):
        path = write_cfg(tmp_path)
        out = tmp_path / "fix"
        assert main(["run", "oracle-fixtures", "--config", str(path),
                     "--out", str(out)]) == 0
        payload = json.loads((out / "front_fixture.json").read_text())
        assert payload["terminals"] == 20  # C(3+3,3) multisets
        assert payload["HV*"] > 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "oracle-fixtures"
        assert manifest["seeds"] == [0]

    def test_mobo_outputs_and_determinism(self, tmp_path):
        path = write_cfg(tmp_path, env={"kind": "bag", "vocab": 4, "max_items": 4})
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["run", "mobo", "--config", str(path), "--out", str(out1)]) == 0
        assert main(["run", "mobo", "--config", str(path), "--out", str(out2)]) == 0
        for name in ["rounds.csv", "seed_0/metrics.csv", "seed_0/front.csv",
                     "seed_0/train_round_1.csv"]:
            a = (out1 / name).read_bytes()
            b = (out2 / name).read_bytes()
            assert a == b, f"{name} not byte-identical"
        header = (out1 / "rounds.csv").read_text().splitlines()[0]
        assert header == "gamma,seed,round,HV,Div,Cor"

    def test_seed_flag_overrides_seed_list(self, tmp_path):
        path = write_cfg(tmp_path, env={"kind": "bag", "vocab": 4, "max_items": 4},
                         seeds=[0, 1])
        out = tmp_path / "out"
        assert main(["run", "mobo", "--config", str(path), "--seed", "1",
                     "--out", str(out)]) == 0
        assert (out / "seed_1").is_dir()
        assert not (out / "seed_0").exists()

    def test_synthetic_outputs(self, tmp_path):
        path = write_cfg(tmp_path)
        out = tmp_path / "syn"
        assert main(["run", "synthetic", "--config", str(path),
                     "--out", str(out)]) == 0
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == "seed,variant,HV,Div,Cor,L1"
        assert lines[1].startswith("0,hypernet,")
        assert [l.split(",")[0] for l in lines[1:]] == ["0", "mean", "std"]
        per_pref = (out / "per_preference.csv").read_text().splitlines()
        assert per_pref[0] == "seed,lam1,L1,Cor,mean_obj1_top"
        assert len(per_pref) == 1 + 5  # 5 evenly spaced preferences

    def test_ablation_outputs(self, tmp_path):
        path = write_cfg(tmp_path, ablation={"alpha_grid": [[1, 1]],
                                             "scalarizations": ["ws", "tch"]})
        out = tmp_path / "abl"
        assert main(["run", "ablation", "--config", str(path),
                     "--out", str(out)]) == 0
        lines = (out / "ablation.csv").read_text().splitlines()
        assert lines[0] == "alpha,scalarization,HV_mean,HV_std,Div_mean,Div_std"
        assert len(lines) == 3
        assert lines[1].split(",")[1] == "ws"
        assert lines[2].split(",")[1] == "tch"

    def test_console_entry_point(self, tmp_path):
        path = write_cfg(tmp_path)
        proc = subprocess.run(
            [sys.executable, "-m", "moboflow.cli", "run", "oracle-fixtures",
             "--config", str(path), "--out", str(tmp_path / "o")],
            capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
