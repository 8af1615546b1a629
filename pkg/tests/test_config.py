import json

import pytest
from hypothesis import given, strategies as st

from ntprune.config import CONFIG_VERSION, ConfigError, ExperimentConfig, stage_seed


def test_defaults_round_trip():
    cfg = ExperimentConfig()
    again = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
    assert again == cfg
    assert again.hash == cfg.hash


def test_hash_is_content_addressed():
    a = ExperimentConfig.from_dict({"version": 1, "loss": {"gamma": 2.0}})
    b = ExperimentConfig.from_dict({"loss": {"gamma": 2.0}, "version": 1})
    c = ExperimentConfig.from_dict({"version": 1, "loss": {"gamma": 3.0}})
    assert a.hash == b.hash != c.hash
    assert len(a.hash) == 12 and int(a.hash, 16) >= 0


def test_hash_oracle():
    import hashlib
    cfg = ExperimentConfig()
    canon = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    assert cfg.hash == hashlib.sha256(canon.encode()).hexdigest()[:12]


def test_seed_changes_hash():
    cfg = ExperimentConfig()
    assert cfg.with_seed(1).hash != cfg.hash
    assert cfg.with_seed(0) == cfg


@pytest.mark.parametrize("raw, msg", [
    ({"version": 1, "bogus": 1}, "unknown config keys"),
    ({"version": 1, "admm": {"rho": 1.0, "rh0": 2.0}}, "unknown keys in 'admm'"),
    ({"version": 1, "admm": {"seed": 3}}, "unknown keys in 'admm'"),
    ({"version": 1, "finetune": {"seeds": [1]}}, "unknown keys in 'finetune'"),
    ({"version": 2}, "unsupported config version"),
    ({}, "unsupported config version"),
    ({"version": 1, "seed": "0"}, "seed must be"),
    ({"version": 1, "num_seeds": True}, "num_seeds must be"),
    ({"version": 1, "num_seeds": 0}, "num_seeds must be >= 1"),
    ({"version": 1, "admm": {"target_sparsity": 1.5}}, "invalid 'admm'"),
    ({"version": 1, "grid": {"sizes": [64, 32]}}, "strictly increasing"),
    ({"version": 1, "data": {"kind": "folders"}}, "needs both"),
    ({"version": 1, "loss": 3}, "must be an object"),
    ([1, 2], "JSON object"),
])
def test_rejects(raw, msg):
    with pytest.raises(ConfigError, match=msg):
        ExperimentConfig.from_dict(raw)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        ExperimentConfig.load(tmp_path / "missing.json")
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        ExperimentConfig.load(p)
    p.write_text(json.dumps({"version": CONFIG_VERSION, "architecture": "micro_cnn"}))
    assert ExperimentConfig.load(p).architecture == "micro_cnn"


def test_derived_seeds():
    cfg = ExperimentConfig(num_seeds=3)
    ft = cfg.finetune_config()
    assert len(ft.seeds) == 3 and len(set(ft.seeds)) == 3
    assert cfg.admm_config().seed == cfg.seed_for("prune")
    assert cfg.finetune_config(scheme="LP", revive_zeros=True).scheme == "LP"
    assert cfg.finetune_config(revive_zeros=True).revive_zeros


@given(st.integers(0, 2**32 - 1))
def test_stage_seeds_distinct_and_stable(seed):
    seeds = [stage_seed(seed, s) for s in ("data", "pretrain", "prune", "finetune")]
    assert len(set(seeds)) == 4
    assert all(0 <= s < 2**31 for s in seeds)
    assert seeds == [stage_seed(seed, s) for s in ("data", "pretrain", "prune", "finetune")]


def test_stage_seed_unknown_stage():
    with pytest.raises(ValueError):
        stage_seed(0, "nope")
