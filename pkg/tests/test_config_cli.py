import json

import pytest
import yaml
from hypothesis import given, settings, strategies as st

from revertlab.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, main
from revertlab.config import ConfigError, RunConfig, config_from_dict, load_config, save_config
from revertlab.revertlm import load_defaults

TINY = {
    "corpus": {"n": 300},
    "model": {"n_blocks": 2, "d_model": 16, "n_heads": 2, "d_ff": 32},
    "victim": {"epochs": 1},
    "recipe": {
        "step1": {"epochs": 1, "lr": 0.005},
        "step2": {"epochs": 1, "lr": 0.002},
        "step3": {"epochs": 1, "lr": 0.0005},
    },
    "attacker": {"d_model": 16, "n_blocks": 1, "n_heads": 2, "d_ff": 32},
    "mi": {"n_samples": 150},
}


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p


def test_defaults_come_from_versioned_file():
    d = load_defaults()
    assert isinstance(d["version"], int)
    cfg = RunConfig()
    assert cfg.victim.epochs == d["victim"]["epochs"]
    assert cfg.recipe.step2.epochs == d["recipe"]["step2"]["epochs"]
    assert cfg.purifier.variant == d["purifier"]["variant"]


def test_round_trip_through_file(tmp_path):
    cfg = config_from_dict(TINY).replace(seed=4, taps=("1:attention_out",))
    save_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back == cfg
    assert back.config_hash() == cfg.config_hash()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(10, 10_000), lr=st.floats(1e-5, 1.0))
def test_serialization_is_lossless(seed, n, lr):
    data = {"seed": seed, "corpus": {"n": n}, "victim": {"lr": lr}}
    cfg = config_from_dict(data)
    assert config_from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_unknown_and_invalid_keys_rejected():
    with pytest.raises(ConfigError, match="unknown keys"):
        config_from_dict({"modle": {}})
    with pytest.raises(ConfigError, match="momentum"):
        config_from_dict({"recipe": {"step1": {"epochs": 1, "lr": 0.1, "momentum": 0.9}}})
    with pytest.raises(ConfigError):
        config_from_dict({"taps": ["0:nowhere"]})
    with pytest.raises(ConfigError):
        config_from_dict({"corpus": {"source": "file"}})
    with pytest.raises(ConfigError):
        config_from_dict({"purifier": {"variant": "magic"}})


def test_env_overrides_paths_only(tmp_path, monkeypatch):
    monkeypatch.setenv("REVERTLAB_OUT", str(tmp_path / "o"))
    monkeypatch.setenv("REVERTLAB_VICTIM", "/v.ckpt")
    monkeypatch.setenv("REVERTLAB_SEED", "9")
    cfg = load_config(None)
    assert cfg.output_dir == str(tmp_path / "o")
    assert cfg.victim.checkpoint == "/v.ckpt"
    assert cfg.seed == 0


def test_manifest_is_a_config(tiny, tmp_path):
    out = tmp_path / "run"
    assert main(["synth-data", "--config", str(tiny), "--out", str(out), "--seed", "3"]) == EXIT_OK
    m = json.loads((out / "manifest.json").read_text())
    cfg = load_config(out / "manifest.json")
    assert cfg.seed == 3
    assert m["config_hash"] == cfg.config_hash()
    for name in m["artifacts"]:
        assert (out / name).exists()
    emitted = {str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()} - {"manifest.json"}
    assert emitted == set(m["artifacts"])


def test_exit_codes(tiny, tmp_path, monkeypatch):
    monkeypatch.delenv("REVERTLAB_VICTIM", raising=False)
    bad = tmp_path / "bad.yaml"
    bad.write_text("nonsense: 1\n")
    assert main(["synth-data", "--config", str(bad), "--out", str(tmp_path / "a")]) == EXIT_CONFIG
    assert main(["capture", "--config", str(tiny), "--out", str(tmp_path / "b")]) == EXIT_MISSING
    monkeypatch.setenv("REVERTLAB_VICTIM", str(tmp_path / "missing.ckpt"))
    assert main(["attack-train", "--config", str(tiny), "--out", str(tmp_path / "c")]) == EXIT_MISSING
    assert main(["attack-train", "--config", str(tiny), "--out", str(tmp_path / "d"), "--tap", "9"]) == EXIT_CONFIG


def test_runs_never_touch_a_finished_run(tiny, tmp_path):
    out = tmp_path / "run"
    assert main(["synth-data", "--config", str(tiny), "--out", str(out)]) == EXIT_OK
    before = {p: p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert main(["synth-data", "--config", str(tiny), "--out", str(out)]) == EXIT_CONFIG
    assert {p: p.read_bytes() for p in out.rglob("*") if p.is_file()} == before


def test_pipeline_and_rerun_from_manifest(tiny, tmp_path, monkeypatch):
    v = tmp_path / "victim"
    assert main(["train-victim", "--config", str(tiny), "--out", str(v)]) == EXIT_OK
    monkeypatch.setenv("REVERTLAB_VICTIM", str(v / "victim.ckpt"))
    cap = tmp_path / "cap"
    assert main(["capture", "--config", str(tiny), "--out", str(cap), "--tap", "0:block_out"]) == EXIT_OK
    monkeypatch.setenv("REVERTLAB_CAPTURES", str(cap / "captures" / "0_block_out"))
    a1, a2 = tmp_path / "a1", tmp_path / "a2"
    assert main(["attack-train", "--config", str(tiny), "--out", str(a1), "--purifier", "none"]) == EXIT_OK
    monkeypatch.delenv("REVERTLAB_CAPTURES")
    assert main(["attack-train", "--config", str(a1 / "manifest.json"), "--out", str(a2)]) == EXIT_OK
    assert (a1 / "report.json").read_bytes() == (a2 / "report.json").read_bytes()
    rep = json.loads((a1 / "report.json").read_text())
    assert rep["purifier"] == "none" and rep["tap"] == "0:block_out"

    monkeypatch.setenv("REVERTLAB_ATTACKER", str(a1 / "attacker.ckpt"))
    ev = tmp_path / "ev"
    assert main(["attack-eval", "--config", str(tiny), "--out", str(ev)]) == EXIT_OK
    assert json.loads((ev / "report.json").read_text())["scores"]["rouge_l"] == rep["scores"]["rouge_l"]

    rr = tmp_path / "rr"
    assert main(["report", "--out", str(rr), "--from", str(a1), str(ev)]) == EXIT_OK
    assert set(json.loads((rr / "report.json").read_text())["runs"]) == {str(a1), str(ev)}


def test_recipe_commands_emit_tables(tiny, tmp_path, monkeypatch):
    v = tmp_path / "victim"
    assert main(["train-victim", "--config", str(tiny), "--out", str(v)]) == EXIT_OK
    monkeypatch.setenv("REVERTLAB_VICTIM", str(v / "victim.ckpt"))
    for cmd, table in [
        ("sublayer-sweep", "sublayer_table.csv"),
        ("depth-sweep", "depth_curve.csv"),
        ("purifier-ablation", "purifier_table.csv"),
        ("mi-scan", "mi_plane.csv"),
    ]:
        out = tmp_path / cmd
        assert main([cmd, "--config", str(tiny), "--out", str(out)]) == EXIT_OK
        assert table in json.loads((out / "manifest.json").read_text())["artifacts"]
    rep = json.loads((tmp_path / "sublayer-sweep" / "report.json").read_text())
    assert [set(r) for r in rep["table"]] == [{"block", "attention", "ffn", "whole"}]
    rep = json.loads((tmp_path / "depth-sweep" / "report.json").read_text())
    assert [r["block"] for r in rep["rows"]] == [0, 1]
    rep = json.loads((tmp_path / "purifier-ablation" / "report.json").read_text())
    assert [r["variant"] for r in rep["rows"]] == ["none", "linear_projection", "linear_with_tester", "autoencoder"]
