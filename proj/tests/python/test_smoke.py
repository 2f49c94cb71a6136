import json
import os
import pathlib

import jsonschema
import pytest

import channelforge as cf

ROOT = pathlib.Path(__file__).resolve().parents[2]
CONFIGS = pathlib.Path(os.environ.get("CHANNELFORGE_CONFIG_DIR", ROOT / "configs"))


def load(name):
    return json.loads((CONFIGS / name).read_text())


def test_presets_and_ground_truth():
    assert {"gtx1080", "v100", "p40", "a2000", "a5500"} <= set(cf.preset_names())
    spec = cf.gpu_spec("a2000")
    assert spec["num_channels"] == 6
    g = cf.GroundTruthMapping("a2000")
    chans = g.channels_of([i * g.interleave for i in range(64)])
    assert set(chans) == set(range(6))
    assert chans[5] == g.channel_of(5 * g.interleave)


def test_reveng_xor_preset_is_exact():
    out = cf.reveng("gtx1080", crack="xor", holdout_samples=2000)
    assert out["report"]["holdout_accuracy"] == 1.0
    g = cf.GroundTruthMapping("gtx1080")
    addrs = [i * 4096 + 1024 * (i % 3) for i in range(500)]
    assert cf.predict_channels(out["model"], addrs) == g.channels_of(addrs)


def test_xor_solver_rejects_permutation_mapping():
    with pytest.raises(cf.CrackError, match="not XOR-linear"):
        cf.reveng("a5500", crack="xor")


def test_autotuner_and_bench():
    assert cf.autotune_cfs_period()["cfs_period"] == 2048
    cfs = cf.bench("cfs", horizon_s=0.5)
    fcfs = cf.bench("fcfs_baymax", horizon_s=0.5)
    assert fcfs["tasks"][0]["p99_us"] > 10 * cfs["tasks"][0]["p99_us"]


def test_grid_search_and_scenario():
    part = cf.grid_search("v100")["partition"]
    assert (part["sm_be"], part["thres_dram"]) == (30, 40)
    cfg = {"schema_version": 1, "gpu": {"preset": "v100"}, "scenario": 3, "duration_s": 2, "seed": 1}
    a = cf.run_scenario(cfg)
    assert a == cf.run_scenario(cfg)
    assert a["ls_p99_us"] >= a["ls_p50_us"] > 0
    with pytest.raises(ValueError):
        cf.run_scenario({"gpu": {"preset": "v100"}, "scenario": 9})


def test_cli_exit_codes(tmp_path):
    ok = cf.run_cli(["--config", CONFIGS / "tune_pcie.json", "--out", tmp_path, "tune"])
    assert ok == 0
    assert json.loads((tmp_path / "tune.json").read_text())["cfs_period"] == 2048
    assert cf.run_cli(["--config", CONFIGS / "reveng_a5500_xor.json", "--out", tmp_path, "reveng"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"schema_version": 1, "gpu": {"preset": "v100"}, "unknown": 1}')
    assert cf.run_cli(["--config", bad, "--out", tmp_path, "simulate"]) == 1


def test_schema_itself_is_valid():
    jsonschema.Draft202012Validator.check_schema(load("schema.json"))


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.json") if p.name != "schema.json"))
def test_shipped_configs_validate(name):
    jsonschema.Draft202012Validator(load("schema.json")).validate(load(name))


def test_schema_rejects_bad_documents():
    v = jsonschema.Draft202012Validator(load("schema.json"))
    assert not v.is_valid({"gpu": {"preset": "v100"}})
    assert not v.is_valid({"schema_version": 1, "gpu": {"preset": "v100"}, "scenario": 7})
    assert not v.is_valid({"schema_version": 1, "gpu": {"preset": "v100"}, "runs": [{"label": "a b"}]})
