"""Python front end for the channelforge simulator."""

import json

from . import _core
from ._core import ColoringError, CrackError, GroundTruthMapping, TuneError, preset_names

__all__ = [
    "ColoringError",
    "CrackError",
    "GroundTruthMapping",
    "TuneError",
    "autotune_cfs_period",
    "bench",
    "gpu_spec",
    "grid_search",
    "predict_channels",
    "preset_names",
    "reveng",
    "run_cli",
    "run_scenario",
]


def gpu_spec(preset):
    return json.loads(_core.gpu_spec_json(preset))


def reveng(preset, crack="auto", seed=1, train_samples=0, holdout_samples=10000):
    """Returns {"report": ..., "model": ...}; raises CrackError when the cracker cannot fit."""
    return json.loads(_core.reveng_json(preset, crack, seed, train_samples, holdout_samples))


def predict_channels(model, addrs):
    return _core.predict_channels(json.dumps(model), list(addrs))


def autotune_cfs_period(eps=0.01, probe_bytes=256 << 20):
    return json.loads(_core.autotune_json(eps, probe_bytes))


def bench(policy, horizon_s=1.0, seed=1):
    return json.loads(_core.bench_json(policy, horizon_s, seed))


def run_scenario(config):
    # Accepts the same document the CLI's simulate subcommand reads.
    return json.loads(_core.run_scenario_json(json.dumps(config)))


def grid_search(preset, max_increase=0.25):
    return json.loads(_core.grid_search_json(preset, max_increase))


def run_cli(args):
    return _core.run_cli([str(a) for a in args])
