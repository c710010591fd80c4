from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from obpuf import tuning
from obpuf.apuf import sample_apuf
from obpuf.config_service import COMMAND_DEFAULTS, ConfigService, RunConfig
from obpuf.obfuscation import ObPufDevice
from obpuf.protocol import enroll


def test_run_config_precedence(tmp_path: Path) -> None:
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 5, "k": 32, "m": 2, "generations": 7}), encoding="utf-8")
    file_data = ConfigService().load_run_config(path)
    cfg = RunConfig.from_sources("attack", file_data, {"k": 48, "xors": None})
    assert cfg.seed == 5 and not cfg.seed_drawn
    assert cfg.k == 48, "flags override the config file"
    assert cfg.m == 2 and cfg.generations == 7
    assert cfg.n_ins == COMMAND_DEFAULTS["attack"]["n_ins"]
    assert cfg.xors == COMMAND_DEFAULTS["attack"]["xors"]


def test_missing_seed_is_drawn() -> None:
    cfg = RunConfig.from_sources("capability", {}, {})
    assert cfg.seed_drawn
    assert 0 <= cfg.seed < 2**63


def test_tuning_block_is_applied(tmp_path: Path) -> None:
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 1, "tuning": {"FHD_ACCEPTANCE": 0.4, "NOT_A_KNOB": 3}}), encoding="utf-8")
    data = ConfigService().load_run_config(path)
    assert "tuning" not in data
    assert tuning.FHD_ACCEPTANCE == 0.4
    assert "NOT_A_KNOB" not in vars(tuning)


@pytest.mark.parametrize(
    "payload",
    [
        {"seed": -1},
        {"format": "xml"},
        {"colour": "blue"},
        {"transport": "pigeon"},
        {"configs": [[2, 2]]},
    ],
)
def test_invalid_run_config_files(tmp_path: Path, payload: dict) -> None:
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    with pytest.raises(ValueError, match="Invalid configuration"):
        ConfigService().load_run_config(path)


def test_missing_config_file(tmp_path: Path) -> None:
    with pytest.raises(FileNotFoundError):
        ConfigService().load_run_config(tmp_path / "nope.json")
    assert ConfigService().load_run_config(None) == {}


def test_run_config_validation() -> None:
    with pytest.raises(ValueError, match="raise m"):
        RunConfig.from_sources("protocol", {}, {"seed": 1, "p": 9, "m": 3})
    with pytest.raises(ValueError):
        RunConfig.from_sources("protocol", {}, {"seed": 1, "n_mismatch": 5, "n_ins": 4})
    with pytest.raises(ValueError):
        RunConfig.from_sources("bogus", {}, {"seed": 1})
    with pytest.raises(ValueError, match="unknown key"):
        RunConfig.from_sources("design", {"stages": 64}, {"seed": 1})
    # capability rows do not instantiate devices
    RunConfig.from_sources("capability", {}, {"seed": 1, "p": 9, "m": 3})


def test_provenance_excludes_machine_specific_fields() -> None:
    cfg = RunConfig.from_sources("design", {}, {"seed": 3, "workers": 4, "out": "/tmp/x", "configs": [[2, 2, 0]]})
    prov = cfg.provenance()
    assert prov["seed"] == 3 and prov["command"] == "design"
    assert not {"out", "workers", "verbose", "config_path", "format"} & prov.keys()
    assert prov["configs"] == [[2, 2, 0]]
    json.dumps(prov)


def test_apuf_record_roundtrip(tmp_path: Path) -> None:
    service = ConfigService()
    puf = sample_apuf(16, seed=3, noise_sigma=0.5)
    path = service.save_apuf(puf, tmp_path / "apuf.json")
    assert service.load_apuf(path) == puf


def test_pattern_set_and_enrollment_roundtrip(tmp_path: Path) -> None:
    service = ConfigService()
    dev = ObPufDevice.generate(32, 2, 2, 2, xors=1, seed=4, trial_budget=6)
    ps_path = service.save_pattern_set(dev.base_patterns, tmp_path / "pattern_set.json", challenge_fhd=0.5)
    assert service.load_pattern_set(ps_path) == dev.base_patterns
    assert json.loads(ps_path.read_text(encoding="utf-8"))["challenge_fhd"] == 0.5

    server = enroll(dev, seed=5)
    path = service.save_enrollment([server], tmp_path / "enrollment.json")
    (restored,) = service.load_enrollment(path)
    assert restored.device_id == server.device_id
    assert np.array_equal(restored.reliable_pool, server.reliable_pool)
    assert np.array_equal(restored.puf_block_models, server.puf_block_models)


def test_corrupt_enrollment_is_rejected(tmp_path: Path) -> None:
    path = tmp_path / "enrollment.json"
    path.write_text(json.dumps({"version": 2, "servers": []}), encoding="utf-8")
    with pytest.raises(ValueError):
        ConfigService().load_enrollment(path)


def test_example_config_is_valid() -> None:
    here = Path(__file__).resolve().parents[1]
    data = ConfigService().load_run_config(here / "config.example.json")
    for command in ("design", "protocol", "distances"):
        cfg = RunConfig.from_sources(command, data, {})
        assert cfg.seed == 20240611 and not cfg.seed_drawn
