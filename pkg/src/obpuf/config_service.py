"""Configuration files and JSON records for the OB-PUF workbench.

Every JSON file the workbench reads or writes has a bundled schema under
``schemas/`` and is validated with ``jsonschema`` on the way in and out.
Run configurations are merged with increasing precedence: tuning defaults,
per-command defaults, the ``--config`` file, explicit command-line flags.

Example usage::

    from obpuf.config_service import ConfigService, RunConfig

    service = ConfigService()
    file_data = service.load_run_config(Path("run.json"))
    cfg = RunConfig.from_sources("protocol", file_data, {"seed": 7})

"""

from __future__ import annotations

import json
import secrets
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

try:
    import jsonschema
except ImportError:  # pragma: no cover
    jsonschema = None

from . import tuning
from .apuf import ApufInstance, apuf_from_record, apuf_to_record
from .obfuscation import PatternSet

SCHEMA_DIR = Path(__file__).resolve().parent / "schemas"
ENROLLMENT_VERSION = 1


def _load_json(path: Path) -> Any:
    if not path.exists():
        return None
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _save_json(data: Any, file_path: Path) -> None:
    file_path.parent.mkdir(parents=True, exist_ok=True)
    with file_path.open("w", encoding="utf-8", newline="\n") as f:
        json.dump(data, f, indent=2)
        f.write("\n")


def _validate_json(data: Any, schema_path: Path) -> None:
    """Validate JSON against a schema if the jsonschema library is available."""
    if jsonschema is None:
        return
    try:
        schema = _load_json(schema_path)
        if schema:
            jsonschema.validate(instance=data, schema=schema)
    except jsonschema.ValidationError as exc:
        raise ValueError(f"Invalid configuration: {exc.message}")


@dataclass
class ConfigService:
    """Load, validate and save the workbench's JSON files."""

    schema_dir: Path = SCHEMA_DIR
    run_config_schema: str = "run_config.schema.json"
    apuf_schema: str = "apuf_instance.schema.json"
    pattern_set_schema: str = "pattern_set.schema.json"
    enrollment_schema: str = "enrollment.schema.json"

    def _schema(self, name: str) -> Path:
        return self.schema_dir / name

    def load_validated(self, path: Path, schema_name: str) -> Any:
        data = _load_json(Path(path))
        if data is None:
            raise FileNotFoundError(f"{path} does not exist")
        _validate_json(data, self._schema(schema_name))
        return data

    def save_validated(self, data: Any, path: Path, schema_name: str) -> Path:
        _validate_json(data, self._schema(schema_name))
        _save_json(data, Path(path))
        return Path(path)

    # Run configuration ------------------------------------------------
    def load_run_config(self, path: Optional[Path]) -> Dict[str, Any]:
        """Validated run-config dict (empty when ``path`` is None).

        A ``"tuning"`` block is applied to :mod:`obpuf.tuning` right away.
        """
        if path is None:
            return {}
        data = self.load_validated(Path(path), self.run_config_schema)
        tuning.apply_overrides(data.get("tuning") or {})
        return {key: value for key, value in data.items() if key != "tuning"}

    # Records ----------------------------------------------------------
    def save_apuf(self, instance: ApufInstance, path: Path) -> Path:
        return self.save_validated(apuf_to_record(instance), path, self.apuf_schema)

    def load_apuf(self, path: Path) -> ApufInstance:
        return apuf_from_record(self.load_validated(path, self.apuf_schema))

    def save_pattern_set(self, pattern_set: PatternSet, path: Path, **extra: Any) -> Path:
        record = pattern_set.to_record()
        record.update(extra)
        return self.save_validated(record, path, self.pattern_set_schema)

    def load_pattern_set(self, path: Path) -> PatternSet:
        record = self.load_validated(path, self.pattern_set_schema)
        return PatternSet.from_record({key: record[key] for key in ("k", "m", "n_ins", "patterns")})

    def save_enrollment(self, servers: Sequence[Any], path: Path) -> Path:
        record = {"version": ENROLLMENT_VERSION, "servers": [server.to_record() for server in servers]}
        for server in record["servers"]:
            _validate_json(server["patterns"], self._schema(self.pattern_set_schema))
        return self.save_validated(record, path, self.enrollment_schema)

    def load_enrollment(self, path: Path) -> List[Any]:
        from .protocol import ServerModel

        record = self.load_validated(path, self.enrollment_schema)
        for server in record["servers"]:
            _validate_json(server["patterns"], self._schema(self.pattern_set_schema))
        return [ServerModel.from_record(server) for server in record["servers"]]


# ---------------------------------------------------------------------------
# Run configuration


COMMANDS = ("design", "capability", "protocol", "attack", "distances")

# Per-command device defaults layered over the RunConfig field defaults.
COMMAND_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "design": {"n_ins": 4, "p": 4, "m": 3},
    "capability": {},
    "protocol": {"n_ins": 4, "p": 4, "m": 3, "xors": 2},
    "attack": {"n_ins": 2, "p": 2, "m": 3, "xors": 2},
    "distances": {"n_ins": 4, "p": 4, "m": 3, "xors": 2, "devices": 8},
}


def _draw_seed() -> int:
    return secrets.randbits(63)


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    seed_drawn: bool = False
    out: Path = Path("obpuf_out")
    format: str = "csv"
    workers: int = field(default_factory=lambda: tuning.PARALLEL_WORKERS_DEFAULT)
    verbose: bool = False
    config_path: Optional[Path] = None
    # device
    k: int = field(default_factory=lambda: tuning.DEFAULT_STAGES)
    n_ins: int = 4
    p: int = 4
    m: int = 3
    xors: int = 2
    noise_target: float = field(default_factory=lambda: tuning.P_INTRA_PUF)
    # design
    trial_budget: Optional[int] = None
    adversarial_first_positions: bool = False
    # protocol
    n: Optional[int] = None
    n_th: Optional[int] = None
    n_mismatch: int = 0
    eer_target: float = 1e-9
    devices: int = 4
    genuine_sessions: int = 25
    impostor_sessions: int = 25
    transport: str = "inproc"
    enroll_mode: str = "ideal"
    reliable_rounds: bool = False
    # capability / distances
    estimator: str = "printed"
    configs: Optional[List[Tuple[int, int, int]]] = None
    targets: Optional[List[float]] = None
    trials: int = field(default_factory=lambda: tuning.EMPIRICAL_TRIALS)
    # attack
    target: str = "reconfigurable"
    sessions: int = field(default_factory=lambda: tuning.ATTACK_SESSIONS)
    rounds: int = field(default_factory=lambda: tuning.ATTACK_ROUNDS)
    generations: int = field(default_factory=lambda: tuning.ATTACK_GENERATIONS)
    population: Optional[int] = None
    sigma0: float = field(default_factory=lambda: tuning.CMA_SIGMA0)
    mode: str = "joint"
    runs: int = 1
    test_size: int = field(default_factory=lambda: tuning.ATTACK_TEST_SIZE)
    crps: int = field(default_factory=lambda: tuning.BASELINE_CRPS)
    time_limit: Optional[float] = None

    def __post_init__(self) -> None:
        if self.command not in COMMANDS:
            raise ValueError(f"unknown command {self.command!r}")
        self.out = Path(self.out)
        if self.configs is not None:
            self.configs = [tuple(int(x) for x in c) for c in self.configs]  # type: ignore[misc]
        if self.format not in ("csv", "json"):
            raise ValueError(f"--format must be csv or json, got {self.format!r}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0 <= self.m < self.k:
            raise ValueError(f"need 0 <= m < k, got m={self.m} k={self.k}")
        if self.p < 1 or self.n_ins < 1:
            raise ValueError("p and n_ins must be >= 1")
        if self.p > 2**self.m and self.command != "capability":
            raise ValueError(
                f"p={self.p} exceeds the {2**self.m} distinct inserted-value strings of m={self.m} bits; "
                f"raise m to at least {max(0, (self.p - 1).bit_length())}"
            )
        if self.n_mismatch > self.n_ins:
            raise ValueError(f"n_mismatch={self.n_mismatch} exceeds n_ins={self.n_ins}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if not 0.0 <= self.noise_target < 0.5:
            raise ValueError(f"noise_target must be in [0, 0.5), got {self.noise_target}")

    @classmethod
    def from_sources(
        cls,
        command: str,
        file_data: Optional[Dict[str, Any]] = None,
        cli_values: Optional[Dict[str, Any]] = None,
    ) -> "RunConfig":
        """Merge per-command defaults < config file < CLI values (``None`` means "not given")."""
        known = {f.name for f in fields(cls)}
        merged: Dict[str, Any] = dict(COMMAND_DEFAULTS.get(command, {}))
        for source in (file_data or {}, cli_values or {}):
            for key, value in source.items():
                if value is None:
                    continue
                if key not in known:
                    raise ValueError(f"Invalid configuration: unknown key {key!r}")
                merged[key] = value
        merged["command"] = command
        if merged.get("seed") is None:
            merged["seed"] = _draw_seed()
            merged["seed_drawn"] = True
        return cls(**merged)

    def as_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Path):
                value = str(value)
            elif isinstance(value, list):
                value = [list(v) if isinstance(v, tuple) else v for v in value]
            out[f.name] = value
        return out

    def provenance(self) -> Dict[str, Any]:
        """The inputs that determine primary outputs (no paths, no worker count)."""
        skip = {"out", "workers", "verbose", "config_path", "seed_drawn", "format"}
        return {key: value for key, value in self.as_dict().items() if key not in skip}
