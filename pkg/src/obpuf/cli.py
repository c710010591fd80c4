"""Command-line interface for the OB-PUF workbench.

Each subcommand builds a :class:`~obpuf.config_service.RunConfig` from its
flags and an optional ``--config`` file and delegates to
:mod:`obpuf.engine`.  Run ``obpuf --help`` (or ``python -m obpuf --help``)
for usage.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from .config_service import ConfigService, RunConfig
from .engine import run_command

# Parsed attributes that are not RunConfig fields.
_NON_CONFIG = {"command", "config"}


def _config_list(text: str) -> List[List[int]]:
    """``"2,2,0;4,4,0"`` -> ``[[2, 2, 0], [4, 4, 0]]``."""
    try:
        rows = [[int(x) for x in part.split(",")] for part in text.split(";") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected n_ins,p,n_mismatch triples separated by ';', got {text!r}")
    if not rows or any(len(r) != 3 for r in rows):
        raise argparse.ArgumentTypeError(f"expected n_ins,p,n_mismatch triples separated by ';', got {text!r}")
    return rows


def _float_list(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="obpuf",
        description="OB-PUF workbench: obfuscated arbiter-PUF authentication and modeling attacks",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    # Options shared by every subcommand; None means "not given" so config files can fill it.
    def add_common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--seed", type=int, default=None, help="Master seed (drawn and echoed when omitted)")
        sp.add_argument("--config", type=Path, default=None, help="JSON run configuration (flags override it)")
        sp.add_argument("--out", type=Path, default=None, help="Output directory (default: obpuf_out)")
        sp.add_argument("--format", choices=["csv", "json"], default=None, help="Table format")
        sp.add_argument("--workers", type=int, default=None, help="Worker threads for sessions and ES evaluation")
        sp.add_argument("--verbose", action="store_true", default=None, help="Echo the run log to the console")

    def add_device(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--k", type=int, default=None, help="APUF stages")
        sp.add_argument("--n-ins", dest="n_ins", type=int, default=None, help="PUF-block APUFs (response bits)")
        sp.add_argument("--p", type=int, default=None, help="Pattern vectors")
        sp.add_argument("--m", type=int, default=None, help="Inserted bits per pattern")
        sp.add_argument("--xors", type=int, default=None, help="Reconfiguration XOR-APUF width")
        sp.add_argument(
            "--noise-target", dest="noise_target", type=float, default=None, help="Per-APUF flip rate to calibrate"
        )
        sp.add_argument("--trial-budget", dest="trial_budget", type=int, default=None, help="Pattern design trials")

    sp = subparsers.add_parser("design", help="Design a pattern set and report FHD distributions")
    add_common(sp)
    add_device(sp)
    sp.add_argument(
        "--adversarial-first-positions",
        dest="adversarial_first_positions",
        action="store_true",
        default=None,
        help="Insert at positions 1..m in every pattern (bad-case baseline)",
    )

    sp = subparsers.add_parser("capability", help="Analytic minimum CRPs per EER target")
    add_common(sp)
    sp.add_argument("--configs", type=_config_list, default=None, help="e.g. '2,2,0;4,4,0' (default: reference rows)")
    sp.add_argument("--targets", type=_float_list, default=None, help="EER targets, e.g. '1e-6,1e-9'")
    sp.add_argument("--estimator", choices=["printed", "corrected", "single_draw"], default=None)
    sp.add_argument("--noise-target", dest="noise_target", type=float, default=None, help="Per-APUF intra rate")

    sp = subparsers.add_parser("protocol", help="Enroll devices and run genuine/impostor sessions")
    add_common(sp)
    add_device(sp)
    sp.add_argument("--n", type=int, default=None, help="Rounds per session (default: from --eer-target)")
    sp.add_argument("--n-th", dest="n_th", type=int, default=None, help="Accepted mismatching rounds")
    sp.add_argument("--n-mismatch", dest="n_mismatch", type=int, default=None, help="Tolerated bit errors per round")
    sp.add_argument("--eer-target", dest="eer_target", type=float, default=None)
    sp.add_argument("--estimator", choices=["printed", "corrected", "single_draw"], default=None)
    sp.add_argument("--devices", type=int, default=None)
    sp.add_argument("--genuine-sessions", dest="genuine_sessions", type=int, default=None)
    sp.add_argument("--impostor-sessions", dest="impostor_sessions", type=int, default=None)
    sp.add_argument("--transport", choices=["inproc", "socket"], default=None)
    sp.add_argument("--enroll-mode", dest="enroll_mode", choices=["ideal", "learned"], default=None)
    sp.add_argument(
        "--reliable-rounds",
        dest="reliable_rounds",
        action="store_true",
        default=None,
        help="Issue only partial challenges that are reliable under every pattern",
    )

    sp = subparsers.add_parser("attack", help="CMA-ES modeling-attack campaign")
    add_common(sp)
    add_device(sp)
    sp.add_argument("--target", choices=["reconfigurable", "fixed", "apuf"], default=None)
    sp.add_argument("--sessions", type=int, default=None, help="Eavesdropped sessions")
    sp.add_argument("--rounds", type=int, default=None, help="OB-CRPs per eavesdropped session")
    sp.add_argument("--generations", type=int, default=None)
    sp.add_argument("--population", type=int, default=None, help="CMA-ES offspring (default: 4 + 3 ln dim)")
    sp.add_argument("--sigma0", type=float, default=None)
    sp.add_argument("--mode", choices=["joint", "per-bit"], default=None)
    sp.add_argument("--runs", type=int, default=None, help="Independent CMA-ES runs (progression traces)")
    sp.add_argument("--test-size", dest="test_size", type=int, default=None)
    sp.add_argument("--crps", type=int, default=None, help="Direct CRPs for --target apuf")
    sp.add_argument("--time-limit", dest="time_limit", type=float, default=None, help="Seconds per run")

    sp = subparsers.add_parser("distances", help="Monte Carlo intra/inter distances vs the estimators")
    add_common(sp)
    add_device(sp)
    sp.add_argument("--n-mismatch", dest="n_mismatch", type=int, default=None)
    sp.add_argument("--devices", type=int, default=None)
    sp.add_argument("--trials", type=int, default=None)
    return parser


def _cli_values(args: argparse.Namespace) -> Dict[str, Any]:
    return {key: value for key, value in vars(args).items() if key not in _NON_CONFIG and value is not None}


def main(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        file_data = ConfigService().load_run_config(args.config)
        cfg = RunConfig.from_sources(args.command, file_data, _cli_values(args))
        if args.config is not None:
            cfg.config_path = args.config
    except (FileNotFoundError, ValueError) as exc:
        print(f"Error: {exc}")
        return 2
    print(f"Seed: {cfg.seed}")
    try:
        report = run_command(cfg, log_to_console=cfg.verbose)
    except ValueError as exc:
        print(f"Error: {exc}")
        return 2
    except (RuntimeError, OSError) as exc:
        print(f"Error: {exc}")
        return 1
    print(json.dumps(report.get("summary", {}), indent=2, default=str))
    print(f"Run report: {Path(cfg.out) / 'logs' / report['run_id'] / 'run_report.json'}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
