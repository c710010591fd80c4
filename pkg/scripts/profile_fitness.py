from __future__ import annotations

import argparse
import cProfile
import json
import pstats
import sys
import time
from pathlib import Path


def _build_dataset(args: argparse.Namespace):
    repo_root = Path(__file__).resolve().parents[1]
    sys.path.insert(0, str(repo_root / "src"))

    import numpy as np

    from obpuf.attack import AttackDataset, CampaignConfig, _collect_transcripts, layout_for
    from obpuf.obfuscation import ObPufDevice

    ss = np.random.SeedSequence(args.seed)
    dev_seed, data_seed, genome_seed = ss.spawn(3)
    dev = ObPufDevice.generate(args.k, args.m, args.p, args.n_ins, xors=args.xors, seed=dev_seed, device_id="profile")
    cfg = CampaignConfig(
        k=args.k, n_ins=args.n_ins, p=args.p, m=args.m, xors=args.xors, sessions=args.sessions, rounds=args.rounds
    )
    data = AttackDataset.from_transcripts(_collect_transcripts(dev, cfg, data_seed), dev.base_patterns)
    return data, layout_for(dev), np.random.default_rng(genome_seed)


def main() -> int:
    parser = argparse.ArgumentParser(description="Profile the reconfigurable-target fitness function.")
    parser.add_argument("--k", type=int, default=64)
    parser.add_argument("--n-ins", dest="n_ins", type=int, default=2)
    parser.add_argument("--p", type=int, default=2)
    parser.add_argument("--m", type=int, default=3)
    parser.add_argument("--xors", type=int, default=2)
    parser.add_argument("--sessions", type=int, default=50, help="Eavesdropped sessions")
    parser.add_argument("--rounds", type=int, default=300, help="OB-CRPs per session")
    parser.add_argument("--calls", type=int, default=200, help="Fitness evaluations to time")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--profile", action="store_true", help="Enable cProfile and print top cumulative functions")
    parser.add_argument("--stats", type=int, default=30, help="Number of cProfile rows to print")
    parser.add_argument("--sort", default="cumulative", help="cProfile sort key (default: cumulative)")
    parser.add_argument("--json-out", type=Path, default=None, help="Optional JSON output path for the metrics")
    parser.add_argument("--compare", type=Path, default=None, help="Optional prior metrics JSON to compare against")
    parser.add_argument(
        "--warn-threshold-pct",
        type=float,
        default=10.0,
        help="Warn when ms/call regresses by more than this percent (used with --compare)",
    )
    args = parser.parse_args()
    if args.calls < 1:
        print("error: --calls must be >= 1", file=sys.stderr)
        return 2

    from obpuf.attack import fitness_reconfigurable

    build_start = time.perf_counter()
    data, layout, rng = _build_dataset(args)
    build_elapsed = time.perf_counter() - build_start
    genomes = rng.standard_normal((args.calls, layout.dim))
    print(f"dataset_crps={data.total_crps}")
    print(f"genome_dim={layout.dim}")
    print(f"build_seconds={build_elapsed:.3f}")

    prof = cProfile.Profile() if args.profile else None
    start = time.perf_counter()
    if prof is not None:
        prof.enable()
    for genome in genomes:
        fitness_reconfigurable(genome, data, layout)
    if prof is not None:
        prof.disable()
    elapsed = time.perf_counter() - start

    ms_per_call = (elapsed * 1000.0) / args.calls
    print(f"elapsed_seconds={elapsed:.3f}")
    print(f"ms_per_call={ms_per_call:.3f}")
    print(f"precomputed_rows={data.counters.precomputed_rows}")
    print(f"per_call_rows={data.counters.per_call_rows // max(1, data.counters.calls)}")

    metrics = {
        "version": 1,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "config": {key: getattr(args, key) for key in ("k", "n_ins", "p", "m", "xors", "sessions", "rounds", "seed")},
        "calls": args.calls,
        "build_seconds": round(build_elapsed, 6),
        "elapsed_seconds": round(elapsed, 6),
        "ms_per_call": round(ms_per_call, 6),
    }

    if args.json_out is not None:
        out_path = args.json_out.resolve()
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(metrics, indent=2), encoding="utf-8")
        print(f"json_out={out_path}")

    if args.compare is not None:
        try:
            prev = json.loads(args.compare.resolve().read_text(encoding="utf-8"))
            prev_ms = float(prev.get("ms_per_call", 0.0) or 0.0)
            delta_pct = ((ms_per_call - prev_ms) / prev_ms * 100.0) if prev_ms > 0 else 0.0
            print(f"compare_prev_ms_per_call={prev_ms:.6f}")
            print(f"compare_delta_pct={delta_pct:+.2f}")
            if delta_pct > float(args.warn_threshold_pct):
                print(
                    f"warning: performance regression exceeds threshold "
                    f"({delta_pct:+.2f}% > {float(args.warn_threshold_pct):.2f}%)",
                    file=sys.stderr,
                )
        except Exception as exc:
            print(f"warning: failed to compare metrics JSON: {exc}", file=sys.stderr)

    if prof is not None:
        pstats.Stats(prof).sort_stats(args.sort).print_stats(args.stats)

    return 0


if __name__ == "__main__":
    raise SystemExit(main())
