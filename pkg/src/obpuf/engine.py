"""Batch runs behind the command-line subcommands.

Each ``cmd_*`` function takes a :class:`~obpuf.config_service.RunConfig`,
writes its primary outputs under ``cfg.out`` and a run log under
``cfg.out/logs/<run_id>/``, and returns the run report dict.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tuning
from .apuf import calibrate_noise, random_challenges, sample_apufs
from .attack import CampaignConfig, run_attack_campaign
from .config_service import ConfigService, RunConfig
from .metrics import (
    EstimatorInputs,
    capability_discrepancy,
    capability_table,
    empirical_distances,
    estimator_sweep,
    min_crps_for_eer,
    proportion_interval,
)
from .obfuscation import (
    ObPufDevice,
    adversarial_pattern_set,
    design_pattern_set,
    pattern_agnostic_rate,
    pattern_divergence,
    reconfigure_session,
    shared_position_response_fhd,
    shared_position_response_floor,
)
from .protocol import AuthParams, PopulationJob, enroll, reconfig_pool_size, run_population
from .reports import RunLog, write_jsonl, write_table

LogCallback = Optional[Callable[[str], None]]
ProgressCallback = Optional[Callable[[Dict[str, Any]], None]]


def _open_log(cfg: RunConfig, log_to_console: bool, log_callback: LogCallback) -> RunLog:
    run_log = RunLog(cfg.out, cfg.command, log_to_console, log_callback)
    run_log.report["config"] = cfg.as_dict()
    if cfg.seed_drawn:
        run_log.log(f"Seed: {cfg.seed} (drawn; pass --seed {cfg.seed} to reproduce)")
    else:
        run_log.log(f"Seed: {cfg.seed}")
    return run_log


def _progress(run_log: RunLog, progress_callback: ProgressCallback) -> Callable[[Dict[str, Any]], None]:
    def _emit(event: Dict[str, Any]) -> None:
        run_log.progress(event)
        if progress_callback is not None:
            try:
                progress_callback(event)
            except Exception:
                pass

    return _emit


def _table(cfg: RunConfig, run_log: RunLog, rows: Sequence[Dict[str, Any]], name: str, columns=None) -> Path:
    path = write_table(rows, cfg.out / name, cfg.format, cfg.command, cfg.provenance(), columns)
    run_log.output(path)
    return path


def _union_columns(rows: Sequence[Dict[str, Any]]) -> List[str]:
    columns: List[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    return columns


# ---------------------------------------------------------------------------
# design


def cmd_design(
    cfg: RunConfig,
    log_to_console: bool = False,
    log_callback: LogCallback = None,
    progress_callback: ProgressCallback = None,
) -> Dict[str, Any]:
    """Design (or build the adversarial baseline of) a pattern set and report its FHD distributions."""
    with _open_log(cfg, log_to_console, log_callback) as run_log:
        design_seed, score_seed = np.random.SeedSequence(cfg.seed).spawn(2)
        if cfg.adversarial_first_positions:
            pattern_set = adversarial_pattern_set(cfg.k, cfg.m, cfg.p, cfg.n_ins, design_seed)
            family = "first-positions"
        else:
            result = design_pattern_set(cfg.k, cfg.m, cfg.p, cfg.n_ins, design_seed, cfg.trial_budget)
            pattern_set, family = result.pattern_set, result.family
        run_log.log(f"Pattern set: k={cfg.k} m={cfg.m} p={cfg.p} n_ins={cfg.n_ins} family={family}")

        rng = np.random.default_rng(score_seed)
        instances = sample_apufs(tuning.DESIGN_SCORE_INSTANCES, cfg.k, rng)
        block = sample_apufs(cfg.n_ins, cfg.k, rng)
        c_obs = random_challenges(tuning.DESIGN_SCORE_CHALLENGES, cfg.k - cfg.m, rng)
        chal, resp = pattern_divergence(pattern_set, instances, c_obs)
        _, masked = pattern_divergence(pattern_set, block, c_obs, masked=True)
        rows = [
            {
                "c_index": i,
                "challenge_fhd": round(float(chal[i]), 6),
                "response_fhd": round(float(resp[i]), 6),
                "masked_response_fhd": round(float(masked[i]), 6),
            }
            for i in range(c_obs.shape[0])
        ]
        summary = {
            "family": family,
            "challenge_fhd_mean": round(float(chal.mean()), 6),
            "response_fhd_mean": round(float(resp.mean()), 6),
            "masked_response_fhd_mean": round(float(masked.mean()), 6),
        }
        if cfg.adversarial_first_positions:
            summary["expected_response_fhd"] = round(shared_position_response_fhd(pattern_set), 6)
            summary["response_fhd_floor"] = round(shared_position_response_floor(cfg.k), 6)
            run_log.log(
                f"Expected response FHD {summary['expected_response_fhd']:.4f}, "
                f"floor for any shared-position pair {summary['response_fhd_floor']:.4f}"
            )
        path = ConfigService().save_pattern_set(
            pattern_set,
            cfg.out / "pattern_set.json",
            challenge_fhd=summary["challenge_fhd_mean"],
            response_fhd=summary["response_fhd_mean"],
            family=family,
        )
        run_log.output(path)
        _table(cfg, run_log, rows, "design_fhd")
        if cfg.p > 1 and summary["challenge_fhd_mean"] < tuning.FHD_ACCEPTANCE:
            run_log.warn(
                f"challenge-side mean pairwise FHD {summary['challenge_fhd_mean']:.4f} "
                f"is below {tuning.FHD_ACCEPTANCE}"
            )
        run_log.log(
            f"Done. challenge FHD={summary['challenge_fhd_mean']:.4f} "
            f"response FHD={summary['response_fhd_mean']:.4f}"
        )
        return run_log.close(summary=summary)


# ---------------------------------------------------------------------------
# capability


def cmd_capability(
    cfg: RunConfig,
    log_to_console: bool = False,
    log_callback: LogCallback = None,
    progress_callback: ProgressCallback = None,
) -> Dict[str, Any]:
    """Minimum CRPs per session and thresholds for every configuration and EER target."""
    with _open_log(cfg, log_to_console, log_callback) as run_log:
        emit = _progress(run_log, progress_callback)
        configs = cfg.configs if cfg.configs is not None else tuning.CAPABILITY_CONFIGS
        emit({"phase": "capability", "event": "start", "configs": len(configs)})
        rows = capability_table(configs, cfg.targets, cfg.noise_target, cfg.estimator)
        for row in rows:
            run_log.log(
                f"{row.config.label} EER<={row.target_eer:g}: n={row.n} n_EER={row.n_eer} "
                f"log10 FAR={row.log10_far:.2f} log10 FRR={row.log10_frr:.2f}"
            )
        _table(cfg, run_log, [row.as_dict() for row in rows], "capability")
        discrepancy = capability_discrepancy(rows) if cfg.noise_target == tuning.P_INTRA_PUF else []
        if discrepancy:
            _table(cfg, run_log, discrepancy, "capability_discrepancy")
            for entry in discrepancy:
                if entry["strict"] and not entry["within_tolerance"]:
                    run_log.warn(f"{entry['config']} at {entry['target_eer']:g} departs from the published row")
        sweep = estimator_sweep(range(1, 17), p_intra_puf=cfg.noise_target)
        _table(cfg, run_log, sweep, "estimator_sweep")
        emit({"phase": "capability", "event": "done", "rows": len(rows)})
        run_log.log(f"Done. rows={len(rows)}")
        return run_log.close(summary={"rows": len(rows), "discrepancies": len(discrepancy)})


# ---------------------------------------------------------------------------
# protocol


def operating_point(cfg: RunConfig) -> AuthParams:
    """``(n, n_th)`` from the flags, else the minimum meeting ``eer_target``."""
    if cfg.n is not None:
        n_th = cfg.n_th if cfg.n_th is not None else 0
        return AuthParams(cfg.n, n_th, cfg.n_mismatch)
    row = min_crps_for_eer(
        EstimatorInputs(cfg.n_ins, cfg.p, cfg.n_mismatch, cfg.noise_target), cfg.eer_target, cfg.estimator
    )
    n_th = cfg.n_th if cfg.n_th is not None else row.n_eer
    return AuthParams(row.n, n_th, cfg.n_mismatch)


def _population(cfg: RunConfig, sigma: float, seed: np.random.SeedSequence):
    """Genuine devices and, per device, an impostor that shares its public patterns."""
    reconfigurable = cfg.xors > 0
    genuine: List[ObPufDevice] = []
    impostors: List[ObPufDevice] = []
    for d, child in enumerate(seed.spawn(cfg.devices)):
        dev_seed, imp_seed = child.spawn(2)
        dev = ObPufDevice.generate(
            cfg.k,
            cfg.m,
            cfg.p,
            cfg.n_ins,
            xors=cfg.xors,
            seed=dev_seed,
            noise_sigma=sigma,
            reconfigurable=reconfigurable,
            device_id=f"device-{d}",
            trial_budget=cfg.trial_budget,
        )
        genuine.append(dev)
        impostors.append(
            ObPufDevice.generate(
                cfg.k,
                cfg.m,
                cfg.p,
                cfg.n_ins,
                xors=cfg.xors,
                seed=imp_seed,
                noise_sigma=sigma,
                patterns=dev.base_patterns,
                reconfigurable=reconfigurable,
                device_id=f"impostor-{d}",
            )
        )
    return genuine, impostors


def _noise_sigma(cfg: RunConfig, seed: np.random.SeedSequence, run_log: RunLog) -> float:
    sigma = calibrate_noise(cfg.k, cfg.noise_target, seed=seed)
    run_log.log(f"Noise: per-APUF flip rate {cfg.noise_target:g} -> sigma={sigma:.6f}")
    return sigma


def cmd_protocol(
    cfg: RunConfig,
    log_to_console: bool = False,
    log_callback: LogCallback = None,
    progress_callback: ProgressCallback = None,
) -> Dict[str, Any]:
    """Enroll a device population and run genuine and impostor sessions."""
    with _open_log(cfg, log_to_console, log_callback) as run_log:
        emit = _progress(run_log, progress_callback)
        params = operating_point(cfg)
        run_log.log(f"Operating point: n={params.n} n_th={params.n_th} n_mismatch={params.n_mismatch}")
        noise_seed, population_seed, enroll_seed, session_seed = np.random.SeedSequence(cfg.seed).spawn(4)
        sigma = _noise_sigma(cfg, noise_seed, run_log)
        genuine, impostors = _population(cfg, sigma, population_seed)
        sessions = cfg.genuine_sessions + cfg.impostor_sessions
        pool_size = max(cfg.p * cfg.m * tuning.RELIABLE_POOL_FACTOR, reconfig_pool_size(cfg.p, cfg.m, sessions))
        servers = []
        for dev, child in zip(genuine, enroll_seed.spawn(len(genuine))):
            servers.append(enroll(dev, cfg.enroll_mode, pool_size=pool_size, seed=child, log_callback=run_log.log))
        jobs = [
            PopulationJob(server, [("genuine", dev, cfg.genuine_sessions), ("impostor", imp, cfg.impostor_sessions)])
            for server, dev, imp in zip(servers, genuine, impostors)
        ]
        emit({"phase": "protocol", "event": "start", "jobs_total": len(jobs)})
        results = run_population(
            jobs,
            params,
            session_seed,
            transport=cfg.transport,
            noisy=True,
            reliable_rounds=cfg.reliable_rounds,
            workers=cfg.workers,
            progress_callback=emit,
        )
        lines = [json.dumps({"label": label, **t.to_record()}, sort_keys=True) for label, t in results]
        run_log.output(write_jsonl(lines, cfg.out / "transcripts.jsonl"))
        run_log.output(ConfigService().save_enrollment(servers, cfg.out / "enrollment.json"))

        rows = []
        for label in ("genuine", "impostor"):
            chosen = [t for lab, t in results if lab == label]
            accepted = sum(t.accepted for t in chosen)
            aborted = sum(t.aborted for t in chosen)
            low, high = proportion_interval(accepted, len(chosen))
            rows.append(
                {
                    "label": label,
                    "sessions": len(chosen),
                    "accepted": accepted,
                    "rejected": len(chosen) - accepted - aborted,
                    "aborted": aborted,
                    "accept_rate": round(accepted / len(chosen), 6) if chosen else 0.0,
                    "accept_ci_low": round(low, 6),
                    "accept_ci_high": round(high, 6),
                    "mean_mismatches": round(float(np.mean([t.mismatches for t in chosen])), 4) if chosen else 0.0,
                    "n": params.n,
                    "n_th": params.n_th,
                    "n_mismatch": params.n_mismatch,
                }
            )
            run_log.log(f"{label}: {accepted}/{len(chosen)} accepted, {aborted} aborted")
            if aborted:
                run_log.warn(f"{aborted} {label} sessions ended on a transport error")
        _table(cfg, run_log, rows, "protocol_summary")
        summary = {row["label"]: {"accepted": row["accepted"], "sessions": row["sessions"]} for row in rows}
        run_log.log("Done.")
        return run_log.close(summary=summary, noise_sigma=sigma, n=params.n, n_th=params.n_th)


# ---------------------------------------------------------------------------
# attack


def campaign_config(cfg: RunConfig) -> CampaignConfig:
    return CampaignConfig(
        target=cfg.target,
        k=cfg.k,
        n_ins=cfg.n_ins,
        p=cfg.p,
        m=cfg.m,
        xors=cfg.xors,
        sessions=cfg.sessions,
        rounds=cfg.rounds,
        generations=cfg.generations,
        population=cfg.population,
        sigma0=cfg.sigma0,
        seed=cfg.seed,
        mode=cfg.mode,
        runs=cfg.runs,
        test_size=cfg.test_size,
        crps=cfg.crps,
        workers=cfg.workers,
        time_limit=cfg.time_limit,
    )


def cmd_attack(
    cfg: RunConfig,
    log_to_console: bool = False,
    log_callback: LogCallback = None,
    progress_callback: ProgressCallback = None,
) -> Dict[str, Any]:
    """Run a CMA-ES modeling-attack campaign and write its report rows and traces."""
    with _open_log(cfg, log_to_console, log_callback) as run_log:
        emit = _progress(run_log, progress_callback)
        report = run_attack_campaign(campaign_config(cfg), run_log.log, emit)
        _table(cfg, run_log, report.rows, "attack_report")
        _table(cfg, run_log, report.trace, "attack_trace", _union_columns(report.trace))
        if any(row.get("truncated") for row in report.rows):
            run_log.warn("time limit reached before the generation budget; rows are marked truncated")
        p_preds = [row["p_pred"] for row in report.rows]
        run_log.log(f"Done. median P_pred={float(np.median(p_preds)):.4f} wall={report.wall_time:.1f}s")
        return run_log.close(summary={"p_pred": p_preds, "campaign_wall_time_s": round(report.wall_time, 3)})


# ---------------------------------------------------------------------------
# distances


def cmd_distances(
    cfg: RunConfig,
    log_to_console: bool = False,
    log_callback: LogCallback = None,
    progress_callback: ProgressCallback = None,
) -> Dict[str, Any]:
    """Monte Carlo intra/inter mismatch rates with intervals, next to the analytic estimators."""
    with _open_log(cfg, log_to_console, log_callback) as run_log:
        emit = _progress(run_log, progress_callback)
        noise_seed, population_seed, run_seed = np.random.SeedSequence(cfg.seed).spawn(3)
        sigma = _noise_sigma(cfg, noise_seed, run_log)
        rng = np.random.default_rng(run_seed)
        genuine, _ = _population(cfg, sigma, population_seed)
        # one shared public pattern set, so inter trials compare like with like
        devices = [
            ObPufDevice(
                d.puf_block, d.reconfig_block, genuine[0].base_patterns, d.reconfigurable, device_id=d.device_id
            )
            for d in genuine
        ]
        for dev in devices:
            if dev.reconfigurable:
                reconfigure_session(dev, random_challenges(dev.p * dev.m, dev.k - dev.m, rng), rng, noisy=False)

        def _step(done: int, total: int) -> None:
            emit({"phase": "distances", "event": "progress", "devices_done": done, "devices_total": total})

        estimate = empirical_distances(devices, cfg.trials, cfg.n_mismatch, rng, True, cfg.noise_target, _step)
        agnostic = pattern_agnostic_rate(devices[0], min(cfg.trials, 10_000), rng)
        row = {
            "config": EstimatorInputs(cfg.n_ins, cfg.p, cfg.n_mismatch, cfg.noise_target).label,
            "trials": estimate.trials,
            "p_intra_hat": round(estimate.p_intra_hat, 6),
            "p_intra_ci_low": round(estimate.p_intra_ci[0], 6),
            "p_intra_ci_high": round(estimate.p_intra_ci[1], 6),
            "p_inter_hat": None if estimate.p_inter_hat is None else round(estimate.p_inter_hat, 6),
            "p_inter_ci_low": None if estimate.p_inter_ci is None else round(estimate.p_inter_ci[0], 6),
            "p_inter_ci_high": None if estimate.p_inter_ci is None else round(estimate.p_inter_ci[1], 6),
            "best_inter_estimator": estimate.best_inter_estimator,
            "pattern_agnostic_rate": round(agnostic, 6),
        }
        row.update({k: round(v, 6) for k, v in estimate.analytic.items()})
        _table(cfg, run_log, [row], "distances")
        histogram = [
            {"hd": hd, "intra_count": intra, "inter_count": inter}
            for hd, (intra, inter) in enumerate(zip(estimate.intra_histogram, estimate.inter_histogram))
        ]
        _table(cfg, run_log, histogram, "distances_histogram")
        lo, hi = estimate.p_intra_ci
        if not lo <= estimate.analytic["p_intra"] <= hi:
            run_log.warn(f"analytic p_intra {estimate.analytic['p_intra']:.6f} lies outside [{lo:.6f}, {hi:.6f}]")
        run_log.log(f"Done. p_intra={estimate.p_intra_hat:.6f} p_inter={estimate.p_inter_hat}")
        return run_log.close(summary=row, noise_sigma=sigma)


COMMANDS: Dict[str, Callable[..., Dict[str, Any]]] = {
    "design": cmd_design,
    "capability": cmd_capability,
    "protocol": cmd_protocol,
    "attack": cmd_attack,
    "distances": cmd_distances,
}


def run_command(
    cfg: RunConfig,
    log_to_console: bool = False,
    log_callback: LogCallback = None,
    progress_callback: ProgressCallback = None,
) -> Dict[str, Any]:
    return COMMANDS[cfg.command](cfg, log_to_console, log_callback, progress_callback)
