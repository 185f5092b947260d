"""Batch entry point: config parsing, experiment dispatch, CSV/JSON output.

Subcommands:
    validate-fresnel  distance-approximation error table over range
    track             Monte-Carlo tracking/sum-rate sweep over power and UEs
    sweep             repeat `track` over a list of config values

Config files are JSON (round-trips losslessly). Angles in config and CSV
are degrees, powers are dBm, ranges are meters; conversion to internal
units (radians, watts) happens only here. Exit codes: 0 success, 1 config
error, 2 runtime error with partial output.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, geometry
from .channel import PropagationParams
from .errors import ConfigError
from .geometry import ArrayLayout, PanelSide, SphericalState, UeGeometry
from .simulator import MobilityParams, ScenarioConfig, run_experiment

DEFAULT_FRESNEL = {
    "n_e_list": [128, 512],
    "r_m": list(range(1, 21)),
    "l_antennas": 2,
    "theta_deg": 45.0,
    "phi_deg": 90.0,
    "d_ue_wavelengths": 0.5,
    "n_rf": 4,
    "d_e_wavelengths": 0.2,
    "d_rf_wavelengths": 0.5,
    "d_pl_m": 0.04,
    "carrier_hz": 120e9,
}

DEFAULT_TRACK = {"p_max_dbm": [0.0], "u_list": [1], "n_runs": 1}


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError("top-level config must be a JSON object")
    return cfg


def save_config(cfg: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def scenario_from_dict(raw: dict, seed: int | None = None) -> ScenarioConfig:
    """Build a ScenarioConfig from the JSON `scenario` section.

    Unknown keys are rejected so typos fail loudly.
    """
    raw = copy.deepcopy(raw)
    mob_raw = raw.pop("mobility", {})
    placement = raw.pop("placement", {})
    grid = raw.pop("grid", {})

    def deg_pair(pair):
        return tuple(np.radians(float(v)) for v in pair)

    kwargs: dict = {}
    scalar_keys = {
        "carrier_hz", "bandwidth_hz", "n_rf", "n_e", "d_e_wavelengths",
        "d_rf_wavelengths", "d_pl_m", "kappa_abs_per_m", "boresight_b",
        "waveguide_alpha_per_m", "guide_wavelength_ratio", "k_targets",
        "u_ues", "l_antennas", "ue_spacing_wavelengths", "p_max_dbm",
        "gamma_dbm", "noise_dbm", "t_init", "t_track", "n_blocks", "forget",
        "si_estimate_error", "beta_model", "codebook_bits", "seed",
    }
    unknown = set(raw) - scalar_keys
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    kwargs.update(raw)

    if "r_m" in placement:
        kwargs["placement_r"] = tuple(float(v) for v in placement["r_m"])
    if "theta_deg" in placement:
        kwargs["placement_theta"] = deg_pair(placement["theta_deg"])
    if "phi_deg" in placement:
        kwargs["phi"] = float(np.radians(placement["phi_deg"]))
    if "r_m" in grid:
        kwargs["grid_r"] = tuple(float(v) for v in grid["r_m"])
    if "theta_deg" in grid:
        kwargs["grid_theta"] = deg_pair(grid["theta_deg"])
    for src, dst in (
        ("r_points", "grid_r_points"),
        ("theta_points", "grid_theta_points"),
        ("zoom_rounds", "zoom_rounds"),
        ("zoom_points", "zoom_points"),
        ("candidates", "refine_candidates"),
    ):
        if src in grid:
            kwargs[dst] = int(grid[src])

    mob_kwargs: dict = {}
    if "mu_r_m" in mob_raw:
        mob_kwargs["mu_r"] = float(mob_raw["mu_r_m"])
    if "d_r_m" in mob_raw:
        mob_kwargs["d_r"] = float(mob_raw["d_r_m"])
    if "mu_theta_deg" in mob_raw:
        mob_kwargs["mu_theta"] = float(np.radians(mob_raw["mu_theta_deg"]))
    if "d_theta_deg" in mob_raw:
        mob_kwargs["d_theta"] = float(np.radians(mob_raw["d_theta_deg"]))
    if "mean_reset_blocks" in mob_raw:
        mob_kwargs["mean_reset_blocks"] = int(mob_raw["mean_reset_blocks"])
    if "r_bounds_m" in mob_raw:
        mob_kwargs["r_bounds"] = tuple(float(v) for v in mob_raw["r_bounds_m"])
    if "theta_bounds_deg" in mob_raw:
        mob_kwargs["theta_bounds"] = deg_pair(mob_raw["theta_bounds_deg"])
    kwargs["mobility"] = MobilityParams(**mob_kwargs)

    if seed is not None:
        kwargs["seed"] = int(seed)
    try:
        return ScenarioConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))


def _fmt(value) -> str:
    """Deterministic CSV cell formatting (shortest float round-trip)."""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: Path, header: list, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def cmd_validate_fresnel(config: dict, out_dir) -> dict:
    """Distance/elevation approximation error study; one CSV row per
    (range, panel size) pair, errors averaged over UE antennas, feed
    lines, and radiators."""
    cfg = {**DEFAULT_FRESNEL, **config.get("fresnel", {})}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    wavelength = 299_792_458.0 / float(cfg["carrier_hz"])
    theta = float(np.radians(cfg["theta_deg"]))
    phi = float(np.radians(cfg["phi_deg"]))

    rows = []
    for n_e in cfg["n_e_list"]:
        layout = ArrayLayout(
            n_rf=int(cfg["n_rf"]),
            n_e=int(n_e),
            d_e=float(cfg["d_e_wavelengths"]) * wavelength,
            d_rf=float(cfg["d_rf_wavelengths"]) * wavelength,
            d_p=float(cfg["d_pl_m"]) / 2.0,
            side=PanelSide.TX,
        )
        for r in cfg["r_m"]:
            ue = UeGeometry(
                center=SphericalState(r=float(r), theta=theta, phi=phi),
                l_antennas=int(cfg["l_antennas"]),
                d_ue=float(cfg["d_ue_wavelengths"]) * wavelength,
            )
            range_errs = []
            elev_errs = []
            for ell in range(1, ue.l_antennas + 1):
                state = geometry.ue_antenna_state(ue, ell)
                dist_ex, elev_ex = geometry.element_geometry(state, layout)
                dist_ap, elev_ap = geometry.element_geometry(state, layout, approx=True)
                range_errs.append(np.abs(dist_ap - dist_ex) / dist_ex)
                elev_errs.append(np.abs(elev_ap - elev_ex))
            rows.append(
                (
                    float(r),
                    int(n_e),
                    float(np.mean(range_errs)),
                    float(np.degrees(np.mean(elev_errs))),
                )
            )

    csv_path = out_dir / "fresnel_error.csv"
    _write_csv(
        csv_path,
        ["r_m", "n_e", "mean_rel_range_err", "mean_abs_elev_err_deg"],
        rows,
    )
    manifest = {
        "command": "validate-fresnel",
        "version": __version__,
        "config": cfg,
        "outputs": [csv_path.name],
    }
    manifest_path = out_dir / "manifest.json"
    save_config(manifest, manifest_path)
    return {"csv": csv_path, "manifest": manifest_path}


def _run_seed(base_seed: int, p_idx: int, u_idx: int, run_idx: int) -> int:
    ss = np.random.SeedSequence([int(base_seed), p_idx, u_idx, run_idx])
    return int(ss.generate_state(1)[0])


def _track_one(args) -> dict:
    """Worker body: one Monte-Carlo run at one (power, UE count) point."""
    scenario_raw, p_max, u, seed, p_idx, u_idx, run_idx = args
    raw = copy.deepcopy(scenario_raw)
    raw["p_max_dbm"] = p_max
    raw["u_ues"] = u
    scenario = scenario_from_dict(raw, seed=seed)
    metrics = run_experiment(scenario)
    return {
        "p_idx": p_idx,
        "u_idx": u_idx,
        "run_idx": run_idx,
        "p_max_dbm": p_max,
        "u": u,
        "seed": seed,
        "init_rmse_m": metrics.init_rmse,
        "mean_rmse_m": metrics.mean_rmse,
        "mean_sum_rate_bps_hz": metrics.mean_sum_rate,
        "mean_si_pre_w": float(np.mean(metrics.si_pre_per_tti))
        if len(metrics.si_pre_per_tti)
        else 0.0,
        "mean_si_post_w": float(np.mean(metrics.si_post_per_tti))
        if len(metrics.si_post_per_tti)
        else 0.0,
        "gamma_violation_blocks": int(np.sum(~metrics.si_ok_per_block)),
    }


def cmd_track(config: dict, out_dir, seed: int | None = None, workers: int = 1) -> dict:
    """Monte-Carlo tracking and rate sweep over (p_max_dbm, u) pairs."""
    track_cfg = {**DEFAULT_TRACK, **config.get("track", {})}
    scenario_raw = copy.deepcopy(config.get("scenario", {}))
    base_seed = int(seed if seed is not None else scenario_raw.get("seed", 0))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    p_list = [float(p) for p in track_cfg["p_max_dbm"]]
    u_list = [int(u) for u in track_cfg["u_list"]]
    n_runs = int(track_cfg["n_runs"])

    jobs = []
    for p_idx, p_max in enumerate(p_list):
        for u_idx, u in enumerate(u_list):
            for run_idx in range(n_runs):
                run_seed = _run_seed(base_seed, p_idx, u_idx, run_idx)
                jobs.append((scenario_raw, p_max, u, run_seed, p_idx, u_idx, run_idx))

    started = time.time()
    results = []
    errors = []
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_track_one, job): job for job in jobs}
            for fut in concurrent.futures.as_completed(futures):
                job = futures[fut]
                try:
                    results.append(fut.result())
                except Exception as exc:  # noqa: BLE001 - recorded, run continues
                    errors.append({"job": job[1:4], "error": repr(exc)})
    else:
        for job in jobs:
            try:
                results.append(_track_one(job))
            except Exception as exc:  # noqa: BLE001
                errors.append({"job": job[1:4], "error": repr(exc)})
    results.sort(key=lambda r: (r["p_idx"], r["u_idx"], r["run_idx"]))

    run_rows = [
        (
            r["p_max_dbm"], r["u"], r["run_idx"], r["seed"], r["init_rmse_m"],
            r["mean_rmse_m"], r["mean_sum_rate_bps_hz"], r["mean_si_pre_w"],
            r["mean_si_post_w"], r["gamma_violation_blocks"],
        )
        for r in results
    ]
    runs_path = out_dir / "runs.csv"
    _write_csv(
        runs_path,
        [
            "p_max_dbm", "u", "run", "seed", "init_rmse_m", "mean_rmse_m",
            "mean_sum_rate_bps_hz", "mean_si_pre_w", "mean_si_post_w",
            "gamma_violation_blocks",
        ],
        run_rows,
    )

    agg_rows = []
    for p_idx, p_max in enumerate(p_list):
        for u_idx, u in enumerate(u_list):
            group = [r for r in results if r["p_idx"] == p_idx and r["u_idx"] == u_idx]
            if not group:
                continue
            agg_rows.append(
                (
                    p_max,
                    u,
                    len(group),
                    float(np.mean([g["mean_rmse_m"] for g in group])),
                    float(np.mean([g["mean_sum_rate_bps_hz"] for g in group])),
                    float(np.mean([g["mean_si_pre_w"] for g in group])),
                    float(np.mean([g["mean_si_post_w"] for g in group])),
                    int(np.sum([g["gamma_violation_blocks"] for g in group])),
                )
            )
    agg_path = out_dir / "aggregate.csv"
    _write_csv(
        agg_path,
        [
            "p_max_dbm", "u", "n_runs", "mean_rmse_m", "mean_sum_rate_bps_hz",
            "mean_si_pre_w", "mean_si_post_w", "gamma_violation_blocks",
        ],
        agg_rows,
    )

    manifest = {
        "command": "track",
        "version": __version__,
        "config": {"scenario": scenario_raw, "track": track_cfg},
        "base_seed": base_seed,
        "run_seeds": [r["seed"] for r in results],
        "wall_clock_s": time.time() - started,
        "outputs": [runs_path.name, agg_path.name],
        "errors": errors,
    }
    manifest_path = out_dir / "manifest.json"
    save_config(manifest, manifest_path)
    return {
        "runs": runs_path,
        "aggregate": agg_path,
        "manifest": manifest_path,
        "errors": errors,
    }


def _config_paths(node, prefix="") -> list:
    paths = []
    if isinstance(node, dict):
        for key, value in node.items():
            sub = f"{prefix}.{key}" if prefix else key
            paths.append(sub)
            paths.extend(_config_paths(value, sub))
    return paths


def _set_path(cfg: dict, path: str, value) -> None:
    keys = path.split(".")
    node = cfg
    for key in keys[:-1]:
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(
                f"config path '{path}' not found; valid paths: {sorted(_config_paths(cfg))}"
            )
        node = node[key]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ConfigError(
            f"config path '{path}' not found; valid paths: {sorted(_config_paths(cfg))}"
        )
    node[keys[-1]] = value


def cmd_sweep(
    config: dict,
    param_path: str,
    values: list,
    out_dir,
    seed: int | None = None,
    workers: int = 1,
) -> dict:
    """Run cmd_track once per parameter value, aggregated into one table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    all_rows = []
    header = None
    sub_manifests = []
    all_errors = []
    for k, value in enumerate(values):
        variant = copy.deepcopy(config)
        _set_path(variant, param_path, value)
        sub_dir = out_dir / f"value_{k}"
        out = cmd_track(variant, sub_dir, seed=seed, workers=workers)
        all_errors.extend(out["errors"])
        with open(out["aggregate"]) as fh:
            reader = csv.reader(fh)
            rows = list(reader)
        header = rows[0]
        for row in rows[1:]:
            all_rows.append([param_path, _fmt(value)] + row)
        sub_manifests.append(str(out["manifest"].relative_to(out_dir)))
    sweep_path = out_dir / "sweep.csv"
    _write_csv(sweep_path, ["param_path", "param_value"] + header, all_rows)
    manifest = {
        "command": "sweep",
        "version": __version__,
        "param_path": param_path,
        "values": values,
        "config": config,
        "outputs": [sweep_path.name],
        "sub_manifests": sub_manifests,
        "errors": all_errors,
    }
    manifest_path = out_dir / "manifest.json"
    save_config(manifest, manifest_path)
    return {"sweep": sweep_path, "manifest": manifest_path, "errors": all_errors}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dmatrack",
        description="Full-duplex metasurface-array tracking/communication simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="base seed override")
        p.add_argument("--workers", type=int, default=1, help="parallel runs")

    common(sub.add_parser("validate-fresnel", help="approximation error table"))
    common(sub.add_parser("track", help="Monte-Carlo tracking/rate sweep"))
    p_sweep = sub.add_parser("sweep", help="repeat track over config values")
    common(p_sweep)
    p_sweep.add_argument("--param", required=True, help="dotted config path")
    p_sweep.add_argument(
        "--values", required=True, help="JSON list of values, e.g. '[0.95, 0.98]'"
    )
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.command == "validate-fresnel":
            out = cmd_validate_fresnel(config, args.out)
            errors = []
        elif args.command == "track":
            out = cmd_track(config, args.out, seed=args.seed, workers=args.workers)
            errors = out["errors"]
        else:
            try:
                values = json.loads(args.values)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"--values is not valid JSON: {exc}")
            if not isinstance(values, list):
                raise ConfigError("--values must be a JSON list")
            out = cmd_sweep(
                config, args.param, values, args.out, seed=args.seed, workers=args.workers
            )
            errors = out["errors"]
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    for name, path in out.items():
        if name != "errors":
            print(f"{name}: {path}")
    if errors:
        print(f"{len(errors)} run(s) failed; see manifest", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
