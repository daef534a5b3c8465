"""Command-line entry point.

Subcommands cover the experiment pipeline end to end:

    collect  record a training dataset for a platform
    train    fit the GP stacks from a recorded dataset
    run      execute one closed-loop trial
    sweep    run a parameter sweep (training size or uncertainty weight)
    verify   evaluate the numerical bound checks on a short pipeline
    bench    time the core numerical kernels

All commands are deterministic under a fixed --seed and write their
artifacts into the --out directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import gp as gplib
from . import harness
from .config import ConfigError, apply_overrides, config_hash, load_config
from .dynamics import BikebotPlant, NoiseConfig, PendulumPlant
from .planner import default_bikebot_config, default_pendulum_config
from .stabilizer import build_gains

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def _make_plant(platform: str):
    if platform == "pendulum":
        return PendulumPlant()
    if platform == "bikebot":
        return BikebotPlant()
    raise ConfigError(f"unknown platform: {platform}")


def _make_traj(platform: str, name: str):
    if platform == "pendulum":
        return harness.pendulum_reference()
    table = {
        "default": harness.bikebot_sinusoid,
        "straight": harness.bikebot_straight,
        "sinusoid": harness.bikebot_sinusoid,
        "circle": harness.bikebot_circle,
    }
    if name not in table:
        raise ConfigError(f"unknown trajectory: {name}")
    return table[name]()


def _make_mpc(platform: str, cfg: dict):
    maker = default_pendulum_config if platform == "pendulum" else default_bikebot_config
    mc = cfg["mpc"]
    return maker(
        horizon=mc["horizon"], dt=mc["dt"], nu=mc["nu"], r_w=mc["r_w"],
        r_uf=mc["r_uf"], max_iters=mc["max_iters"],
        step_size=mc["step_size"],
    )


def _noise(cfg: dict) -> NoiseConfig:
    n = cfg["noise"]
    return NoiseConfig(n["angle_std"], n["rate_std"], n["accel_std"])


def _write_summary(out: Path, cfg: dict, lines: list):
    with open(out / "summary.txt", "w") as fh:
        fh.write(f"config_hash: {config_hash(cfg)}\n")
        fh.write(f"seed: {cfg['seed']}\n")
        for line in lines:
            fh.write(line + "\n")


def _read_dataset_csv(path: Path) -> dict:
    with open(path) as fh:
        reader = csv.reader(fh)
        meta = next(reader)
        platform = dict(item.split("=", 1) for item in meta[1:])["platform"]
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    data = np.array(rows)
    n_t = sum(1 for h in header if h.startswith("target_theta"))
    n_a = sum(1 for h in header if h.startswith("target_alpha"))
    d = len(header) - 1 - n_t - n_a
    return {
        "platform": platform,
        "t": data[:, 0],
        "X": data[:, 1 : 1 + d],
        "y_theta": data[:, 1 + d : 1 + d + n_t],
        "y_alpha": data[:, 1 + d + n_t :],
        "columns": header[1 : 1 + d],
    }


# ---------------------------------------------------------------------------
# Subcommand bodies
# ---------------------------------------------------------------------------


def _cmd_collect(cfg: dict, out: Path) -> list:
    platform = cfg["platform"]
    plant = _make_plant(platform)
    noise = _noise(cfg)
    if platform == "pendulum":
        exc_cfg = cfg["collect"]["excitation"]
        exc = harness.ExcitationConfig(
            a1=exc_cfg["a1"], a2=exc_cfg["a2"], omega1=exc_cfg["omega1"],
            omega2=exc_cfg["omega2"], seed=cfg["seed"],
        )
        data = harness.collect_pendulum_training(
            plant, exc, cfg["collect"]["n_samples"], noise=noise
        )
    else:
        data = harness.collect_bikebot_training(
            plant, noise=noise, seed=cfg["seed"]
        )
    harness.write_dataset_csv(data, out / "dataset.csv")
    return [f"dataset: {data['X'].shape[0]} rows, platform={platform}"]


def _cmd_train(cfg: dict, out: Path) -> list:
    data = _read_dataset_csv(out / "dataset.csv")
    models = harness.fit_models(
        data, noise=_noise(cfg),
        optimize_iters=cfg["train"]["optimize_iters"],
        hyper_subsample=cfg["train"]["hyper_subsample"],
        seed=cfg["seed"],
    )
    gplib.save_multi(models["gp_theta"], out / "model.theta.txt")
    gplib.save_multi(models["gp_alpha"], out / "model.alpha.txt")
    return [
        f"trained on {data['X'].shape[0]} rows",
        f"prior variance (external): {models['gp_theta'].max_prior_variance():.6g}",
        f"prior variance (internal): {models['gp_alpha'].max_prior_variance():.6g}",
    ]


def _cmd_run(cfg: dict, out: Path) -> list:
    platform = cfg["platform"]
    plant = _make_plant(platform)
    traj = _make_traj(platform, cfg["trajectory"])
    st = cfg["stabilizer"]
    eps = st["epsilon"]
    if eps is None:
        eps = 0.1 if platform == "pendulum" else 0.5
    gains, rcfg = build_gains(st["k_p"], st["k_d"], eps, n=plant.n)
    models = None
    mpc_cfg = None
    if cfg["controller"] == "learning":
        theta_path = out / "model.theta.txt"
        if not theta_path.exists():
            raise FileNotFoundError(
                "trained models not found; run collect and train first"
            )
        models = {
            "gp_theta": gplib.load_multi(theta_path),
            "gp_alpha": gplib.load_multi(out / "model.alpha.txt"),
            "platform": platform,
        }
        mpc_cfg = _make_mpc(platform, cfg)
    log = harness.run_trial(
        plant, cfg["controller"], traj, cfg["duration"], seed=cfg["seed"],
        models=models, mpc_cfg=mpc_cfg, gains=gains, rcfg=rcfg,
        noise=_noise(cfg),
    )
    harness.write_trial_csv(log, out / "trial.csv")
    lines = [f"termination: {log.termination}", f"steps: {log.t.shape[0]}"]
    if log.t.shape[0]:
        r_theta, r_alpha = harness.rmse(log)
        lines.append(f"rmse_theta: {np.array2string(r_theta, precision=5)}")
        lines.append(f"rmse_alpha: {r_alpha:.5f}")
    return lines


def _cmd_sweep(cfg: dict, out: Path) -> list:
    sw = cfg["sweep"]
    if sw["axis"] == "training_size":
        report = harness.sweep_training_size(
            sizes=tuple(sw["sizes"]), seeds=tuple(sw["seeds"]),
            duration=sw["duration"],
        )
    elif sw["axis"] == "nu":
        report = harness.sweep_nu(
            nus=tuple(sw["nus"]), seeds=tuple(sw["seeds"]),
            duration=sw["duration"],
        )
    else:
        raise ConfigError(f"unknown sweep axis: {sw['axis']}")
    harness.write_sweep_csv(report, out / "sweep.csv")
    return [f"sweep: axis={report.axis_name}, rows={len(report.rows)}"]


def _cmd_verify(cfg: dict, out: Path) -> list:
    plant = PendulumPlant()
    exc = harness.ExcitationConfig(seed=cfg["seed"])
    data = harness.collect_pendulum_training(plant, exc, 400)
    models = harness.fit_models(data, optimize_iters=30, seed=cfg["seed"])
    mpc_cfg = _make_mpc("pendulum", cfg)
    gains, rcfg = build_gains(n=plant.n)
    log = harness.run_trial(
        plant, "learning", harness.pendulum_reference(),
        min(cfg["duration"], 10.0), seed=cfg["seed"], models=models,
        mpc_cfg=mpc_cfg, gains=gains, rcfg=rcfg, log_beliefs=True,
    )
    consts = harness.compute_analysis_constants(mpc_cfg, gains, rcfg, models, log)
    thm = harness.verify_theorem1(log, consts, mpc_cfg, rcfg)
    results = {
        "lemma2_violation_fraction": harness.verify_lemma2_envelope(log, gains, rcfg),
        "lemma3_violation_fraction": harness.verify_lemma3_sigma(log),
        "lemma5_violation_fraction": harness.verify_lemma5_cost(log, consts.d3, consts.d4),
        "theorem1_violation_fraction": thm["violation_fraction"],
        "theorem1_v_max": thm["v_max"],
        "theorem1_finite": float(thm["finite"]),
        "termination_completed": float(log.termination == "completed"),
    }
    with open(out / "verify.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["# schema=verify-v1"])
        writer.writerow(["check", "value"])
        for key, val in results.items():
            writer.writerow([key, val])
    return [f"{k}: {v:.6g}" for k, v in results.items()]


def _cmd_bench(cfg: dict, out: Path) -> list:
    rng = np.random.default_rng(cfg["seed"])
    X = rng.normal(size=(800, 4))
    y = np.sin(X[:, 0]) + 0.1 * rng.normal(size=800)
    model = gplib.fit(X, y, gplib.SeHyperparams(1.0, 0.01, np.ones(4)))
    t0 = time.perf_counter()
    n_q = 2000
    for i in range(n_q):
        model.predict_full(X[i % 800] + 0.01)
    dt_gp = (time.perf_counter() - t0) / n_q
    lines = [f"gp predict_full (N=800): {dt_gp * 1e3:.3f} ms/query"]
    return lines


COMMANDS = {
    "collect": _cmd_collect,
    "train": _cmd_train,
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "verify": _cmd_verify,
    "bench": _cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="balancebot",
        description="Learning-based balance control experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--platform", choices=["pendulum", "bikebot"])
        p.add_argument("--controller", choices=["learning", "eic"])
        p.add_argument("--duration", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--out", type=str, default=".")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return err.code if err.code is not None else EXIT_USAGE
    try:
        cfg = load_config(args.config)
        overrides = list(args.overrides)
        for flag in ("platform", "controller", "duration", "seed"):
            val = getattr(args, flag)
            if val is not None:
                overrides.append(f"{flag}={json.dumps(val)}")
        cfg = apply_overrides(cfg, overrides)
    except ConfigError as err:
        return _fail(EXIT_CONFIG, "config", str(err))
    except OSError as err:
        return _fail(EXIT_IO, "io", str(err))

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        lines = COMMANDS[args.command](cfg, out)
        _write_summary(out, cfg, lines)
    except ConfigError as err:
        return _fail(EXIT_CONFIG, "config", str(err))
    except (OSError, FileNotFoundError) as err:
        return _fail(EXIT_IO, "io", str(err))
    except Exception as err:  # runtime failures still produce a summary line
        return _fail(EXIT_RUNTIME, "runtime", f"{type(err).__name__}: {err}")
    for line in lines:
        print(line)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
