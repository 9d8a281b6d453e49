"""Experiment driver.

Verbs: train, kernel, compare, volume, slice, simulate.  Every verb
takes --config PATH (INI or JSON) plus repeatable --set section.key=value
overrides, writes its outputs and a manifest.json into the run directory,
and exits 0 on success, 2 on configuration errors, 3 on numerical
failures, 4 when the run completed but logged warnings (non-convergence,
infeasible filter steps, empty sets).

The run directory is experiment.out_dir if set, else
$PCBF_OUT_ROOT/<scenario>-<verb> (default root "runs").
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .barrier import Ncbf, load_ncbf, save_ncbf
from .config import ConfigError, ExperimentConfig, resolve_config
from .hjgrid import compare_sets, compute_kernel, load_kernel_csv, \
    save_contour_csv, save_kernel_csv
from .runtime import ConstantVertexPolicy, PendulumPD, QuadrotorWaypointPD, \
    simulate, trajectory_to_csv
from .systems import NonFiniteStateError, make_system
from .training import NumericalError, history_to_csv, train

log = logging.getLogger(__name__)

OUT_ROOT_ENV = "PCBF_OUT_ROOT"


# small helpers ---------------------------------------------------------

def _sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def history_content_hash(path) -> str:
    """Hash of a history CSV with the wall-clock column stripped.

    Wall times vary run to run; everything else is deterministic for a
    fixed config and seed, so this is the hash manifests record and the
    reproducibility checks compare.
    """
    digest = hashlib.sha256()
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        keep = [i for i, name in enumerate(header) if name != "wall_ms"]
        digest.update(",".join(header[i] for i in keep).encode())
        for row in reader:
            digest.update(b"\n")
            digest.update(",".join(row[i] for i in keep).encode())
    return digest.hexdigest()


def _json_ready(obj):
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.ndarray):
        return _json_ready(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _write_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(_json_ready(obj), f, indent=2, sort_keys=True)
        f.write("\n")


def _write_manifest(out_dir: Path, command: str, cfg: ExperimentConfig,
                    files: list[Path], extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "package_version": __version__,
        "config": cfg.as_dict(),
        "outputs": {p.name: _sha256_file(p) for p in sorted(files)},
    }
    if extra:
        manifest.update(extra)
    _write_json(out_dir / "manifest.json", manifest)


def _resolve_out_dir(cfg: ExperimentConfig, command: str) -> Path:
    if cfg.out_dir:
        out = Path(cfg.out_dir)
    else:
        root = os.environ.get(OUT_ROOT_ENV, "runs")
        out = Path(root) / f"{cfg.scenario}-{command}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def monte_carlo_volume(ncbf: Ncbf, n_samples: int, seed: int = 0,
                       chunk: int = 65_536) -> tuple[float, float]:
    """Uniform-sampling volume of the learned set inside the state box.

    Returns (volume, standard error); the error is the binomial standard
    error of the hit fraction scaled by the box volume.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    box = ncbf.system.state_box
    lo, hi = box[:, 0], box[:, 1]
    box_volume = float(np.prod(hi - lo))
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < n_samples:
        take = min(chunk, n_samples - done)
        pts = rng.uniform(lo, hi, size=(take, lo.size))
        hits += int(np.count_nonzero(ncbf.value(pts) >= 0.0))
        done += take
    frac = hits / n_samples
    stderr = box_volume * float(np.sqrt(frac * (1.0 - frac) / n_samples))
    return box_volume * frac, stderr


# command implementations -----------------------------------------------

def cmd_train(cfg: ExperimentConfig, out_dir: Path) -> None:
    system = make_system(cfg.scenario)
    tc = cfg.trainer()
    ncbf, history = train(tc, system, x_e=cfg.anchor(), out_dir=out_dir)
    ckpt = out_dir / "checkpoint.ckpt"
    save_ncbf(ckpt, ncbf)
    hist_path = out_dir / "history.csv"
    history_to_csv(history, hist_path)
    if history:
        mean_ms = float(np.mean([r.wall_ms for r in history]))
        log.info("trained %d iterations, %.2f ms/iteration mean "
                 "(%.1f it/s)", len(history), mean_ms, 1e3 / max(mean_ms, 1e-9))
    files = [ckpt, hist_path] + sorted(out_dir.glob("ckpt_*.ckpt"))
    extra = {
        "history_hash": history_content_hash(hist_path),
        "iterations": len(history),
    }
    if history:
        extra["final_losses"] = {"l_feas": history[-1].l_feas,
                                 "l_vol": history[-1].l_vol}
    _write_manifest(out_dir, "train", cfg, files, extra)


def cmd_kernel(cfg: ExperimentConfig, out_dir: Path) -> None:
    system = make_system(cfg.scenario)
    if system.n != 2:
        raise ConfigError(f"kernel computation needs a 2-D scenario, "
                          f"{cfg.scenario} has n={system.n}")
    shape = cfg["grid.shape"]
    if len(shape) != 2:
        raise ConfigError(f"grid.shape must have two entries, got {shape}")
    grid = compute_kernel(system, shape=tuple(shape), dt=cfg["grid.dt"],
                          tol=cfg["grid.tol"], max_sweeps=cfg["grid.max_sweeps"])
    if not grid.converged:
        log.warning("kernel sweep did not converge within %d sweeps",
                    cfg["grid.max_sweeps"])
    kpath = out_dir / "kernel.csv"
    cpath = out_dir / "kernel_contour.csv"
    save_kernel_csv(grid, kpath)
    save_contour_csv(grid, cpath)
    _write_manifest(out_dir, "kernel", cfg, [kpath, cpath],
                    {"sweeps": grid.sweeps, "converged": grid.converged})


def cmd_compare(cfg: ExperimentConfig, out_dir: Path, checkpoint: str,
                kernel: str) -> None:
    ncbf = load_ncbf(checkpoint)
    grid = load_kernel_csv(kernel)
    metrics = compare_sets(ncbf, grid, n_samples=cfg["compare.n_samples"],
                           seed=cfg.seed)
    empty = not np.isfinite(metrics["coverage"])
    if empty:
        log.warning("learned set is empty on the sample; coverage undefined")
    metrics["empty_learned"] = empty
    mpath = out_dir / "metrics.json"
    _write_json(mpath, metrics)
    log.info("coverage=%.4f conservatism=%.4f",
             metrics["coverage"], metrics["conservatism"])
    _write_manifest(out_dir, "compare", cfg, [mpath])


def cmd_volume(cfg: ExperimentConfig, out_dir: Path, checkpoint: str) -> None:
    ncbf = load_ncbf(checkpoint)
    n = cfg["volume.n_samples"]
    volume, stderr = monte_carlo_volume(ncbf, n, seed=cfg.seed)
    box = ncbf.system.state_box
    box_volume = float(np.prod(box[:, 1] - box[:, 0]))
    vpath = out_dir / "volume.json"
    _write_json(vpath, {"volume": volume, "stderr": stderr, "n_samples": n,
                        "fraction": volume / box_volume,
                        "state_box_volume": box_volume})
    log.info("volume %.6g +- %.2g (%d samples)", volume, stderr, n)
    _write_manifest(out_dir, "volume", cfg, [vpath])


def cmd_slice(cfg: ExperimentConfig, out_dir: Path, checkpoint: str) -> None:
    ncbf = load_ncbf(checkpoint)
    system = ncbf.system
    dims = cfg["slice.dims"]
    res = cfg["slice.resolution"]
    if len(dims) != 2 or dims[0] == dims[1] \
            or not all(0 <= d < system.n for d in dims):
        raise ConfigError(f"slice.dims must be two distinct state indices "
                          f"in [0, {system.n}), got {dims}")
    if res < 1:
        raise ConfigError("slice.resolution must be at least 1")
    fixed = cfg["slice.fixed"]
    base = np.zeros(system.n) if fixed is None \
        else np.asarray(fixed, dtype=np.float64)
    if base.shape != (system.n,):
        raise ConfigError(f"slice.fixed must list all {system.n} state entries")
    i, j = dims
    box = system.state_box
    ax_i = np.linspace(box[i, 0], box[i, 1], res)
    ax_j = np.linspace(box[j, 0], box[j, 1], res)
    pts = np.tile(base, (res * res, 1))
    mi, mj = np.meshgrid(ax_i, ax_j, indexing="ij")
    pts[:, i] = mi.ravel()
    pts[:, j] = mj.ravel()
    vals = ncbf.value(pts)
    spath = out_dir / "slice.csv"
    meta = {"scenario": system.name, "dims": list(dims),
            "fixed": base.tolist(), "resolution": res}
    with open(spath, "w", newline="") as f:
        f.write(f"# meta {json.dumps(meta, sort_keys=True)}\n")
        w = csv.writer(f)
        w.writerow([f"x{i}", f"x{j}", "value"])
        for row in range(res * res):
            w.writerow([repr(float(pts[row, i])), repr(float(pts[row, j])),
                        repr(float(vals[row]))])
    _write_manifest(out_dir, "slice", cfg, [spath])


def _build_policy(cfg: ExperimentConfig, system):
    kind = cfg["simulate.policy"]
    if kind == "pd":
        if system.m != 1:
            raise ConfigError("the pd policy drives the pendulum only")
        return PendulumPD(kp=cfg["simulate.pd_kp"], kd=cfg["simulate.pd_kd"])
    if kind == "waypoint":
        if system.n != 12:
            raise ConfigError("the waypoint policy drives the quadrotor only")
        wp = cfg["simulate.waypoint"]
        wp = np.zeros(3) if wp is None else np.asarray(wp, dtype=np.float64)
        if wp.shape != (3,):
            raise ConfigError("simulate.waypoint must have three entries")
        return QuadrotorWaypointPD(waypoint=wp,
                                   pos_kp=cfg["simulate.pos_kp"],
                                   pos_kd=cfg["simulate.pos_kd"],
                                   att_kp=cfg["simulate.att_kp"],
                                   att_kd=cfg["simulate.att_kd"],
                                   max_tilt=cfg["simulate.max_tilt"])
    return ConstantVertexPolicy(vertex_index=cfg["simulate.vertex_index"])


def _sample_starts(system, ncbf, n_runs: int, seed: int) -> list[np.ndarray]:
    """Uniform starts in the state box, kept inside the learned set when a
    barrier is supplied (rejection sampling)."""
    rng = np.random.default_rng(seed)
    lo, hi = system.state_box[:, 0], system.state_box[:, 1]
    starts: list[np.ndarray] = []
    attempts = 0
    limit = 20_000 * n_runs
    while len(starts) < n_runs:
        x = rng.uniform(lo, hi)
        attempts += 1
        if ncbf is None or float(ncbf.value(x)) >= 0.0:
            starts.append(x)
        if attempts >= limit:
            raise NumericalError(
                f"could not sample {n_runs} starts inside the learned set "
                f"after {attempts} draws; the set may be empty")
    return starts


def _run_summary(traj) -> dict:
    return {
        "steps": int(len(traj.inputs)),
        "min_h": traj.min_h,
        "min_barrier": traj.min_barrier,
        "aborted": traj.aborted,
        "filter_active_steps": int(traj.filter_active.sum()),
        "infeasible_steps": int(traj.infeasible.sum()),
        "final_state": traj.states[-1].tolist(),
    }


def cmd_simulate(cfg: ExperimentConfig, out_dir: Path,
                 checkpoint: str | None) -> None:
    system = make_system(cfg.scenario)
    ncbf = None
    if checkpoint is not None:
        ncbf = load_ncbf(checkpoint)
        if ncbf.system.name != system.name:
            raise ConfigError(f"checkpoint was trained on {ncbf.system.name!r}, "
                              f"scenario is {cfg.scenario!r}")
    policy = _build_policy(cfg, system)
    duration, dt = cfg["simulate.duration"], cfg["simulate.dt"]
    runs, jobs = cfg["simulate.runs"], cfg["simulate.jobs"]
    if runs < 1 or jobs < 1:
        raise ConfigError("simulate.runs and simulate.jobs must be positive")

    if runs == 1:
        x0 = cfg["simulate.x0"]
        x0 = np.zeros(system.n) if x0 is None else np.asarray(x0, np.float64)
        if x0.shape != (system.n,):
            raise ConfigError(f"simulate.x0 must list {system.n} entries")
        starts = [x0]
    else:
        starts = _sample_starts(system, ncbf, runs, cfg.seed)

    def one(x0):
        return simulate(system, policy, x0, duration, dt, ncbf=ncbf)

    if jobs == 1 or runs == 1:
        trajs = [one(x0) for x0 in starts]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            trajs = list(pool.map(one, starts))

    files: list[Path] = []
    summaries = []
    for idx, traj in enumerate(trajs):
        name = "trajectory.csv" if runs == 1 else f"traj_{idx:03d}.csv"
        path = out_dir / name
        trajectory_to_csv(traj, path)
        files.append(path)
        summaries.append(_run_summary(traj))

    summary: dict = {"runs": runs, "filtered": ncbf is not None,
                     "duration": duration, "dt": dt,
                     "starts": [list(map(float, s)) for s in starts]}
    if runs == 1:
        summary.update(summaries[0])
    else:
        summary["per_run"] = summaries
        summary["min_h"] = min(s["min_h"] for s in summaries)
        summary["any_aborted"] = any(s["aborted"] for s in summaries)
        summary["any_infeasible"] = any(s["infeasible_steps"] > 0
                                        for s in summaries)
    spath = out_dir / "summary.json"
    _write_json(spath, summary)
    files.append(spath)
    log.info("simulate: %d run(s), min h over all runs %.6g",
             runs, min(s["min_h"] for s in summaries))
    _write_manifest(out_dir, "simulate", cfg, files)


# argument parsing and entry point --------------------------------------

class _WarningCounter(logging.Handler):
    def __init__(self):
        super().__init__(level=logging.WARNING)
        self.count = 0

    def emit(self, record):
        self.count += 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcbf",
        description="Train, validate and deploy learned control barriers.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None,
                       help="INI or JSON experiment configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")

    common(sub.add_parser("train", help="train a barrier and write "
                                        "checkpoint + history"))
    common(sub.add_parser("kernel", help="grid viability kernel (2-D only)"))
    p = sub.add_parser("compare", help="learned set vs kernel metrics")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kernel", required=True,
                   help="kernel CSV from the kernel command")
    p = sub.add_parser("volume", help="Monte-Carlo volume of the learned set")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("slice", help="2-D slice of the barrier to CSV")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("simulate", help="closed-loop runs, optionally filtered")
    common(p)
    p.add_argument("--checkpoint", default=None,
                   help="barrier checkpoint; omit for unfiltered runs")
    p.add_argument("--runs", type=int, default=None,
                   help="override simulate.runs")
    p.add_argument("--jobs", type=int, default=None,
                   help="override simulate.jobs")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    counter = _WarningCounter()
    pkg_logger = logging.getLogger("pcbf")
    pkg_logger.addHandler(counter)
    try:
        overrides = list(args.overrides)
        if getattr(args, "runs", None) is not None:
            overrides.append(f"simulate.runs={args.runs}")
        if getattr(args, "jobs", None) is not None:
            overrides.append(f"simulate.jobs={args.jobs}")
        cfg = resolve_config(args.config, overrides)
        out_dir = _resolve_out_dir(cfg, args.command)
        if args.command == "train":
            cmd_train(cfg, out_dir)
        elif args.command == "kernel":
            cmd_kernel(cfg, out_dir)
        elif args.command == "compare":
            cmd_compare(cfg, out_dir, args.checkpoint, args.kernel)
        elif args.command == "volume":
            cmd_volume(cfg, out_dir, args.checkpoint)
        elif args.command == "slice":
            cmd_slice(cfg, out_dir, args.checkpoint)
        elif args.command == "simulate":
            cmd_simulate(cfg, out_dir, args.checkpoint)
        else:  # pragma: no cover - argparse enforces the choices
            raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        log.error("%s", exc)
        return 2
    except (NumericalError, NonFiniteStateError) as exc:
        log.error("numerical failure: %s", exc)
        return 3
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2
    finally:
        pkg_logger.removeHandler(counter)
    return 4 if counter.count else 0


if __name__ == "__main__":
    sys.exit(main())
