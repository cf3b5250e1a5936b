"""Command-line scenario runner for the reactor case study.

Usage::

    funnel-mpc run --scenario case3 --out out/case3
    funnel-mpc run --config my.toml --out out/custom --sim-step 5e-5
    funnel-mpc sweep --configs 'configs/*.toml' --out out/sweep
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import glob
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import (
    SCENARIOS,
    ScenarioConfig,
    build_scenario,
    config_from_mapping,
    load_config,
    validate,
)
from .controller import TrajectoryLog, run_robust_fmpc
from .errors import ClosedLoopError, ConfigError, FunnelMPCError

logger = logging.getLogger(__name__)

TRAJECTORY_FILE = "trajectory.csv"
SUMMARY_FILE = "summary.csv"
_COLUMNS = ("t", "y", "y_M", "y_ref", "psi", "phi", "u_fmpc", "u_fc", "u_total", "fc_active")
_VECTOR_COLUMNS = {"y", "y_M", "y_ref", "u_fmpc", "u_fc", "u_total"}


@dataclass(frozen=True)
class RunSummary:
    max_funnel_ratio: float
    funnel_violated: bool
    fc_active_fraction: float
    max_u_fmpc: float
    max_u_fc: float
    max_u_total: float
    ocp_cycles: int
    wall_time: float
    completed: bool = True


def csv_header(output_dim: int) -> list[str]:
    """Column names; vector columns get ``_1 .. _m`` suffixes when ``m > 1``."""
    names = []
    for col in _COLUMNS:
        if col in _VECTOR_COLUMNS and output_dim > 1:
            names.extend(f"{col}_{i + 1}" for i in range(output_dim))
        else:
            names.append(col)
    return names


def export_csv(log: TrajectoryLog, path) -> None:
    """Write the log as CSV with round-trip precision (``%.17g``).

    Raises:
        ValueError: if the log is empty or its times are not strictly increasing.
        OSError: on I/O failure.
    """
    if len(log) == 0:
        raise ValueError("cannot export an empty trajectory log")
    cols = log.arrays()
    if np.any(np.diff(cols["t"]) <= 0):
        raise ValueError("trajectory times must be strictly increasing")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(csv_header(log.output_dim))
        for i in range(len(log)):
            row = []
            for col in _COLUMNS:
                value = cols[col][i]
                if col == "fc_active":
                    row.append("1" if value else "0")
                elif col in _VECTOR_COLUMNS:
                    row.extend(format(float(v), ".17g") for v in value)
                else:
                    row.append(format(float(value), ".17g"))
            writer.writerow(row)


def read_csv(path) -> dict:
    """Read a trajectory CSV back into the column layout of ``TrajectoryLog.arrays``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(v) for v in row] for row in reader], dtype=float)
    data = data.reshape(-1, len(header))
    out = {}
    for col in _COLUMNS:
        if col in header:
            idx = [header.index(col)]
        else:
            idx = [i for i, name in enumerate(header) if name.startswith(col + "_")
                   and name[len(col) + 1:].isdigit()]
        block = data[:, idx]
        if col in _VECTOR_COLUMNS:
            out[col] = block
        elif col == "fc_active":
            out[col] = block[:, 0] != 0
        else:
            out[col] = block[:, 0]
    return out


def summarize(cols: dict, ocp_cycles: int, wall_time: float, completed: bool = True) -> RunSummary:
    """Summary statistics from trajectory columns (as returned by :func:`read_csv`)."""
    err = np.linalg.norm(cols["y"] - cols["y_ref"], axis=1)
    ratio = float(np.max(err / cols["psi"]))

    def peak(block):
        return float(np.max(np.abs(block)))

    return RunSummary(
        max_funnel_ratio=ratio,
        funnel_violated=bool(ratio >= 1.0),
        fc_active_fraction=float(np.mean(cols["fc_active"])),
        max_u_fmpc=peak(cols["u_fmpc"]),
        max_u_fc=peak(cols["u_fc"]),
        max_u_total=peak(cols["u_total"]),
        ocp_cycles=int(ocp_cycles),
        wall_time=float(wall_time),
        completed=completed,
    )


def write_summary(summary: RunSummary, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for key, value in dataclasses.asdict(summary).items():
            if isinstance(value, bool):
                value = str(value).lower()
            elif isinstance(value, float):
                value = format(value, ".17g")
            writer.writerow([key, value])


@dataclass
class RunResult:
    summary: RunSummary
    log: TrajectoryLog
    error: FunnelMPCError | None = None


def run_scenario(config: ScenarioConfig, out_dir=None) -> RunResult:
    """Simulate one scenario and write ``trajectory.csv`` and ``summary.csv``.

    Controller failures do not raise: the partial trajectory is written and
    returned with ``error`` set and ``summary.completed`` false.
    """
    out = Path(out_dir if out_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    sc = build_scenario(config)
    error = None
    try:
        log = run_robust_fmpc(sc.plant, sc.model, sc.funnel, sc.reference, sc.params, sc.fc,
                              sc.loop)
    except ClosedLoopError as exc:
        logger.error("run stopped at t_k=%.6g: %s", exc.t_k, exc.cause)
        log, error = exc.log, exc
    if len(log) == 0:
        raise error if error is not None else RuntimeError("empty trajectory")
    export_csv(log, out / TRAJECTORY_FILE)
    summary = summarize(log.arrays(), len(log.cycles), log.wall_time, completed=error is None)
    write_summary(summary, out / SUMMARY_FILE)
    return RunResult(summary=summary, log=log, error=error)


def _print_summary(label: str, summary: RunSummary) -> None:
    print(f"[{label}]")
    for key, value in dataclasses.asdict(summary).items():
        print(f"  {key:20s} {value}")


def _resolve_config(scenario: str | None, config_path: str | None, sim_step: float | None,
                    seed: int | None) -> ScenarioConfig:
    if config_path is not None:
        cfg = load_config(config_path, scenario=scenario)
    else:
        cfg = config_from_mapping({"scenario": scenario or "case3"})
    if sim_step is not None or seed is not None:
        updates = {}
        if sim_step is not None:
            updates["sim_step"] = sim_step
        if seed is not None:
            updates["seed"] = seed
        cfg = dataclasses.replace(cfg, **updates)
        validate(cfg)
    return cfg


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="funnel-mpc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one scenario")
    run.add_argument("--scenario", choices=SCENARIOS)
    run.add_argument("--config", help="TOML scenario file")
    run.add_argument("--out", help="output directory (default: config output_dir)")
    run.add_argument("--sim-step", type=float)
    run.add_argument("--seed", type=int, help="reserved; every component is deterministic")

    sweep = sub.add_parser("sweep", help="run several configs in parallel")
    sweep.add_argument("--configs", required=True, help="glob of TOML files")
    sweep.add_argument("--out", required=True, help="parent output directory")
    sweep.add_argument("--sim-step", type=float)
    sweep.add_argument("--seed", type=int)
    sweep.add_argument("--workers", type=int, default=4)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "run":
            cfg = _resolve_config(args.scenario, args.config, args.sim_step, args.seed)
            result = run_scenario(cfg, args.out)
            _print_summary(cfg.scenario, result.summary)
            return 0 if result.error is None else 1

        paths = sorted(glob.glob(args.configs))
        if not paths:
            raise ConfigError(f"no config files match {args.configs!r}", field="configs")
        configs = [_resolve_config(None, p, args.sim_step, args.seed) for p in paths]

        def job(item):
            path, cfg = item
            return path, run_scenario(cfg, Path(args.out) / Path(path).stem)

        with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
            results = list(pool.map(job, zip(paths, configs)))
        status = 0
        for path, result in results:
            _print_summary(Path(path).stem, result.summary)
            if result.error is not None:
                status = 1
        return status
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FunnelMPCError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
