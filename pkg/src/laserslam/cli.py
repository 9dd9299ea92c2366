"""Command line runner: simulate, run, eval and bench.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 evaluation error.
The default output directory comes from ``LASERSLAM_OUT`` (else ``./out``).
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evaluation import EvaluationError, aggregate, evaluate, write_pairs_csv
from .fusion import FusionConfig, fuse_trajectory
from .geom import Pose2, Pose3, Trajectory
from .gridmap import export_pgm
from .hector import HectorSLAM
from .rbpf import RBPFSLAM
from .sim import (SCAN_RATE, SCENARIOS, WORLDS, RecordFormatError, ScenarioConfig, gate_scan,
                  load_world, nearest_sample, read_record, simulate_scenario, write_record)
from .submap import SubmapSLAM

log = logging.getLogger("laserslam")

OUT_ENV = "LASERSLAM_OUT"
ALGORITHMS = {"hector": HectorSLAM, "rbpf": RBPFSLAM, "submap": SubmapSLAM}
BASE_COLUMNS = ["t", "x", "y", "yaw"]
FUSED_COLUMNS = BASE_COLUMNS + ["z", "roll", "pitch"]


class ConfigError(ValueError):
    exit_code = 2


class DataError(ValueError):
    exit_code = 3


@dataclass
class RunConfig:
    scenario: str = "rect_nominal"
    world: str = "lab"
    algorithm: str = "hector"
    seed: int = 0
    sigma: float = 0.02
    fusion: bool = False
    out: Path = Path("out")

    def validate(self):
        if self.scenario not in SCENARIOS and not Path(self.scenario).is_file():
            raise ConfigError(f"unknown scenario {self.scenario!r}: expected one of "
                              f"{sorted(SCENARIOS)} or an existing record file")
        if self.world not in WORLDS and not Path(self.world).is_file():
            raise ConfigError(f"world file not found: {self.world}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}: expected one of {sorted(ALGORITHMS)}")
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise ConfigError("sigma must be a non-negative number")
        return self

    @property
    def stem(self) -> str:
        if self.scenario in SCENARIOS:
            # every input that changes the record is in its name, so reuse is safe
            return f"{self.scenario}_{Path(self.world).stem}_s{self.seed}_n{self.sigma:g}"
        return Path(self.scenario).stem


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {out}: {e.strerror}") from None
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


# ------------------------------------------------------------ operations

def simulate(cfg: RunConfig) -> Path:
    cfg.validate()
    if cfg.scenario not in SCENARIOS:
        raise ConfigError("simulate needs a built-in scenario name")
    try:
        world = load_world(cfg.world)
    except FileNotFoundError as e:
        raise ConfigError(str(e)) from None
    rec = simulate_scenario(ScenarioConfig(cfg.scenario, cfg.world, cfg.seed, cfg.sigma), world)
    return write_record(rec, _outdir(cfg.out) / f"{cfg.stem}.jsonl")


def load_record(cfg: RunConfig):
    if cfg.scenario in SCENARIOS:
        path = Path(cfg.out) / f"{cfg.stem}.jsonl"
        if not path.exists():
            simulate(cfg)
    else:
        path = Path(cfg.scenario)
    try:
        return read_record(path, cfg.stem)
    except RecordFormatError as e:
        raise DataError(f"{path}: {e}") from None


def run_pipeline(record, algorithm: str, seed: int = 0):
    """Feed the ungated scans of ``record`` through one pipeline.

    Returns the estimate trajectory and the pipeline object.
    """
    slam = ALGORITHMS[algorithm](seed=seed) if algorithm == "rbpf" else ALGORITHMS[algorithm]()
    imu_t = np.array([s.timestamp for s in record.imu])
    times, poses = [], []
    for scan in record.scans:
        imu = nearest_sample(record.imu, imu_t, scan.timestamp, 1.0 / SCAN_RATE)
        if not gate_scan(scan, imu):
            continue
        poses.append(slam.process_scan(scan))
        times.append(scan.timestamp)
    return Trajectory(np.array(times), poses), slam


def write_estimate_csv(est: Trajectory, path) -> Path:
    path = Path(path)
    fused = est.is_3d
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FUSED_COLUMNS if fused else BASE_COLUMNS)
        for t, p in est:
            row = [t, p.x, p.y, p.yaw] + ([p.z, p.roll, p.pitch] if fused else [])
            w.writerow([f"{v:.6f}" for v in row])
    return path


def read_estimate_csv(path) -> Trajectory:
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as e:
        raise DataError(f"cannot read estimate {path}: {e.strerror}") from None
    with fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header not in (BASE_COLUMNS, FUSED_COLUMNS):
            raise DataError(f"{path}: line 1: expected header {','.join(BASE_COLUMNS)}[,z,roll,pitch]")
        times, poses = [], []
        for lineno, row in enumerate(rows, 2):
            if len(row) != len(header):
                raise DataError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                v = [float(c) for c in row]
            except ValueError:
                raise DataError(f"{path}: line {lineno}: non-numeric field") from None
            if times and v[0] <= times[-1]:
                raise DataError(f"{path}: line {lineno}: timestamp {v[0]} not after {times[-1]}")
            times.append(v[0])
            if len(v) == 7:
                poses.append(Pose3(v[1], v[2], v[4], v[5], v[6], v[3]))
            else:
                poses.append(Pose2(v[1], v[2], v[3]))
    if not times:
        raise DataError(f"{path}: no estimate rows")
    return Trajectory(np.array(times), poses)


def run(cfg: RunConfig) -> dict:
    """Run one pipeline; writes the estimate CSV and the final map (plus graph JSON for submap)."""
    cfg.validate()
    record = load_record(cfg)
    out = _outdir(cfg.out)
    est, slam = run_pipeline(record, cfg.algorithm, cfg.seed)
    if cfg.fusion:
        est, _ = fuse_trajectory(est, record.alt, record.imu, FusionConfig())
    stem = f"{cfg.stem}_{cfg.algorithm}"
    files = {"estimate": write_estimate_csv(est, out / f"{stem}.csv")}
    grid = slam.final_map()
    if grid is not None:
        files["map"], files["map_meta"] = export_pgm(grid, out / f"{stem}.pgm")
    if cfg.algorithm == "submap":
        files["graph"] = slam.state.graph.export_json(out / f"{stem}_graph.json")
    return files


def evaluate_files(record_path, estimate_path, out, stem: str | None = None, mode: str = "error_norm"):
    try:
        record = read_record(record_path)
    except RecordFormatError as e:
        raise DataError(f"{record_path}: {e}") from None
    est = read_estimate_csv(estimate_path)
    truth = record.ground_truth if est.is_3d else record.ground_truth.to_2d()
    metrics, pairs = evaluate(truth, est, mode)
    stem = stem or Path(estimate_path).stem
    out = _outdir(out)
    write_pairs_csv(pairs, out / f"{stem}_pairs.csv")
    report = aggregate({record.name: metrics}, approach=stem, mode=mode)
    return report.write(out, f"{stem}_report")


def _bench_cell(args):
    cfg = RunConfig(*args)
    files = run(cfg)
    record = load_record(cfg)
    est = read_estimate_csv(files["estimate"])
    truth = record.ground_truth if est.is_3d else record.ground_truth.to_2d()
    metrics, pairs = evaluate(truth, est)
    write_pairs_csv(pairs, Path(cfg.out) / f"{cfg.stem}_{cfg.algorithm}_pairs.csv")
    return cfg.algorithm, cfg.scenario, metrics


def bench(seed: int = 0, sigma: float = 0.02, world: str = "lab", fusion: bool = False,
          out=Path("out"), jobs: int | None = None, scenarios=None, algorithms=None):
    """Every scenario x algorithm cell, in parallel; returns the report and its files."""
    scenarios = list(scenarios or SCENARIOS)
    algorithms = list(algorithms or ALGORITHMS)
    out = _outdir(out)
    for s in scenarios:  # records first so workers never race on the same file
        simulate(RunConfig(s, world, "hector", seed, sigma, fusion, out))
    cells = [(s, world, a, seed, sigma, fusion, out) for a in algorithms for s in scenarios]
    jobs = jobs or min(len(cells), os.cpu_count() or 1)
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_bench_cell, cells))
    else:
        results = [_bench_cell(c) for c in cells]
    table = {a: {} for a in algorithms}
    for a, s, m in results:
        table[a][s] = m
    report = aggregate(table)
    return report, report.write(out, "bench_report")


# ------------------------------------------------------------------ CLI

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", default="rect_nominal",
                        help="built-in scenario name or path to a JSON-lines record")
    common.add_argument("--world", default="lab", help="lab, tunnel or a world JSON file")
    common.add_argument("--algo", default="hector", help="hector, rbpf or submap")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--sigma", type=float, default=0.02, help="lidar range noise (m)")
    common.add_argument("--fusion", action="store_true", help="add altitude and attitude to estimates")
    common.add_argument("--out", default=os.environ.get(OUT_ENV, "out"), help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="laserslam", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write a scenario record")
    sub.add_parser("run", parents=[common], help="run one SLAM pipeline on a record")
    ev = sub.add_parser("eval", parents=[common], help="score an estimate CSV against a record")
    ev.add_argument("--estimate", required=True, help="estimate CSV from `run`")
    ev.add_argument("--mode", default="error_norm", choices=["error_norm", "literal_diff"])
    b = sub.add_parser("bench", parents=[common], help="all scenarios x all algorithms")
    b.add_argument("--jobs", type=int, default=None, help="worker processes")
    return p


def _config(a) -> RunConfig:
    return RunConfig(a.scenario, a.world, a.algo, a.seed, a.sigma, a.fusion, Path(a.out))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            print(simulate(_config(args)))
        elif args.command == "run":
            for path in run(_config(args)).values():
                print(path)
        elif args.command == "eval":
            cfg = _config(args)
            record = Path(cfg.scenario) if Path(cfg.scenario).is_file() else cfg.out / f"{cfg.stem}.jsonl"
            if not record.is_file():
                raise ConfigError(f"record not found: {record}")
            for path in evaluate_files(record, args.estimate, cfg.out, mode=args.mode):
                print(path)
        elif args.command == "bench":
            report, paths = bench(args.seed, args.sigma, args.world, args.fusion, Path(args.out), args.jobs)
            sys.stdout.write(report.to_table())
    except (ConfigError, DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except EvaluationError as e:
        print(f"evaluation error: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
