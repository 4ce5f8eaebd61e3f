"""Batch front end: synthetic sweeps, single-pair estimation and sequences.

Sweep output (all in the ``--out`` directory)::

    sweep.csv          one row per (method, n_matches, outlier_fraction, repetition)
    sweep_means.csv    per-(method, n_matches, outlier_fraction) means
    sweep_timings.csv  wall-clock seconds per row, kept apart so that the two
                       files above are byte-identical across runs

Columns of ``sweep.csv`` are listed in ``SWEEP_FIELDS``; floats are written
with ``repr`` so every row parses back to the same ``SweepRecord``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import RansacConfig, ransac_estimate
from .estimator import estimate_motion, estimate_unfiltered
from .formats import FormatError, format_pose, read_matches, read_rig, write_matches, write_rig, write_trajectory
from .geometry import CameraIntrinsics, GeometryError, Rigid3, StereoRig, log_se3, matches_to_array
from .metrics import detection_stats, relative_error
from .rdcr import OutlierMask, RdcrParams
from .synthgen import CorruptionConfig, generate_scene

__all__ = [
    "METHODS",
    "SWEEP_FIELDS",
    "SweepConfig",
    "SweepRecord",
    "cell_seed",
    "run_method",
    "run_sweep",
    "read_sweep_csv",
    "SequenceResult",
    "run_sequence",
    "main",
]

log = logging.getLogger("stereomotion")

METHODS = ("rdcr", "apg", "ransac", "cls")
THREADS_ENV = "STEREOMOTION_THREADS"


@dataclass(frozen=True)
class SweepConfig:
    n_matches_grid: tuple = (100, 500, 1000, 2000)
    outlier_fraction_grid: tuple = (0.1, 0.3, 0.5, 0.7)
    repetitions: int = 50
    base_seed: int = 0
    methods: tuple = ("rdcr", "apg")
    f: float = 718.856
    cu: float = 607.1928
    cv: float = 185.2157
    baseline: float = 0.5371657
    sigma_n: float = 1.5
    sigma_j_range: tuple = (2.0, 100.0)
    ransac_models: int = 250
    ransac_threshold: float = RansacConfig.inlier_threshold

    def __post_init__(self):
        for name in ("n_matches_grid", "outlier_fraction_grid", "methods", "sigma_j_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.n_matches_grid or not self.outlier_fraction_grid:
            raise ValueError("grids must be nonempty")
        if not self.methods:
            raise ValueError("at least one method is required")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if not 0 <= self.base_seed < 2**64:
            raise ValueError("base_seed must fit in 64 unsigned bits")
        # validate the remaining fields through the objects they build
        self.rig
        for n in self.n_matches_grid:
            for p in self.outlier_fraction_grid:
                self.corruption(n, p, 0)
        RansacConfig(self.ransac_models, self.ransac_threshold)

    @property
    def rig(self) -> StereoRig:
        return StereoRig(CameraIntrinsics(self.f, self.cu, self.cv), self.baseline)

    def corruption(self, n: int, p: float, seed: int) -> CorruptionConfig:
        return CorruptionConfig(int(n), float(p), self.sigma_n, self.sigma_j_range, seed)

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - names
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SweepConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def cell_seed(base_seed: int, n_matches: int, outlier_fraction: float, repetition: int) -> int:
    """``base_seed`` XOR a 64-bit hash of the scene key."""
    key = f"{int(n_matches)}|{float(outlier_fraction)!r}|{int(repetition)}".encode()
    h = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")
    return base_seed ^ h


@dataclass(frozen=True)
class SweepRecord:
    method: str
    n_matches: int
    outlier_fraction: float
    repetition: int
    seed: int
    status: str
    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float
    recall: float
    precision: float
    removal_fraction: float
    excess_elimination: float
    e_rel: float
    apg_iterations: int
    rdcr_iterations: int
    lm_iterations: int

    def to_row(self) -> list[str]:
        return [repr(v) if isinstance(v, float) else str(v) for v in dataclasses.astuple(self)]

    @classmethod
    def from_row(cls, row) -> "SweepRecord":
        vals = []
        for f, v in zip(dataclasses.fields(cls), row, strict=True):
            vals.append(v if f.type == "str" else (int(v) if f.type == "int" else float(v)))
        return cls(*vals)


SWEEP_FIELDS = tuple(f.name for f in dataclasses.fields(SweepRecord))
MEAN_FIELDS = (
    "accuracy",
    "recall",
    "precision",
    "removal_fraction",
    "excess_elimination",
    "e_rel",
    "apg_iterations",
    "rdcr_iterations",
    "lm_iterations",
)


def run_method(method: str, matches, rig: StereoRig, seed: int = 0, ransac: RansacConfig | None = None, params=None):
    """Dispatch one estimator; returns ``(motion, OutlierMask, diagnostics)``."""
    arr = matches_to_array(matches)
    params = RdcrParams() if params is None else params
    if method in ("rdcr", "apg"):
        return estimate_motion(arr, rig, params, method=method)
    if method == "ransac":
        cfg = ransac or RansacConfig()
        return ransac_estimate(arr, rig, dataclasses.replace(cfg, seed=seed))
    if method == "cls":
        motion, diag = estimate_unfiltered(arr, rig)
        return motion, OutlierMask.none(arr.shape[0]), diag
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


def _run_scene(job):
    cfg, n, p, rep = job
    seed = cell_seed(cfg.base_seed, n, p, rep)
    scene = generate_scene(cfg.rig, cfg.corruption(n, p, seed))
    ransac = RansacConfig(cfg.ransac_models, cfg.ransac_threshold)
    out = []
    for method in cfg.methods:
        t0 = time.perf_counter()
        try:
            motion, mask, diag = run_method(method, scene.corrupt, scene.rig, seed, ransac)
            status, e_rel = "ok", relative_error(motion, scene.motion_true)
        except (GeometryError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
            mask, diag = OutlierMask.none(n), {}
            status, e_rel = type(exc).__name__, math.nan
        wall = time.perf_counter() - t0
        st = detection_stats(mask, scene.outlier_truth)
        rec = SweepRecord(
            method, int(n), float(p), int(rep), seed, status,
            st.true_positive, st.false_positive, st.false_negative, st.true_negative,
            st.accuracy, st.recall, st.precision, st.removal_fraction, st.excess_elimination,
            float(e_rel),
            int(diag.get("apg_iterations", 0)),
            int(diag.get("rdcr_iterations", 0)),
            int(diag.get("lm_iterations", 0)),
        )  # fmt: skip
        out.append((rec, wall))
    return out


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def _means(records):
    groups = {}
    for r in records:
        groups.setdefault((r.method, r.n_matches, r.outlier_fraction), []).append(r)
    rows = []
    for key in sorted(groups, key=lambda k: (METHODS.index(k[0]), k[1], k[2])):
        recs = groups[key]
        ok = [r for r in recs if r.status == "ok"]
        row = {"method": key[0], "n_matches": key[1], "outlier_fraction": key[2], "repetitions": len(recs)}
        row["failures"] = len(recs) - len(ok)
        for name in MEAN_FIELDS:
            vals = [getattr(r, name) for r in (ok if name == "e_rel" else recs)]
            row[name] = float(np.mean(vals)) if vals else math.nan
        rows.append(row)
    return rows


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def run_sweep(cfg: SweepConfig, out_dir, threads: int | None = None) -> list[SweepRecord]:
    """Run every (n_matches, outlier_fraction, repetition) scene through each method."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [
        (cfg, n, p, rep)
        for n in cfg.n_matches_grid
        for p in cfg.outlier_fraction_grid
        for rep in range(cfg.repetitions)
    ]
    threads = thread_count() if threads is None else threads
    if threads > 1:
        with ProcessPoolExecutor(threads) as pool:
            results = list(pool.map(_run_scene, jobs, chunksize=max(1, len(jobs) // (4 * threads))))
    else:
        results = [_run_scene(j) for j in jobs]
    # map() keeps job order, so the reduction below is independent of scheduling
    pairs = sorted(
        (item for res in results for item in res),
        key=lambda rw: (METHODS.index(rw[0].method), rw[0].n_matches, rw[0].outlier_fraction, rw[0].repetition),
    )
    records = [rec for rec, _ in pairs]
    _write_csv(out_dir / "sweep.csv", SWEEP_FIELDS, [r.to_row() for r in records])
    means = _means(records)
    header = list(means[0]) if means else []
    _write_csv(
        out_dir / "sweep_means.csv",
        header,
        [[repr(v) if isinstance(v, float) else str(v) for v in row.values()] for row in means],
    )
    _write_csv(
        out_dir / "sweep_timings.csv",
        ("method", "n_matches", "outlier_fraction", "repetition", "wall_seconds"),
        [(r.method, r.n_matches, repr(r.outlier_fraction), r.repetition, "%.6f" % w) for r, w in pairs],
    )
    return records


def read_sweep_csv(path) -> list[SweepRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != SWEEP_FIELDS:
            raise FormatError(f"{path}: unexpected header {header}")
        return [SweepRecord.from_row(row) for row in reader]


# --- sequences -------------------------------------------------------------------


@dataclass
class SequenceResult:
    poses: list
    failures: list = field(default_factory=list)  # (file name, message)

    @property
    def n_estimated(self) -> int:
        return max(len(self.poses) - 1, 0) - len(self.failures)


def _pair_files(matches_dir):
    d = Path(matches_dir)
    if not d.is_dir():
        raise NotADirectoryError(f"{d} is not a directory")
    return sorted(p for p in d.iterdir() if p.is_file() and not p.name.startswith("."))


def run_sequence(matches_dir, rig_file, method: str = "rdcr", out_path=None, seed: int = 0) -> SequenceResult:
    """Chain per-pair motions into camera-to-world poses (KITTI convention).

    Files in ``matches_dir`` are taken in name order, one per consecutive
    frame pair. The pose list starts at the identity. A pair that cannot be
    read or estimated repeats the previous pose and is recorded as a failure.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    rig = read_rig(rig_file)
    files = _pair_files(matches_dir)
    result = SequenceResult([])
    if not files:
        log.warning("no correspondence files in %s; trajectory is empty", matches_dir)
    else:
        pose = Rigid3.identity()
        result.poses.append(pose)
        for path in files:
            try:
                motion, _, _ = run_method(method, read_matches(path), rig, seed)
                # motion maps frame-i coordinates into frame i+1
                pose = pose @ motion.inverse()
            except (FormatError, GeometryError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
                log.error("pair %s failed: %s", path.name, exc)
                result.failures.append((path.name, str(exc)))
            result.poses.append(pose)
    if out_path is not None:
        write_trajectory(out_path, result.poses)
    return result


# --- command line ----------------------------------------------------------------


def _cmd_sweep(args):
    cfg = SweepConfig.from_json(args.config)
    records = run_sweep(cfg, args.out)
    failed = sum(r.status != "ok" for r in records)
    print(f"wrote {len(records)} rows to {Path(args.out) / 'sweep.csv'} ({failed} failed estimations)")
    return 0


def _cmd_estimate(args):
    rig = read_rig(args.rig)
    arr = read_matches(args.matches)
    motion, mask, diag = run_method(args.method, arr, rig, args.seed)
    print(format_pose(motion))
    summary = {
        "twist": [float(x) for x in log_se3(motion)],
        "n_matches": int(arr.shape[0]),
        "n_flagged": mask.n_flagged,
    }
    summary.update({k: v for k, v in diag.items() if isinstance(v, (int, float, str))})
    print(json.dumps(summary, sort_keys=True))
    if args.mask_out:
        np.savetxt(args.mask_out, mask.flags.astype(int), fmt="%d")
    return 0


def _cmd_sequence(args):
    res = run_sequence(args.dir, args.rig, args.method, args.out, args.seed)
    print(f"wrote {len(res.poses)} poses to {args.out}; {len(res.failures)} failed pairs")
    return 0


def _cmd_generate(args):
    rig = StereoRig.kitti() if args.rig is None else read_rig(args.rig)
    out = Path(args.out)
    pairs = out / "pairs"
    pairs.mkdir(parents=True, exist_ok=True)
    if args.rig is None:
        write_rig(out / "rig.txt", rig)
    truth = []
    for k in range(args.pairs):
        cfg = CorruptionConfig(args.n, args.outlier_fraction, args.sigma_n, (2.0, 100.0), args.seed + k)
        scene = generate_scene(rig, cfg)
        write_matches(pairs / f"pair_{k:06d}.txt", scene.corrupt, f"seed={cfg.seed} outlier_fraction={cfg.outlier_fraction}")
        truth.append(scene.motion_true)
    pose, poses = Rigid3.identity(), [Rigid3.identity()]
    for M in truth:
        pose = pose @ M.inverse()
        poses.append(pose)
    write_trajectory(out / "ground_truth.txt", poses)
    print(f"wrote {args.pairs} pairs to {pairs}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stereomotion", description="Robust stereo motion estimation")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sweep", help="synthetic detection/accuracy sweep")
    p.add_argument("--config", required=True, help="JSON file with SweepConfig fields")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("estimate", help="motion of one frame pair")
    p.add_argument("--matches", required=True)
    p.add_argument("--rig", required=True)
    p.add_argument("--method", choices=METHODS, default="rdcr")
    p.add_argument("--seed", type=int, default=0, help="RANSAC seed")
    p.add_argument("--mask-out", help="write 0/1 outlier flags here")
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("sequence", help="chain a directory of frame pairs into a trajectory")
    p.add_argument("--dir", required=True)
    p.add_argument("--rig", required=True)
    p.add_argument("--out", required=True, help="KITTI pose file")
    p.add_argument("--method", choices=METHODS, default="rdcr")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_sequence)

    p = sub.add_parser(
        "generate", help="write synthetic pairs to OUT/pairs, plus OUT/ground_truth.txt"
    )
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, default=10)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--outlier-fraction", type=float, default=0.3)
    p.add_argument("--sigma-n", type=float, default=1.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rig", help="rig file (default: KITTI calibration, written to OUT/rig.txt)")
    p.set_defaults(func=_cmd_generate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, ArithmeticError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
