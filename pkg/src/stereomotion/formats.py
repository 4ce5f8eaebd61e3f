"""Plain-text formats: correspondence files, rig files and KITTI pose lines."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Rigid3, StereoRig

__all__ = [
    "FormatError",
    "read_matches",
    "write_matches",
    "read_rig",
    "write_rig",
    "format_pose",
    "parse_pose",
    "write_trajectory",
    "read_trajectory",
    "write_scene_dump",
    "read_scene_dump",
]

RIG_KEYS = ("f", "cu", "cv", "baseline")


class FormatError(ValueError):
    """Malformed input file; the message names the file and line."""


def _content_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line


def read_matches(path) -> np.ndarray:
    """Load an ``(N, 8)`` correspondence file.

    One match per line: ``uL_i vL_i uR_i vR_i uL_i+1 vL_i+1 uR_i+1 vR_i+1``.
    Text after ``#`` is ignored.
    """
    rows = []
    for lineno, line in _content_lines(path):
        fields = line.split()
        if len(fields) != 8:
            raise FormatError(f"{path}:{lineno}: expected 8 values, found {len(fields)}")
        try:
            vals = [float(x) for x in fields]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        if not all(math.isfinite(v) for v in vals):
            raise FormatError(f"{path}:{lineno}: non-finite coordinate")
        rows.append(vals)
    return np.array(rows, dtype=float).reshape(-1, 8)


def write_matches(path, matches, comment: str | None = None) -> None:
    arr = np.asarray(matches, dtype=float).reshape(-1, 8)
    with open(path, "w", encoding="utf-8") as fh:
        if comment:
            for line in comment.splitlines():
                fh.write(f"# {line}\n")
        for row in arr:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_rig(path) -> StereoRig:
    """Parse ``key=value`` lines with keys ``f``, ``cu``, ``cv`` and ``baseline``."""
    values = {}
    for lineno, line in _content_lines(path):
        key, sep, val = line.partition("=")
        key = key.strip()
        if not sep or key not in RIG_KEYS:
            raise FormatError(f"{path}:{lineno}: expected one of {', '.join(RIG_KEYS)} as key=value")
        if key in values:
            raise FormatError(f"{path}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = float(val)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: value of {key!r} is not a number") from None
    missing = [k for k in RIG_KEYS if k not in values]
    if missing:
        raise FormatError(f"{path}: missing keys {', '.join(missing)}")
    try:
        return StereoRig(CameraIntrinsics(values["f"], values["cu"], values["cv"]), values["baseline"])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_rig(path, rig: StereoRig) -> None:
    vals = {"f": rig.f, "cu": rig.cu, "cv": rig.cv, "baseline": rig.baseline}
    Path(path).write_text("".join(f"{k}={vals[k]!r}\n" for k in RIG_KEYS), encoding="utf-8")


def format_pose(M: Rigid3) -> str:
    """Row-major upper 3x4 block of the pose, 12 values in ``%.9e``."""
    return " ".join("%.9e" % v for v in M.matrix()[:3].reshape(-1))


def parse_pose(line: str) -> Rigid3:
    vals = [float(x) for x in line.split()]
    if len(vals) != 12:
        raise FormatError(f"pose line needs 12 values, found {len(vals)}")
    T = np.vstack([np.reshape(vals, (3, 4)), [0.0, 0.0, 0.0, 1.0]])
    return Rigid3(T[:3, :3], T[:3, 3])


def write_trajectory(path, poses) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for M in poses:
            fh.write(format_pose(M) + "\n")


def read_trajectory(path) -> list[Rigid3]:
    out = []
    for lineno, line in _content_lines(path):
        try:
            out.append(parse_pose(line))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return out


def write_scene_dump(path, rig: StereoRig, matches, truth, seed: int) -> None:
    """Corrupted matches plus a 0/1 outlier column, with rig and seed in the header."""
    arr = np.asarray(matches, dtype=float).reshape(-1, 8)
    truth = np.asarray(truth, dtype=bool).reshape(-1)
    if truth.size != arr.shape[0]:
        raise ValueError(f"{truth.size} labels for {arr.shape[0]} matches")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# f={rig.f!r} cu={rig.cu!r} cv={rig.cv!r} baseline={rig.baseline!r} seed={int(seed)}\n")
        for row, t in zip(arr, truth):
            fh.write(" ".join(repr(float(v)) for v in row) + f" {int(t)}\n")


def read_scene_dump(path):
    """Returns ``(rig, matches (N, 8), truth (N,), seed)``."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
    if not header.startswith("#"):
        raise FormatError(f"{path}:1: missing header line")
    try:
        kv = dict(item.split("=", 1) for item in header[1:].split())
        rig = StereoRig(CameraIntrinsics(float(kv["f"]), float(kv["cu"]), float(kv["cv"])), float(kv["baseline"]))
        seed = int(kv["seed"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}:1: bad header ({exc})") from None
    rows, labels = [], []
    for lineno, line in _content_lines(path):
        fields = line.split()
        if len(fields) != 9 or fields[8] not in ("0", "1"):
            raise FormatError(f"{path}:{lineno}: expected 8 values and a 0/1 label")
        try:
            rows.append([float(x) for x in fields[:8]])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        labels.append(fields[8] == "1")
    return rig, np.array(rows, dtype=float).reshape(-1, 8), np.array(labels, dtype=bool), seed
