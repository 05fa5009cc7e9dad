"""Line-delimited JSON file formats.

Every file is UTF-8 text with one JSON object per line. Floats are written as
float32-representable decimals with at most nine significant digits, so a
value read back and cast to float32 is bit-identical to the one written.

raw frames       {"t": s, "imu": [[a(3), w(3), m(3)] x 6]}
dataset records  {"frame", "t", "raw", "R_gt", "delta", "R_err", "a_G", "disturbed"}
trajectories     {"t": s, "R": [[9] x 6], "p": [[3] x 6]}
pipeline output  {"t", "R", "acc", "gyro", "flags", "w", "delta", "root_mag", "degraded"}
environment      header {"earth", "normalization", "seed"} then one {"position", "moment"} per dipole
training log     one object per epoch
"""

from __future__ import annotations

import contextlib
import json
import logging
import sys
from pathlib import Path
from typing import IO, Iterable, Iterator

import numpy as np
from numpy.typing import ArrayLike, NDArray

from shield.detector import IMU_COUNT
from shield.exceptions import FormatError
from shield.magfield import Dipole, MagneticEnvironment
from shield.pipeline import FrameOutput, RawFrame

logger = logging.getLogger(__name__)

STDIO = "-"


def _f32(values: ArrayLike, shape: tuple[int, ...] | None = None) -> list:
    arr = np.asarray(values, dtype=np.float32)
    if shape is not None:
        arr = arr.reshape(shape)
    if arr.ndim == 0:
        return float(f"{float(arr):.9g}")
    return [_f32(row) for row in arr] if arr.ndim > 1 else [float(f"{v:.9g}") for v in arr.tolist()]


def _array(values, shape: tuple[int, ...], where: str) -> NDArray[np.float64]:
    try:
        arr = np.asarray(values, dtype=np.float32).astype(np.float64)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{where}: non-numeric values") from exc
    if arr.size != int(np.prod(shape)):
        raise FormatError(f"{where}: expected {int(np.prod(shape))} values, got {arr.size}")
    return arr.reshape(shape)


def _dumps(obj: dict) -> str:
    # NaN is kept as the bare token so corrupt frames survive a round trip
    return json.dumps(obj, separators=(",", ":"), allow_nan=True)


@contextlib.contextmanager
def open_text(path: str | Path, mode: str = "r") -> Iterator[IO[str]]:
    """Open ``path`` for text I/O; ``-`` maps to stdin/stdout."""
    if str(path) == STDIO:
        yield sys.stdin if "r" in mode else sys.stdout
        return
    if "w" in mode:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, mode, encoding="utf-8", newline="\n") as fh:
        yield fh


def _records(fh: IO[str], where: str) -> Iterator[tuple[int, dict]]:
    for lineno, line in enumerate(fh, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{where}:{lineno}: {exc.msg}") from exc
        if not isinstance(record, dict):
            raise FormatError(f"{where}:{lineno}: expected a JSON object")
        yield lineno, record


# ---------------------------------------------------------------- raw frames

def raw_frame_line(t: float, data: ArrayLike) -> str:
    return _dumps({"t": float(t), "imu": _f32(data, (IMU_COUNT, 9))})


def iter_raw_frames(fh: IO[str], where: str = "<stream>") -> Iterator[RawFrame]:
    """Yield frames as lines arrive."""
    for lineno, record in _records(fh, where):
        try:
            block = record["imu"] if "imu" in record else record["raw"]
            yield RawFrame(float(record["t"]), _array(block, (IMU_COUNT, 9), f"{where}:{lineno}"))
        except KeyError as exc:
            raise FormatError(f"{where}:{lineno}: missing field {exc}") from exc


def read_raw_frames(path: str | Path) -> list[RawFrame]:
    with open_text(path) as fh:
        return list(iter_raw_frames(fh, str(path)))


def write_raw_frames(path: str | Path, times: ArrayLike, raw: ArrayLike) -> None:
    raw = np.asarray(raw)
    with open_text(path, "w") as fh:
        for t, data in zip(np.asarray(times).tolist(), raw):
            fh.write(raw_frame_line(t, data) + "\n")


# ---------------------------------------------------------------- dataset records

DATASET_FIELDS = ("frame", "t", "raw", "R_gt", "delta", "R_err", "a_G", "disturbed")


def write_dataset(path: str | Path, sample_rate: float, raw: ArrayLike, R_gt: ArrayLike, delta: ArrayLike,
                  R_err: ArrayLike, a_G: ArrayLike, disturbed: ArrayLike) -> None:
    raw, R_gt, delta = np.asarray(raw), np.asarray(R_gt), np.asarray(delta)
    R_err, a_G, disturbed = np.asarray(R_err), np.asarray(a_G), np.asarray(disturbed, dtype=bool)
    with open_text(path, "w") as fh:
        for f in range(len(raw)):
            fh.write(_dumps({
                "frame": f,
                "t": float(f"{f / sample_rate:.9g}"),
                "raw": _f32(raw[f], (IMU_COUNT, 9)),
                "R_gt": _f32(R_gt[f], (IMU_COUNT, 9)),
                "delta": _f32(delta[f]),
                "R_err": _f32(R_err[f], (IMU_COUNT, 9)),
                "a_G": _f32(a_G[f], (IMU_COUNT, 3)),
                "disturbed": [bool(v) for v in disturbed[f]],
            }) + "\n")


def read_dataset(path: str | Path) -> dict[str, NDArray]:
    """Arrays keyed by field: ``raw (T,6,9)``, ``R_gt``/``R_err (T,6,3,3)``, ``delta (T,5)``, ``a_G (T,6,3)``, ``disturbed (T,6)``."""
    cols: dict[str, list] = {name: [] for name in DATASET_FIELDS}
    where = str(path)
    with open_text(path) as fh:
        for lineno, record in _records(fh, where):
            at = f"{where}:{lineno}"
            try:
                cols["frame"].append(int(record["frame"]))
                cols["t"].append(float(record["t"]))
                cols["raw"].append(_array(record["raw"], (IMU_COUNT, 9), at))
                cols["R_gt"].append(_array(record["R_gt"], (IMU_COUNT, 3, 3), at))
                cols["delta"].append(_array(record["delta"], (IMU_COUNT - 1,), at))
                cols["R_err"].append(_array(record["R_err"], (IMU_COUNT, 3, 3), at))
                cols["a_G"].append(_array(record["a_G"], (IMU_COUNT, 3), at))
                cols["disturbed"].append(np.asarray(record["disturbed"], dtype=bool).reshape(IMU_COUNT))
            except KeyError as exc:
                raise FormatError(f"{at}: missing field {exc}") from exc
    if not cols["frame"]:
        raise FormatError(f"{where}: empty dataset file")
    out = {name: np.asarray(values) for name, values in cols.items()}
    if not np.array_equal(out["frame"], np.arange(len(out["frame"]))):
        raise FormatError(f"{where}: frame indices are not consecutive from 0")
    return out


# ---------------------------------------------------------------- trajectories

def write_trajectory(path: str | Path, sample_rate: float, R: ArrayLike, p: ArrayLike) -> None:
    R, p = np.asarray(R), np.asarray(p)
    with open_text(path, "w") as fh:
        for f in range(len(R)):
            fh.write(_dumps({"t": float(f"{f / sample_rate:.9g}"),
                             "R": [[float(v) for v in m.ravel()] for m in R[f]],
                             "p": [[float(v) for v in x] for x in p[f]]}) + "\n")


def read_trajectory_arrays(path: str | Path) -> tuple[NDArray, NDArray, NDArray]:
    """``(t, R (T,6,3,3), p (T,6,3))`` at full float64 precision."""
    ts, Rs, ps = [], [], []
    where = str(path)
    with open_text(path) as fh:
        for lineno, record in _records(fh, where):
            try:
                ts.append(float(record["t"]))
                Rs.append(np.asarray(record["R"], dtype=np.float64).reshape(IMU_COUNT, 3, 3))
                ps.append(np.asarray(record["p"], dtype=np.float64).reshape(IMU_COUNT, 3))
            except (KeyError, ValueError, TypeError) as exc:
                raise FormatError(f"{where}:{lineno}: malformed trajectory frame ({exc})") from exc
    return np.asarray(ts), np.asarray(Rs).reshape(-1, IMU_COUNT, 3, 3), np.asarray(ps).reshape(-1, IMU_COUNT, 3)


# ---------------------------------------------------------------- pipeline output

def output_line(out: FrameOutput) -> str:
    return _dumps({
        "t": float(f"{out.t:.9g}"),
        "R": _f32(out.R, (IMU_COUNT, 9)),
        "acc": _f32(out.acc, (IMU_COUNT, 3)),
        "gyro": _f32(out.gyro, (IMU_COUNT, 3)),
        "flags": [bool(f) for f in out.flags],
        "w": float(f"{out.w:.9g}"),
        "delta": _f32(out.delta),
        "root_mag": _f32(out.root_mag),
        "degraded": bool(out.degraded),
    })


def write_outputs(fh: IO[str], outputs: Iterable[FrameOutput]) -> int:
    count = 0
    for out in outputs:
        fh.write(output_line(out) + "\n")
        count += 1
    return count


def read_outputs(path: str | Path) -> list[FrameOutput]:
    outputs = []
    where = str(path)
    with open_text(path) as fh:
        for lineno, record in _records(fh, where):
            at = f"{where}:{lineno}"
            try:
                outputs.append(FrameOutput(
                    t=float(record["t"]),
                    R=_array(record["R"], (IMU_COUNT, 3, 3), at),
                    acc=_array(record["acc"], (IMU_COUNT, 3), at),
                    gyro=_array(record["gyro"], (IMU_COUNT, 3), at),
                    flags=np.asarray(record["flags"], dtype=bool).reshape(IMU_COUNT),
                    w=float(record["w"]),
                    delta=_array(record["delta"], (IMU_COUNT - 1,), at),
                    root_mag=_array(record["root_mag"], (3,), at),
                    degraded=bool(record.get("degraded", False)),
                ))
            except KeyError as exc:
                raise FormatError(f"{at}: missing field {exc}") from exc
    return outputs


# ---------------------------------------------------------------- environments

def write_env(path: str | Path, env: MagneticEnvironment) -> None:
    with open_text(path, "w") as fh:
        fh.write(_dumps({"earth": list(env.earth), "normalization": env.normalization, "seed": env.seed}) + "\n")
        for d in env.dipoles:
            fh.write(_dumps({"position": list(d.position), "moment": list(d.moment)}) + "\n")


def read_env(path: str | Path) -> MagneticEnvironment:
    where = str(path)
    with open_text(path) as fh:
        records = list(_records(fh, where))
    if not records:
        raise FormatError(f"{where}: empty environment file")
    try:
        header = records[0][1]
        dipoles = tuple(Dipole(tuple(r["position"]), tuple(r["moment"])) for _, r in records[1:])
        return MagneticEnvironment(tuple(header["earth"]), dipoles, float(header["normalization"]), header.get("seed"))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{where}: malformed environment ({exc})") from exc


# ---------------------------------------------------------------- training log

def write_log(path: str | Path, entries: Iterable[dict]) -> None:
    with open_text(path, "w") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
