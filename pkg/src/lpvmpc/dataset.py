"""Engine trajectories: CSV ingestion, min-max scaling, splitting and error metrics.

One row of a trajectory is one engine cycle.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# CSV header name -> Trajectory attribute
CSV_COLUMNS = {
    "cycle": "cycle_index",
    "fq_mg": "fq",
    "soi_cad": "soi",
    "vgt_pct": "vgt",
    "tout_nm": "t_out",
    "pman_bar": "p_man",
    "nox_ppm": "nox",
    "speed_rpm": "speed",
}
INPUT_COLUMNS = ("cycle", "fq_mg", "soi_cad", "vgt_pct", "speed_rpm")

STATE_NAMES = ("t_out", "p_man", "nox")
INPUT_NAMES = ("fq", "soi", "vgt")


class TrajectoryError(ValueError):
    """Raised for malformed trajectory files or inconsistent columns."""


@dataclass(frozen=True)
class Trajectory:
    cycle_index: np.ndarray
    fq: np.ndarray
    soi: np.ndarray
    vgt: np.ndarray
    t_out: np.ndarray
    p_man: np.ndarray
    nox: np.ndarray
    speed: np.ndarray

    def __post_init__(self):
        n = None
        for f in fields(self):
            arr = np.asarray(getattr(self, f.name))
            dtype = np.int64 if f.name == "cycle_index" else np.float64
            arr = arr.astype(dtype, copy=True)
            if arr.ndim != 1:
                raise TrajectoryError(f"column {f.name!r} must be 1-D, got shape {arr.shape}")
            if n is None:
                n = arr.size
            elif arr.size != n:
                raise TrajectoryError(
                    f"length mismatch: column {f.name!r} has {arr.size} rows, expected {n}")
            bad = np.flatnonzero(~np.isfinite(arr))
            if bad.size:
                raise TrajectoryError(f"non-finite value in column {f.name!r} at row {bad[0]}")
            arr.setflags(write=False)
            object.__setattr__(self, f.name, arr)
        if n < 2:
            raise TrajectoryError(f"trajectory needs at least 2 rows, got {n}")
        if np.any(np.diff(self.cycle_index) != 1):
            raise TrajectoryError("cycle_index must increase by exactly 1 per row")

    def __len__(self) -> int:
        return self.cycle_index.size

    @property
    def states(self) -> np.ndarray:
        """(N, 3) array of [T_out, P_man, NOx]."""
        return np.column_stack([self.t_out, self.p_man, self.nox])

    @property
    def inputs(self) -> np.ndarray:
        """(N, 3) array of [FQ, SOI, VGT]."""
        return np.column_stack([self.fq, self.soi, self.vgt])

    def slice(self, start: int, stop: int) -> "Trajectory":
        return Trajectory(**{f.name: getattr(self, f.name)[start:stop] for f in fields(self)})

    @classmethod
    def from_arrays(cls, states, inputs, speed, start_cycle: int = 0) -> "Trajectory":
        states = np.asarray(states, dtype=float)
        inputs = np.asarray(inputs, dtype=float)
        n = states.shape[0]
        speed = np.broadcast_to(np.asarray(speed, dtype=float), (n,))
        return cls(
            cycle_index=np.arange(start_cycle, start_cycle + n),
            fq=inputs[:, 0], soi=inputs[:, 1], vgt=inputs[:, 2],
            t_out=states[:, 0], p_man=states[:, 1], nox=states[:, 2],
            speed=speed,
        )


def concat(parts: Sequence[Trajectory]) -> Trajectory:
    """Join contiguous trajectories (cycle numbering must continue)."""
    return Trajectory(**{
        f.name: np.concatenate([getattr(p, f.name) for p in parts]) for f in fields(Trajectory)
    })


def _parse_float(text: str, column: str, row: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise TrajectoryError(f"non-numeric cell {text!r} in column {column!r}, row {row}") from None


def read_columns(path, required: Iterable[str], allow_nan: Iterable[str] = ()) -> dict[str, np.ndarray]:
    """Read named numeric columns from a headed CSV; order in the file is irrelevant.

    Columns listed in ``allow_nan`` may hold ``nan`` (e.g. an unused cost column).
    """
    allow_nan = set(allow_nan)
    required = list(required)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise TrajectoryError(f"{path}: empty file") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise TrajectoryError(f"{path}: missing column(s) {', '.join(missing)}")
        idx = {c: header.index(c) for c in required}
        data = {c: [] for c in required}
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise TrajectoryError(
                    f"{path}: length mismatch in row {row_no}: {len(row)} cells, header has {len(header)}")
            for c in required:
                value = _parse_float(row[idx[c]].strip(), c, row_no)
                if not math.isfinite(value) and not (c in allow_nan and math.isnan(value)):
                    raise TrajectoryError(f"{path}: non-finite value in column {c!r}, row {row_no}")
                data[c].append(value)
    return {c: np.asarray(v) for c, v in data.items()}


def load_trajectory(path) -> Trajectory:
    cols = read_columns(path, CSV_COLUMNS)
    cycles = cols["cycle"]
    if np.any(cycles != np.round(cycles)):
        raise TrajectoryError(f"{path}: column 'cycle' must hold integers")
    return Trajectory(**{attr: cols[name] for name, attr in CSV_COLUMNS.items()})


def save_trajectory(traj: Trajectory, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(CSV_COLUMNS))
        for i in range(len(traj)):
            w.writerow([int(traj.cycle_index[i])] + [
                repr(float(getattr(traj, attr)[i])) for attr in list(CSV_COLUMNS.values())[1:]
            ])


def split(traj: Trajectory, train_fraction: float) -> tuple[Trajectory, Trajectory]:
    """Contiguous prefix/suffix split; no shuffling since rows are a time series."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n_train = int(round(train_fraction * len(traj)))
    if n_train < 2 or len(traj) - n_train < 2:
        raise ValueError(f"split of {len(traj)} rows at {train_fraction} leaves a part shorter than 2")
    return traj.slice(0, n_train), traj.slice(n_train, len(traj))


def nrmse(predicted, measured) -> float:
    """Root-mean-square error in percent of the measured signal's range."""
    predicted = np.asarray(predicted, dtype=float)
    measured = np.asarray(measured, dtype=float)
    if predicted.shape != measured.shape:
        raise ValueError(f"length mismatch: {predicted.shape} vs {measured.shape}")
    if measured.ndim != 1 or measured.size < 2:
        raise ValueError("nrmse needs 1-D series of length >= 2")
    span = float(measured.max() - measured.min())
    if span <= 0.0:
        raise ValueError("measured series has zero range")
    rmse = math.sqrt(float(np.mean((predicted - measured) ** 2)))
    return 100.0 * rmse / span


@dataclass(frozen=True)
class Scaler:
    """Per-channel min-max map to [0, 1], fitted on a training split."""

    offset: np.ndarray
    span: np.ndarray

    def __post_init__(self):
        offset = np.array(self.offset, dtype=float).ravel()
        span = np.array(self.span, dtype=float).ravel()
        if offset.shape != span.shape:
            raise ValueError("offset and span must have the same length")
        if np.any(~(span > 0)) or not np.all(np.isfinite(offset)):
            raise ValueError("every channel needs a finite offset and a positive span")
        offset.setflags(write=False)
        span.setflags(write=False)
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "span", span)

    @classmethod
    def fit(cls, data, constant_span: float | None = None) -> "Scaler":
        """Fit on rows of ``data``; constant channels get ``constant_span`` if given, else fail."""
        data = np.asarray(data, dtype=float)
        if data.ndim == 1:
            data = data[:, None]
        lo = data.min(axis=0)
        span = data.max(axis=0) - lo
        if constant_span is not None:
            span = np.where(span > 0, span, constant_span)
        if np.any(span <= 0):
            bad = np.flatnonzero(span <= 0).tolist()
            raise ValueError(f"constant channel(s) {bad} cannot be min-max scaled")
        return cls(lo, span)

    def transform(self, data) -> np.ndarray:
        return (np.asarray(data, dtype=float) - self.offset) / self.span

    def inverse(self, data) -> np.ndarray:
        return np.asarray(data, dtype=float) * self.span + self.offset

    def subset(self, index) -> "Scaler":
        return Scaler(self.offset[index], self.span[index])

    def to_dict(self) -> dict:
        return {"offset": self.offset.tolist(), "span": self.span.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Scaler":
        return cls(d["offset"], d["span"])


@dataclass(frozen=True)
class ModelScaling:
    """Scalers for the model's state and input channels (3 each)."""

    state: Scaler
    input: Scaler

    @classmethod
    def fit(cls, traj: Trajectory) -> "ModelScaling":
        return cls(Scaler.fit(traj.states), Scaler.fit(traj.inputs))

    @classmethod
    def identity(cls, nx: int = 3, nu: int = 3) -> "ModelScaling":
        return cls(Scaler(np.zeros(nx), np.ones(nx)), Scaler(np.zeros(nu), np.ones(nu)))

    def to_dict(self) -> dict:
        return {"state": self.state.to_dict(), "input": self.input.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "ModelScaling":
        return cls(Scaler.from_dict(d["state"]), Scaler.from_dict(d["input"]))
