"""Observation containers and CSV ingestion."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataValidationError

CSV_HEADER = ("t", "cd4", "viral_load")
SCALES = ("raw", "log10")


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Total CD4 and viral-load series, possibly on different time grids.

    ``t_scale``/``v_scale`` choose the scale on which residuals are formed;
    the stored values are always raw.
    """

    t_times: np.ndarray
    t_values: np.ndarray
    v_times: np.ndarray
    v_values: np.ndarray
    t_scale: str = "raw"
    v_scale: str = "raw"
    weights: tuple[float, float] = (1.0, 1.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("t_times", "t_values", "v_times", "v_values"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for label, times, values in (
            ("cd4", self.t_times, self.t_values),
            ("viral_load", self.v_times, self.v_values),
        ):
            if times.ndim != 1 or times.shape != values.shape:
                raise DataValidationError(f"{label}: times and values must be equal-length 1-D arrays")
            if times.size == 0:
                raise DataValidationError(f"{label}: series is empty")
            if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
                raise DataValidationError(f"{label}: non-finite entries")
            if np.any(np.diff(times) <= 0):
                i = int(np.argmax(np.diff(times) <= 0)) + 1
                raise DataValidationError(f"{label}: times not strictly increasing at index {i}")
        for label, scale, values in (("cd4", self.t_scale, self.t_values), ("viral_load", self.v_scale, self.v_values)):
            if scale not in SCALES:
                raise DataValidationError(f"{label}: unknown scale {scale!r}")
            if scale == "log10" and np.any(values <= 0):
                i = int(np.argmax(values <= 0))
                raise DataValidationError(f"{label}: log10 scale needs positive values (index {i})")
        w = tuple(float(x) for x in self.weights)
        if len(w) != 2 or not all(x > 0 and math.isfinite(x) for x in w):
            raise DataValidationError("weights must be two positive numbers")
        object.__setattr__(self, "weights", w)

    @property
    def n_t(self) -> int:
        return int(self.t_times.size)

    @property
    def n_v(self) -> int:
        return int(self.v_times.size)

    @property
    def n_total(self) -> int:
        return self.n_t + self.n_v

    @property
    def t_start(self) -> float:
        return float(min(self.t_times[0], self.v_times[0]))

    @property
    def t_end(self) -> float:
        return float(max(self.t_times[-1], self.v_times[-1]))

    def with_scales(self, t_scale: str | None = None, v_scale: str | None = None) -> "ObservationSet":
        return replace(
            self,
            t_scale=self.t_scale if t_scale is None else t_scale,
            v_scale=self.v_scale if v_scale is None else v_scale,
        )

    def with_values(self, t_values, v_values) -> "ObservationSet":
        return replace(self, t_values=np.asarray(t_values), v_values=np.asarray(v_values))


def read_csv(path, t_scale: str = "raw", v_scale: str = "log10") -> ObservationSet:
    """Read a ``t,cd4,viral_load`` file; blank cells mark unobserved values.

    Lines starting with ``#`` are comments and are skipped. Raises
    :class:`DataValidationError` naming the offending row (1-based, header
    and comments excluded).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(line for line in fh if not line.lstrip().startswith("#"))
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataValidationError(f"{path}: empty file") from None
        if tuple(header[:3]) != CSV_HEADER:
            raise DataValidationError(f"{path}: header must be {','.join(CSV_HEADER)}, got {','.join(header)}")
        tt, tv, vt, vv = [], [], [], []
        last_t = -math.inf
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            row = row + [""] * (3 - len(row))
            try:
                t = float(row[0])
                cd4 = float(row[1]) if row[1].strip() else None
                vl = float(row[2]) if row[2].strip() else None
            except ValueError:
                raise DataValidationError(f"row {row_no}: unparseable number") from None
            if not math.isfinite(t) or t <= last_t:
                raise DataValidationError(f"row {row_no}: time {row[0]} is not strictly increasing")
            last_t = t
            if cd4 is not None:
                if t_scale == "log10" and cd4 <= 0:
                    raise DataValidationError(f"row {row_no}: cd4={cd4} not positive on log10 scale")
                tt.append(t)
                tv.append(cd4)
            if vl is not None:
                if v_scale == "log10" and vl <= 0:
                    raise DataValidationError(f"row {row_no}: viral_load={vl} not positive on log10 scale")
                vt.append(t)
                vv.append(vl)
    return ObservationSet(np.array(tt), np.array(tv), np.array(vt), np.array(vv), t_scale, v_scale)


def write_csv(path, obs: ObservationSet, comment: str | None = None) -> None:
    """Write ``obs`` in the format :func:`read_csv` accepts, blanks for gaps."""
    times = np.union1d(obs.t_times, obs.v_times)
    cd4 = dict(zip(obs.t_times.tolist(), obs.t_values.tolist()))
    vl = dict(zip(obs.v_times.tolist(), obs.v_values.tolist()))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        if comment:
            for line in comment.splitlines():
                fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for t in times.tolist():
            w.writerow([repr(t), _cell(cd4.get(t)), _cell(vl.get(t))])


def _cell(x) -> str:
    return "" if x is None else repr(float(x))
