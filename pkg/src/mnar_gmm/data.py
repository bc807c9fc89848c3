"""Observed-sample container and CSV input/output.

CSV schema: header ``t,x1,...,xr,y``; t in {0,1}; the y field is empty on
rows with t=0 (a non-empty y there is ignored with a warning).
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ObservedSample:
    """N records of (t, x, y) with y stored as NaN wherever t = 0.

    The NaN placement is deliberate: any code path that touches a missing
    outcome poisons its result, so downstream computations must go through
    ``y_filled`` (zeros at t=0, only valid under a multiplicative T factor)
    or ``y_observed``.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.int8)
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        if x.shape[0] != t.shape[0]:
            x = x.T
        y = np.asarray(self.y, dtype=float).copy()
        if t.ndim != 1 or y.shape != t.shape or x.shape[0] != t.shape[0]:
            raise ValueError("t, x, y have inconsistent shapes")
        if not np.all((t == 0) | (t == 1)):
            raise ValueError("t must be binary")
        if not np.all(np.isfinite(x)):
            raise ValueError("covariates must be finite")
        if not np.all(np.isfinite(y[t == 1])):
            raise ValueError("y must be finite wherever t = 1")
        y[t == 0] = np.nan
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.t.shape[0]

    @property
    def r(self) -> int:
        return self.x.shape[1]

    @property
    def n_observed(self) -> int:
        return int(self.t.sum())

    @property
    def missing_rate(self) -> float:
        return 1.0 - self.n_observed / self.n

    @property
    def y_filled(self) -> np.ndarray:
        """y with zeros at t=0; safe only under a multiplicative T factor."""
        return np.where(self.t == 1, self.y, 0.0)

    @property
    def y_observed(self) -> np.ndarray:
        return self.y[self.t == 1]

    def permuted(self, order: np.ndarray) -> "ObservedSample":
        return ObservedSample(t=self.t[order], x=self.x[order], y=self.y[order])


def load_sample_csv(path) -> ObservedSample:
    """Read and validate a sample; errors name the offending row."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        header = [h.strip() for h in header]
        r = len(header) - 2
        if r < 1 or header[0] != "t" or header[-1] != "y" or header[1:-1] != [
            f"x{j}" for j in range(1, r + 1)
        ]:
            raise ValueError(f"{path}: header must be t,x1,...,xr,y; got {header}")
        t_list, x_list, y_list = [], [], []
        ignored_y = 0
        for row_no, row in enumerate(reader, start=2):
            if len(row) != r + 2:
                raise ValueError(f"{path}, row {row_no}: expected {r + 2} fields")
            try:
                t = int(row[0])
                xs = [float(v) for v in row[1 : r + 1]]
            except ValueError as exc:
                raise ValueError(f"{path}, row {row_no}: non-numeric value") from exc
            if t not in (0, 1):
                raise ValueError(f"{path}, row {row_no}: t must be 0 or 1")
            y_field = row[r + 1].strip()
            if t == 1:
                if y_field == "":
                    raise ValueError(f"{path}, row {row_no}: t=1 but y is empty")
                try:
                    y = float(y_field)
                except ValueError as exc:
                    raise ValueError(
                        f"{path}, row {row_no}: non-numeric value"
                    ) from exc
            else:
                if y_field != "":
                    ignored_y += 1
                y = np.nan
            t_list.append(t)
            x_list.append(xs)
            y_list.append(y)
    if ignored_y:
        warnings.warn(
            f"{path}: ignored y on {ignored_y} rows with t=0", stacklevel=2
        )
    sample = ObservedSample(
        t=np.array(t_list), x=np.array(x_list), y=np.array(y_list)
    )
    log.info(
        "loaded %s: N=%d, r=%d, missing rate %.3f",
        path, sample.n, sample.r, sample.missing_rate,
    )
    return sample


def write_sample_csv(sample: ObservedSample, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"x{j}" for j in range(1, sample.r + 1)] + ["y"])
        for i in range(sample.n):
            y = "" if sample.t[i] == 0 else repr(float(sample.y[i]))
            writer.writerow(
                [int(sample.t[i])]
                + [repr(float(v)) for v in sample.x[i]]
                + [y]
            )
