"""Reference/observation records and their CSV form (``k,r1..rm,xo1..xop``)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import StructureError


@dataclass(frozen=True)
class Dataset:
    r: np.ndarray
    x_o: np.ndarray
    labels: tuple = field(default=())

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        x = np.asarray(self.x_o, dtype=float)
        if r.ndim == 1:
            r = r[:, None]
        if x.ndim == 1:
            x = x[:, None]
        if r.shape[0] != x.shape[0]:
            raise StructureError(f"r has {r.shape[0]} samples, x_o has {x.shape[0]}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(x))):
            raise StructureError("dataset contains non-finite entries")
        if self.labels and len(self.labels) != x.shape[1]:
            raise StructureError("one label per observed signal is required")
        object.__setattr__(self, "r", np.ascontiguousarray(r))
        object.__setattr__(self, "x_o", np.ascontiguousarray(x))
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def N(self) -> int:
        return self.x_o.shape[0]

    @property
    def m(self) -> int:
        return self.r.shape[1]

    @property
    def p(self) -> int:
        return self.x_o.shape[1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(
            ["k"] + [f"r{i + 1}" for i in range(self.m)] + [f"xo{i + 1}" for i in range(self.p)]
        )
        for k in range(self.N):
            w.writerow([k + 1] + [repr(float(v)) for v in self.r[k]] + [repr(float(v)) for v in self.x_o[k]])
        return buf.getvalue()

    def save_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str, labels=()) -> "Dataset":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise StructureError("empty dataset file")
        header = [h.strip() for h in rows[0]]
        if not header or header[0] != "k":
            raise StructureError("dataset header must start with 'k'")
        r_cols = [i for i, h in enumerate(header) if h.startswith("r")]
        x_cols = [i for i, h in enumerate(header) if h.startswith("xo")]
        if not x_cols or len(r_cols) + len(x_cols) + 1 != len(header):
            raise StructureError(f"unrecognized dataset header {header}")
        try:
            data = np.array([[float(v) for v in row] for row in rows[1:] if row], dtype=float)
        except ValueError as exc:
            raise StructureError(f"non-numeric dataset entry: {exc}") from None
        if data.ndim != 2 or data.shape[1] != len(header):
            raise StructureError("ragged dataset rows")
        return cls(data[:, r_cols], data[:, x_cols], labels)

    @classmethod
    def load_csv(cls, path, labels=()) -> "Dataset":
        return cls.from_csv(Path(path).read_text(), labels)
