"""Refinement-study tables and experimental orders of convergence."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._io import atomic_write


def eoc(errors: Sequence[float], hs: Sequence[float]) -> list[float]:
    """Slopes ``log(e1/e2) / log(h1/h2)`` between consecutive levels.

    Entries are NaN where either error is zero (the level is exact).
    """
    out = []
    for (e1, e2), (h1, h2) in zip(zip(errors, errors[1:]), zip(hs, hs[1:])):
        if e1 > 0 and e2 > 0:
            out.append(math.log(e1 / e2) / math.log(h1 / h2))
        else:
            out.append(float("nan"))
    return out


@dataclass
class ErrorReport:
    """Per-level errors for a refinement study.

    ``errors`` maps a column name (``e_L2``, ``e_u_W01q``, ...) to one value
    per level. EOC columns are derived, never stored.
    """

    name: str
    h: list[float]
    tau: list[float]
    errors: dict[str, list[float]]
    flags: dict[str, bool] = field(default_factory=dict)
    meta: dict[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = len(self.h)
        if len(self.tau) != n or any(len(v) != n for v in self.errors.values()):
            raise ValueError("every column needs one entry per level")

    @property
    def n_levels(self) -> int:
        return len(self.h)

    def eoc(self, column: str) -> list[float]:
        return eoc(self.errors[column], self.h)

    def final_eoc(self, column: str) -> float:
        rates = self.eoc(column)
        return rates[-1] if rates else float("nan")

    def exact_levels(self) -> list[bool]:
        return [all(v[i] == 0.0 for v in self.errors.values()) for i in range(self.n_levels)]

    def columns(self) -> list[str]:
        return ["h", "tau", *self.errors, *(f"eoc_{c[2:] if c.startswith('e_') else c}" for c in self.errors)]

    def rows(self) -> list[list[float]]:
        rates = {c: [float("nan")] + self.eoc(c) for c in self.errors}
        return [
            [self.h[i], self.tau[i], *(v[i] for v in self.errors.values()), *(r[i] for r in rates.values())]
            for i in range(self.n_levels)
        ]

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(self.columns())
        for row in self.rows():
            w.writerow([repr(float(x)) for x in row])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        text = self.to_csv_text()
        atomic_write(path, lambda fh: fh.write(text))

    def table(self) -> str:
        cols = self.columns()
        lines = [self.name, "  ".join(f"{c:>12}" for c in cols)]
        for row in self.rows():
            lines.append("  ".join(f"{x:12.4e}" if i < 2 + len(self.errors) else f"{x:12.3f}"
                                   for i, x in enumerate(row)))
        for k, v in sorted(self.flags.items()):
            lines.append(f"  {k}: {'PASS' if v else 'FAIL'}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        def clean(x):
            return None if isinstance(x, float) and not math.isfinite(x) else x

        return {
            "name": self.name,
            "h": list(self.h),
            "tau": list(self.tau),
            "errors": {k: list(map(float, v)) for k, v in self.errors.items()},
            "eoc": {k: [clean(x) for x in self.eoc(k)] for k in self.errors},
            "exact_levels": self.exact_levels(),
            "flags": dict(self.flags),
            "meta": dict(self.meta),
        }


def fit_rate(errors: Sequence[float], hs: Sequence[float]) -> float:
    """Least-squares slope of log(error) against log(h)."""
    e = np.asarray(errors, dtype=float)
    h = np.asarray(hs, dtype=float)
    keep = e > 0
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(h[keep]), np.log(e[keep]), 1)[0])
