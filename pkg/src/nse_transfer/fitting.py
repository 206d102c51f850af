"""Log-log decay fits compared against predicted exponents."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_SLACK = 0.3
MIN_R2 = 0.95


def fit_loglog(xs, ys) -> tuple[float, float, float]:
    """Least-squares line through ``(log x, log y)``; returns ``(slope, intercept, r2)``."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.size < 3:
        raise ValueError("a log-log fit needs at least three paired samples")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ValueError("log-log fits need positive abscissae and values")
    lx, ly = np.log(xs), np.log(ys)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    # a constant sequence is fitted exactly by a flat line
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(resid**2)) / ss_tot
    return float(slope), float(intercept), r2


@dataclass
class DecayFit:
    """A fitted decay exponent and the bound it is checked against.

    ``passed`` is ``None`` when the fit is not applicable (all samples zero).
    With ``require_r2=False`` only the one-sided slope bound is checked.
    """

    quantity: str
    axis: str
    xs: list
    ys: list
    predicted: float
    slack: float = DEFAULT_SLACK
    k: int = 0
    q: float = 2.0
    display_id: str = ""
    slope: float = math.nan
    intercept: float = math.nan
    r2: float = math.nan
    note: str = ""
    extra: dict = field(default_factory=dict)
    require_r2: bool = True

    def __post_init__(self):
        self.xs = [float(x) for x in self.xs]
        self.ys = [float(y) for y in self.ys]
        if len(self.xs) != len(self.ys):
            raise ValueError("abscissae and values differ in length")
        if all(y == 0 for y in self.ys):
            self.note = self.note or "not applicable: all samples vanish"
            return
        if all(y > 0 for y in self.ys) and len(self.ys) >= 3:
            self.slope, self.intercept, self.r2 = fit_loglog(self.xs, self.ys)
        else:
            self.note = self.note or "insufficient data: nonpositive samples"

    @property
    def applicable(self) -> bool:
        return math.isfinite(self.slope)

    @property
    def passed(self) -> bool | None:
        if not self.applicable:
            return None
        return self.slope_ok and (self.r2 >= MIN_R2 or not self.require_r2)

    @property
    def slope_ok(self) -> bool:
        return self.applicable and self.slope <= self.predicted + self.slack

    def row(self) -> dict:
        passed = self.passed
        return {
            "display_id": self.display_id,
            "quantity": self.quantity,
            "k": self.k,
            "q": self.q,
            "axis": self.axis,
            "predicted": self.predicted,
            "fitted": self.slope,
            "r2": self.r2,
            "pass": "n/a" if passed is None else ("true" if passed else "false"),
        }


@dataclass
class CheckRow:
    """A pass/fail measurement that is not a fit, in the same report layout.

    ``predicted`` holds the threshold and ``fitted`` the measured value.
    """

    display_id: str
    quantity: str
    measured: float
    threshold: float
    passed: bool
    k: int | str = ""
    q: float | str = ""
    axis: str = "-"

    def row(self) -> dict:
        return {
            "display_id": self.display_id,
            "quantity": self.quantity,
            "k": self.k,
            "q": self.q,
            "axis": self.axis,
            "predicted": float(self.threshold),
            "fitted": float(self.measured),
            "r2": math.nan,
            "pass": "true" if self.passed else "false",
        }
