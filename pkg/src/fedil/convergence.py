"""Round-by-round tracking of the aggregated update norm, a contraction
verdict, and a scalar fixed-point iteration used as a reference case."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError

DEFAULT_WINDOW = 20


@dataclass
class ConvergenceTrace:
    """Append-only history of ``||delta_theta(t)||``."""

    window: int = DEFAULT_WINDOW
    norms: list = field(default_factory=list)

    def __len__(self):
        return len(self.norms)

    def record(self, delta: np.ndarray) -> "ConvergenceTrace":
        self.norms.append(float(np.linalg.norm(np.asarray(delta, dtype=np.float64))))
        return self

    def record_norm(self, norm: float) -> "ConvergenceTrace":
        if norm < 0:
            raise ConfigurationError("norm must be non-negative")
        self.norms.append(float(norm))
        return self

    def moving_average(self, window: Optional[int] = None) -> np.ndarray:
        """Trailing mean over the last ``window`` norms (fewer at the start)."""
        w = window or self.window
        x = np.asarray(self.norms, dtype=np.float64)
        csum = np.concatenate([[0.0], np.cumsum(x)])
        idx = np.arange(1, len(x) + 1)
        lo = np.maximum(idx - w, 0)
        return (csum[idx] - csum[lo]) / (idx - lo)

    def q_hat(self) -> list:
        """Successive norm ratios; ``None`` at t=1 or after a zero norm."""
        out = [None]
        for prev, cur in zip(self.norms, self.norms[1:]):
            out.append(cur / prev if prev > 0 else None)
        return out[:len(self.norms)]

    def to_csv(self, path, extra: Optional[dict] = None) -> Path:
        path = Path(path)
        extra = extra or {}
        ma = self.moving_average()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["round", "delta_norm", "moving_avg", "q_hat", *extra])
            for t, (n, m, q) in enumerate(zip(self.norms, ma, self.q_hat()), start=1):
                writer.writerow([t, repr(n), repr(float(m)), "" if q is None else repr(q), *extra.values()])
        return path


@dataclass
class Verdict:
    contracting: bool
    q_max: Optional[float]


def contraction_verdict(trace: ConvergenceTrace, window: Optional[int] = None) -> Optional[Verdict]:
    """Discrete surrogate for a non-increasing update norm.

    Contracting when, over the trailing ``window`` rounds, the moving
    average never rises and every defined ratio ``q_hat`` stays below 1.
    Returns ``None`` when the history is shorter than the window.
    """
    w = window or trace.window
    if w < 2:
        raise ConfigurationError("window must be at least 2")
    if len(trace) < w:
        return None
    ma = trace.moving_average(w)[-w:]
    qs = [q for q in trace.q_hat()[-w:] if q is not None]
    q_max = max(qs) if qs else None
    contracting = bool(np.all(np.diff(ma) <= 0)) and q_max is not None and q_max < 1.0
    return Verdict(contracting, q_max)


@dataclass
class BanachResult:
    trajectory: np.ndarray
    fixed_point: float
    ratio_estimate: Optional[float]
    exact_fixed_point: float


def banach_demo(a: float, b: float, x0: float, iterations: int) -> BanachResult:
    """Iterate ``x -> a*x + b`` from ``x0``.

    ``ratio_estimate`` is the last ratio of successive step sizes taken
    while both steps are still well above rounding noise; it tends to ``|a|``.
    """
    if abs(a) >= 1:
        raise ConfigurationError(f"|a| = {abs(a)} is not a contraction")
    xs = [float(x0)]
    for _ in range(iterations):
        xs.append(a * xs[-1] + b)
    xs = np.asarray(xs)
    steps = np.abs(np.diff(xs))
    noise = 64 * np.finfo(np.float64).eps * np.maximum(1.0, np.abs(xs[1:]))
    ratio = None
    for k in range(len(steps) - 1, 0, -1):
        if steps[k - 1] > noise[k - 1] and steps[k] > noise[k]:
            ratio = float(steps[k] / steps[k - 1])
            break
    return BanachResult(xs, float(xs[-1]), ratio, b / (1.0 - a))
