"""Mean functions used to average vertex masses on an edge.

A mean is a continuous function of two nonnegative masses that is positively
1-homogeneous, jointly concave, nondecreasing in each argument and normalised
to 1 at (1, 1). The built-in kinds are the ones supported in graph JSON files;
extension is by code, not by runtime expressions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, NegativeInput

KINDS = (
    "arithmetic",
    "geometric",
    "harmonic",
    "logarithmic",
    "minimum",
    "weightedArithmetic",
)

# kinds whose perspective energy terms are second-order-cone representable
# (everything but the logarithmic mean)
SOC_REPRESENTABLE_KINDS = frozenset(
    ("arithmetic", "weightedArithmetic", "geometric", "harmonic", "minimum")
)

# |s-r| below this multiple of max(r,s) switches the logarithmic mean to its
# series form; the raw (r-s)/(log r - log s) cancels catastrophically there.
_LOG_SERIES_CUTOFF = 1e-6


@dataclass(frozen=True)
class MeanSpec:
    """A named mean, plus the weight for the weighted-arithmetic kind."""

    kind: str = "arithmetic"
    lam: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown mean kind {self.kind!r}")
        if self.kind == "weightedArithmetic" and not 0.0 <= self.lam <= 1.0:
            raise ConfigError("weightedArithmetic needs lambda in [0, 1]")

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "weightedArithmetic":
            out["lambda"] = self.lam
        return out

    @classmethod
    def from_json(cls, data: dict) -> "MeanSpec":
        return cls(kind=data["kind"], lam=float(data.get("lambda", 0.5)))


def _check_nonneg(r, s):
    if np.any(np.asarray(r) < 0) or np.any(np.asarray(s) < 0):
        raise NegativeInput("mean arguments must be nonnegative")
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(s))):
        raise NegativeInput("mean arguments must be finite")


def _logarithmic(r, s):
    # evaluated in the scale-invariant ratio form theta = r * u / log1p(u),
    # u = (s-r)/r: exactly 1-homogeneous up to the rounding of u, and the
    # sensitivity to u is O(u) so the cancellation in s-r stays harmless
    r = np.asarray(r, dtype=float)
    s = np.asarray(s, dtype=float)
    out = np.zeros(np.broadcast(r, s).shape)
    pos = (r > 0) & (s > 0)
    rr = np.where(pos, r, 1.0)
    u = np.where(pos, (s - rr) / rr, 0.0)
    near = pos & (np.abs(u) <= _LOG_SERIES_CUTOFF)
    ser = rr * (1.0 + u / 2.0 - u * u / 12.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = rr * u / np.log1p(u)
    return np.where(near, ser, np.where(pos, raw, out))


def eval_mean(spec: MeanSpec, r, s):
    """Evaluate theta(r, s) elementwise for nonnegative arrays or scalars.

    Continuous extensions at the boundary: the logarithmic mean takes
    theta(r, r) = r and theta(r, 0) = 0; geometric and harmonic are 0 as soon
    as either argument is.
    """
    _check_nonneg(r, s)
    r = np.asarray(r, dtype=float)
    s = np.asarray(s, dtype=float)
    kind = spec.kind
    if kind == "arithmetic":
        out = (r + s) / 2.0
    elif kind == "weightedArithmetic":
        out = spec.lam * r + (1.0 - spec.lam) * s
    elif kind == "geometric":
        out = np.sqrt(r * s)
    elif kind == "harmonic":
        denom = r + s
        out = np.where(denom > 0, 2.0 * r * s / np.where(denom > 0, denom, 1.0), 0.0)
    elif kind == "minimum":
        out = np.minimum(r, s)
    elif kind == "logarithmic":
        out = _logarithmic(r, s)
    else:  # pragma: no cover - guarded by MeanSpec
        raise ConfigError(kind)
    if out.ndim == 0:
        return float(out)
    return out


def mean_partials(spec: MeanSpec, r, s):
    """Partial derivatives (d/dr, d/ds) of theta, elementwise.

    Used by the mass-step of the solvers. At ties the minimum mean returns the
    (1/2, 1/2) subgradient; at zero arguments where the derivative blows up
    (geometric/harmonic/logarithmic) the value is capped implicitly by the
    callers' backtracking line searches.
    """
    r = np.asarray(r, dtype=float)
    s = np.asarray(s, dtype=float)
    kind = spec.kind
    if kind == "arithmetic":
        h = np.full(np.broadcast(r, s).shape, 0.5)
        return h, h.copy()
    if kind == "weightedArithmetic":
        shape = np.broadcast(r, s).shape
        return np.full(shape, spec.lam), np.full(shape, 1.0 - spec.lam)
    if kind == "geometric":
        g = np.sqrt(np.maximum(r * s, 0.0))
        safe = g > 0
        dr = np.where(safe, s / np.where(safe, 2.0 * g, 1.0), 0.0)
        ds = np.where(safe, r / np.where(safe, 2.0 * g, 1.0), 0.0)
        return dr, ds
    if kind == "harmonic":
        denom = (r + s) ** 2
        safe = denom > 0
        dr = np.where(safe, 2.0 * s * s / np.where(safe, denom, 1.0), 0.0)
        ds = np.where(safe, 2.0 * r * r / np.where(safe, denom, 1.0), 0.0)
        return dr, ds
    if kind == "minimum":
        dr = np.where(r < s, 1.0, np.where(r > s, 0.0, 0.5))
        ds = np.where(s < r, 1.0, np.where(s > r, 0.0, 0.5))
        return dr, ds
    if kind == "logarithmic":
        big = np.maximum(r, s)
        pos = (r > 0) & (s > 0)
        near = pos & (np.abs(s - r) <= _LOG_SERIES_CUTOFF * big)
        far = pos & ~near
        dr = np.zeros(np.broadcast(r, s).shape)
        ds = np.zeros_like(dr)
        if np.any(near):
            rr = np.where(near, r, 1.0)
            u = (s - rr) / rr
            # theta = r*g(u), g = 1 + u/2 - u^2/12; du/dr = -s/r^2, du/ds = 1/r
            g = 1.0 + u / 2.0 - u * u / 12.0
            gp = 0.5 - u / 6.0
            srat = np.where(near, s, 1.0) / rr
            dr = np.where(near, g - srat * gp, dr)
            ds = np.where(near, gp, ds)
        if np.any(far):
            rr = np.where(far, r, 2.0)
            ss = np.where(far, s, 1.0)
            L = np.log(rr) - np.log(ss)
            D = rr - ss
            dr = np.where(far, 1.0 / L - D / (rr * L * L), dr)
            ds = np.where(far, -1.0 / L + D / (ss * L * L), ds)
        return dr, ds
    raise ConfigError(kind)  # pragma: no cover


@dataclass
class MeanAuditReport:
    spec_kind: str
    samples: int
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def mean_property_audit(
    spec: MeanSpec,
    samples: int = 1000,
    seed: int = 0,
    fn: Callable | None = None,
) -> MeanAuditReport:
    """Randomized audit of the mean-function axioms.

    Checks 1-homogeneity (to 1e-12 relative), monotonicity in each argument,
    midpoint concavity and normalisation on `samples` random points; every
    violation is reported with its witness. `fn` substitutes an arbitrary
    theta(r, s) for the named kind's (test hook for deliberately broken means).
    """
    if samples < 1:
        raise ConfigError("samples must be >= 1")
    theta = fn if fn is not None else (lambda a, b: eval_mean(spec, a, b))
    rng = np.random.default_rng(seed)
    report = MeanAuditReport(spec_kind=spec.kind if fn is None else "<custom>", samples=samples)

    r = rng.uniform(0.0, 10.0, samples)
    s = rng.uniform(0.0, 10.0, samples)
    c = rng.uniform(0.0, 5.0, samples)
    r2 = rng.uniform(0.0, 10.0, samples)
    s2 = rng.uniform(0.0, 10.0, samples)
    d = rng.uniform(0.0, 2.0, samples)

    t = np.asarray(theta(r, s), dtype=float)
    scale = np.maximum(np.abs(t) * np.abs(c), 1.0)
    bad = np.abs(np.asarray(theta(c * r, c * s)) - c * t) > 1e-12 * scale
    for i in np.flatnonzero(bad)[:5]:
        report.violations.append(
            f"homogeneity: theta({c[i]}*{r[i]}, {c[i]}*{s[i]}) != {c[i]}*theta({r[i]}, {s[i]})"
        )

    bad = np.asarray(theta(r + d, s)) < t - 1e-12
    for i in np.flatnonzero(bad)[:5]:
        report.violations.append(f"monotonicity in r at ({r[i]}, {s[i]}), step {d[i]}")
    bad = np.asarray(theta(r, s + d)) < t - 1e-12
    for i in np.flatnonzero(bad)[:5]:
        report.violations.append(f"monotonicity in s at ({r[i]}, {s[i]}), step {d[i]}")

    mid = np.asarray(theta((r + r2) / 2.0, (s + s2) / 2.0))
    bad = mid < (t + np.asarray(theta(r2, s2))) / 2.0 - 1e-12
    for i in np.flatnonzero(bad)[:5]:
        report.violations.append(
            f"midpoint concavity at ({r[i]}, {s[i]}) vs ({r2[i]}, {s2[i]})"
        )

    if abs(float(theta(1.0, 1.0)) - 1.0) > 1e-12:
        report.violations.append(f"normalisation: theta(1,1) = {theta(1.0, 1.0)}")
    return report
