"""Effective-density estimation across scales and the sampled density model.

The homogenized density is probed by solving cell problems on rescaled
family graphs for a list of eps values, extrapolating linearly in eps, and
assembling a 2-homogeneous interpolant over unit directions with a midpoint
convexity audit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cell import assemble_cell_problem, solve_cell
from .errors import ConfigError, NegativeDensity
from .generators import GeneratorSpec, generate
from .graph import EmbeddedGraph, Orthotope, rescale_graph


def family_graph_for_box(
    family: GeneratorSpec, Q: Orthotope, eps: float, mode: str = "periodic", seed=None
) -> EmbeddedGraph:
    """Generate the family on a patch covering Q at scale eps and rescale it.

    The unscaled patch box is Q/eps padded enough for the requested boundary
    mode (a covering halo for pinned problems, one cell for periodic ones).
    """
    if family.kind not in ("latticeNN", "randomConductance", "perturbedVoronoi"):
        raise ConfigError(f"family {family.kind!r} has no box-covering generator")
    import dataclasses

    pad = 2.0 if mode == "periodic" else 4.0 * (math.sqrt(family.n) + 1.0) + 2.0
    box = Orthotope(Q.lower / eps - pad, Q.upper / eps + pad)
    fam = dataclasses.replace(
        family, box=box, seed=family.seed if seed is None else int(seed)
    )
    return rescale_graph(generate(fam), eps)


@dataclass
class DensityEstimate:
    eps_values: list
    values: dict  # eps -> list of per-seed values
    mean: dict  # eps -> mean value
    std: dict  # eps -> sample std (0 for a single seed)
    extrapolated: float
    slope: float
    fit_residual: float


def estimate_density(
    family: GeneratorSpec,
    v,
    Q: Orthotope,
    eps_list,
    tol: float = 1e-9,
    mode: str = "periodic",
    seeds=None,
) -> DensityEstimate:
    """Cell values per eps (and per seed for random families), with a linear
    f + a*eps fit; the fit residual is reported, not hidden."""
    v = np.asarray(v, dtype=float)
    eps_list = list(eps_list)
    if any(e2 >= e1 for e1, e2 in zip(eps_list, eps_list[1:])):
        raise ConfigError("eps list must be strictly decreasing")
    seeds = [family.seed] if seeds is None else list(seeds)
    values: dict = {}
    for eps in eps_list:
        vals = []
        for seed in seeds:
            g = family_graph_for_box(family, Q, eps, mode=mode, seed=seed)
            prob = assemble_cell_problem(g, Q, v, eps, mode=mode)
            sol = solve_cell(prob, tol=tol)
            vals.append(sol.value)
        values[eps] = vals
    mean = {e: float(np.mean(vs)) for e, vs in values.items()}
    std = {e: float(np.std(vs, ddof=1)) if len(vs) > 1 else 0.0 for e, vs in values.items()}
    xs = np.array(eps_list)
    ys = np.array([mean[e] for e in eps_list])
    if xs.size >= 2:
        A = np.stack([np.ones_like(xs), xs], axis=1)
        coef, *_ = np.linalg.lstsq(A, ys, rcond=None)
        f0, slope = float(coef[0]), float(coef[1])
        resid = float(np.abs(A @ coef - ys).max())
    else:
        f0, slope, resid = float(ys[0]), 0.0, 0.0
    return DensityEstimate(
        eps_values=eps_list,
        values=values,
        mean=mean,
        std=std,
        extrapolated=f0,
        slope=slope,
        fit_residual=resid,
    )


def _sphere_directions(n: int, m: int) -> np.ndarray:
    """m deterministic unit directions (half-sphere; negatives added later)."""
    if n == 2:
        ang = np.pi * np.arange(m) / m
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    rng = np.random.default_rng(12345)
    out = []
    while len(out) < m:
        x = rng.normal(size=n)
        norm = np.linalg.norm(x)
        if norm > 1e-9:
            out.append(x / norm)
    return np.array(out)


@dataclass
class DensityModel:
    """Sampled 2-homogeneous density: values on unit directions, evaluated by
    |v|^2 times a spherical interpolation of the normalized direction."""

    directions: np.ndarray  # [M, n], unit
    values: np.ndarray  # [M]
    fit_residual: float = 0.0
    convex_certificate: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=float)
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if np.any(self.values <= 0):
            raise ConfigError("density samples must be positive")
        if self.directions.ndim != 2 or self.directions.shape[0] != self.values.size:
            raise ConfigError("directions/values shape mismatch")
        self._angles = None
        if self.directions.shape[1] == 2:
            ang = np.arctan2(self.directions[:, 1], self.directions[:, 0]) % (2 * np.pi)
            order = np.argsort(ang)
            self._angles = ang[order]
            self._angle_vals = self.values[order]

    @property
    def n(self) -> int:
        return self.directions.shape[1]

    def unit_value(self, u: np.ndarray) -> float:
        u = np.asarray(u, dtype=float)
        if self._angles is not None:
            a = float(np.arctan2(u[1], u[0]) % (2 * np.pi))
            ang = self._angles
            vals = self._angle_vals
            j = int(np.searchsorted(ang, a))
            lo = (j - 1) % ang.size
            hi = j % ang.size
            a0, a1 = ang[lo], ang[hi]
            span = (a1 - a0) % (2 * np.pi)
            if span <= 1e-15:
                return float(vals[hi])
            t = ((a - a0) % (2 * np.pi)) / span
            return float((1 - t) * vals[lo] + t * vals[hi])
        # general n: inverse geodesic-distance weights
        cosd = np.clip(self.directions @ u, -1.0, 1.0)
        d = np.arccos(cosd)
        if d.min() < 1e-12:
            return float(self.values[int(np.argmin(d))])
        w = 1.0 / d**2
        return float(np.sum(w * self.values) / np.sum(w))

    def eval(self, v) -> float:
        v = np.asarray(v, dtype=float)
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            return 0.0
        return norm**2 * self.unit_value(v / norm)

    def to_json(self) -> dict:
        return {
            "directions": self.directions.tolist(),
            "values": self.values.tolist(),
            "fit_residual": self.fit_residual,
            "convex_certificate": self.convex_certificate,
        }

    @classmethod
    def from_json(cls, data: dict) -> "DensityModel":
        return cls(
            directions=np.array(data["directions"]),
            values=np.array(data["values"]),
            fit_residual=float(data.get("fit_residual", 0.0)),
            convex_certificate=bool(data.get("convex_certificate", False)),
        )

    @classmethod
    def isotropic(cls, n: int, value: float = 1.0) -> "DensityModel":
        dirs = _sphere_directions(n, max(2 * n, 4))
        dirs = np.concatenate([dirs, -dirs])
        return cls(
            directions=dirs,
            values=np.full(dirs.shape[0], value),
            convex_certificate=True,
        )


def build_density_model(
    family: GeneratorSpec,
    directions: int,
    Q: Orthotope,
    eps_list,
    tol: float = 1e-9,
    mode: str = "periodic",
    seeds=None,
    audit_pairs: int = 32,
    audit_seed: int = 0,
) -> DensityModel:
    """Estimate the density on `directions` unit directions plus negatives and
    run a midpoint-convexity audit to set the certificate flag."""
    n = family.n
    if directions < 2 * n:
        raise ConfigError("need at least 2n directions")
    half = _sphere_directions(n, directions)
    dirs = np.concatenate([half, -half])
    vals = np.empty(dirs.shape[0])
    resid = 0.0
    for i, u in enumerate(dirs):
        est = estimate_density(family, u, Q, eps_list, tol=tol, mode=mode, seeds=seeds)
        vals[i] = est.extrapolated
        resid = max(resid, est.fit_residual)
    if np.any(vals <= 0):
        raise ConfigError("nonpositive density estimate; problem too degenerate")
    model = DensityModel(directions=dirs, values=vals, fit_residual=resid)
    rng = np.random.default_rng(audit_seed)
    slack = 3.0 * max(resid, 1e-12)
    ok = True
    for _ in range(audit_pairs):
        i, j = rng.integers(0, dirs.shape[0], size=2)
        u, w = dirs[i], dirs[j]
        mid = (u + w) / 2.0
        if np.linalg.norm(mid) < 1e-9:
            continue
        if model.eval(mid) > (model.eval(u) + model.eval(w)) / 2.0 + slack:
            ok = False
            break
    model.convex_certificate = ok
    return model


@dataclass
class GridSpec:
    """Piecewise-constant space-time grid: step dt, cell volume, cell count."""

    dt: float
    cell_volume: float

    def __post_init__(self):
        if self.dt <= 0 or self.cell_volume <= 0:
            raise ConfigError("grid steps must be positive")


def eval_homogenized_action(model: DensityModel, rho, j, grid: GridSpec) -> float:
    """A(rho, j) = sum over space-time cells of dt * vol * f(j/rho) * rho.

    rho: [K, cells...]; j: [K, cells..., n]. Cells with rho = 0 and j != 0
    cost +inf; 0/0 counts 0.
    """
    rho = np.asarray(rho, dtype=float)
    j = np.asarray(j, dtype=float)
    if np.any(rho < 0):
        raise NegativeDensity("density must be nonnegative")
    if j.shape[:-1] != rho.shape:
        raise ConfigError("j must add one trailing axis to rho's shape")
    flat_rho = rho.reshape(-1)
    flat_j = j.reshape(-1, j.shape[-1])
    total = 0.0
    for r, vec in zip(flat_rho, flat_j):
        speedless = float(np.linalg.norm(vec))
        if r <= 0.0:
            if speedless > 0.0:
                return float("inf")
            continue
        total += model.eval(vec / r) * r
    return float(total * grid.dt * grid.cell_volume)
