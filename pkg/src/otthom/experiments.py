"""Named experiments reproducing the quantitative checks at desk scale.

Every experiment returns rows (CSV-ready dicts with full provenance) plus a
list of assertions with pass/fail flags; the CLI maps failures to exit codes.
Runs are deterministic for a fixed seed.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cell import assemble_cell_problem, competitor_energy, solve_cell
from .density import family_graph_for_box
from .energy import MassDistribution, degree_normalized_energy, energy
from .errors import ConfigError
from .generators import (
    GeneratorSpec,
    canonical_culdesac_profile,
    gen_culdesac,
    gen_lattice_nn,
)
from .geodesic import GeodesicProblem, audit_apriori_bound, solve_geodesic
from .graph import Orthotope, rescale_graph
from .recovery import RecoveryParams, SmoothCurveSpec, assemble_recovery

EXPERIMENTS = {}


def experiment(name):
    def wrap(fn):
        EXPERIMENTS[name] = fn
        return fn

    return wrap


@dataclass
class ExperimentResult:
    name: str
    config: dict
    rows: list
    assertions: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.assertions)

    def check(self, desc: str, ok: bool, detail: str = ""):
        self.assertions.append((desc, bool(ok), detail))

    def provenance(self) -> str:
        blob = json.dumps(self.config, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _result(name, config):
    return ExperimentResult(name=name, config=config, rows=[])


UNIT_BOX = Orthotope([0.0, 0.0], [1.0, 1.0])


def _lattice_at(eps: float, pad: int = 2):
    inv = int(round(1.0 / eps))
    return rescale_graph(
        gen_lattice_nn(2, Orthotope([-pad, -pad], [inv + pad, inv + pad])), eps
    )


@experiment("zn-exact")
def zn_exact(seed: int = 0, threads: int = 1) -> ExperimentResult:
    """Lattice exactness: f_eps(e1) = 1 and f_eps((1,1)) = 2 to 1e-3 relative."""
    res = _result("zn-exact", {"eps": [0.25, 0.125, 0.0625], "tol": 1e-3})
    for eps in (1 / 4, 1 / 8, 1 / 16):
        g = _lattice_at(eps)
        for v, target in (((1.0, 0.0), 1.0), ((1.0, 1.0), 2.0)):
            sol = solve_cell(
                assemble_cell_problem(g, UNIT_BOX, v, eps, mode="periodic"), tol=1e-10
            )
            rel = abs(sol.value - target) / target
            res.rows.append(
                {"eps": eps, "v": v, "f_eps": sol.value, "target": target, "rel_err": rel}
            )
            res.check(f"f_{eps}({v}) = {target} +- 1e-3 rel", rel <= 1e-3, f"rel={rel:.2e}")
    return res


def _rc_problem(v, eps, seed, Q=UNIT_BOX, lam=1.0, Lam=4.0):
    fam = GeneratorSpec(kind="randomConductance", n=2, seed=seed, lam=lam, Lam=Lam)
    g = family_graph_for_box(fam, Q, eps, mode="periodic", seed=seed)
    return assemble_cell_problem(g, Q, v, eps, mode="periodic")


@experiment("homogeneity")
def homogeneity(seed: int = 11, threads: int = 1) -> ExperimentResult:
    """2-homogeneity of f_eps on the random-conductance family."""
    res = _result("homogeneity", {"seed": seed, "eps": 0.125, "lam": 1, "Lam": 4})
    eps = 1 / 8
    base = solve_cell(_rc_problem([1.0, 0.0], eps, seed), tol=1e-10).value
    res.rows.append({"lam_scale": 1.0, "f": base, "seed": seed})
    for lam in (0.5, 2.0):
        val = solve_cell(_rc_problem([lam, 0.0], eps, seed), tol=1e-10).value
        rel = abs(val - lam**2 * base) / (lam**2 * base)
        res.rows.append({"lam_scale": lam, "f": val, "rel_err": rel, "seed": seed})
        res.check(f"f({lam} v) = {lam}^2 f(v) +- 1e-2 rel", rel <= 1e-2, f"rel={rel:.2e}")
    return res


@experiment("convexity")
def convexity(seed: int = 11, threads: int = 1, pairs: int = 20) -> ExperimentResult:
    """Midpoint convexity of f_eps on random direction pairs."""
    tol = 1e-9
    res = _result("convexity", {"seed": seed, "eps": 0.125, "pairs": pairs, "tol": tol})
    eps = 1 / 8
    rng = np.random.default_rng(seed)
    cache: dict = {}

    def f_of(v):
        key = tuple(np.round(v, 12))
        if key not in cache:
            cache[key] = solve_cell(_rc_problem(list(v), eps, seed), tol=tol).value
        return cache[key]

    worst = -np.inf
    for i in range(pairs):
        u = rng.normal(size=2)
        w = rng.normal(size=2)
        gap = f_of((u + w) / 2) - (f_of(u) + f_of(w)) / 2
        worst = max(worst, gap)
        res.rows.append({"pair": i, "u": u.tolist(), "w": w.tolist(), "gap": gap})
    res.check("midpoint convexity within 2*tol", worst <= 2 * tol, f"worst gap={worst:.2e}")
    return res


@experiment("sandwich")
def sandwich(seed: int = 11, threads: int = 1) -> ExperimentResult:
    """lambda/(2 maxdeg) |v|^2 <= f_eps(v) <= competitor / vol(Q)."""
    tol = 1e-9
    res = _result("sandwich", {"seed": seed, "eps": 0.125, "dirs": 8, "tol": tol})
    eps = 1 / 8
    lam = 1.0
    for i in range(8):
        th = math.pi * i / 8
        v = [math.cos(th), math.sin(th)]
        prob = _rc_problem(v, eps, seed)
        sol = solve_cell(prob, tol=tol)
        comp = competitor_energy(prob) / prob.volume
        maxdeg = 4
        lower = lam / (2 * maxdeg)
        ok = lower - tol <= sol.value <= comp + tol
        res.rows.append(
            {"theta": th, "lower": lower, "f": sol.value, "upper": comp, "ok": ok}
        )
        res.check(f"sandwich at direction {i}", ok, f"{lower:.3f}<={sol.value:.4f}<={comp:.4f}")
    return res


@experiment("ergodic-variance")
def ergodic_variance(seed: int = 0, threads: int = 2) -> ExperimentResult:
    """Sample std of f_eps(e1) decays when the box grows (eps = 1)."""
    res = _result("ergodic-variance", {"seeds": 10, "L": [4, 8], "lam": 1, "Lam": 4})
    seeds = [seed + i for i in range(10)]
    stds = {}
    for L in (4, 8):
        Q = Orthotope([0.0, 0.0], [float(L), float(L)])

        def one(s):
            return solve_cell(
                _rc_problem([1.0, 0.0], 1.0, s, Q=Q), tol=1e-9
            ).value

        with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
            vals = list(ex.map(one, seeds))
        stds[L] = float(np.std(vals, ddof=1))
        for s, v in zip(seeds, vals):
            res.rows.append({"L": L, "seed": s, "f": v})
        res.rows.append({"L": L, "seed": "std", "f": stds[L]})
    res.check(
        "std at L=8 <= std at L=4", stds[8] <= stds[4], f"{stds[8]:.4f} vs {stds[4]:.4f}"
    )
    return res


@experiment("scaling-law")
def scaling_law(seed: int = 0, threads: int = 1) -> ExperimentResult:
    """Cul-de-sac: F flat across N, G/F grows like N per doubling."""
    res = _result("scaling-law", {"N": [2, 4, 8], "L": 8, "eps": 1.0})
    ratios = {}
    Fs = {}
    for N in (2, 4, 8):
        g = gen_culdesac(8, N, 1.0)
        m, J = canonical_culdesac_profile(g)
        F = energy(m, J)
        G = degree_normalized_energy(m, J)
        Fs[N], ratios[N] = F, G / F
        res.rows.append({"N": N, "F": F, "G": G, "G_over_F": G / F})
    fvals = list(Fs.values())
    spread = (max(fvals) - min(fvals)) / max(fvals)
    res.check("F varies by < 50% across N", spread < 0.5, f"spread={spread:.3f}")
    for a, b in ((2, 4), (4, 8)):
        growth = ratios[b] / ratios[a]
        res.check(
            f"G/F growth N={a}->{b} in [1.5, 2.5]", 1.5 <= growth <= 2.5, f"{growth:.3f}"
        )
    return res


@experiment("geodesic-converge")
def geodesic_converge(seed: int = 0, threads: int = 1) -> ExperimentResult:
    """1-d bump translation: discrete action within 10% of the continuum 0.25."""
    res = _result("geodesic-converge", {"eps": 1 / 32, "K": 16, "shift": 0.5})
    eps = 1 / 32
    g = rescale_graph(gen_lattice_nn(1, Orthotope([0.0], [32.0])), eps)
    x = g.points[:, 0]

    def bump(c, w=0.25):
        prof = np.where(np.abs(x - c) <= w / 2, np.cos(np.pi * (x - c) / w) ** 2, 0.0)
        return prof / prof.sum()

    prob = GeodesicProblem(
        g,
        MassDistribution(g, bump(0.25)),
        MassDistribution(g, bump(0.75)),
        K=16,
        tolerance=1e-10,
    )
    sol = solve_geodesic(prob)
    rel = abs(sol.action - 0.25) / 0.25
    res.rows.append({"action": sol.action, "target": 0.25, "rel_err": rel})
    res.check("action within 10% of 0.25", rel <= 0.10, f"action={sol.action:.4f}")
    audit = audit_apriori_bound(sol.curve)
    res.rows.append({"apriori_max_ratio": audit.max_ratio, "constant": audit.constant})
    res.check("a-priori W1 bound at every grid time", audit.holds, f"ratio={audit.max_ratio:.3f}")
    return res


@experiment("recovery-audit")
def recovery_audit(seed: int = 0, threads: int = 1) -> ExperimentResult:
    """Full recovery pipeline at the coarse reference parameters."""
    spec = SmoothCurveSpec.translating_bump(n=2, velocity=(1.0, 0.0), width=1.0, T=1.0)
    params = RecoveryParams(h=1 / 4, delta=1 / 4, eta=1 / 4, eps=1 / 16)
    res = _result(
        "recovery-audit",
        {"h": 0.25, "delta": 0.25, "eta": 0.25, "eps": 1 / 16, "curve": "translating bump"},
    )
    out = assemble_recovery(spec, params)
    a = out.audit
    res.rows.append({k: v for k, v in a.items() if isinstance(v, (int, float))})
    res.check("global continuity residual <= 1e-8", a["continuity_residual"] <= 1e-8,
              f"{a['continuity_residual']:.2e}")
    res.check("all depot masses >= 0", a["depot_min"] >= 0, f"min={a['depot_min']:.3e}")
    res.check("per-cube books balance to 1e-8", a["books_error"] <= 1e-8,
              f"{a['books_error']:.2e}")
    ratio = a["action_ratio"]
    res.check(
        "recovered action within 25% of homogenized action",
        0.75 <= ratio <= 1.25,
        f"ratio={ratio:.3f} (action={a['action']:.4f}, hom={a['homogenized_action']:.4f})",
    )
    return res


@experiment("orthotope-invariance")
def orthotope_invariance(seed: int = 11, threads: int = 1) -> ExperimentResult:
    """f_eps(e1) on [0,1]^2 vs [0,1]x[0,2] with the same conductances."""
    res = _result("orthotope-invariance", {"seed": seed, "eps": 0.125})
    eps = 1 / 8
    vals = {}
    for name, Q in (("unit", UNIT_BOX), ("tall", Orthotope([0.0, 0.0], [1.0, 2.0]))):
        sol = solve_cell(_rc_problem([1.0, 0.0], eps, seed, Q=Q), tol=1e-10)
        vals[name] = sol.value
        res.rows.append({"box": name, "f": sol.value, "seed": seed})
    rel = abs(vals["unit"] - vals["tall"]) / vals["unit"]
    res.check("values agree within 10%", rel <= 0.10, f"rel={rel:.3f}")
    return res


def run_experiment(name: str, seed: int = None, threads: int = 1) -> ExperimentResult:
    if name not in EXPERIMENTS:
        raise ConfigError(
            f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}"
        )
    kwargs = {"threads": threads}
    if seed is not None:
        kwargs["seed"] = seed
    return EXPERIMENTS[name](**kwargs)
