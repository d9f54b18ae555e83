"""Transport distances between finitely supported measures.

Only atomic measures are handled: W1 with Euclidean ground cost through a
linear program (the plan is exposed because the divergence corrector routes
along it), and W-infinity through a feasibility search over support distances.
"""

from __future__ import annotations

import numpy as np
import networkx as nx
from scipy.optimize import linprog
from scipy.sparse import coo_matrix

from .errors import MassMismatch
from .energy import MassDistribution

_MASS_TOL = 1e-10


def _atoms(measure, drop_tol=1e-15):
    """Normalize input to (points [m,n], weights [m]) keeping positive atoms."""
    if isinstance(measure, MassDistribution):
        pts, w = measure.graph.points, measure.values
    else:
        pts, w = measure
        pts = np.asarray(pts, dtype=float)
        w = np.asarray(w, dtype=float).reshape(-1)
    keep = w > drop_tol * max(w.sum(), 1.0)
    return np.atleast_2d(pts)[keep], w[keep]


def earth_mover_w1(mu, nu, return_plan: bool = False):
    """W1 between atomic measures of equal total mass.

    Inputs are MassDistributions or (points, weights) pairs. Solved as the
    transportation LP with the HiGHS backend; exact up to solver tolerance
    (~1e-9 for rational-scaled inputs). With `return_plan`, also returns
    (plan matrix, source points, target points).
    """
    p, a = _atoms(mu)
    q, b = _atoms(nu)
    ta, tb = a.sum(), b.sum()
    if abs(ta - tb) > _MASS_TOL * max(ta, tb, 1.0):
        raise MassMismatch(f"total masses differ: {ta} vs {tb}")
    if a.size == 0 or b.size == 0:
        out = 0.0
        return (out, np.zeros((a.size, b.size)), p, q) if return_plan else out
    cost = np.linalg.norm(p[:, None, :] - q[None, :, :], axis=2)
    m, k = cost.shape
    if m == 1 or k == 1:
        plan = np.outer(a, b) / ta
        val = float((plan * cost).sum())
        return (val, plan, p, q) if return_plan else val
    # marginal constraints; drop the last row (redundant) for full row rank
    rows, cols, vals = [], [], []
    for i in range(m):
        rows.extend([i] * k)
        cols.extend(range(i * k, (i + 1) * k))
        vals.extend([1.0] * k)
    for j in range(k - 1):
        rows.extend([m + j] * m)
        cols.extend(range(j, m * k, k))
        vals.extend([1.0] * m)
    A = coo_matrix((vals, (rows, cols)), shape=(m + k - 1, m * k))
    rhs = np.concatenate([a, b[:-1] * (ta / tb)])
    res = linprog(cost.ravel(), A_eq=A.tocsr(), b_eq=rhs, bounds=(0, None), method="highs")
    if not res.success:  # pragma: no cover - LP is always feasible here
        raise RuntimeError(f"transport LP failed: {res.message}")
    val = float(res.fun)
    if return_plan:
        return val, res.x.reshape(m, k), p, q
    return val


def kr_norm(points, signed_values):
    """Kantorovich-Rubinstein norm of a balanced signed atomic measure:
    W1 between its positive and negative parts."""
    f = np.asarray(signed_values, dtype=float)
    pos = f > 0
    neg = f < 0
    if not pos.any() and not neg.any():
        return 0.0
    pts = np.asarray(points, dtype=float)
    return earth_mover_w1((pts[pos], f[pos]), (pts[neg], -f[neg]))


def _coupling_feasible(a, b, dist, L, slack):
    """Max-flow check: can all mass be matched over pairs with dist <= L?"""
    G = nx.DiGraph()
    total = a.sum()
    for i, w in enumerate(a):
        G.add_edge("s", ("u", i), capacity=float(w))
    for j, w in enumerate(b):
        G.add_edge(("v", j), "t", capacity=float(w))
    ii, jj = np.nonzero(dist <= L + 1e-15)
    for i, j in zip(ii, jj):
        G.add_edge(("u", int(i)), ("v", int(j)))  # no capacity attr = infinite
    flow, _ = nx.maximum_flow(G, "s", "t")
    return flow >= total - slack


def w_infinity_distance(mu, nu) -> float:
    """Minimal L admitting a coupling supported on pairs with |x - y| <= L.

    The optimum is attained at one of the pairwise support distances, so the
    search bisects over that sorted set, with a max-flow feasibility check.
    """
    p, a = _atoms(mu)
    q, b = _atoms(nu)
    ta, tb = a.sum(), b.sum()
    if abs(ta - tb) > _MASS_TOL * max(ta, tb, 1.0):
        raise MassMismatch(f"total masses differ: {ta} vs {tb}")
    if a.size == 0 or b.size == 0:
        return 0.0
    dist = np.linalg.norm(p[:, None, :] - q[None, :, :], axis=2)
    slack = 1e-12 * max(ta, 1.0)
    candidates = np.unique(dist)
    lo, hi = 0, candidates.size - 1
    if _coupling_feasible(a, b, dist, candidates[0], slack):
        return float(candidates[0])
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _coupling_feasible(a, b, dist, candidates[mid], slack):
            hi = mid
        else:
            lo = mid
    return float(candidates[hi])
