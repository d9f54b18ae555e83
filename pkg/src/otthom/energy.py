"""Discrete kinetic energy, action of time curves, and the continuous embedding.

The energy of a mass m and an antisymmetric flow J is

    F(m, J) = sum over undirected edges of sigma * |x-y|^2 * J^2 / theta(m(x), m(y))

with the 0/0 = 0 convention: a term with zero flow costs nothing regardless of
the mean, and nonzero flow over a vanishing mean costs +inf. Each undirected
edge is counted once; the embedding iota J keeps its own half-of-both-
orientations form, which is equivalent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContinuityViolation, GraphMismatch, IsolatedVertexInSupport
from .graph import EmbeddedGraph, Orthotope, segment_box_cut
from .means import MeanSpec, eval_mean, mean_partials

# Gauss-Legendre nodes/weights on [0,1], order 8 (for segment integrals)
_GL_T, _GL_W = np.polynomial.legendre.leggauss(8)
_GL_T = (_GL_T + 1.0) / 2.0
_GL_W = _GL_W / 2.0


@dataclass
class MassDistribution:
    """Nonnegative vertex function; a probability when it sums to 1."""

    graph: EmbeddedGraph
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if self.values.size != self.graph.num_vertices:
            raise GraphMismatch("mass vector length != vertex count")
        if not np.all(np.isfinite(self.values)) or self.values.min() < 0:
            raise ValueError("masses must be finite and nonnegative")

    def total(self) -> float:
        return float(self.values.sum())

    @property
    def is_probability(self) -> bool:
        return abs(self.total() - 1.0) <= 1e-10

    def copy(self) -> "MassDistribution":
        return MassDistribution(self.graph, self.values.copy())


@dataclass
class FlowField:
    """Antisymmetric edge function, stored once per undirected edge.

    values[e] is J(u, v) for the stored orientation (u, v); J(v, u) is its
    negative by construction, so antisymmetry cannot be violated.
    """

    graph: EmbeddedGraph
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if self.values.size != self.graph.num_edges:
            raise GraphMismatch("flow vector length != edge count")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("flow values must be finite")

    @classmethod
    def zero(cls, graph: EmbeddedGraph) -> "FlowField":
        return cls(graph, np.zeros(graph.num_edges))

    def at(self, x: int, y: int) -> float:
        e = self.graph.edge_index().get((min(x, y), max(x, y)))
        if e is None:
            return 0.0
        sign = 1.0 if self.graph.edges[e, 0] == x else -1.0
        return sign * float(self.values[e])

    def copy(self) -> "FlowField":
        return FlowField(self.graph, self.values.copy())


def _mean_groups(graph: EmbeddedGraph):
    if "mean_groups" not in graph._cache:
        groups = {}
        for e, spec in enumerate(graph.means):
            key = (spec.kind, spec.lam if spec.kind == "weightedArithmetic" else None)
            groups.setdefault(key, []).append(e)
        graph._cache["mean_groups"] = [
            (MeanSpec(kind=k, lam=l if l is not None else 0.5), np.array(idx, dtype=np.int64))
            for (k, l), idx in groups.items()
        ]
    return graph._cache["mean_groups"]


def edge_theta(graph: EmbeddedGraph, mu: np.ndarray, mv: np.ndarray) -> np.ndarray:
    """Per-edge theta(mu, mv), dispatching on each edge's mean spec."""
    out = np.empty(graph.num_edges)
    for spec, idx in _mean_groups(graph):
        out[idx] = eval_mean(spec, mu[idx], mv[idx])
    return out


def edge_theta_partials(graph: EmbeddedGraph, mu, mv):
    du = np.empty(graph.num_edges)
    dv = np.empty(graph.num_edges)
    for spec, idx in _mean_groups(graph):
        a, b = mean_partials(spec, mu[idx], mv[idx])
        du[idx] = a
        dv[idx] = b
    return du, dv


def _check_same_graph(*objs):
    g = objs[0].graph
    for o in objs[1:]:
        if o.graph is not g:
            raise GraphMismatch("operands live on different graphs")
    return g


def energy_terms(m: MassDistribution, J: FlowField, weights=None) -> np.ndarray:
    """Per-edge energy terms with the 0/0 = 0 convention; +inf where nonzero
    flow divides by a vanishing mean. `weights` multiplies termwise (cut
    fractions for the localized energy)."""
    g = _check_same_graph(m, J)
    mu = m.values[g.edges[:, 0]]
    mv = m.values[g.edges[:, 1]]
    theta = edge_theta(g, mu, mv)
    c = g.sigma * g.edge_lengths**2 * J.values**2
    if weights is not None:
        c = c * weights
    out = np.zeros(g.num_edges)
    live = c != 0.0
    ok = live & (theta > 0.0)
    out[ok] = c[ok] / theta[ok]
    out[live & (theta <= 0.0)] = np.inf
    return out


def energy(m: MassDistribution, J: FlowField) -> float:
    """Kinetic energy F(m, J); possibly +inf."""
    return float(energy_terms(m, J).sum())


def localized_energy(m: MassDistribution, J: FlowField, A, half_open: bool = False) -> float:
    """F(m, J, A): every term weighted by the fraction of its segment in A.

    A is an Orthotope or an iterable of pairwise disjoint Orthotopes; the cut
    fractions of a disjoint family add, which makes this sigma-additive.
    `half_open` treats each box as [lower, upper): the convention under which
    translates of a box tile space without double counting edges that lie
    exactly in a face (relevant for lattice-aligned boxes).
    """
    g = _check_same_graph(m, J)
    boxes = [A] if isinstance(A, Orthotope) else list(A)
    p0 = g.points[g.edges[:, 0]]
    p1 = g.points[g.edges[:, 1]]
    frac = np.zeros(g.num_edges)
    for box in boxes:
        frac += segment_box_cut(p0, p1, box, half_open=half_open) / g.edge_lengths
    return float(energy_terms(m, J, weights=frac).sum())


def degree_normalized_energy(m: MassDistribution, J: FlowField) -> float:
    """Energy with means of m(x)/deg(x): scales linearly with vertex degree."""
    g = _check_same_graph(m, J)
    deg = g.degrees
    live = J.values != 0.0
    for col in (0, 1):
        bad = live & (deg[g.edges[:, col]] == 0)
        if np.any(bad):
            raise IsolatedVertexInSupport("zero-degree vertex carries flow")
    safe = np.maximum(deg, 1)
    scaled = m.values / safe
    mu = scaled[g.edges[:, 0]]
    mv = scaled[g.edges[:, 1]]
    theta = edge_theta(g, mu, mv)
    c = g.sigma * g.edge_lengths**2 * J.values**2
    out = np.zeros(g.num_edges)
    ok = (c != 0) & (theta > 0)
    out[ok] = c[ok] / theta[ok]
    out[(c != 0) & (theta <= 0)] = np.inf
    return float(out.sum())


def divergence(J: FlowField) -> np.ndarray:
    """div J(x) = sum over neighbors of J(x, y) — the outflow at x.

    A unit path flow from a to b has divergence +1 at a and -1 at b, so that
    the continuity equation drains mass from the source.
    """
    return J.graph.incidence() @ J.values


def pentagram_product(eta, J: FlowField) -> FlowField:
    """Vertex-averaged modulation ((eta(x)+eta(y))/2) * J(x,y).

    Satisfies div(eta*J)(x) = eta(x) div J(x) + (1/2) sum (eta(y)-eta(x)) J(x,y)
    exactly.
    """
    g = J.graph
    if callable(eta):
        eta = np.asarray(eta(g.points), dtype=float).reshape(-1)
    else:
        eta = np.asarray(eta, dtype=float).reshape(-1)
    if eta.size != g.num_vertices:
        raise GraphMismatch("eta must give one value per vertex")
    avg = 0.5 * (eta[g.edges[:, 0]] + eta[g.edges[:, 1]])
    return FlowField(g, avg * J.values)


# -- continuous embedding iota J -----------------------------------------


@dataclass
class SegmentMeasure:
    """iota J as a list of (segment, unit direction, line density) entries."""

    p0: np.ndarray
    p1: np.ndarray
    direction: np.ndarray
    density: np.ndarray


def segment_measure(J: FlowField) -> SegmentMeasure:
    g = J.graph
    live = np.flatnonzero(J.values != 0.0)
    vec = g.edge_vectors[live]
    lens = g.edge_lengths[live]
    return SegmentMeasure(
        p0=g.points[g.edges[live, 0]],
        p1=g.points[g.edges[live, 1]],
        direction=vec / lens[:, None],
        density=J.values[live].copy(),
    )


def embed_flow_pairing(J: FlowField, phi) -> float:
    """<iota J, phi> for a vector test function phi: [m,n] -> [m,n].

    Each segment integral uses order-8 Gauss-Legendre quadrature.
    """
    g = J.graph
    live = np.flatnonzero(J.values != 0.0)
    if live.size == 0:
        return 0.0
    a = g.points[g.edges[live, 0]]
    b = g.points[g.edges[live, 1]]
    vec = b - a
    # per undirected edge the two orientations contribute identically, so the
    # 1/2 cancels and the H^1 density times the unit direction is just (y-x)
    per_edge = np.zeros(live.size)
    for t, w in zip(_GL_T, _GL_W):
        vals = np.asarray(phi(a + t * vec), dtype=float)
        per_edge += w * np.einsum("ij,ij->i", vals, vec)
    return float(np.dot(J.values[live], per_edge))


def flow_tv_on_box(J: FlowField, A: Orthotope) -> float:
    """|iota J|(A) = sum over undirected edges of |J| * cut length."""
    g = J.graph
    p0 = g.points[g.edges[:, 0]]
    p1 = g.points[g.edges[:, 1]]
    cut = segment_box_cut(p0, p1, A)
    return float(np.sum(np.abs(J.values) * cut))


def iota_total_vector(J: FlowField, A: Orthotope) -> np.ndarray:
    """The vector iota J(A) = sum J * (y-x) * cut fraction (one per edge)."""
    g = J.graph
    p0 = g.points[g.edges[:, 0]]
    p1 = g.points[g.edges[:, 1]]
    frac = segment_box_cut(p0, p1, A) / g.edge_lengths
    return (J.values * frac) @ g.edge_vectors


# -- time curves ----------------------------------------------------------


@dataclass
class DiscreteCurve:
    """Time-sampled masses m_k at times t_k and flows J_{k+1/2} on the steps."""

    graph: EmbeddedGraph
    times: np.ndarray
    masses: np.ndarray  # [K+1, V]
    flows: np.ndarray  # [K, E]
    tolerance: float = 1e-9

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.masses = np.asarray(self.masses, dtype=float)
        self.flows = np.asarray(self.flows, dtype=float)
        K = self.times.size - 1
        if K < 1 or np.any(np.diff(self.times) <= 0):
            raise ContinuityViolation("time grid must be strictly increasing")
        if self.masses.shape != (K + 1, self.graph.num_vertices):
            raise GraphMismatch("mass array shape mismatch")
        if self.flows.shape != (K, self.graph.num_edges):
            raise GraphMismatch("flow array shape mismatch")

    @property
    def num_steps(self) -> int:
        return self.times.size - 1

    def mass_at(self, k: int) -> MassDistribution:
        return MassDistribution(self.graph, self.masses[k])

    def flow_at(self, k: int) -> FlowField:
        return FlowField(self.graph, self.flows[k])

    def to_json(self) -> dict:
        return {
            "times": self.times.tolist(),
            "masses": self.masses.tolist(),
            "flows": self.flows.tolist(),
        }

    @classmethod
    def from_json(cls, graph: EmbeddedGraph, data: dict) -> "DiscreteCurve":
        return cls(
            graph=graph,
            times=np.array(data["times"]),
            masses=np.array(data["masses"]),
            flows=np.array(data["flows"]),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)
            fh.write("\n")


def continuity_residual(curve: DiscreteCurve) -> float:
    """max over steps and vertices of |(m_{k+1}-m_k)/dt + div J_{k+1/2}|."""
    D = curve.graph.incidence()
    dt = np.diff(curve.times)
    res = 0.0
    for k in range(curve.num_steps):
        r = (curve.masses[k + 1] - curve.masses[k]) / dt[k] + D @ curve.flows[k]
        res = max(res, float(np.abs(r).max()))
    return res


def curve_action(curve: DiscreteCurve, tol: float | None = None) -> float:
    """Time-midpoint action: sum of dt * F((m_k + m_{k+1})/2, J_{k+1/2}).

    The midpoint mass keeps the discretized action jointly convex and is exact
    for piecewise-constant flows with affine masses.
    """
    tol = curve.tolerance if tol is None else tol
    res = continuity_residual(curve)
    if res > tol:
        raise ContinuityViolation(
            f"continuity residual {res:.3e} exceeds tolerance {tol:.3e}"
        )
    dt = np.diff(curve.times)
    total = 0.0
    for k in range(curve.num_steps):
        mbar = MassDistribution(curve.graph, (curve.masses[k] + curve.masses[k + 1]) / 2.0)
        total += dt[k] * energy(mbar, FlowField(curve.graph, curve.flows[k]))
    return float(total)


def curve_iota_mass(curve: DiscreteCurve, upto: int | None = None) -> float:
    """Total variation |iota J|((0, t_k) x R^n) of the curve's space-time flow."""
    upto = curve.num_steps if upto is None else upto
    dt = np.diff(curve.times)
    lens = curve.graph.edge_lengths
    return float(
        sum(dt[k] * np.sum(np.abs(curve.flows[k]) * lens) for k in range(upto))
    )
