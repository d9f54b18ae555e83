"""Deterministic-seed generators for the example graph families.

All randomness goes through a counter-based hash keyed by (seed, canonical
integer key), so a spec generates a bit-identical graph regardless of patch
size or generation order: the same lattice edge draws the same conductance in
every box that contains it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay, QhullError

from .errors import ConfigError, DegenerateTriangulation
from .energy import FlowField, MassDistribution
from .graph import EmbeddedGraph, Orthotope
from .means import MeanSpec

_COORD_OFFSET = np.uint64(1) << np.uint64(31)


def _mix(x: np.ndarray) -> np.ndarray:
    """Vectorized splitmix64 finalizer."""
    x = x.astype(np.uint64, copy=True)
    with np.errstate(over="ignore"):
        x += np.uint64(0x9E3779B97F4A7C15)
        z = x
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def keyed_uniform(seed: int, *keys) -> np.ndarray:
    """Uniform [0,1) numbers keyed by (seed, k1, k2, ...); each key an int array."""
    arrs = [np.asarray(k, dtype=np.int64) for k in keys]
    shape = np.broadcast(*arrs).shape if len(arrs) > 1 else arrs[0].shape
    h = _mix(np.full(shape, np.uint64(seed & 0xFFFFFFFFFFFFFFFF)))
    for a in arrs:
        h = _mix(h ^ (a.astype(np.int64).view(np.uint64) + _COORD_OFFSET))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _as_box(box) -> Orthotope:
    if isinstance(box, Orthotope):
        return box
    if isinstance(box, dict):
        return Orthotope.from_json(box)
    arr = np.asarray(box, dtype=float)
    return Orthotope(arr[0], arr[1])


@dataclass
class GeneratorSpec:
    """Declarative description of a graph family instance."""

    kind: str
    n: int = 2
    box: object = None
    seed: int = 0
    lam: float = 1.0
    Lam: float = 1.0
    shift_bound: float = 0.0
    N: int = 2
    L: float = 2.0
    eps: float = 1.0
    sigma: float = 1.0
    mean: MeanSpec = field(default_factory=MeanSpec)

    def __post_init__(self):
        if self.kind not in ("latticeNN", "randomConductance", "perturbedVoronoi", "culDeSac"):
            raise ConfigError(f"unknown generator kind {self.kind!r}")
        if not 0 < self.lam <= self.Lam:
            raise ConfigError("need 0 < lam <= Lam")
        if self.kind == "perturbedVoronoi" and not 0 <= self.shift_bound < 0.5:
            raise ConfigError("shiftBound must lie in [0, 1/2) to keep adjacency well-posed")
        if self.kind == "culDeSac" and (self.N < 2 or self.L < 2):
            raise ConfigError("culDeSac needs N >= 2 and L >= 2")

    def to_json(self) -> dict:
        out = {
            "kind": self.kind,
            "n": self.n,
            "seed": self.seed,
            "lam": self.lam,
            "Lam": self.Lam,
            "shiftBound": self.shift_bound,
            "N": self.N,
            "L": self.L,
            "eps": self.eps,
            "sigma": self.sigma,
            "mean": self.mean.to_json(),
        }
        if self.box is not None:
            out["box"] = _as_box(self.box).to_json()
        return out

    @classmethod
    def from_json(cls, data: dict) -> "GeneratorSpec":
        return cls(
            kind=data["kind"],
            n=int(data.get("n", 2)),
            box=data.get("box"),
            seed=int(data.get("seed", 0)),
            lam=float(data.get("lam", 1.0)),
            Lam=float(data.get("Lam", 1.0)),
            shift_bound=float(data.get("shiftBound", 0.0)),
            N=int(data.get("N", 2)),
            L=float(data.get("L", 2.0)),
            eps=float(data.get("eps", 1.0)),
            sigma=float(data.get("sigma", 1.0)),
            mean=MeanSpec.from_json(data.get("mean", {"kind": "arithmetic"})),
        )


def generate(spec: GeneratorSpec) -> EmbeddedGraph:
    if spec.kind == "latticeNN":
        return gen_lattice_nn(spec.n, _as_box(spec.box), sigma=spec.sigma, mean=spec.mean)
    if spec.kind == "randomConductance":
        return gen_random_conductance(
            spec.n, _as_box(spec.box), spec.lam, spec.Lam, spec.seed, mean=spec.mean
        )
    if spec.kind == "perturbedVoronoi":
        return gen_perturbed_voronoi(
            _as_box(spec.box), spec.shift_bound, spec.seed, sigma=spec.sigma, mean=spec.mean
        )
    if spec.kind == "culDeSac":
        return gen_culdesac(spec.L, spec.N, spec.eps, sigma=spec.sigma, mean=spec.mean)
    raise ConfigError(spec.kind)  # pragma: no cover


def _lattice_points(n: int, box: Orthotope):
    lo = np.ceil(box.lower - 1e-9).astype(np.int64)
    hi = np.floor(box.upper + 1e-9).astype(np.int64)
    axes = [np.arange(lo[i], hi[i] + 1) for i in range(n)]
    keys = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    return keys


def _lattice_edges(keys: np.ndarray):
    """Nearest-neighbor pairs (row_u, row_v, axis) with v = u + e_axis."""
    n = keys.shape[1]
    row_of = {tuple(k): i for i, k in enumerate(map(tuple, keys))}
    edges, axes = [], []
    for i, key in enumerate(keys):
        for ax in range(n):
            nb = list(key)
            nb[ax] += 1
            j = row_of.get(tuple(nb))
            if j is not None:
                edges.append((i, j))
                axes.append(ax)
    return np.array(edges, dtype=np.int64).reshape(-1, 2), np.array(axes, dtype=np.int64)


def gen_lattice_nn(n: int, box: Orthotope, sigma: float = 1.0, mean: MeanSpec | None = None,
                   R: float | None = None) -> EmbeddedGraph:
    """Integer lattice points in the box with nearest-neighbor edges."""
    box = _as_box(box)
    mean = mean or MeanSpec()
    keys = _lattice_points(n, box)
    edges, _ = _lattice_edges(keys)
    return EmbeddedGraph(
        n=n,
        points=keys.astype(float),
        edges=edges,
        sigma=np.full(edges.shape[0], float(sigma)),
        means=[mean] * edges.shape[0],
        R=float(R) if R is not None else float(np.sqrt(n) + 1.0),
    )


def gen_random_conductance(n: int, box: Orthotope, lam: float, Lam: float, seed: int,
                           mean: MeanSpec | None = None) -> EmbeddedGraph:
    """Lattice graph with iid Uniform[lam, Lam] weights, keyed per edge."""
    if not 0 < lam <= Lam:
        raise ConfigError("need 0 < lam <= Lam")
    box = _as_box(box)
    mean = mean or MeanSpec()
    keys = _lattice_points(n, box)
    edges, axes = _lattice_edges(keys)
    low = keys[edges[:, 0]]
    u = keyed_uniform(seed, *(low[:, i] for i in range(n)), axes)
    sigma = lam + (Lam - lam) * u
    return EmbeddedGraph(
        n=n,
        points=keys.astype(float),
        edges=edges,
        sigma=sigma,
        means=[mean] * edges.shape[0],
        R=float(np.sqrt(n) + 1.0),
    )


def gen_perturbed_voronoi(box: Orthotope, shift_bound: float, seed: int, sigma: float = 1.0,
                          mean: MeanSpec | None = None, pad: int = 3) -> EmbeddedGraph:
    """Perturbed Z^2 with edges from the dual Voronoi tesselation (n = 2).

    Vertices are z + xi(z) with xi iid uniform in the ball of radius
    shift_bound; two vertices are adjacent when their Voronoi cells share a
    positive-length boundary, read off the Delaunay triangulation of a padded
    point set. The outermost pad ring is discarded afterwards: convex-hull
    chords of the finite patch are not Voronoi adjacencies of the infinite
    graph. The unperturbed case returns the plain lattice (degenerate
    cocircular grids have no canonical triangulation).
    """
    box = _as_box(box)
    if box.dim != 2:
        raise ConfigError("the Voronoi family is 2-d")
    mean = mean or MeanSpec()
    keep_box = Orthotope(box.lower - (pad - 2), box.upper + (pad - 2))
    if shift_bound == 0.0:
        g = gen_lattice_nn(2, keep_box, sigma=sigma, mean=mean)
        return EmbeddedGraph(
            n=2, points=g.points, edges=g.edges, sigma=g.sigma, means=g.means, R=4.0
        )
    keys = _lattice_points(2, Orthotope(box.lower - pad, box.upper + pad))
    for attempt in range(2):
        s = seed + attempt
        u1 = keyed_uniform(s, keys[:, 0], keys[:, 1], np.zeros(keys.shape[0], dtype=np.int64))
        u2 = keyed_uniform(s, keys[:, 0], keys[:, 1], np.ones(keys.shape[0], dtype=np.int64))
        r = shift_bound * np.sqrt(u1)
        ang = 2.0 * np.pi * u2
        pts = keys + np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
        try:
            tri = Delaunay(pts)
        except QhullError:
            continue
        simp = tri.simplices
        pairs = np.concatenate([simp[:, [0, 1]], simp[:, [1, 2]], simp[:, [0, 2]]])
        pairs = np.unique(np.sort(pairs, axis=1), axis=0)
        # trim the pad ring (and with it the hull-chord artifacts)
        keep = (
            np.all(keys >= (box.lower - (pad - 2))[None, :] - 1e-9, axis=1)
            & np.all(keys <= (box.upper + (pad - 2))[None, :] + 1e-9, axis=1)
        )
        newidx = -np.ones(pts.shape[0], dtype=np.int64)
        newidx[keep] = np.arange(int(keep.sum()))
        epairs = pairs[keep[pairs[:, 0]] & keep[pairs[:, 1]]]
        epairs = newidx[epairs]
        return EmbeddedGraph(
            n=2,
            points=pts[keep],
            edges=epairs,
            sigma=np.full(epairs.shape[0], float(sigma)),
            means=[mean] * epairs.shape[0],
            R=4.0,
        )
    raise DegenerateTriangulation("Delaunay triangulation failed twice")


def gen_culdesac(L: float, N: int, eps: float, sigma: float = 1.0,
                 mean: MeanSpec | None = None) -> EmbeddedGraph:
    """Line graph eps*Z ∩ [0, L] with a private scaled complete graph K_N
    glued to every base vertex (embedded in the plane).

    Clique points sit on a circle of radius eps/8 at perpendicular offset
    eps/2, so clique and base-to-clique edges stay shorter than eps. Interior
    base degree is N + 2; clique degree is N.
    """
    mean = mean or MeanSpec()
    B = int(round(L / eps)) + 1
    pts = [np.array([k * eps, 0.0]) for k in range(B)]
    edges = [(k, k + 1) for k in range(B - 1)]
    ang = 2.0 * np.pi * np.arange(N) / N
    for k in range(B):
        base_idx = k
        start = len(pts)
        cx, cy = k * eps, eps / 2.0
        for a in ang:
            pts.append(np.array([cx + (eps / 8.0) * np.cos(a), cy + (eps / 8.0) * np.sin(a)]))
        clique = list(range(start, start + N))
        for i, ci in enumerate(clique):
            edges.append((base_idx, ci))
            for cj in clique[i + 1:]:
                edges.append((ci, cj))
    edges = np.array(edges, dtype=np.int64)
    return EmbeddedGraph(
        n=2,
        points=np.array(pts),
        edges=edges,
        sigma=np.full(edges.shape[0], float(sigma)),
        means=[mean] * edges.shape[0],
        R=2.0 * max(1.0, eps),
    )


def culdesac_base_vertices(graph: EmbeddedGraph) -> np.ndarray:
    """Base-line vertices of a cul-de-sac graph (the ones at height 0)."""
    return np.flatnonzero(np.abs(graph.points[:, 1]) < 1e-12)


def canonical_culdesac_profile(graph: EmbeddedGraph):
    """The transport profile behind the scaling-law experiment: total mass 1
    spread uniformly over base vertices, unit flow along the base line."""
    base = culdesac_base_vertices(graph)
    order = base[np.argsort(graph.points[base, 0])]
    m = np.zeros(graph.num_vertices)
    m[base] = 1.0 / base.size
    J = np.zeros(graph.num_edges)
    eidx = graph.edge_index()
    for a, b in zip(order[:-1], order[1:]):
        e = eidx[(min(a, b), max(a, b))]
        J[e] = 1.0 if graph.edges[e, 0] == a else -1.0
    return MassDistribution(graph, m), FlowField(graph, J)
