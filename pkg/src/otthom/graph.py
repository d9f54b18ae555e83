"""Embedded graph data model, geometric validation, rescaling and box geometry.

Vertices live in R^n and are addressed by their index 0..V-1 (JSON ids are
remapped on load). Edges are stored once per undirected pair with an
orientation convention: scalar edge data (flows, weights, means) refer to the
stored (u, v) order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from .errors import ConfigError, DegenerateEdge, EmptyGraphInBox, NonpositiveEps
from .means import MeanSpec


class Orthotope:
    """Axis-aligned box [lower, upper], optionally in a rotated orthonormal frame.

    `contains` and segment clipping treat the box as closed; `half_open=True`
    switches membership and cuts to [lower, upper), the convention under which
    translates of a box tile space with no double counting.
    """

    def __init__(self, lower, upper, rotation=None):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ConfigError("orthotope corners must be 1-d and matching")
        if not np.all(self.lower < self.upper):
            raise ConfigError("orthotope needs lower < upper componentwise")
        self.rotation = None
        if rotation is not None:
            rot = np.asarray(rotation, dtype=float)
            if rot.shape != (self.dim, self.dim):
                raise ConfigError("rotation must be n x n")
            if not np.allclose(rot @ rot.T, np.eye(self.dim), atol=1e-12):
                raise ConfigError("rotation frame must be orthonormal within 1e-12")
            self.rotation = rot

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def sides(self) -> np.ndarray:
        return self.upper - self.lower

    def volume(self) -> float:
        return float(np.prod(self.sides))

    def to_local(self, points: np.ndarray) -> np.ndarray:
        """Map world coordinates into the axis-aligned frame of the box."""
        pts = np.asarray(points, dtype=float)
        if self.rotation is None:
            return pts
        return pts @ self.rotation.T

    def contains(self, points, half_open: bool = False) -> np.ndarray:
        pts = np.atleast_2d(self.to_local(points))
        lo = np.all(pts >= self.lower, axis=1)
        if half_open:
            hi = np.all(pts < self.upper, axis=1)
        else:
            hi = np.all(pts <= self.upper, axis=1)
        return lo & hi

    def inner_distance(self, points) -> np.ndarray:
        """Distance to R^n \\ box: 0 outside, min face distance inside."""
        pts = np.atleast_2d(self.to_local(points))
        d = np.minimum(pts - self.lower, self.upper - pts)
        return np.maximum(d.min(axis=1), 0.0)

    def to_json(self) -> dict:
        out = {"lower": self.lower.tolist(), "upper": self.upper.tolist()}
        if self.rotation is not None:
            out["rotation"] = self.rotation.tolist()
        return out

    @classmethod
    def from_json(cls, data) -> "Orthotope":
        if isinstance(data, Orthotope):
            return data
        return cls(data["lower"], data["upper"], data.get("rotation"))

    def __repr__(self):
        return f"Orthotope({self.lower.tolist()}, {self.upper.tolist()})"


def segment_box_cut(p0, p1, box: Orthotope, half_open: bool = False):
    """Length of [p0, p1] ∩ box for a batch of segments, by parametric clipping.

    p0, p1: arrays [m, n]. Returns lengths [m]. With `half_open`, a segment
    running inside an upper face (constant i-coordinate equal to upper[i]) is
    treated as outside; crossing segments are unaffected (measure zero).
    """
    a = np.atleast_2d(box.to_local(p0)).astype(float)
    b = np.atleast_2d(box.to_local(p1)).astype(float)
    d = b - a
    tmin = np.zeros(a.shape[0])
    tmax = np.ones(a.shape[0])
    alive = np.ones(a.shape[0], dtype=bool)
    for i in range(box.dim):
        di = d[:, i]
        ai = a[:, i]
        lo, hi = box.lower[i], box.upper[i]
        moving = np.abs(di) > 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (lo - ai) / di
            t1 = (hi - ai) / di
        tlo = np.where(di > 0, t0, t1)
        thi = np.where(di > 0, t1, t0)
        tmin = np.where(moving, np.maximum(tmin, tlo), tmin)
        tmax = np.where(moving, np.minimum(tmax, thi), tmax)
        # a flat segment lying exactly in the upper face belongs to the
        # neighboring box under the half-open convention
        inside_flat = (ai >= lo) & ((ai < hi) if half_open else (ai <= hi))
        alive &= moving | inside_flat
    span = np.maximum(tmax - tmin, 0.0)
    span = np.where(alive, span, 0.0)
    return span * np.linalg.norm(d, axis=1)


def edge_cut_fraction(x, y, box: Orthotope, half_open: bool = False) -> float:
    """H^1([x,y] ∩ box) / |x - y|, in [0, 1]."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    norm = float(np.linalg.norm(y - x))
    if norm == 0.0:
        raise DegenerateEdge("edge endpoints coincide")
    cut = segment_box_cut(x[None, :], y[None, :], box, half_open=half_open)[0]
    return float(cut / norm)


@dataclass
class EmbeddedGraph:
    """Immutable embedded graph: points in R^n, undirected weighted edges.

    `sigma` lies in [lam, Lam] with 0 < lam; `means` holds one MeanSpec per
    edge, evaluated in the stored (u, v) orientation. `R` is the geometry
    constant the graph is asserted to satisfy.
    """

    n: int
    points: np.ndarray
    edges: np.ndarray
    sigma: np.ndarray
    means: list
    R: float
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, self.n)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.sigma = np.asarray(self.sigma, dtype=float).reshape(-1)
        if isinstance(self.means, MeanSpec):
            self.means = [self.means] * self.num_edges
        if len(self.means) != self.num_edges or self.sigma.size != self.num_edges:
            raise ConfigError("per-edge arrays must match the edge count")
        if not np.all(np.isfinite(self.points)):
            raise ConfigError("vertex coordinates must be finite")
        if self.num_edges:
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                raise ConfigError("edges must connect distinct vertices")
            if self.edges.min() < 0 or self.edges.max() >= self.num_vertices:
                raise ConfigError("edge endpoint out of range")
            key = np.sort(self.edges, axis=1)
            if len(np.unique(key, axis=0)) != self.num_edges:
                raise ConfigError("duplicate undirected edge")
            if self.sigma.min() <= 0 or not np.all(np.isfinite(self.sigma)):
                raise ConfigError("sigma must be positive and finite")
        if self.R <= 0:
            raise ConfigError("geometry constant R must be positive")

    # -- basic quantities ---------------------------------------------------
    @property
    def num_vertices(self) -> int:
        return self.points.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def edge_vectors(self) -> np.ndarray:
        if "vec" not in self._cache:
            self._cache["vec"] = self.points[self.edges[:, 1]] - self.points[self.edges[:, 0]]
        return self._cache["vec"]

    @property
    def edge_lengths(self) -> np.ndarray:
        if "len" not in self._cache:
            self._cache["len"] = np.linalg.norm(self.edge_vectors, axis=1)
        return self._cache["len"]

    @property
    def degrees(self) -> np.ndarray:
        if "deg" not in self._cache:
            deg = np.zeros(self.num_vertices, dtype=np.int64)
            np.add.at(deg, self.edges[:, 0], 1)
            np.add.at(deg, self.edges[:, 1], 1)
            self._cache["deg"] = deg
        return self._cache["deg"]

    @property
    def sigma_range(self):
        return float(self.sigma.min()), float(self.sigma.max())

    def incidence(self):
        """Sparse V x E matrix D with D[u,e]=+1, D[v,e]=-1: div J = D @ J."""
        if "inc" not in self._cache:
            e = np.arange(self.num_edges)
            rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
            cols = np.concatenate([e, e])
            vals = np.concatenate([np.ones(self.num_edges), -np.ones(self.num_edges)])
            self._cache["inc"] = coo_matrix(
                (vals, (rows, cols)), shape=(self.num_vertices, self.num_edges)
            ).tocsr()
        return self._cache["inc"]

    def adjacency_csr(self, weights=None):
        w = self.edge_lengths if weights is None else np.asarray(weights)
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        cols = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        vals = np.concatenate([w, w])
        return coo_matrix((vals, (rows, cols)), shape=(self.num_vertices,) * 2).tocsr()

    def incident_edges(self):
        """List of (edge index array, sign array) per vertex; sign +1 if the
        vertex is the stored tail u."""
        if "adj" not in self._cache:
            out_e = [[] for _ in range(self.num_vertices)]
            out_s = [[] for _ in range(self.num_vertices)]
            for e, (u, v) in enumerate(self.edges):
                out_e[u].append(e)
                out_s[u].append(1.0)
                out_e[v].append(e)
                out_s[v].append(-1.0)
            self._cache["adj"] = [
                (np.array(a, dtype=np.int64), np.array(b)) for a, b in zip(out_e, out_s)
            ]
        return self._cache["adj"]

    def edge_index(self):
        """Dict mapping unordered vertex pair -> edge id."""
        if "eidx" not in self._cache:
            self._cache["eidx"] = {
                (min(u, v), max(u, v)): e for e, (u, v) in enumerate(self.edges)
            }
        return self._cache["eidx"]

    def kdtree(self) -> cKDTree:
        if "kdt" not in self._cache:
            self._cache["kdt"] = cKDTree(self.points)
        return self._cache["kdt"]

    def contains_vertices(self, box: "Orthotope", half_open: bool = False) -> np.ndarray:
        return box.contains(self.points, half_open=half_open)

    # -- serialization ------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "n": self.n,
            "R": self.R,
            "vertices": [
                {"id": i, "x": [float(c) for c in p]} for i, p in enumerate(self.points)
            ],
            "edges": [
                {
                    "u": int(u),
                    "v": int(v),
                    "sigma": float(s),
                    "mean": m.to_json(),
                }
                for (u, v), s, m in zip(self.edges, self.sigma, self.means)
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "EmbeddedGraph":
        n = int(data["n"])
        verts = data["vertices"]
        ids = [int(v["id"]) for v in verts]
        coords = np.array([v["x"] for v in verts], dtype=float)
        if not np.all(np.isfinite(coords)):
            raise ConfigError("graph JSON contains non-finite coordinates")
        remap = {vid: i for i, vid in enumerate(ids)}
        if len(remap) != len(ids):
            raise ConfigError("duplicate vertex id in graph JSON")
        edges = np.array(
            [[remap[int(e["u"])], remap[int(e["v"])]] for e in data["edges"]], dtype=np.int64
        ).reshape(-1, 2)
        sigma = np.array([float(e["sigma"]) for e in data["edges"]])
        means = [MeanSpec.from_json(e.get("mean", {"kind": "arithmetic"})) for e in data["edges"]]
        return cls(n=n, points=coords, edges=edges, sigma=sigma, means=means, R=float(data["R"]))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "EmbeddedGraph":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def rescale_graph(graph: EmbeddedGraph, eps: float) -> EmbeddedGraph:
    """Scale all coordinates (and R) by eps; combinatorics and weights unchanged."""
    if eps <= 0:
        raise NonpositiveEps(f"eps must be positive, got {eps}")
    return EmbeddedGraph(
        n=graph.n,
        points=graph.points * eps,
        edges=graph.edges.copy(),
        sigma=graph.sigma.copy(),
        means=list(graph.means),
        R=graph.R * eps,
    )


def boundary_edge_set(graph: EmbeddedGraph, Q: Orthotope, eps: float) -> np.ndarray:
    """Edge ids whose segment lies within R*eps of R^n \\ Q.

    Graphs produced by `rescale_graph` carry R*eps as their own geometry
    constant, so the band width is simply graph.R; `eps` is kept for callers
    that track the scale separately and only sanity-checks the convention.

    The inner distance of a segment to the complement of an axis-aligned box
    is concave along the segment, so the minimum sits at an endpoint.
    """
    band = graph.R
    du = Q.inner_distance(graph.points[graph.edges[:, 0]])
    dv = Q.inner_distance(graph.points[graph.edges[:, 1]])
    return np.flatnonzero(np.minimum(du, dv) <= band + 1e-12)


@dataclass
class GeometryReport:
    maxEdgeLength: float
    maxDegree: int
    coveringRadiusOk: bool
    pathStretchOk: bool
    violations: list

    @property
    def ok(self) -> bool:
        return self.coveringRadiusOk and self.pathStretchOk and not self.violations


def validate_geometry(
    graph: EmbeddedGraph,
    box: Orthotope,
    probe_spacing: float,
    pair_samples: int,
    seed: int = 0,
) -> GeometryReport:
    """Check the four geometric graph assumptions on a box.

    (1) path stretch on sampled in-box vertex pairs: a connecting path of
        Euclidean length <= R(|x-y|+1);
    (2) covering radius on a probe grid: a vertex within R of every probe;
    (3) max edge length <= R;
    (4) max degree, reported (finiteness is automatic for finite graphs).
    """
    if probe_spacing <= 0:
        raise ConfigError("probe spacing must be positive")
    violations = []
    in_box = np.flatnonzero(graph.contains_vertices(box))
    if in_box.size == 0:
        raise EmptyGraphInBox(f"no vertex of the graph lies in {box}")

    max_len = float(graph.edge_lengths.max()) if graph.num_edges else 0.0
    if max_len > graph.R + 1e-12:
        violations.append(f"edge length {max_len:.6g} exceeds R={graph.R:.6g}")
    max_deg = int(graph.degrees.max()) if graph.num_vertices else 0

    # covering radius on the probe grid
    axes = [
        np.arange(box.lower[i], box.upper[i] + probe_spacing / 2, probe_spacing)
        for i in range(box.dim)
    ]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, graph.n)
    if box.rotation is not None:
        grid = grid @ box.rotation
    dists, _ = graph.kdtree().query(grid)
    covering_ok = bool(np.all(dists <= graph.R + 1e-12))
    if not covering_ok:
        worst = grid[int(np.argmax(dists))]
        violations.append(
            f"covering radius violated at probe {worst.tolist()} (nearest vertex {dists.max():.6g} > R)"
        )

    # path stretch on sampled pairs
    rng = np.random.default_rng(seed)
    stretch_ok = True
    if in_box.size >= 2 and pair_samples > 0:
        k = min(pair_samples, in_box.size * (in_box.size - 1) // 2)
        src = rng.choice(in_box, size=k)
        dst = rng.choice(in_box, size=k)
        keep = src != dst
        src, dst = src[keep], dst[keep]
        if src.size:
            adj = graph.adjacency_csr()
            uniq_src, inv = np.unique(src, return_inverse=True)
            dmat = dijkstra(adj, directed=False, indices=uniq_src)
            plen = dmat[inv, dst]
            euclid = np.linalg.norm(graph.points[src] - graph.points[dst], axis=1)
            bound = graph.R * (euclid + 1.0)
            bad = ~(plen <= bound + 1e-9)
            if np.any(bad):
                stretch_ok = False
                i = int(np.flatnonzero(bad)[0])
                violations.append(
                    "path stretch violated between vertices "
                    f"{int(src[i])} and {int(dst[i])}: path {plen[i]:.6g} > {bound[i]:.6g}"
                )
    return GeometryReport(
        maxEdgeLength=max_len,
        maxDegree=max_deg,
        coveringRadiusOk=covering_ok,
        pathStretchOk=stretch_ok,
        violations=violations,
    )


def nearest_vertex(graph: EmbeddedGraph, point, radius: float):
    """Index of the nearest vertex within `radius`, smallest index on ties;
    None when the ball is empty."""
    d, i = graph.kdtree().query(np.asarray(point, dtype=float))
    if d > radius + 1e-12:
        return None
    ties = graph.kdtree().query_ball_point(np.asarray(point, dtype=float), r=d + 1e-12)
    return int(min(ties))
