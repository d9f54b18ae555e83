"""Lattice homomorphism into a graph, path flows, pushforwards and the
uniform representatives of constant vector fields.

A LatticeMap sends the points of eps*Z^n inside a box to nearby graph
vertices and each nearest-neighbor lattice pair to a short graph path. Pushing
the uniform lattice flow of a vector v through the map yields a graph flow
whose embedding approximates v * Lebesgue.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .errors import (
    ConfigError,
    NoTubePath,
    NoVertexInBall,
    NonadjacentStep,
    PathTooLong,
    UnbalancedDivergence,
    UnmappedPair,
)
from .energy import FlowField, divergence
from .graph import EmbeddedGraph, Orthotope
from .wasserstein import earth_mover_w1


@dataclass
class LatticeMap:
    """phi: eps*Z^n ∩ box -> vertices, with a path per lattice nn pair."""

    graph: EmbeddedGraph
    eps: float
    box: Orthotope
    lattice_keys: np.ndarray  # [L, n] integer lattice coordinates
    vertex_map: np.ndarray  # [L] vertex index of phi(z)
    nn_pairs: np.ndarray  # [P, 2] rows into lattice_keys, oriented +e_axis
    nn_axis: np.ndarray  # [P]
    paths: list  # [P] vertex index lists phi(z) -> phi(z')
    identity: bool = False
    _row_of: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._row_of:
            self._row_of = {tuple(k): i for i, k in enumerate(map(tuple, self.lattice_keys))}

    @property
    def num_points(self) -> int:
        return self.lattice_keys.shape[0]

    def lattice_points(self) -> np.ndarray:
        return self.lattice_keys * self.eps

    def row(self, key) -> int | None:
        return self._row_of.get(tuple(int(c) for c in key))

    def interior_rows(self) -> np.ndarray:
        """Rows whose 2n lattice neighbors are all mapped."""
        out = []
        for i, key in enumerate(self.lattice_keys):
            ok = True
            for ax in range(self.graph.n):
                for s in (-1, 1):
                    nb = key.copy()
                    nb[ax] += s
                    if self.row(nb) is None:
                        ok = False
                        break
                if not ok:
                    break
            if ok:
                out.append(i)
        return np.array(out, dtype=np.int64)

    def boundary_image_vertices(self) -> np.ndarray:
        """Vertices that are images of non-interior lattice points; uniform
        representatives are exactly divergence-free away from these."""
        interior = set(self.interior_rows().tolist())
        rows = [i for i in range(self.num_points) if i not in interior]
        return np.unique(self.vertex_map[rows]) if rows else np.array([], dtype=np.int64)


def build_lattice_map(graph: EmbeddedGraph, eps: float, box: Orthotope) -> LatticeMap:
    """Map each lattice point to its nearest vertex within the graph's R and
    each lattice nn pair to a Euclidean-shortest path.

    Nearest-vertex ties break to the smallest vertex index; path lengths carry
    the certificate L <= 2 R (R + 1) eps with R the dimensionless constant
    graph.R / eps. Raises NoVertexInBall / PathTooLong when the graph fails.
    """
    n = graph.n
    lo = np.ceil(box.lower / eps - 1e-9).astype(np.int64)
    hi = np.floor(box.upper / eps + 1e-9).astype(np.int64)
    if np.any(hi < lo):
        keys = np.zeros((0, n), dtype=np.int64)
    else:
        axes = [np.arange(lo[i], hi[i] + 1) for i in range(n)]
        keys = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    pts = keys * eps
    radius = graph.R + 1e-9

    if keys.shape[0] == 0:
        return LatticeMap(graph, eps, box, keys, np.zeros(0, dtype=np.int64),
                          np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64), [])

    tree = graph.kdtree()
    dists, nearest = tree.query(pts)
    if np.any(dists > radius):
        bad = int(np.argmax(dists))
        raise NoVertexInBall(pts[bad].tolist())
    # deterministic tie-break to the smallest vertex index
    vmap = np.asarray(nearest, dtype=np.int64)
    for i in np.flatnonzero(dists > 0):
        ties = tree.query_ball_point(pts[i], r=dists[i] + 1e-12)
        if len(ties) > 1:
            vmap[i] = min(ties)

    row_of = {tuple(k): i for i, k in enumerate(map(tuple, keys))}
    pairs, axes_list = [], []
    for i, key in enumerate(keys):
        for ax in range(n):
            nb = key.copy()
            nb[ax] += 1
            j = row_of.get(tuple(nb))
            if j is not None:
                pairs.append((i, j))
                axes_list.append(ax)
    nn_pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    nn_axis = np.array(axes_list, dtype=np.int64)

    Rd = graph.R / eps
    length_bound = 2.0 * Rd * (Rd + 1.0) * eps + 1e-9

    # identity fast path: lattice points sit on vertices and nn pairs are edges
    identity = bool(np.all(dists <= 1e-9 * max(eps, 1.0)))
    paths: list = []
    if identity:
        eidx = graph.edge_index()
        for (i, j) in nn_pairs:
            u, v = int(vmap[i]), int(vmap[j])
            if (min(u, v), max(u, v)) not in eidx:
                identity = False
                break
        if identity:
            paths = [[int(vmap[i]), int(vmap[j])] for (i, j) in nn_pairs]
    if not identity:
        paths = [None] * nn_pairs.shape[0]
        adj = graph.adjacency_csr()
        by_source: dict = {}
        for p, (i, j) in enumerate(nn_pairs):
            by_source.setdefault(int(vmap[i]), []).append((p, int(vmap[j])))
        for src, targets in by_source.items():
            dmat, pred = dijkstra(
                adj, directed=False, indices=src, return_predecessors=True
            )
            for p, dst in targets:
                if not np.isfinite(dmat[dst]):
                    raise PathTooLong(f"no path between mapped vertices {src} and {dst}")
                if dmat[dst] > length_bound:
                    raise PathTooLong(
                        f"shortest path {dmat[dst]:.6g} exceeds certificate {length_bound:.6g}"
                    )
                path = [dst]
                while path[-1] != src:
                    path.append(int(pred[path[-1]]))
                paths[p] = path[::-1]
    return LatticeMap(
        graph=graph,
        eps=eps,
        box=box,
        lattice_keys=keys,
        vertex_map=vmap,
        nn_pairs=nn_pairs,
        nn_axis=nn_axis,
        paths=paths,
        identity=identity,
    )


def path_unit_flow(graph: EmbeddedGraph, path) -> FlowField:
    """Unit flow along a vertex path (+1 per traversal in walk direction;
    multiplicities add on repeated edges). div = +1 at the start, -1 at the
    end under the outflow convention."""
    values = np.zeros(graph.num_edges)
    _accumulate_path(graph, path, 1.0, values)
    return FlowField(graph, values)


def _accumulate_path(graph: EmbeddedGraph, path, weight: float, values: np.ndarray):
    eidx = graph.edge_index()
    for a, b in zip(path[:-1], path[1:]):
        e = eidx.get((min(a, b), max(a, b)))
        if e is None:
            raise NonadjacentStep(f"vertices {a} and {b} are not adjacent")
        sign = 1.0 if graph.edges[e, 0] == a else -1.0
        values[e] += sign * weight


def pushforward_flow(lattice_map: LatticeMap, lattice_flow: np.ndarray) -> FlowField:
    """Push an antisymmetric lattice flow (one value per mapped nn pair, in
    the +e_axis orientation) through the map's paths."""
    v = np.asarray(lattice_flow, dtype=float).reshape(-1)
    if v.size != lattice_map.nn_pairs.shape[0]:
        raise UnmappedPair("lattice flow must give one value per mapped nn pair")
    values = np.zeros(lattice_map.graph.num_edges)
    for p, val in enumerate(v):
        if val == 0.0:
            continue
        _accumulate_path(lattice_map.graph, lattice_map.paths[p], val, values)
    return FlowField(lattice_map.graph, values)


def pushforward_mass(lattice_map: LatticeMap, lattice_mass: np.ndarray) -> np.ndarray:
    """Push a lattice vertex function to graph vertices: sums over preimages."""
    out = np.zeros(lattice_map.graph.num_vertices)
    np.add.at(out, lattice_map.vertex_map, np.asarray(lattice_mass, dtype=float))
    return out


def uniform_lattice_flow(lattice_map: LatticeMap, v) -> np.ndarray:
    """The uniform flow of vector v on (eps Z^n, nn): eps^(n-1) v_i along +e_i."""
    v = np.asarray(v, dtype=float)
    n = lattice_map.graph.n
    return lattice_map.eps ** (n - 1) * v[lattice_map.nn_axis]


def uniform_representative(lattice_map: LatticeMap, v) -> FlowField:
    """J^eps_v = pushforward of the uniform lattice flow of v. Linear in v and
    exactly divergence-free at every vertex whose lattice preimages are all
    interior to the mapped box."""
    return pushforward_flow(lattice_map, uniform_lattice_flow(lattice_map, v))


def divergence_repair(
    graph: EmbeddedGraph,
    target_div: np.ndarray,
    support_box: Orthotope,
    eps: float,
    tube_radius: float | None = None,
):
    """Build a corrector flow K with div K = -target_div.

    Couples the positive and negative parts of -target_div W1-optimally and
    routes each coupled pair along a short path restricted to a tube around
    the straight segment (radius 3 R eps, doubled once on failure). Returns
    (K, report) where the report carries the TV certificate.
    """
    g = np.asarray(target_div, dtype=float).reshape(-1)
    if g.size != graph.num_vertices:
        raise UnbalancedDivergence("target divergence must be a vertex function")
    scale = np.abs(g).sum()
    if abs(g.sum()) > 1e-10 * max(scale, 1.0):
        raise UnbalancedDivergence(f"target divergence sums to {g.sum():.3e}")
    support = np.flatnonzero(np.abs(g) > 1e-15 * max(scale, 1.0))
    if support.size and not support_box.contains(graph.points[support]).all():
        raise ConfigError("target divergence has support outside the given box")
    values = np.zeros(graph.num_edges)
    report = {"kr_norm": 0.0, "tv": 0.0, "pairs": 0, "target_tv": float(scale)}
    if scale == 0.0:
        return FlowField(graph, values), report

    goal = -g  # required divergence of K
    src = np.flatnonzero(goal > 0)
    dst = np.flatnonzero(goal < 0)
    w1, plan, psrc, pdst = earth_mover_w1(
        (graph.points[src], goal[src]), (graph.points[dst], -goal[dst]), return_plan=True
    )
    report["kr_norm"] = w1
    base_tube = 3.0 * graph.R if tube_radius is None else tube_radius

    ii, jj = np.nonzero(plan > 1e-14 * scale)
    for i, j in zip(ii, jj):
        a, b = int(src[i]), int(dst[j])
        w = float(plan[i, j])
        path = _tube_path(graph, a, b, base_tube)
        _accumulate_path(graph, path, w, values)
        report["pairs"] += 1
    K = FlowField(graph, values)
    resid = divergence(K) + g
    # exact matched coupling can still miss tiny LP slack; fold it back greedily
    if np.abs(resid).max() > 1e-10 * max(scale, 1.0):
        _repair_residual(graph, resid, base_tube, values)
        K = FlowField(graph, values)
    report["tv"] = float(np.sum(np.abs(values) * graph.edge_lengths))
    report["residual"] = float(np.abs(divergence(K) + g).max())
    return K, report


def _tube_path(graph: EmbeddedGraph, a: int, b: int, tube: float):
    """Euclidean-shortest path from a to b among vertices within `tube` of the
    segment [a, b]; the tube doubles once before giving up."""
    pa, pb = graph.points[a], graph.points[b]
    for attempt in range(2):
        radius = tube * (2.0**attempt)
        mask = _segment_distance(graph.points, pa, pb) <= radius + 1e-12
        mask[a] = mask[b] = True
        keep = np.flatnonzero(mask)
        pos = -np.ones(graph.num_vertices, dtype=np.int64)
        pos[keep] = np.arange(keep.size)
        ke = (pos[graph.edges[:, 0]] >= 0) & (pos[graph.edges[:, 1]] >= 0)
        sub_edges = pos[graph.edges[ke]]
        w = graph.edge_lengths[ke]
        adj = coo_matrix(
            (
                np.concatenate([w, w]),
                (
                    np.concatenate([sub_edges[:, 0], sub_edges[:, 1]]),
                    np.concatenate([sub_edges[:, 1], sub_edges[:, 0]]),
                ),
            ),
            shape=(keep.size, keep.size),
        ).tocsr()
        dmat, pred = dijkstra(adj, directed=False, indices=pos[a], return_predecessors=True)
        if np.isfinite(dmat[pos[b]]):
            path = [pos[b]]
            while path[-1] != pos[a]:
                path.append(int(pred[path[-1]]))
            return [int(keep[i]) for i in path[::-1]]
    raise NoTubePath(f"no path from {a} to {b} within tube radius {2 * tube}")


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = b - a
    denom = float(d @ d)
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ d / denom, 0.0, 1.0)
    proj = a + t[:, None] * d
    return np.linalg.norm(points - proj, axis=1)


def _repair_residual(graph, resid, tube, values):
    """Greedy cleanup of tiny leftover divergence (LP slack).

    resid = div K - goal; a path flow b -> a adds outflow at b and removes it
    at a, so it fixes resid(a) > 0 against resid(b) < 0.
    """
    pos = np.flatnonzero(resid > 0)
    neg = np.flatnonzero(resid < 0)
    for a in pos:
        r = resid[a]
        for b in neg:
            if r <= 0:
                break
            take = min(r, -resid[b])
            if take <= 0:
                continue
            path = _tube_path(graph, int(b), int(a), tube)
            _accumulate_path(graph, path, float(take), values)
            resid[b] += take
            r -= take
        resid[a] = r
