"""Shared optimization utilities: simplex projection, a monotone projected
Barzilai-Borwein loop, and spanning-tree / cycle-space machinery used to
eliminate divergence constraints exactly."""

from __future__ import annotations

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix


def simplex_project(v: np.ndarray, total: float) -> np.ndarray:
    """Euclidean projection onto {x >= 0, sum x = total}."""
    if total <= 0:
        return np.zeros_like(v)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    idx = np.arange(1, v.size + 1)
    cond = u - css / idx > 0
    rho = idx[cond][-1]
    tau = css[rho - 1] / rho
    return np.maximum(v - tau, 0.0)


def projected_bb(
    fun_grad,
    x0: np.ndarray,
    project,
    max_iter: int = 500,
    tol: float = 1e-10,
    step0: float = 1.0,
):
    """Monotone projected gradient descent with Barzilai-Borwein steps.

    fun_grad(x) -> (value, gradient); project(x) -> feasible point. Infinite
    objective values are rejected by the Armijo backtracking, so feasible-but-
    infinite regions (perspective terms) are handled without smoothing.
    Returns (x, value, trace) with a nonincreasing value trace.
    """
    x = project(np.asarray(x0, dtype=float))
    f, g = fun_grad(x)
    trace = [f]
    step = step0
    x_prev, g_prev = None, None
    for _ in range(max_iter):
        if x_prev is not None:
            sx = x - x_prev
            sg = g - g_prev
            denom = float(sx @ sg)
            if denom > 1e-300:
                step = float(sx @ sx) / denom
            step = float(np.clip(step, 1e-12, 1e12))
        accepted = False
        t = step
        for _bt in range(60):
            cand = project(x - t * g)
            d = cand - x
            sqn = float(d @ d)
            if sqn <= 1e-32 * max(1.0, float(x @ x)):
                break
            fc, gc = fun_grad(cand)
            # Armijo on the projection arc
            if fc <= f + 1e-4 * float(g @ d) + 1e-16 or fc < f:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        x_prev, g_prev = x, g
        x, f_new, g = cand, fc, gc
        trace.append(f_new)
        if abs(f - f_new) <= tol * max(abs(f), 1.0):
            f = f_new
            break
        f = f_new
    return x, f, trace


def spanning_forest(num_vertices: int, edges: np.ndarray):
    """BFS spanning forest. Returns (parent vertex, parent edge, root flags,
    order) arrays; parent arrays are -1 at roots."""
    adj = [[] for _ in range(num_vertices)]
    for e, (u, v) in enumerate(edges):
        adj[u].append((v, e))
        adj[v].append((u, e))
    parent = np.full(num_vertices, -1, dtype=np.int64)
    parent_edge = np.full(num_vertices, -1, dtype=np.int64)
    seen = np.zeros(num_vertices, dtype=bool)
    order = []
    roots = []
    for start in range(num_vertices):
        if seen[start]:
            continue
        roots.append(start)
        seen[start] = True
        queue = [start]
        while queue:
            u = queue.pop()
            order.append(u)
            for v, e in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    parent[v] = u
                    parent_edge[v] = e
                    queue.append(v)
    return parent, parent_edge, np.array(roots, dtype=np.int64), np.array(order, dtype=np.int64)


class DivergenceSolver:
    """Solves div J = b on a graph exactly, plus a fundamental cycle basis.

    div J(x) = sum of signed edge values out of x (edge stored (u, v) counts
    +J at u, -J at v). A particular solution is supported on a BFS spanning
    forest; the cycle matrix C spans the divergence-free fields, one column
    per non-tree edge.
    """

    def __init__(self, num_vertices: int, edges: np.ndarray):
        self.num_vertices = int(num_vertices)
        self.edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        parent, parent_edge, roots, order = spanning_forest(self.num_vertices, self.edges)
        self.parent = parent
        self.parent_edge = parent_edge
        self.roots = roots
        self.order = order
        self.tree_edges = parent_edge[parent_edge >= 0]
        in_tree = np.zeros(self.edges.shape[0], dtype=bool)
        in_tree[self.tree_edges] = True
        self.nontree_edges = np.flatnonzero(~in_tree)
        self._component = self._components()
        self._cycles = None

    def _components(self):
        comp = np.full(self.num_vertices, -1, dtype=np.int64)
        for i, r in enumerate(self.roots):
            comp[r] = i
        for u in self.order:
            if comp[u] < 0:
                comp[u] = comp[self.parent[u]]
        return comp

    @property
    def component(self) -> np.ndarray:
        return self._component

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Tree flow with div = b; b must sum to zero per component."""
        b = np.asarray(b, dtype=float)
        J = np.zeros(self.edges.shape[0])
        need = b.copy()
        # sweep leaves-to-roots: each vertex pushes its surplus to the parent
        for u in self.order[::-1]:
            p = self.parent[u]
            if p < 0:
                continue
            e = self.parent_edge[u]
            # outflow at u must absorb need[u]: set edge flow accordingly
            sign = 1.0 if self.edges[e, 0] == u else -1.0
            J[e] += sign * need[u]
            need[p] += need[u]
            need[u] = 0.0
        return J

    def tree_map(self) -> csr_matrix:
        """Sparse T with solve(b) = T @ b (columns built by unit impulses)."""
        cols = []
        for x in range(self.num_vertices):
            b = np.zeros(self.num_vertices)
            comp = self._component[x]
            root = self.roots[comp]
            if root == x:
                cols.append(np.zeros(self.edges.shape[0]))
                continue
            b[x] = 1.0
            b[root] = -1.0
            cols.append(self.solve(b))
        return csr_matrix(np.array(cols).T)

    def cycle_matrix(self) -> csr_matrix:
        """E x C matrix whose columns are fundamental cycle flows."""
        if self._cycles is not None:
            return self._cycles
        rows, cols, vals = [], [], []
        depth = np.zeros(self.num_vertices, dtype=np.int64)
        for u in self.order:
            if self.parent[u] >= 0:
                depth[u] = depth[self.parent[u]] + 1
        for c, e in enumerate(self.nontree_edges):
            u, v = self.edges[e]
            rows.append(e)
            cols.append(c)
            vals.append(1.0)
            # tree path v -> u closes the cycle of the chord u -> v
            a, b = int(u), int(v)
            path_a, path_b = [], []
            while a != b:
                if depth[a] >= depth[b]:
                    path_a.append(a)
                    a = int(self.parent[a])
                else:
                    path_b.append(b)
                    b = int(self.parent[b])
            # chord carries +1 from u to v; return along tree from v up to lca
            # then down to u: edge (child -> parent) traversed from child adds
            # +1 outflow at child when walking child -> parent
            for w in path_b:  # walking v up toward lca: direction w -> parent
                e2 = self.parent_edge[w]
                sign = 1.0 if self.edges[e2, 0] == w else -1.0
                rows.append(e2)
                cols.append(c)
                vals.append(sign)
            for w in path_a:  # walking lca down to u: direction parent -> w
                e2 = self.parent_edge[w]
                sign = -1.0 if self.edges[e2, 0] == w else 1.0
                rows.append(e2)
                cols.append(c)
                vals.append(sign)
        self._cycles = coo_matrix(
            (vals, (rows, cols)), shape=(self.edges.shape[0], self.nontree_edges.size)
        ).tocsr()
        return self._cycles
