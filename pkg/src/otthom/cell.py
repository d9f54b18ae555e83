"""Assembly and solution of the convex cell problem that defines the
effective energy density.

Two boundary modes are supported:

* "pinned": the flow equals the uniform representative of v on every edge
  within R*eps of the complement of Q, is divergence-free inside, and the
  masses of vertices in (closed) Q share the budget vol(Q), with free
  nonnegative masses on outside vertices touched by counted edges. This is
  the mode the recovery construction glues against.
* "periodic": for lattice-aligned boxes, the quotient (torus) problem:
  divergence-free everywhere, prescribed mean flux sum J * (y - x) = v vol(Q),
  mass budget vol(Q) over the quotient vertices. On Z^n with constant weights
  its value is exactly |v|^2 at every eps, which is what the lattice
  exactness and orthotope-invariance checks exercise.

Both normalise mass to unit density (sum = vol(Q), the reading under which
the value is intensive and box-independent); the value reported is
F(m*, J*, Q) / vol(Q).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix, bmat, csr_matrix, diags
from scipy.sparse.linalg import spsolve

from .errors import ConfigError, Infeasible
from .energy import FlowField, MassDistribution
from .graph import EmbeddedGraph, Orthotope, boundary_edge_set, segment_box_cut
from .means import MeanSpec, eval_mean, mean_partials
from .optim import DivergenceSolver, projected_bb, simplex_project
from .uniform_flow import build_lattice_map, uniform_representative


@dataclass
class CellProblem:
    """Discretized cell problem; arrays index a private vertex/edge set."""

    mode: str
    Q: Orthotope
    v: np.ndarray
    eps: float
    n: int
    num_vertices: int
    edges: np.ndarray  # [E, 2]
    sigma: np.ndarray
    means: list
    lengths: np.ndarray
    disp: np.ndarray  # [E, n] displacement vectors (wrap-corrected)
    cut: np.ndarray  # energy weight per edge (cut fraction; 1 in periodic mode)
    pinned_edges: np.ndarray
    pinned_values: np.ndarray
    free_edges: np.ndarray
    boundary_flow: np.ndarray  # feasible reference flow on every edge
    div_vertices: np.ndarray  # vertices carrying a divergence constraint
    mass_idx: np.ndarray  # vertices inside Q sharing the budget
    free_mass_idx: np.ndarray  # outside vertices with free nonnegative mass
    flux_rows: np.ndarray | None  # [n, E] displacement matrix (periodic)
    graph: EmbeddedGraph | None = None
    graph_vertex_of: np.ndarray | None = None  # problem vertex -> graph vertex
    graph_edge_of: np.ndarray | None = None  # problem edge -> graph edge
    meta: dict = field(default_factory=dict)

    @property
    def volume(self) -> float:
        return self.Q.volume()

    def incidence(self) -> csr_matrix:
        e = np.arange(self.edges.shape[0])
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        cols = np.concatenate([e, e])
        vals = np.concatenate([np.ones(e.size), -np.ones(e.size)])
        return coo_matrix((vals, (rows, cols)), shape=(self.num_vertices, e.size)).tocsr()

    def energy_coeff(self) -> np.ndarray:
        return self.sigma * self.lengths**2 * self.cut

    def theta(self, m: np.ndarray) -> np.ndarray:
        mu = m[self.edges[:, 0]]
        mv = m[self.edges[:, 1]]
        out = np.empty(self.edges.shape[0])
        for spec, idx in self._mean_groups():
            out[idx] = eval_mean(spec, mu[idx], mv[idx])
        return out

    def theta_partials(self, m: np.ndarray):
        mu = m[self.edges[:, 0]]
        mv = m[self.edges[:, 1]]
        du = np.empty(self.edges.shape[0])
        dv = np.empty(self.edges.shape[0])
        for spec, idx in self._mean_groups():
            a, b = mean_partials(spec, mu[idx], mv[idx])
            du[idx] = a
            dv[idx] = b
        return du, dv

    def _mean_groups(self):
        if "mean_groups" not in self.meta:
            groups = {}
            for e, spec in enumerate(self.means):
                key = (spec.kind, spec.lam if spec.kind == "weightedArithmetic" else None)
                groups.setdefault(key, []).append(e)
            self.meta["mean_groups"] = [
                (MeanSpec(kind=k, lam=l if l is not None else 0.5), np.array(ix, dtype=np.int64))
                for (k, l), ix in groups.items()
            ]
        return self.meta["mean_groups"]

    def energy_value(self, m: np.ndarray, J: np.ndarray) -> float:
        c = self.energy_coeff() * J**2
        theta = self.theta(m)
        live = c != 0.0
        if np.any(live & (theta <= 0.0)):
            return float("inf")
        return float(np.sum(c[live] / theta[live]))


def assemble_cell_problem(
    graph: EmbeddedGraph,
    Q: Orthotope,
    v,
    eps: float,
    mode: str = "pinned",
) -> CellProblem:
    """Build the cell problem for vector v on the rescaled graph.

    `graph` is the already-rescaled graph (vertices at scale eps, R = R*eps).
    """
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.size != graph.n:
        raise ConfigError("direction v must have the graph dimension")
    if Q.sides.min() < eps:
        raise ConfigError("degenerate cell problem: box side smaller than eps")
    if mode == "pinned":
        return _assemble_pinned(graph, Q, v, eps)
    if mode == "periodic":
        return _assemble_periodic(graph, Q, v, eps)
    raise ConfigError(f"unknown cell mode {mode!r}")


def _assemble_pinned(graph: EmbeddedGraph, Q: Orthotope, v, eps: float) -> CellProblem:
    Rd = graph.R / eps
    grow = (2.0 * Rd + 2.0) * eps
    # the map needs a halo beyond Q but cannot reach past the supplied patch
    bb_lo = graph.points.min(axis=0)
    bb_hi = graph.points.max(axis=0)
    lo = np.maximum(Q.lower - grow, bb_lo - 1e-9)
    hi = np.minimum(Q.upper + grow, bb_hi + 1e-9)
    map_box = Orthotope(lo, hi)
    lmap = build_lattice_map(graph, eps, map_box)
    Jv_full = uniform_representative(lmap, v)

    keep_v = np.flatnonzero(graph.contains_vertices(map_box))
    pos = -np.ones(graph.num_vertices, dtype=np.int64)
    pos[keep_v] = np.arange(keep_v.size)
    keep_e = np.flatnonzero((pos[graph.edges[:, 0]] >= 0) & (pos[graph.edges[:, 1]] >= 0))
    edges = pos[graph.edges[keep_e]]

    p0 = graph.points[graph.edges[keep_e, 0]]
    p1 = graph.points[graph.edges[keep_e, 1]]
    cut = segment_box_cut(p0, p1, Q) / graph.edge_lengths[keep_e]

    pinned_global = set(boundary_edge_set(graph, Q, eps).tolist())
    pinned_mask = np.array([e in pinned_global for e in keep_e])
    free_edges = np.flatnonzero(~pinned_mask)
    pinned_edges = np.flatnonzero(pinned_mask)

    # divergence is constrained wherever a free edge could change it
    touched = np.zeros(keep_v.size, dtype=bool)
    touched[edges[free_edges].ravel()] = True
    div_vertices = np.flatnonzero(touched)

    inside = graph.contains_vertices(Q)[keep_v]
    mass_idx = np.flatnonzero(inside)
    energy_vertex = np.zeros(keep_v.size, dtype=bool)
    pos_cut = cut > 0
    energy_vertex[edges[pos_cut].ravel()] = True
    free_mass_idx = np.flatnonzero(energy_vertex & ~inside)

    return CellProblem(
        mode="pinned",
        Q=Q,
        v=v,
        eps=eps,
        n=graph.n,
        num_vertices=keep_v.size,
        edges=edges,
        sigma=graph.sigma[keep_e].copy(),
        means=[graph.means[e] for e in keep_e],
        lengths=graph.edge_lengths[keep_e].copy(),
        disp=graph.edge_vectors[keep_e].copy(),
        cut=cut,
        pinned_edges=pinned_edges,
        pinned_values=Jv_full.values[keep_e][pinned_edges].copy(),
        free_edges=free_edges,
        boundary_flow=Jv_full.values[keep_e].copy(),
        div_vertices=div_vertices,
        mass_idx=mass_idx,
        free_mass_idx=free_mass_idx,
        flux_rows=None,
        graph=graph,
        graph_vertex_of=keep_v,
        graph_edge_of=keep_e,
    )


def _assemble_periodic(graph: EmbeddedGraph, Q: Orthotope, v, eps: float) -> CellProblem:
    if Q.rotation is not None:
        raise ConfigError("periodic mode needs an axis-aligned box")
    sides = Q.sides
    ratios = sides / eps
    if np.any(np.abs(ratios - np.round(ratios)) > 1e-9):
        raise ConfigError("periodic mode needs box sides divisible by eps")
    counts = np.round(ratios).astype(np.int64)

    # quotient vertices: half-open membership, keyed by integer coordinates
    rel = (graph.points - Q.lower[None, :]) / eps
    keys = np.round(rel).astype(np.int64)
    if np.abs(rel - keys).max() > 1e-9:
        raise ConfigError("periodic mode needs a lattice-aligned graph")
    in_q = np.all((keys >= 0) & (keys < counts[None, :]), axis=1)
    qkeys = keys[in_q]
    strides = np.cumprod(np.concatenate([[1], counts[::-1]]))[:-1][::-1]
    flat_of_vertex = np.full(graph.num_vertices, -1, dtype=np.int64)
    flat_of_vertex[in_q] = qkeys @ strides
    order = np.argsort(flat_of_vertex[in_q])
    qvert_flat = np.sort(flat_of_vertex[in_q])
    lookup = -np.ones(int(np.prod(counts)), dtype=np.int64)
    lookup[qvert_flat] = np.arange(qvert_flat.size)
    if qvert_flat.size != int(np.prod(counts)):
        # sparse graphs are fine; just require distinct residues
        if np.unique(qvert_flat).size != qvert_flat.size:
            raise ConfigError("two vertices share a residue class modulo the box")

    # representative edges: stored tail inside Q after orienting along +axis
    vert_in_q = np.flatnonzero(in_q)
    rep_edges, disp_list, sig_list, mean_list = [], [], [], []
    for e in range(graph.num_edges):
        u, gvec = graph.edges[e], graph.edge_vectors[e]
        a, b = int(u[0]), int(u[1])
        vec = gvec.copy()
        ax = int(np.argmax(np.abs(vec)))
        if abs(abs(vec[ax]) - eps) > 1e-9 * eps or np.any(
            np.abs(np.delete(vec, ax)) > 1e-9 * eps
        ):
            raise ConfigError("periodic mode needs nearest-neighbor lattice edges")
        if vec[ax] < 0:
            a, b = b, a
            vec = -vec
        if not in_q[a]:
            continue
        ka = keys[a]
        kb = ka.copy()
        kb[ax] += 1
        kb_mod = kb % counts
        ra = lookup[int(ka @ strides)]
        rb = lookup[int(kb_mod @ strides)]
        if ra < 0 or rb < 0:
            continue
        rep_edges.append((ra, rb))
        disp_list.append(vec)
        sig_list.append(graph.sigma[e])
        mean_list.append(graph.means[e])
    edges = np.array(rep_edges, dtype=np.int64).reshape(-1, 2)
    if edges.size == 0:
        raise ConfigError("no edges inside the periodic box")
    disp = np.array(disp_list)
    lengths = np.linalg.norm(disp, axis=1)
    E = edges.shape[0]

    boundary_flow = eps ** (graph.n - 1) * (disp / lengths[:, None]) @ v

    return CellProblem(
        mode="periodic",
        Q=Q,
        v=v,
        eps=eps,
        n=graph.n,
        num_vertices=qvert_flat.size,
        edges=edges,
        sigma=np.array(sig_list),
        means=mean_list,
        lengths=lengths,
        disp=disp,
        cut=np.ones(E),
        pinned_edges=np.zeros(0, dtype=np.int64),
        pinned_values=np.zeros(0),
        free_edges=np.arange(E),
        boundary_flow=boundary_flow,
        div_vertices=np.arange(qvert_flat.size),
        mass_idx=np.arange(qvert_flat.size),
        free_mass_idx=np.zeros(0, dtype=np.int64),
        flux_rows=disp.T.copy(),
        graph=graph,
        graph_vertex_of=vert_in_q[order],
        graph_edge_of=None,
    )


@dataclass
class CellSolution:
    problem: CellProblem
    m: np.ndarray
    J: np.ndarray
    energy: float
    value: float  # f_eps(v) = energy / vol(Q)
    diagnostics: dict

    def mass_on_graph(self) -> MassDistribution:
        if self.problem.graph is None or self.problem.graph_vertex_of is None:
            raise ConfigError("solution has no originating graph")
        vals = np.zeros(self.problem.graph.num_vertices)
        vals[self.problem.graph_vertex_of] = self.m
        return MassDistribution(self.problem.graph, vals)

    def flow_on_graph(self) -> FlowField:
        if self.problem.graph is None or self.problem.graph_edge_of is None:
            raise ConfigError("solution flow is not liftable to the graph")
        vals = np.zeros(self.problem.graph.num_edges)
        vals[self.problem.graph_edge_of] = self.J
        return FlowField(self.problem.graph, vals)


def competitor_mass(problem: CellProblem, J: np.ndarray) -> np.ndarray:
    """The explicit upper-bound mass: per vertex, the incident |J| weighted by
    cut length, normalized so the in-Q part meets the budget."""
    w = np.abs(J) * problem.cut * problem.lengths
    m = np.zeros(problem.num_vertices)
    np.add.at(m, problem.edges[:, 0], w)
    np.add.at(m, problem.edges[:, 1], w)
    inside = m[problem.mass_idx].sum()
    if inside <= 0:
        m = np.zeros(problem.num_vertices)
        m[problem.mass_idx] = problem.volume / problem.mass_idx.size
        return m
    scale = problem.volume / inside
    out = np.zeros(problem.num_vertices)
    out[problem.mass_idx] = m[problem.mass_idx] * scale
    out[problem.free_mass_idx] = m[problem.free_mass_idx] * scale
    return out


def competitor_energy(problem: CellProblem) -> float:
    """Energy of the explicit competitor pair (uniform representative flow,
    incident-flux mass); an upper bound for the solved optimum."""
    J = problem.boundary_flow
    m = competitor_mass(problem, J)
    return problem.energy_value(m, J)


def _j_step(problem: CellProblem, m: np.ndarray, J: np.ndarray) -> np.ndarray:
    """Minimize the quadratic energy over divergence-feasible flows at fixed m.

    The feasible set is parametrized as J = J_current + C w over fundamental
    cycles of the free-edge graph; periodic flux constraints enter as explicit
    rows of a small saddle system.
    """
    free = problem.free_edges
    if free.size == 0:
        return J
    c = problem.energy_coeff()
    theta = problem.theta(m)
    with np.errstate(divide="ignore"):
        w = np.where(theta > 0, c / np.where(theta > 0, theta, 1.0), np.inf)
    wmax = w[np.isfinite(w) & (w > 0)]
    scale = wmax.max() if wmax.size else 1.0
    w = np.clip(np.nan_to_num(w, posinf=1e14 * scale), 1e-12 * scale, 1e14 * scale)

    solver = _free_cycles(problem)
    C = solver.cycle_matrix()
    if C.shape[1] == 0:
        return J
    Cf = C  # cycles live on free-edge indexing
    w_f = w[free]
    CtW = Cf.T.multiply(w_f)
    H = (CtW @ Cf).tocsc()
    rhs = -np.asarray(CtW @ J[free]).ravel()
    if problem.flux_rows is not None:
        # cycles may wind around the torus; keep the mean flux pinned
        D = csr_matrix(problem.flux_rows[:, free])
        DC = (D @ Cf).toarray()
        live = np.flatnonzero(np.abs(DC).sum(axis=1) > 1e-12)
        if live.size:
            DCl = csr_matrix(DC[live])
            kkt = bmat([[H, DCl.T], [DCl, None]], format="csc")
            b = np.concatenate([rhs, np.zeros(live.size)])
            sol = spsolve(kkt, b)
            wvec = sol[: C.shape[1]]
        else:
            wvec = spsolve(H + 1e-14 * scale * diags(np.ones(H.shape[0])), rhs)
    else:
        wvec = spsolve(H + 1e-14 * scale * diags(np.ones(H.shape[0])), rhs)
    J_new = J.copy()
    J_new[free] = J[free] + np.asarray(Cf @ wvec).ravel()
    return J_new


def _free_cycles(problem: CellProblem) -> DivergenceSolver:
    if "free_cycles" not in problem.meta:
        problem.meta["free_cycles"] = DivergenceSolver(
            problem.num_vertices, problem.edges[problem.free_edges]
        )
    return problem.meta["free_cycles"]


def _m_step(problem: CellProblem, m: np.ndarray, J: np.ndarray, tol: float):
    c = problem.energy_coeff() * J**2
    live = np.flatnonzero(c > 0)
    if live.size == 0:
        return m, 0.0
    cl = c[live]
    eu = problem.edges[live, 0]
    ev = problem.edges[live, 1]
    mass_idx = problem.mass_idx
    free_idx = problem.free_mass_idx
    var_idx = np.concatenate([mass_idx, free_idx])
    nmass = mass_idx.size

    base = m.copy()

    def unpack(x):
        mm = base.copy()
        mm[var_idx] = x
        return mm

    def fun_grad(x):
        mm = unpack(x)
        theta = problem.theta(mm)[live]
        bad = theta <= 0
        if np.any(bad):
            return float("inf"), np.zeros_like(x)
        val = float(np.sum(cl / theta))
        du, dv = problem.theta_partials(mm)
        gu = -cl / theta**2 * du[live]
        gv = -cl / theta**2 * dv[live]
        g_full = np.zeros(problem.num_vertices)
        np.add.at(g_full, eu, gu)
        np.add.at(g_full, ev, gv)
        return val, g_full[var_idx]

    def project(x):
        y = x.copy()
        y[:nmass] = simplex_project(x[:nmass], problem.volume)
        y[nmass:] = np.maximum(x[nmass:], 0.0)
        return y

    x0 = m[var_idx]
    x, fval, _ = projected_bb(fun_grad, x0, project, max_iter=300, tol=tol)
    return unpack(x), fval


_SOCP_KINDS = {"arithmetic", "weightedArithmetic", "harmonic", "geometric", "minimum"}


def _socp_solve(problem: CellProblem, tol: float):
    """Second-order-cone solve of the cell problem for mean families whose
    perspective terms are cone-representable (all built-in kinds except the
    logarithmic mean). Returns (m, J, energy) or None when not applicable or
    the conic solver fails; the caller keeps first-order fallbacks.
    """
    kinds = {spec.kind for spec in problem.means}
    if not kinds <= _SOCP_KINDS:
        return None
    try:
        import cvxpy as cp
    except ImportError:  # pragma: no cover - cvxpy is a hard dependency
        return None

    E = problem.edges.shape[0]
    V = problem.num_vertices
    c0 = problem.energy_coeff()
    live = np.flatnonzero(c0 > 0)
    J = cp.Variable(E)
    mvar = cp.Variable(V, nonneg=True)
    cons = []
    if problem.pinned_edges.size:
        cons.append(J[problem.pinned_edges] == problem.pinned_values)
    inc = problem.incidence()
    if problem.div_vertices.size:
        cons.append(inc[problem.div_vertices] @ J == 0)
    if problem.flux_rows is not None:
        cons.append(problem.flux_rows @ J == problem.v * problem.volume)
    cons.append(cp.sum(mvar[problem.mass_idx]) == problem.volume)
    fixed_zero = np.ones(V, dtype=bool)
    fixed_zero[problem.mass_idx] = False
    fixed_zero[problem.free_mass_idx] = False
    if np.any(fixed_zero):
        cons.append(mvar[np.flatnonzero(fixed_zero)] == 0)

    def rotated(tvec, xvec, yvec):
        # t*y >= x^2, t,y >= 0  as an SOC block
        return cp.SOC(tvec + yvec, cp.vstack([2.0 * xvec, tvec - yvec]), axis=0)

    objective_terms = []
    by_kind: dict = {}
    for e in live:
        by_kind.setdefault(problem.means[e].kind, []).append(e)
    for kind, idx_list in by_kind.items():
        idx = np.array(idx_list, dtype=np.int64)
        u = problem.edges[idx, 0]
        w = problem.edges[idx, 1]
        root_c = np.sqrt(c0[idx])
        x = cp.multiply(root_c, J[idx])
        if kind in ("arithmetic", "weightedArithmetic"):
            lam = np.array(
                [problem.means[e].lam if problem.means[e].kind == "weightedArithmetic" else 0.5
                 for e in idx]
            )
            theta = cp.multiply(lam, mvar[u]) + cp.multiply(1.0 - lam, mvar[w])
            t = cp.Variable(idx.size, nonneg=True)
            cons.append(rotated(t, x, theta))
            objective_terms.append(cp.sum(t))
        elif kind == "harmonic":
            # J^2/theta_harm = (J^2/r + J^2/s)/2
            t1 = cp.Variable(idx.size, nonneg=True)
            t2 = cp.Variable(idx.size, nonneg=True)
            cons.append(rotated(t1, x, mvar[u]))
            cons.append(rotated(t2, x, mvar[w]))
            objective_terms.append(0.5 * cp.sum(t1) + 0.5 * cp.sum(t2))
        else:  # geometric or minimum: hypograph variable under the mean
            s = cp.Variable(idx.size, nonneg=True)
            if kind == "geometric":
                cons.append(rotated(mvar[u], s, mvar[w]))
            else:
                cons.append(s <= mvar[u])
                cons.append(s <= mvar[w])
            t = cp.Variable(idx.size, nonneg=True)
            cons.append(rotated(t, x, s))
            objective_terms.append(cp.sum(t))

    prob = cp.Problem(cp.Minimize(cp.sum(objective_terms) if objective_terms else 0.0), cons)
    try:
        import warnings

        with warnings.catch_warnings():
            warnings.filterwarnings("ignore", message="Solution may be inaccurate")
            prob.solve(
                solver=cp.CLARABEL,
                tol_gap_abs=1e-12,
                tol_gap_rel=1e-11,
                tol_feas=1e-11,
                max_iter=200,
            )
    except cp.SolverError:  # pragma: no cover - Clarabel is bundled with cvxpy
        return None
    if prob.status not in ("optimal", "optimal_inaccurate"):
        return None
    m_out = np.maximum(np.asarray(mvar.value, dtype=float).reshape(-1), 0.0)
    J_out = np.asarray(J.value, dtype=float).reshape(-1)
    # re-project the tiny conic slack onto the exact constraint set: masses by
    # rescaling the budget, the flow through the cycle-space parametrization
    s = m_out[problem.mass_idx].sum()
    if s > 0:
        m_out[problem.mass_idx] *= problem.volume / s
    J_exact = problem.boundary_flow.copy()
    free = problem.free_edges
    if free.size:
        C = _free_cycles(problem).cycle_matrix()
        if C.shape[1]:
            from scipy.sparse.linalg import lsqr

            w = lsqr(C, J_out[free] - J_exact[free], atol=1e-14, btol=1e-14)[0]
            if problem.flux_rows is not None:
                D = csr_matrix(problem.flux_rows[:, free])
                DC = np.asarray((D @ C).todense())
                lv = np.flatnonzero(np.abs(DC).sum(axis=1) > 1e-12)
                if lv.size:
                    DCl = DC[lv]
                    w = w - DCl.T @ (np.linalg.pinv(DCl @ DCl.T) @ (DCl @ w))
            J_exact[free] = J_exact[free] + np.asarray(C @ w).ravel()
    _revive_dead_masses(problem, m_out, J_exact)
    return m_out, J_exact, problem.energy_value(m_out, J_exact)


def _revive_dead_masses(problem: CellProblem, m: np.ndarray, J: np.ndarray):
    """Clipping conic masses to zero can leave flow dust over a vanishing
    mean; shift a budget-neutral 1e-13 of mass onto those vertices so the
    point evaluates at its true (finite) energy."""
    c = problem.energy_coeff() * J**2
    theta = problem.theta(m)
    bad = np.flatnonzero((c > 0) & (theta <= 0))
    if bad.size == 0:
        return
    verts = np.unique(problem.edges[bad].ravel())
    verts = verts[m[verts] <= 0]
    if verts.size == 0:
        return
    delta = 1e-13 * problem.volume / verts.size
    in_budget = np.isin(verts, problem.mass_idx)
    donor = problem.mass_idx[int(np.argmax(m[problem.mass_idx]))]
    m[verts] += delta
    m[donor] -= delta * int(in_budget.sum())


def _joint_polish(problem: CellProblem, m: np.ndarray, J: np.ndarray, tol: float,
                  max_iter: int = 4000):
    """Projected gradient descent on the joint (mass, cycle-coefficient)
    parametrization. Two-block alternation can corner against the simplex
    boundary a few percent above the optimum; the joint descent cannot."""
    free = problem.free_edges
    solver = _free_cycles(problem)
    C = solver.cycle_matrix()
    nc = C.shape[1]
    mass_idx = problem.mass_idx
    free_idx = problem.free_mass_idx
    var_idx = np.concatenate([mass_idx, free_idx])
    nmass = mass_idx.size
    nvar = var_idx.size
    base = m.copy()
    J_ref = J.copy()
    c0 = problem.energy_coeff()
    eu, ev = problem.edges[:, 0], problem.edges[:, 1]

    flux_proj = None
    if problem.flux_rows is not None and nc:
        DC = np.asarray((csr_matrix(problem.flux_rows[:, free]) @ C).todense())
        live = np.flatnonzero(np.abs(DC).sum(axis=1) > 1e-12)
        if live.size:
            DCl = DC[live]
            gram_inv = np.linalg.pinv(DCl @ DCl.T)

            def flux_proj(w):
                return w - DCl.T @ (gram_inv @ (DCl @ w))

    def assemble(x):
        mm = base.copy()
        mm[var_idx] = x[:nvar]
        JJ = J_ref.copy()
        if nc:
            JJ[free] = J_ref[free] + C @ x[nvar:]
        return mm, JJ

    def fun_grad(x):
        mm, JJ = assemble(x)
        theta = problem.theta(mm)
        c = c0 * JJ**2
        live_e = c != 0.0
        if np.any(live_e & (theta <= 0.0)):
            return float("inf"), np.zeros_like(x)
        safe = theta > 0
        term = np.zeros_like(c)
        term[safe] = c[safe] / theta[safe]
        val = float(term.sum())
        gJ = np.zeros_like(JJ)
        gJ[safe] = 2.0 * c0[safe] * JJ[safe] / theta[safe]
        du, dv = problem.theta_partials(mm)
        dtheta = np.zeros_like(theta)
        dtheta[safe] = -term[safe] / theta[safe]
        gm = np.zeros(problem.num_vertices)
        np.add.at(gm, eu, dtheta * du)
        np.add.at(gm, ev, dtheta * dv)
        parts = [gm[var_idx]]
        if nc:
            parts.append(np.asarray(C.T @ gJ[free]).ravel())
        return val, np.concatenate(parts)

    def project(x):
        y = x.copy()
        y[:nmass] = simplex_project(x[:nmass], problem.volume)
        y[nmass:nvar] = np.maximum(x[nmass:nvar], 0.0)
        if nc and flux_proj is not None:
            y[nvar:] = flux_proj(x[nvar:])
        return y

    x0 = np.concatenate([m[var_idx], np.zeros(nc)])
    x, fval, trace = projected_bb(fun_grad, x0, project, max_iter=max_iter, tol=tol)
    mm, JJ = assemble(x)
    return mm, JJ, fval, len(trace) - 1


def solve_cell(problem: CellProblem, tol: float = 1e-9, max_outer: int = 500) -> CellSolution:
    """Minimize F over the constraint set: alternating convex minimization
    (quadratic flow step over the cycle space, projected-gradient mass step
    over the budgeted simplex) warm-starts a joint projected-gradient phase
    on the same exact-feasibility parametrization.

    The returned value carries a competitor certificate (never above the
    explicit upper bound by more than tol) and feasibility residuals in the
    diagnostics.
    """
    J = problem.boundary_flow.copy()
    m = competitor_mass(problem, J)
    f_comp = problem.energy_value(m, J)
    best_f = f_comp
    best = (m.copy(), J.copy())
    f_prev = f_comp
    status = "converged"
    iters = 0
    # the conic phase will finish SOC-representable problems; alternation is
    # then only a cheap warm start and fallback
    conic_ready = {spec.kind for spec in problem.means} <= _SOCP_KINDS
    alt_outer = 3 if conic_ready else min(max_outer, 40)
    for iters in range(1, alt_outer + 1):
        J_new = _j_step(problem, m, J)
        f_after_j = problem.energy_value(m, J_new)
        if f_after_j <= f_prev * (1 + 1e-12) + 1e-300:
            J = J_new
        else:  # clipped weights can very occasionally misstep; keep the old flow
            f_after_j = f_prev
        m, f_after_m = _m_step(problem, m, J, tol)
        if f_after_m < best_f:
            best_f = f_after_m
            best = (m.copy(), J.copy())
        if abs(f_prev - f_after_m) <= tol * max(abs(f_after_m), 1.0):
            f_prev = f_after_m
            break
        f_prev = f_after_m
    m, J = best
    socp = _socp_solve(problem, tol)
    if socp is not None:
        m3, J3, f_socp = socp
        if f_socp < best_f:
            best_f = f_socp
            best = (m3, J3)
    else:
        m2, J2, f_joint, joint_iters = _joint_polish(problem, m, J, tol)
        iters += joint_iters
        if f_joint < best_f:
            best_f = f_joint
            best = (m2, J2)
        if iters >= max_outer:
            status = "max_iterations"
    m, J = best
    energy = problem.energy_value(m, J)

    inc = problem.incidence()
    div = np.asarray(inc @ J).ravel()
    div_res = float(np.abs(div[problem.div_vertices]).max()) if problem.div_vertices.size else 0.0
    flux_res = 0.0
    if problem.flux_rows is not None:
        flux = problem.flux_rows @ J
        flux_res = float(np.abs(flux - problem.v * problem.volume).max())
    mass_res = float(abs(m[problem.mass_idx].sum() - problem.volume))
    pin_res = (
        float(np.abs(J[problem.pinned_edges] - problem.pinned_values).max())
        if problem.pinned_edges.size
        else 0.0
    )
    # clamp numerically-dead masses at output only
    floor = 1e-14 / max(problem.num_vertices, 1)
    m = np.where(m < floor, 0.0, m)

    diagnostics = {
        "iterations": iters,
        "status": status,
        "divergence_residual": div_res,
        "flux_residual": flux_res,
        "mass_residual": mass_res,
        "pinned_residual": pin_res,
        "competitor_energy": f_comp,
        "certificate_ok": bool(energy <= f_comp + tol * max(1.0, abs(f_comp))),
    }
    if div_res > 1e-9 or mass_res > 1e-9:
        raise Infeasible(f"solver produced an infeasible point: {diagnostics}")
    return CellSolution(
        problem=problem,
        m=m,
        J=J,
        energy=energy,
        value=energy / problem.volume,
        diagnostics=diagnostics,
    )
