import numpy as np
import pytest

from otthom.cell import assemble_cell_problem, competitor_energy, solve_cell
from otthom.errors import ConfigError
from otthom.generators import gen_lattice_nn, gen_random_conductance
from otthom.graph import EmbeddedGraph, Orthotope, rescale_graph
from otthom.means import MeanSpec

from conftest import lattice_patch

UNIT = Orthotope([0.0, 0.0], [1.0, 1.0])


def _rc_graph(eps, seed=11, lam=1.0, Lam=4.0, pad=2):
    inv = int(round(1 / eps))
    g = gen_random_conductance(2, Orthotope([-pad, -pad], [inv + pad, inv + pad]), lam, Lam, seed)
    return rescale_graph(g, eps)


def test_periodic_lattice_exactness():
    for eps in (1 / 4, 1 / 8):
        g = lattice_patch(eps)
        for v, target in (((1, 0), 1.0), ((1, 1), 2.0), ((0.3, -0.4), 0.25)):
            sol = solve_cell(assemble_cell_problem(g, UNIT, v, eps, mode="periodic"), tol=1e-10)
            assert sol.value == pytest.approx(target, rel=1e-9)


def test_zero_vector_gives_zero():
    g = lattice_patch(0.25)
    for mode in ("periodic", "pinned"):
        sol = solve_cell(assemble_cell_problem(g, UNIT, [0.0, 0.0], 0.25, mode=mode), tol=1e-10)
        assert sol.value == pytest.approx(0.0, abs=1e-12)


def test_degenerate_box_rejected():
    g = lattice_patch(0.25)
    with pytest.raises(ConfigError):
        assemble_cell_problem(g, Orthotope([0, 0], [0.1, 1.0]), [1, 0], 0.25)


def test_pinned_assembly_counts():
    eps = 0.25
    g = lattice_patch(eps)
    prob = assemble_cell_problem(g, UNIT, [1.0, 0.0], eps, mode="pinned")
    # closed-box membership: 25 in-box vertices share the budget
    assert prob.mass_idx.size == 25
    # the band R*eps covers the whole unit box at this scale: all pinned
    assert prob.free_edges.size == 0


def test_pinned_solution_invariants():
    eps = 1 / 8
    g = _rc_graph(eps, pad=8)
    prob = assemble_cell_problem(g, UNIT, [1.0, 0.0], eps, mode="pinned")
    sol = solve_cell(prob, tol=1e-9)
    d = sol.diagnostics
    assert d["divergence_residual"] <= 1e-9
    assert d["mass_residual"] <= 1e-10
    assert d["pinned_residual"] == 0.0
    assert d["certificate_ok"]
    assert sol.m.min() >= 0.0
    # value below the competitor and above the coarse lower bound
    comp = competitor_energy(prob) / prob.volume
    assert sol.value <= comp + 1e-9
    assert sol.value >= 1.0 / (2 * 4) - 1e-9


def test_cvxpy_oracle_random_conductance():
    # independent formulation: direct (m, J) variables and quad_over_lin atoms
    cp = pytest.importorskip("cvxpy")
    eps = 1 / 8
    g = _rc_graph(eps, seed=11)
    prob = assemble_cell_problem(g, UNIT, [1.0, 0.0], eps, mode="periodic")
    sol = solve_cell(prob, tol=1e-10)
    E, V = prob.edges.shape[0], prob.num_vertices
    J = cp.Variable(E)
    m = cp.Variable(V, nonneg=True)
    c0 = prob.energy_coeff()
    terms = [
        c0[e] * cp.quad_over_lin(J[e], (m[prob.edges[e, 0]] + m[prob.edges[e, 1]]) / 2)
        for e in range(E)
    ]
    cons = [
        prob.incidence() @ J == 0,
        prob.flux_rows @ J == prob.v * prob.volume,
        cp.sum(m) == prob.volume,
    ]
    cvx = cp.Problem(cp.Minimize(cp.sum(cp.hstack(terms))), cons)
    cvx.solve(solver=cp.CLARABEL)
    assert sol.value == pytest.approx(cvx.value / prob.volume, rel=1e-6)


def test_homogeneity_and_monotonicity():
    eps = 1 / 8
    g = _rc_graph(eps, seed=2)
    base = solve_cell(assemble_cell_problem(g, UNIT, [1, 0], eps, mode="periodic"), tol=1e-10)
    for lam in (0.5, 2.0, 3.0):
        scaled = solve_cell(
            assemble_cell_problem(g, UNIT, [lam, 0], eps, mode="periodic"), tol=1e-10
        )
        assert scaled.value == pytest.approx(lam**2 * base.value, rel=1e-5)
    # sigma-monotonicity: doubling every weight cannot lower the value
    g2 = EmbeddedGraph(n=2, points=g.points, edges=g.edges, sigma=2.0 * g.sigma,
                       means=list(g.means), R=g.R)
    bigger = solve_cell(assemble_cell_problem(g2, UNIT, [1, 0], eps, mode="periodic"), tol=1e-10)
    assert bigger.value >= base.value - 1e-9


def test_anisotropic_sigma_brackets():
    # sigma = 1 on horizontal edges, 4 on vertical: f(e2)/f(e1) in [2, 4]
    eps = 1 / 8
    g0 = lattice_patch(eps)
    sigma = np.where(np.abs(g0.edge_vectors[:, 0]) > 1e-12, 1.0, 4.0)
    g = EmbeddedGraph(n=2, points=g0.points, edges=g0.edges, sigma=sigma,
                      means=list(g0.means), R=g0.R)
    f1 = solve_cell(assemble_cell_problem(g, UNIT, [1, 0], eps, mode="periodic"), tol=1e-10).value
    f2 = solve_cell(assemble_cell_problem(g, UNIT, [0, 1], eps, mode="periodic"), tol=1e-10).value
    assert 2.0 - 1e-6 <= f2 / f1 <= 4.0 + 1e-6


def test_competitor_examples():
    eps = 1 / 4
    g = lattice_patch(eps)
    prob = assemble_cell_problem(g, UNIT, [1.0, 0.0], eps, mode="periodic")
    comp = competitor_energy(prob) / prob.volume
    sol = solve_cell(prob, tol=1e-10)
    assert comp >= sol.value - 1e-12
    assert comp <= 10.0  # C |v|^2 with a modest constant on the lattice
    zero = assemble_cell_problem(g, UNIT, [0.0, 0.0], eps, mode="periodic")
    assert competitor_energy(zero) == 0.0
    # sigma-monotonicity of the explicit competitor formula
    g2 = _rc_graph(eps, seed=4, lam=1.0, Lam=2.0)
    p1 = assemble_cell_problem(g2, UNIT, [1, 0], eps, mode="periodic")
    g3 = EmbeddedGraph(n=2, points=g2.points, edges=g2.edges, sigma=np.ones_like(g2.sigma),
                       means=list(g2.means), R=g2.R)
    p0 = assemble_cell_problem(g3, UNIT, [1, 0], eps, mode="periodic")
    assert competitor_energy(p1) <= 2.0 * competitor_energy(p0) + 1e-12


def test_geometric_mean_cell_runs():
    eps = 1 / 4
    g0 = lattice_patch(eps)
    g = EmbeddedGraph(n=2, points=g0.points, edges=g0.edges, sigma=g0.sigma,
                      means=[MeanSpec("geometric")] * g0.num_edges, R=g0.R)
    sol = solve_cell(assemble_cell_problem(g, UNIT, [1, 0], eps, mode="periodic"), tol=1e-9)
    # uniform masses make every mean equal, so the lattice optimum is still 1
    assert sol.value == pytest.approx(1.0, rel=1e-6)


def test_logarithmic_mean_cell_first_order_path():
    # the non-conic fallback: alternation + joint polish, looser accuracy
    eps = 1 / 4
    g0 = lattice_patch(eps)
    g = EmbeddedGraph(n=2, points=g0.points, edges=g0.edges, sigma=g0.sigma,
                      means=[MeanSpec("logarithmic")] * g0.num_edges, R=g0.R)
    sol = solve_cell(assemble_cell_problem(g, UNIT, [1, 0], eps, mode="periodic"), tol=1e-10)
    assert sol.value == pytest.approx(1.0, rel=1e-6)


def test_pinned_mode_on_voronoi_family():
    # the Dirichlet form runs on non-lattice graphs; the value stays inside
    # the coarse sandwich
    from otthom.generators import gen_perturbed_voronoi

    eps = 1 / 4
    gv = gen_perturbed_voronoi(Orthotope([-4, -4], [8, 8]), 0.2, seed=8)
    gs = rescale_graph(gv, eps)
    prob = assemble_cell_problem(gs, UNIT, [1.0, 0.0], eps, mode="pinned")
    sol = solve_cell(prob, tol=1e-8)
    maxdeg = int(gs.degrees.max())
    assert sol.value <= competitor_energy(prob) / prob.volume + 1e-9
    assert sol.value > 0
    assert sol.diagnostics["divergence_residual"] <= 1e-9


def test_pinned_divergence_free_at_all_in_box_vertices():
    # not only where constraints were written: fully pinned in-box vertices
    # inherit exact zero divergence from the uniform representative
    from otthom.energy import FlowField, divergence
    from otthom.generators import gen_perturbed_voronoi

    eps = 1 / 4
    gv = gen_perturbed_voronoi(Orthotope([-4, -4], [8, 8]), 0.2, seed=8)
    gs = rescale_graph(gv, eps)
    prob = assemble_cell_problem(gs, UNIT, [1.0, 0.0], eps, mode="pinned")
    sol = solve_cell(prob, tol=1e-8)
    J = sol.flow_on_graph()
    div = divergence(J)
    in_q = np.flatnonzero(gs.contains_vertices(UNIT))
    assert np.abs(div[in_q]).max() <= 1e-9


def test_pinned_density_estimate_trend():
    # the Dirichlet boundary layer decays toward the periodic value 1
    from otthom.density import estimate_density
    from otthom.generators import GeneratorSpec

    fam = GeneratorSpec(kind="latticeNN", n=2)
    est = estimate_density(fam, [1.0, 0.0], UNIT, [1 / 4, 1 / 8, 1 / 16],
                           tol=1e-9, mode="pinned")
    vals = [est.mean[e] for e in (1 / 4, 1 / 8, 1 / 16)]
    assert vals[0] > vals[1] > vals[2] > 1.0
    assert vals[2] < 1.2


def test_logarithmic_mean_pinned_smoke():
    # the pinned first-order fallback stays feasible and certified
    eps = 1 / 4
    g0 = lattice_patch(eps)
    g = EmbeddedGraph(n=2, points=g0.points, edges=g0.edges, sigma=g0.sigma,
                      means=[MeanSpec("logarithmic")] * g0.num_edges, R=g0.R)
    sol = solve_cell(assemble_cell_problem(g, UNIT, [1, 0], eps, mode="pinned"), tol=1e-8)
    assert sol.diagnostics["certificate_ok"]
    assert sol.diagnostics["divergence_residual"] <= 1e-9
    assert sol.value > 0
