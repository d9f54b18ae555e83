import numpy as np
import pytest
from scipy.integrate import quad

from otthom.errors import CEResidualTooLarge, NegativeDepot
from otthom.recovery import (
    RecoveryParams,
    SmoothCurveSpec,
    assemble_recovery,
    backbone_and_depots,
    discretize_continuity,
)
from otthom.generators import gen_lattice_nn
from otthom.graph import Orthotope, rescale_graph
from otthom.uniform_flow import build_lattice_map


def _static_spec(n=2):
    width = 1.0

    def profile(X):
        out = np.ones(X.shape[0])
        for i in range(n):
            s = X[:, i]
            out = out * np.where(
                np.abs(s) <= width / 2, np.cos(np.pi * s / width) ** 2 * (2 / width), 0.0
            )
        return out

    return SmoothCurveSpec(
        n=n, T=1.0, M=2.0,
        rho=lambda t, X: profile(np.asarray(X)),
        j=lambda t, X: np.zeros((np.asarray(X).shape[0], n)),
        lip_j=0.0,
    )


BUMP = SmoothCurveSpec.translating_bump(n=2, velocity=(1.0, 0.0), width=1.0, T=1.0)


def test_smooth_spec_ce_residual():
    assert BUMP.ce_residual() <= 1e-6
    assert _static_spec().ce_residual() <= 1e-12


def test_discretize_static_spec():
    cd = discretize_continuity(_static_spec(), 1 / 2, 1 / 2)
    assert np.abs(cd.face_flux).max() == pytest.approx(0.0, abs=1e-12)
    assert cd.pre_residual <= 1e-12
    assert np.ptp(cd.rho.sum(axis=1)) <= 1e-12
    assert cd.rho[0].sum() == pytest.approx(1.0, abs=1e-9)


def test_discretize_translation_face_flux_oracle():
    # face flux between two cubes = time-averaged integral of j . n over the
    # face; cross-check one interior face against 1-d quadrature
    h, delta = 1 / 4, 1 / 2
    cd = discretize_continuity(BUMP, h, delta)
    grid = cd.grid
    # face between cube (0,-1) and (1,-1) (x-normal at x = 1/2, y in [-1/2,0))
    za = grid.row((0, -1))
    zb = grid.row((1, -1))
    f = next(
        i for i, (a, b) in enumerate(grid.faces)
        if {int(a), int(b)} == {za, zb} and grid.face_axis[i] == 0
    )
    v = np.array([1.0, 0.0])

    def rho_pt(t, x, y):
        return BUMP.rho(t, np.array([[x, y]]))[0]

    k = 1  # time slab [h, 2h]
    def integrand(t):
        inner, _ = quad(lambda y: rho_pt(t, delta, y), -delta, 0.0, limit=100)
        return inner

    tot, _ = quad(integrand, k * h, (k + 1) * h, limit=100)
    oracle = tot / h
    assert cd.face_flux[k, f] == pytest.approx(oracle, abs=1e-6)


def test_discretize_mass_conservation_and_ce():
    cd = discretize_continuity(BUMP, 1 / 4, 1 / 4)
    assert np.ptp(cd.rho.sum(axis=1)) <= 1e-8
    # CE holds exactly after balancing
    Nz = cd.grid.num_cubes
    D = np.zeros((Nz, cd.grid.faces.shape[0]))
    for i, (a, b) in enumerate(cd.grid.faces):
        D[a, i] = 1.0
        D[b, i] = -1.0
    for k in range(cd.num_steps):
        r = (cd.rho[k + 1] - cd.rho[k]) / cd.h + D @ cd.face_flux[k]
        assert np.abs(r).max() <= 1e-10


def test_discretize_rejects_inconsistent_spec():
    bad = SmoothCurveSpec(
        n=2, T=1.0, M=2.0,
        rho=lambda t, X: np.exp(-np.sum(np.asarray(X) ** 2, axis=1)) * (1 + t),
        j=lambda t, X: np.zeros((np.asarray(X).shape[0], 2)),
        lip_j=1.0,
    )
    with pytest.raises(CEResidualTooLarge):
        discretize_continuity(bad, 1 / 2, 1 / 2)


def _backbone_fixture(spec, h, delta, eps, eta=1 / 4):
    params = RecoveryParams(h=h, delta=delta, eta=eta, eps=eps).validate(spec)
    cd = discretize_continuity(spec, h, delta)
    grid = cd.grid
    pad_cells = int(round(delta / eps)) + 8
    half = int(round(spec.M / 2 / eps))
    box = Orthotope(np.full(2, -half - pad_cells, float), np.full(2, half + pad_cells, float))
    graph = rescale_graph(gen_lattice_nn(2, box), eps)
    lo = grid.zkeys.min(axis=0) * delta
    hi = (grid.zkeys.max(axis=0) + 1) * delta
    lmap = build_lattice_map(graph, eps, Orthotope(lo - 1e-9, hi + 1e-9))
    return params, cd, backbone_and_depots(cd, lmap, params)


def test_backbone_static_is_zero():
    params, cd, bb = _backbone_fixture(_static_spec(), 1 / 2, 1 / 2, 1 / 8)
    assert np.abs(bb.flows).max() == pytest.approx(0.0, abs=1e-12)
    assert bb.checks["depot_min"] >= 0
    # a static curve has no divergence sites and no flux-active cubes at all
    assert bb.depot_rows.size == 0


def test_backbone_divergence_identities():
    params, cd, bb = _backbone_fixture(BUMP, 1 / 4, 1 / 4, 1 / 16)
    assert bb.checks["cube_divergence_identity"] <= 1e-12
    bound = (2 / 2) * BUMP.lip_j * params.delta * params.eps
    assert bb.checks["div_sup"] <= bound + 1e-12
    assert bb.checks["time_gaps_identity"] <= 1e-12
    assert bb.checks["depot_min"] >= 0


def test_backbone_alpha_threshold():
    with pytest.raises(NegativeDepot):
        RecoveryParams(h=1 / 4, delta=1 / 4, eta=1 / 4, eps=1 / 16, alpha=1e-6).validate(BUMP)


def test_params_validation():
    with pytest.raises(Exception):
        RecoveryParams(h=0.3, delta=1 / 4, eta=1 / 4, eps=1 / 16).validate(BUMP)
    with pytest.raises(Exception):
        RecoveryParams(h=1 / 4, delta=0.3, eta=1 / 4, eps=1 / 16).validate(BUMP)
    p = RecoveryParams(h=1 / 4, delta=1 / 4, eta=1 / 4, eps=1 / 16).validate(BUMP)
    assert p.warnings  # delta^2/(eta h) = 1 > 0.1 is recorded, not fatal


def test_static_pipeline_zero_action():
    spec = _static_spec()
    params = RecoveryParams(h=1 / 2, delta=1 / 2, eta=1 / 4, eps=1 / 8)
    res = assemble_recovery(spec, params)
    assert res.audit["action"] == pytest.approx(0.0, abs=1e-10)
    assert res.audit["homogenized_action"] == pytest.approx(0.0, abs=1e-12)
    assert res.audit["continuity_residual"] <= 1e-10
    assert res.audit["gap_action"] == pytest.approx(0.0, abs=1e-10)


def test_full_pipeline_small():
    spec = SmoothCurveSpec.translating_bump(n=2, velocity=(0.5, 0.0), width=1.0, T=1.0)
    params = RecoveryParams(h=1 / 2, delta=1 / 2, eta=1 / 4, eps=1 / 8)
    res = assemble_recovery(spec, params)
    a = res.audit
    assert a["continuity_residual"] <= 1e-8
    assert a["depot_min"] >= 0
    assert a["books_error"] <= 1e-8
    assert a["time_gaps_identity"] <= 1e-10
    assert a["seam_error"] <= 1e-10
    assert a["w_inf_max"] <= a["w_inf_bound"] + 1e-12
    assert a["depot_total_max"] <= a["depot_total_bound"] + 1e-9
    assert np.isfinite(a["action"]) and a["action"] > 0
    # the energy decomposition is edge-disjoint and adds up
    assert a["cell_action"] + a["backbone_remainder_action"] == pytest.approx(
        a["flow_action"], rel=1e-9
    )
    # curve masses stay nonnegative and conserve the (augmented) total
    sums = res.curve.masses.sum(axis=1)
    assert np.ptp(sums) <= 1e-9 * sums.max()


def test_backbone_remainder_monotone_in_eps():
    # refining eps at fixed (h, eta, delta) does not increase the remainder
    spec = SmoothCurveSpec.translating_bump(n=2, velocity=(0.5, 0.0), width=1.0, T=1.0)
    rems = []
    for eps in (1 / 8, 1 / 16):
        params = RecoveryParams(h=1 / 2, delta=1 / 2, eta=1 / 4, eps=eps)
        res = assemble_recovery(spec, params)
        rems.append(res.audit["backbone_remainder_action"])
    assert rems[1] <= rems[0] * 1.05
