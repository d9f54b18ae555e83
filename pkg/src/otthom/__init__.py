"""Dynamical discrete optimal transport on embedded graphs.

Discrete kinetic energies with general mean functions, uniform flow
representatives, convex cell problems for the effective density, transport
geodesics, and constructive recovery sequences, with deterministic generators
for the standard random graph families.
"""

from .cell import CellProblem, CellSolution, assemble_cell_problem, competitor_energy, solve_cell
from .density import (
    DensityModel,
    GridSpec,
    build_density_model,
    estimate_density,
    eval_homogenized_action,
)
from .energy import (
    DiscreteCurve,
    FlowField,
    MassDistribution,
    SegmentMeasure,
    continuity_residual,
    curve_action,
    degree_normalized_energy,
    divergence,
    embed_flow_pairing,
    energy,
    flow_tv_on_box,
    localized_energy,
    pentagram_product,
    segment_measure,
)
from .generators import (
    GeneratorSpec,
    canonical_culdesac_profile,
    gen_culdesac,
    gen_lattice_nn,
    gen_perturbed_voronoi,
    gen_random_conductance,
    generate,
)
from .geodesic import GeodesicProblem, audit_apriori_bound, solve_geodesic
from .graph import (
    EmbeddedGraph,
    GeometryReport,
    Orthotope,
    boundary_edge_set,
    edge_cut_fraction,
    rescale_graph,
    validate_geometry,
)
from .means import MeanSpec, eval_mean, mean_property_audit
from .recovery import (
    RecoveryParams,
    SmoothCurveSpec,
    assemble_recovery,
    backbone_and_depots,
    discretize_continuity,
    fill_gaps,
    glue_microstructure,
)
from .uniform_flow import (
    LatticeMap,
    build_lattice_map,
    divergence_repair,
    path_unit_flow,
    pushforward_flow,
    uniform_representative,
)
from .wasserstein import earth_mover_w1, kr_norm, w_infinity_distance

__version__ = "0.1.0"
