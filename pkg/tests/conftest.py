import numpy as np
import pytest

from otthom.generators import gen_lattice_nn
from otthom.graph import EmbeddedGraph, Orthotope, rescale_graph
from otthom.means import MeanSpec


@pytest.fixture
def unit_box():
    return Orthotope([0.0, 0.0], [1.0, 1.0])


@pytest.fixture
def lattice_5x5():
    return gen_lattice_nn(2, Orthotope([0, 0], [4, 4]))


def two_point_graph(dist=1.0, sigma=1.0, mean=None):
    return EmbeddedGraph(
        n=1,
        points=np.array([[0.0], [dist]]),
        edges=np.array([[0, 1]]),
        sigma=np.array([sigma]),
        means=[mean or MeanSpec()],
        R=max(2.0, dist + 1),
    )


def lattice_patch(eps, lo=-2, hi_extra=2, n=2):
    """(eps Z^n) patch covering [0,1]^n with margin, rescaled."""
    inv = int(round(1.0 / eps))
    g = gen_lattice_nn(n, Orthotope([lo] * n, [inv + hi_extra] * n))
    return rescale_graph(g, eps)
