import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from causaldiff.errors import (
    DegenerateLink,
    DimensionMismatch,
    IncommensurateResolutions,
    NoObservation,
    NonPositiveObservation,
    NoObservationWarning,
)
from causaldiff.graph import LatentNode
from causaldiff.multires import (
    Grid,
    ObservationSource,
    coarsen,
    finest,
    init_child,
    init_parent,
    observe,
    phi_map,
    read_grid,
    refine,
    regrid,
    write_grid,
)


def src(node="Z", grid=None, cell=1.0, **kw):
    return ObservationSource(kw.pop("id", "s"), node, grid, cell_size=cell, **kw)


def test_regrid_examples():
    assert regrid(Grid(np.ones((2, 2))), 2.0).values.tolist() == [[1.0]]
    np.testing.assert_array_equal(regrid(Grid([[3.0]], 2.0), 1.0).values, np.full((2, 2), 3.0))
    assert regrid(Grid([[1.0, 2.0], [3.0, 4.0]]), 2.0).values.item() == 2.5


def test_regrid_incommensurate():
    with pytest.raises(IncommensurateResolutions):
        regrid(Grid(np.ones((3, 3))), 1.5)
    with pytest.raises(IncommensurateResolutions):
        coarsen(np.ones((3, 3)), 2)


def test_observe_examples():
    s = src(theta={"Z": 1.0}, eta=0.0)
    assert observe({"Z": Grid([[0.0]])}, s).values.item() == 1.0
    np.testing.assert_allclose(observe({"Z": Grid([[np.log(2)]])}, s).values, 2.0)


def test_observe_log_mean():
    s = src(theta0=0.5, theta={"Z": 2.0}, eta=0.1)
    y = observe({"Z": Grid(np.full((100, 1000), 0.3))}, s, seed=0)
    assert abs(np.log(y.values).mean() / 1.1 - 1) < 0.01


def test_phi_examples():
    s = src(theta={"Z": 1.0}, eta=0.0)
    assert phi_map(Grid([[1.0]]), {}, s).item() == 0.0
    s2 = ObservationSource("s", "Z", None, theta0=1.0, theta={"Z": 2.0, "W": 0.25}, cell_size=1.0)
    out = phi_map(Grid([[np.exp(4.0)]]), {"W": Grid([[2.0]])}, s2)
    np.testing.assert_allclose(out, 1.25)


def test_phi_errors():
    s = ObservationSource("s", "Z", None, theta={"Z": 0.0, "W": 1.0}, cell_size=1.0)
    with pytest.raises(DegenerateLink):
        phi_map(Grid([[1.0]]), {"W": Grid([[0.0]])}, s)
    with pytest.raises(NonPositiveObservation):
        phi_map(Grid([[-1.0]]), {}, src())
    with pytest.raises(NonPositiveObservation):
        src(grid=Grid([[0.0]]))
    with pytest.raises(DimensionMismatch):
        phi_map(Grid([[1.0]]), {}, ObservationSource("s", "Z", None, theta={"Z": 1.0, "W": 1.0},
                                                     cell_size=1.0))


def test_init_parent_prefers_finest_and_recovers_truth():
    z = np.random.default_rng(0).normal(size=(8, 8))
    fine = src(cell=1.0, eta=0.0, resolution_k=2, id="fine")
    coarse = src(cell=4.0, eta=0.0, resolution_k=1, id="coarse")
    fine.grid = observe({"Z": Grid(z)}, fine)
    coarse.grid = observe({"Z": Grid(z)}, coarse)
    assert finest([coarse, fine]) is fine
    z0 = init_parent(LatentNode("Z", 64), [coarse, fine], base_shape=(8, 8))
    np.testing.assert_allclose(z0, z.ravel(), atol=1e-12)


def test_init_parent_without_sources():
    node = LatentNode("Z", 4, prior_mean=0.7)
    with pytest.warns(NoObservationWarning):
        np.testing.assert_array_equal(init_parent(node, []), np.full(4, 0.7))
    with pytest.raises(NoObservation):
        init_parent(node, [], fallback=False)


def test_init_child_degenerate_weights():
    y = Grid(np.exp(np.full((2, 2), 4.0)))
    s = src(grid=y)
    pure = init_child(LatentNode("C", 4, intercept=0.2, coeffs=(0.5,)), [np.full(4, 2.0)], s)
    np.testing.assert_allclose(pure, 1.2)
    phi_only = init_child(LatentNode("C", 4, coeffs=(0.0,), obs_weight=1.0), [np.ones(4)], s)
    np.testing.assert_allclose(phi_only, 4.0)
    mix = init_child(LatentNode("C", 4, coeffs=(0.5,), obs_weight=0.5), [np.full(4, 2.0)], s)
    np.testing.assert_allclose(mix, 3.0)
    with pytest.raises(DimensionMismatch):
        init_child(LatentNode("C", 4, coeffs=(0.5,)), [], s)


def test_grid_csv_round_trip(tmp_path):
    g = Grid(np.random.default_rng(2).normal(size=(3, 5)) * 1e5, 2.5)
    back = read_grid(write_grid(tmp_path / "g.csv", g))
    assert back.cell_size == 2.5
    np.testing.assert_array_equal(back.values, g.values)


fields = arrays(np.float64, (4, 4), elements=st.floats(-5, 5))


@given(fields, st.sampled_from([1, 2, 4]))
def test_phi_inverts_observe(z, r):
    s = src(cell=float(r), theta0=0.3, theta={"Z": 1.7}, eta=0.0)
    y = observe({"Z": Grid(z)}, s)
    np.testing.assert_allclose(phi_map(y, {}, s), coarsen(z, r), atol=1e-10)


@given(fields, st.sampled_from([1, 2, 4]))
def test_coarsen_preserves_mean_and_refine_inverts(z, r):
    assert abs(coarsen(z, r).mean() - z.mean()) < 1e-12
    np.testing.assert_allclose(coarsen(refine(z, r), r), z, atol=1e-12)


@given(arrays(np.float64, (3, 3), elements=st.floats(-50, 50)), st.floats(-3, 3), st.floats(0, 2))
def test_observe_strictly_positive(z, theta0, eta):
    s = src(theta0=theta0, eta=eta)
    assert np.all(observe({"Z": Grid(z)}, s, seed=1).values > 0)
