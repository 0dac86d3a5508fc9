import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beolhomog.errors import ResolutionError
from beolhomog.gdsii import PolygonSet, polygon_area
from beolhomog.materials import AL, SIO2, W
from beolhomog.rve import MaterialGrid, Window, build_rve, clip, layer_dz, voxelize
from beolhomog.techstack import Layer, TechStack
from beolhomog.vtk import read_structured_points, write_material_grid

UM = 1e-6
KEY = (1, 0)


def rect(x0, y0, x1, y1):
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)


def pset(*polys, key=KEY):
    return PolygonSet(key, tuple(polys))


def simple_stack(total=1.0 * UM, layers=()):
    return TechStack(tuple(layers), {"SiO2": SIO2, "Al": AL, "W": W}, "SiO2", total)


W10 = Window(0.0, 0.0, 10 * UM, 10 * UM)


def test_window_rejects_degenerate():
    with pytest.raises(ValueError):
        Window(0, 0, 0, 1)


def test_clip_inside_unchanged():
    sq = rect(2 * UM, 2 * UM, 4 * UM, 4 * UM)
    out = clip(pset(sq), W10)
    assert len(out) == 1
    np.testing.assert_array_equal(out.polygons[0], sq)


def test_clip_straddling_area():
    out = clip(pset(rect(8 * UM, -3 * UM, 13 * UM, 4 * UM)), W10)
    assert len(out) == 1
    # overlap [8, 10] x [0, 4]
    assert out.area() == pytest.approx(2 * UM * 4 * UM, rel=1e-12)
    p = out.polygons[0]
    assert p[:, 0].min() == 8 * UM and p[:, 0].max() == 10 * UM
    assert p[:, 1].min() == 0.0 and p[:, 1].max() == 4 * UM


def test_clip_outside_empty():
    assert len(clip(pset(rect(11 * UM, 0, 12 * UM, 1 * UM)), W10)) == 0
    assert len(clip(pset(rect(10 * UM, 0, 12 * UM, 1 * UM)), W10)) == 0  # touching edge only


def test_clip_keeps_manhattan():
    ell = np.array([[-1, -1], [6, -1], [6, 3], [3, 3], [3, 12], [-1, 12]], dtype=float) * UM
    out = clip(pset(ell), W10)
    p = out.polygons[0]
    edges = np.roll(p, -1, axis=0) - p
    assert np.all((edges[:, 0] == 0) | (edges[:, 1] == 0))
    assert out.area() == pytest.approx((6 * 3 + 3 * 7) * UM**2, rel=1e-12)


@given(st.tuples(*[st.floats(-5, 15) for _ in range(4)]))
def test_clip_area_matches_overlap(c):
    x0, x1 = sorted(c[:2])
    y0, y1 = sorted(c[2:])
    if x1 - x0 < 1e-3 or y1 - y0 < 1e-3:
        return
    out = clip(pset(rect(x0 * UM, y0 * UM, x1 * UM, y1 * UM)), W10)
    ox = max(0.0, min(x1, 10) - max(x0, 0))
    oy = max(0.0, min(y1, 10) - max(y0, 0))
    assert out.area() == pytest.approx(ox * oy * UM**2, rel=1e-9, abs=1e-24)


def test_voxelize_no_polygons():
    stack = simple_stack(layers=[Layer("m", 1, 0, 0.0, 0.5 * UM, "Al")])
    g = build_rve({}, stack, W10, (1 * UM, 1 * UM, 0.1 * UM))
    assert g.shape == (10, 10, 10)
    assert g.metal_fraction() == 0.0
    assert np.all(g.voxel_material == 0)


@pytest.mark.parametrize("k", [1, 3, 7, 10])
def test_full_slab_fraction(k):
    dz = 0.1 * UM
    stack = simple_stack(layers=[Layer("m", 1, 0, 0.0, k * dz, "Al")])
    g = build_rve({KEY: pset(rect(-1 * UM, -1 * UM, 11 * UM, 11 * UM))}, stack, W10, (1 * UM, 1 * UM, dz))
    assert g.metal_fraction() == k / g.nz


def test_half_stripe_fraction():
    stack = simple_stack(layers=[Layer("m", 1, 0, 0.0, 1 * UM, "Al")])
    g = build_rve({KEY: pset(rect(0, 0, 5 * UM, 10 * UM))}, stack, W10, (0.5 * UM, 0.5 * UM, 0.25 * UM))
    assert g.metal_fraction() == 0.5
    assert np.all(g.voxel_material[:10] == 1) and np.all(g.voxel_material[10:] == 0)


def test_later_layer_wins():
    stack = simple_stack(layers=[Layer("m", 1, 0, 0.0, 1 * UM, "Al"), Layer("v", 2, 0, 0.0, 1 * UM, "W")])
    sets = {(1, 0): pset(rect(0, 0, 10 * UM, 10 * UM)), (2, 0): pset(rect(0, 0, 5 * UM, 10 * UM), key=(2, 0))}
    g = build_rve(sets, stack, W10, (1 * UM, 1 * UM, 0.5 * UM))
    names = [m.name for m in g.materials]
    assert np.all(g.voxel_material[:5] == names.index("W"))
    assert np.all(g.voxel_material[5:] == names.index("Al"))


@pytest.mark.parametrize("res", [(0.3 * UM, 1 * UM, 0.1 * UM), (1 * UM, 0.7 * UM, 0.1 * UM), (1 * UM, 1 * UM, 0.3 * UM)])
def test_non_multiple_resolution(res):
    with pytest.raises(ResolutionError):
        build_rve({}, simple_stack(), W10, res)


def test_grid_invariants():
    g = build_rve({}, simple_stack(), Window(2 * UM, 3 * UM, 6 * UM, 5 * UM), (1 * UM, 1 * UM, 0.5 * UM))
    np.testing.assert_allclose(g.centroid, [4 * UM, 4 * UM, 0.5 * UM])
    assert g.origin == (2 * UM, 3 * UM, 0.0)
    assert g.n_nodes == 5 * 3 * 3
    with pytest.raises(ValueError):
        MaterialGrid((1, 1, 1), (1, 1, 1), (0, 0, 0), np.array([[[3]]]), (SIO2,))


def test_snap_warning(caplog):
    stack = simple_stack(layers=[Layer("m", 1, 0, 0.0, 0.25 * UM, "Al")])
    with caplog.at_level(logging.WARNING, logger="beolhomog.rve"):
        build_rve({KEY: pset(rect(0, 0, 10 * UM, 10 * UM))}, stack, W10, (1 * UM, 1 * UM, 0.1 * UM))
    assert "snapped" in caplog.text


def test_layer_dz_aligns_boundaries(stack):
    dz = layer_dz(stack)
    assert dz <= 0.1 * UM * (1 + 1e-12)
    for l in stack.layers:
        for z in (l.z_bottom, l.z_top):
            assert abs(z / dz - round(z / dz)) < 1e-6
    assert abs(stack.total_thickness / dz - round(stack.total_thickness / dz)) < 1e-6


def _disc(cx, cy, r, n=64):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.column_stack([cx + r * np.cos(t), cy + r * np.sin(t)])


def test_refinement_converges_monotonically():
    # a tilted quadrilateral and a polygonal disc in a 0.35 um thick layer of a 1 um stack
    quad = np.array([[1.13, 0.71], [6.29, 1.57], [5.41, 5.87], [0.93, 4.33]]) * UM
    disc = _disc(7.3 * UM, 7.1 * UM, 2.05 * UM)
    polys = pset(quad, disc)
    area = polygon_area(quad) + polygon_area(disc)
    layer = Layer("m", 1, 0, 0.2 * UM, 0.35 * UM, "Al")
    exact = area / W10.width / W10.height * 0.35
    errors = []
    for n in (1, 2, 4, 8):
        d = 0.5 * UM / n
        stack = simple_stack(layers=[layer])
        g = voxelize([(polys, layer.z_bottom, layer.thickness, "Al")], stack, W10, (d, d, 0.05 * UM / n))
        errors.append(abs(g.metal_fraction() - exact))
    assert all(b < a for a, b in zip(errors, errors[1:])), errors
    assert errors[-1] < 2e-3


@settings(max_examples=25, deadline=None)
@given(st.randoms(use_true_random=False))
def test_polygon_order_independent(rnd):
    rng = np.random.default_rng(rnd.randint(0, 2**31))
    polys = []
    for _ in range(6):
        x0, y0 = rng.uniform(-2, 9, 2)
        w, h = rng.uniform(0.3, 4, 2)
        polys.append(rect(x0 * UM, y0 * UM, (x0 + w) * UM, (y0 + h) * UM))
    polys.append(_disc(5 * UM, 5 * UM, 1.7 * UM, n=12))
    stack = simple_stack(layers=[Layer("m", 1, 0, 0.0, 0.5 * UM, "Al")])
    res = (0.5 * UM, 0.5 * UM, 0.25 * UM)
    a = build_rve({KEY: pset(*polys)}, stack, W10, res)
    order = rng.permutation(len(polys))
    b = build_rve({KEY: pset(*[polys[i] for i in order])}, stack, W10, res)
    np.testing.assert_array_equal(a.voxel_material, b.voxel_material)


def test_synthetic_rve_shape(rve10):
    assert 0.0 < rve10.metal_fraction() < 0.5
    assert rve10.shape == (20, 20, 27)


def test_vtk_material_dump(tmp_path, rve10):
    path = tmp_path / "rve.vtk"
    write_material_grid(path, rve10)
    data = read_structured_points(path)
    assert data["dimensions"] == (21, 21, 28)
    np.testing.assert_allclose(data["spacing"], rve10.spacing)
    np.testing.assert_array_equal(data["cell"]["material"], rve10.voxel_material.ravel(order="F"))
    assert "CELL_DATA 10800" in path.read_text()
