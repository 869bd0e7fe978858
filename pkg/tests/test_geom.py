import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rayhelm.geom import (
    Mesh,
    RayField,
    build_mesh,
    fit_circle_center,
    interpolate_ray_field,
    is_refinement,
    parent_index,
    refine_to,
)

UNIT = (0.0, 1.0, 0.0, 1.0)


@pytest.mark.parametrize("target,n", [(0.25, 4), (0.3, 4), (1 / 20, 20), (1 / 3, 3), (2.0, 1)])
def test_build_mesh_ceiling_rule(target, n):
    m = build_mesh(UNIT, target)
    assert (m.nx, m.ny) == (n, n)
    assert m.h <= target + 1e-15
    assert m.n_elements == n * n


def test_build_mesh_rectangular_domain():
    m = build_mesh((0, 2, 0, 1), 0.3)
    assert (m.nx, m.ny) == (7, 4)
    assert m.h == pytest.approx(max(2 / 7, 1 / 4))


@pytest.mark.parametrize("domain", [(0, 0, 0, 1), (1, 0, 0, 1), (0, 1, 2, 2)])
def test_degenerate_domain(domain):
    with pytest.raises(ValueError):
        build_mesh(domain, 0.1)
    with pytest.raises(ValueError):
        Mesh(domain, 2, 2)


def test_nonpositive_target():
    with pytest.raises(ValueError):
        build_mesh(UNIT, 0.0)


@pytest.mark.parametrize("nx,target,fine", [(4, 0.125, 8), (4, 0.25 / 3, 12), (20, 1 / 400, 400)])
def test_refine_to(nx, target, fine):
    coarse = Mesh(UNIT, nx, nx)
    f = refine_to(coarse, target)
    assert f.nx == f.ny == fine
    assert is_refinement(f, coarse)
    counts = np.bincount(parent_index(f, coarse), minlength=coarse.n_elements)
    assert np.all(counts == (fine // nx) ** 2)


def test_refine_to_rejects_coarser_target():
    m = Mesh(UNIT, 4, 4)
    with pytest.raises(ValueError):
        refine_to(m, 0.25)
    with pytest.raises(ValueError):
        refine_to(m, 0.5)


def test_unrelated_meshes():
    assert not is_refinement(Mesh(UNIT, 6, 6), Mesh(UNIT, 4, 4))
    with pytest.raises(ValueError):
        parent_index(Mesh(UNIT, 6, 6), Mesh(UNIT, 4, 4))


@given(st.integers(1, 12), st.integers(1, 12), st.integers(2, 5))
def test_parent_contains_child_barycenter(nx, ny, k):
    coarse = Mesh((-1.0, 2.0, 0.5, 1.5), nx, ny)
    fine = refine_to(coarse, coarse.h / k)
    par = parent_index(fine, coarse)
    for e, p in zip(range(fine.n_elements), par):
        x0, x1, y0, y1 = coarse.element_box(int(p))
        bx, by = fine.barycenters(e)
        assert x0 < bx < x1 and y0 < by < y1


@given(st.integers(1, 30), st.integers(1, 30))
def test_barycenters_strictly_inside(nx, ny):
    m = Mesh(UNIT, nx, ny)
    b = m.barycenters()
    assert np.all((b > 0) & (b < 1))
    assert np.array_equal(m.locate(b), np.arange(m.n_elements))


def test_locate_half_open_and_outside():
    m = Mesh(UNIT, 4, 4)
    assert m.locate([0.25, 0.0]) == 1
    assert m.locate([1.0, 1.0]) == 15
    assert m.locate([1.01, 0.5]) == -1
    assert m.locate([-0.01, 0.5]) == -1


def test_interpolate_constant_field():
    coarse = Mesh(UNIT, 4, 4)
    rf = RayField.uniform(coarse, [np.pi / 4])
    fine = interpolate_ray_field(rf, refine_to(coarse, 0.125))
    assert fine.mesh.nx == 8
    assert np.all(fine.counts == 1)
    assert np.all(fine.angles[:, 0] == np.pi / 4)


def test_interpolate_is_parent_lookup():
    coarse = Mesh(UNIT, 3, 3)
    rng = np.random.default_rng(4)
    lists = [rng.uniform(0, 2 * np.pi, size=rng.integers(0, 4)) for _ in range(9)]
    rf = RayField.from_lists(coarse, lists)
    fine_mesh = refine_to(coarse, coarse.h / 4)
    fine = interpolate_ray_field(rf, fine_mesh)
    par = coarse.locate(fine_mesh.barycenters())
    for e in range(fine_mesh.n_elements):
        a, b = fine.element(e)
        a0, b0 = rf.element(par[e])
        assert np.array_equal(a, a0) and np.array_equal(b, b0)
    assert fine.distinct_angles() == rf.distinct_angles()


def test_interpolate_rejects_unrelated_mesh():
    rf = RayField.uniform(Mesh(UNIT, 4, 4), [0.1])
    with pytest.raises(ValueError):
        interpolate_ray_field(rf, Mesh(UNIT, 6, 6))


def test_rayfield_sorted_and_wrapped():
    m = Mesh(UNIT, 1, 2)
    rf = RayField.from_lists(m, [[3.0, -0.5], []], [[1, 2j], []])
    a, b = rf.element(0)
    assert np.allclose(a, [3.0, 2 * np.pi - 0.5])
    assert np.allclose(b, [1, 2j])
    assert rf.element(1)[0].size == 0


def test_rayfield_validation():
    m = Mesh(UNIT, 1, 1)
    with pytest.raises(ValueError):
        RayField.from_lists(m, [[0.1, 0.2]], [[1.0]])
    with pytest.raises(ValueError):
        RayField.from_lists(m, [[0.1], [0.2]])


def test_rayfield_json_round_trip(tmp_path):
    m = Mesh((0.0, 2.0, 0.0, 1.0), 2, 1)
    rf = RayField.from_lists(m, [[0.5, 4.0], [1.0]], [[1 + 2j, -0.5j], [3.0]], {"stage": "probe"})
    path = tmp_path / "rays.json"
    rf.to_json(path)
    doc = json.loads(path.read_text())
    rec = doc["elements"][0]
    assert set(rec) == {"element_index", "barycenter", "angles", "amplitudes"}
    assert rec["barycenter"] == [0.5, 0.5]
    assert rec["amplitudes"][0] == [1.0, 2.0]
    back = RayField.from_json(path)
    assert back.mesh == m and back.meta == {"stage": "probe"}
    for e in range(2):
        assert np.array_equal(back.element(e)[0], rf.element(e)[0])
        assert np.array_equal(back.element(e)[1], rf.element(e)[1])


def test_rayfield_bare_records(tmp_path):
    m = Mesh(UNIT, 1, 1)
    path = tmp_path / "r.json"
    path.write_text(json.dumps([{"element_index": 0, "barycenter": [0.5, 0.5], "angles": [1.0],
                                 "amplitudes": [[0.0, 1.0]]}]))
    with pytest.raises(ValueError):
        RayField.from_json(path)
    rf = RayField.from_json(path, mesh=m)
    assert rf.element(0)[1][0] == 1j


def test_mesh_dict_and_hash():
    m = Mesh(UNIT, 5, 7)
    assert Mesh.from_dict(m.to_dict()) == m
    assert m.hash() == Mesh.from_dict(m.to_dict()).hash()
    assert m.hash() != Mesh(UNIT, 7, 5).hash()


def test_fit_circle_center():
    c = fit_circle_center([0.05, 0.5], 0.2, UNIT)
    assert np.allclose(c, [0.2, 0.5])
    c = fit_circle_center([0.99, 0.97], 0.1, UNIT)
    assert np.allclose(c, [0.9, 0.9])
    assert np.allclose(fit_circle_center([0.5, 0.5], 0.2, UNIT), [0.5, 0.5])
    assert np.allclose(fit_circle_center([5.0, 5.0], 0.2, None), [5.0, 5.0])
    with pytest.raises(ValueError):
        fit_circle_center([0.5, 0.5], 0.6, UNIT)
