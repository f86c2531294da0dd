import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from n4mc import fixtures
from n4mc.errors import ValidationError
from n4mc.mesh import TriangleMesh
from n4mc.voxel import (TsdfDefGrid, VoxelGridSpec, compute_tsdf_def, default_tau, load_tsdg, occupancy, save_tsdg,
                        is_closed, lattice_inside, unsigned_distance, winding_number)
from oracles import lattice, sphere_sdf, winding_triangle_sum


@pytest.fixture(scope="module")
def fine_sphere():
    return fixtures.icosphere(6, 0.5)


def test_grid_spec_layout():
    for k in (32, 64):
        spec = VoxelGridSpec(k)
        pts = spec.points()
        assert np.array_equal(pts, lattice(k))
        assert pts[0, 0, 0].tolist() == [-1.0, -1.0, -1.0]
        assert pts[-1, -1, -1].tolist() == [1.0, 1.0, 1.0]
        assert spec.spacing == pytest.approx(2 / (k - 1))


def test_winding_interior_exterior():
    m = fixtures.icosphere(3, 1.0)
    w = winding_number(m, np.array([[0, 0, 0], [10, 0, 0]], dtype=float))
    assert w[0] == pytest.approx(1.0, abs=1e-3)
    assert w[1] == pytest.approx(0.0, abs=1e-3)


def test_winding_cube_face_center():
    m = fixtures.box()
    q = np.array([0.5, 0.0, 0.0])
    oracle = winding_triangle_sum(m.vertices, m.faces, q)
    got = winding_number(m, q[None])[0]
    assert got == pytest.approx(0.5, abs=1e-2)
    assert oracle == pytest.approx(0.5, abs=1e-2)


@settings(max_examples=20)
@given(st.lists(st.floats(-1.5, 1.5), min_size=3, max_size=3))
def test_winding_exact_matches_oracle(point):
    m = fixtures.icosphere(1, 0.7)
    q = np.array(point)
    got = winding_number(m, q[None], method="exact")[0]
    assert got == pytest.approx(winding_triangle_sum(m.vertices, m.faces, q), abs=1e-9)


def test_fast_winding_agrees_with_exact(rng):
    m = fixtures.deforming_sphere(3)[1]
    pts = rng.uniform(-1, 1, size=(4000, 3))
    fast = winding_number(m, pts, method="fast")
    exact = winding_number(m, pts, method="exact")
    assert np.abs(fast - exact).max() <= 1e-3


def test_occupancy_volume():
    spec = VoxelGridSpec(32)
    occ = occupancy(fixtures.icosphere(4, 0.5), spec)
    expected = 4 / 3 * np.pi * 0.5 ** 3 / spec.spacing ** 3
    assert abs(occ.sum() - expected) <= 0.03 * expected


def test_occupancy_empty_mesh():
    occ = occupancy(TriangleMesh.empty(), VoxelGridSpec(32))
    assert not occ.any()


def test_occupancy_matches_sdf_sign_away_from_surface():
    spec = VoxelGridSpec(32)
    occ = occupancy(fixtures.icosphere(4, 0.5), spec)
    sd = sphere_sdf(spec.points(), 0.5)
    far = np.abs(sd) > spec.spacing
    assert np.array_equal(occ[far], (sd < 0)[far])


def test_tsdf_deep_interior_clamps(fine_sphere):
    g = compute_tsdf_def(fine_sphere, 32)
    c = g.k // 2
    # k is even so the nearest lattice point is still ~0.5 from the surface
    assert g.tsdf[c, c, c] == -1.0
    assert g.tsdf[0, 0, 0] == 1.0


def test_tsdf_zero_on_surface():
    k = 32
    ax = VoxelGridSpec(k).axis()
    lo, hi = ax[8], ax[20]
    g = compute_tsdf_def(fixtures.box((lo,) * 3, (hi,) * 3), k)
    # lattice point (20, 14, 14) lies exactly on the +x face
    assert abs(g.tsdf[20, 14, 14] * g.tau) <= g.voxel_size * 1e-3


@pytest.mark.parametrize("k", [32, 64])
def test_tsdf_matches_analytic_sphere_in_band(fine_sphere, k):
    g = compute_tsdf_def(fine_sphere, k)
    sd = sphere_sdf(g.spec.points(), 0.5)
    band = np.abs(sd) < g.tau * 0.999
    err = np.abs(g.tsdf.astype(np.float64) * g.tau - sd)[band]
    assert band.sum() > 1000
    assert err.max() <= 1e-3 * g.tau


def test_tsdf_invariants_and_determinism():
    m = fixtures.deforming_sphere(2)[1]
    a = compute_tsdf_def(m, 32)
    b = compute_tsdf_def(m, 32)
    assert np.array_equal(a.values, b.values)
    assert np.abs(a.tsdf).max() <= 1
    assert np.all(a.deformation == 0)
    assert a.tau == pytest.approx(default_tau(32))


def test_tsdf_sign_is_occupancy_complement():
    m = fixtures.icosphere(4, 0.5)
    g = compute_tsdf_def(m, 32)
    occ = occupancy(m, g.spec)
    far = np.abs(sphere_sdf(g.spec.points(), 0.5)) > g.voxel_size
    assert np.array_equal((g.tsdf < 0)[far], occ[far])


def test_tsdf_rejects_unnormalized():
    with pytest.raises(ValidationError):
        compute_tsdf_def(fixtures.icosphere(1, 2.0), 32)


def test_grid_invariants_enforced():
    k = 32
    v = np.zeros((k, k, k, 4), np.float32)
    v[..., 0] = 1.5
    with pytest.raises(ValidationError):
        TsdfDefGrid(k, 0.1, v)
    v[..., 0] = 0
    v[..., 1] = 0.6 * 2 / (k - 1)
    with pytest.raises(ValidationError):
        TsdfDefGrid(k, 0.1, v)
    with pytest.raises(ValidationError):
        TsdfDefGrid(48, 0.1, np.zeros((48, 48, 48, 4), np.float32))


def test_unsigned_distance_matches_oracle(rng):
    m = fixtures.box()
    pts = rng.uniform(-1, 1, size=(200, 3))
    d = unsigned_distance(m, pts)
    # distance to the surface of an axis aligned box
    q = np.abs(pts) - 0.5
    outside = np.linalg.norm(np.maximum(q, 0), axis=1)
    inside = -np.minimum(q.max(axis=1), 0)
    assert np.allclose(d, np.where(q.max(axis=1) > 0, outside, inside), atol=1e-12)


def test_tsdg_roundtrip(tmp_path):
    g = compute_tsdf_def(fixtures.icosphere(2, 0.5), 32)
    save_tsdg(g, tmp_path / "g.tsdg")
    back = load_tsdg(tmp_path / "g.tsdg")
    assert back.k == g.k and back.tau == g.tau and np.array_equal(back.values, g.values)


@settings(max_examples=6, deadline=None)
@given(st.integers(0, 1000), st.sampled_from([16, 23, 40]))
def test_lattice_inside_matches_pointwise_winding(seed, k):
    r = np.random.default_rng(seed)
    closed = fixtures.icosphere(2, r.uniform(0.2, 0.8), center=r.uniform(-0.15, 0.15, 3))
    pts = VoxelGridSpec(k).points()
    for mesh in (closed, fixtures.square(1.2, z=r.uniform(-0.3, 0.3))):
        ref = (winding_number(mesh, pts.reshape(-1, 3), method="fast") > 0.5).reshape(k, k, k)
        assert np.array_equal(lattice_inside(mesh, pts, VoxelGridSpec(k).spacing), ref)


def test_is_closed():
    assert is_closed(fixtures.icosphere(1)) and is_closed(fixtures.box())
    assert not is_closed(fixtures.square())
    s = fixtures.icosphere(1)
    assert not is_closed(TriangleMesh(s.vertices, s.faces[1:]))
