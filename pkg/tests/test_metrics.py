import json
import math

import numpy as np
import pytest

from n4mc import fixtures
from n4mc.codec import Container, Header, Section
from n4mc.errors import EmptyInputError, ValidationError
from n4mc.mesh import TriangleMesh
from n4mc.metrics import (PSNR_CAP, _one_way, bitrate, d_psnr, d_psnr_both, evaluate_sequences, image_metrics,
                          image_ssim, render_normal_map, symmetric_mse)


@pytest.fixture(scope="module")
def sphere():
    return fixtures.icosphere(4, 0.5)


def _noisy(mesh, amplitude, seed=0):
    pattern = np.random.default_rng(seed).uniform(-1, 1, len(mesh.vertices))[:, None]
    return TriangleMesh(mesh.vertices + amplitude * pattern * mesh.vertex_normals, mesh.faces)


def test_identical_meshes_cap(sphere):
    assert d_psnr(sphere, sphere, 5000) == PSNR_CAP
    assert d_psnr(sphere, sphere, 5000, mode="point") == PSNR_CAP


@pytest.mark.parametrize("delta", [0.01, 0.003])
def test_plane_closed_form(delta):
    ref = fixtures.grid_plane(8, 1.0)
    test = ref.translated([0.0, 0.0, delta])
    d1, d2 = d_psnr_both(ref, test, 20000)
    closed = 10 * math.log10(2.0 / delta ** 2)
    assert abs(d2 - closed) <= 0.01 and abs(d1 - closed) <= 0.01


def test_plane_mse_is_delta_squared():
    ref = fixtures.grid_plane(8, 1.0)
    _, mse2 = symmetric_mse(ref, ref.translated([0, 0, 0.02]), 5000)
    assert mse2 == pytest.approx(0.02 ** 2, rel=1e-9)


def test_point_to_plane_never_exceeds_point_to_point(sphere):
    test = _noisy(sphere, 0.02)
    for src, dst in ((sphere, test), (test, sphere)):
        d1, d2 = _one_way(src, dst, 20000, 3)
        assert np.all(d2 <= d1 + 1e-15)
    d1p, d2p = d_psnr_both(sphere, test, 20000)
    assert d2p >= d1p


def test_swap_invariance(sphere):
    test = _noisy(sphere, 0.01, seed=4)
    assert symmetric_mse(sphere, test, 8000) == symmetric_mse(test, sphere, 8000)


def test_psnr_monotone_in_noise(sphere):
    values = [d_psnr(sphere, _noisy(sphere, a), 20000) for a in (0.002, 0.004, 0.008, 0.016, 0.032)]
    assert all(b < a for a, b in zip(values, values[1:]))


def test_empty_mesh_rejected(sphere):
    with pytest.raises(EmptyInputError):
        d_psnr(sphere, TriangleMesh.empty())


def test_bad_mode(sphere):
    with pytest.raises(ValueError):
        d_psnr(sphere, sphere, 100, mode="normal")


# rendering ----------------------------------------------------------------------


def test_quad_facing_camera_color():
    img = render_normal_map(fixtures.square(1.0), "+z", 128)
    covered = img.sum(axis=2) > 0
    assert covered.mean() == pytest.approx(0.25, abs=0.01)
    assert np.allclose(img[covered], [0.5, 0.5, 1.0])


def test_empty_mesh_renders_black():
    assert not render_normal_map(TriangleMesh.empty(), "+x", 64).any()


def test_sphere_coverage():
    img = render_normal_map(fixtures.icosphere(5, 0.5), "+z", 512)
    coverage = (img.sum(axis=2) > 0).mean()
    assert abs(coverage - math.pi * 0.25 / 4) <= 0.02 * math.pi * 0.25 / 4


def test_rasterizer_deterministic(sphere):
    a = render_normal_map(sphere, "-x", 256)
    b = render_normal_map(sphere, "-x", 256)
    assert np.array_equal(a, b)


def test_bad_view():
    with pytest.raises(ValidationError):
        render_normal_map(fixtures.square(), "x", 8)


def test_front_surface_wins():
    # two parallel squares; the +z camera must see the higher one, whose normal faces +z
    lo = fixtures.square(1.0, z=-0.5)
    hi = fixtures.square(0.5, z=0.5)
    mesh = TriangleMesh(np.vstack([lo.vertices, hi.vertices]),
                        np.vstack([lo.faces, hi.faces + len(lo.vertices)]))
    img = render_normal_map(mesh, "+z", 64)
    assert np.allclose(img[32, 32], [0.5, 0.5, 1.0])
    assert (img.sum(axis=2) > 0).mean() == pytest.approx(0.25, abs=0.02)


# image metrics ----------------------------------------------------------------


def test_identical_sequences(sphere):
    seq = [sphere, sphere.translated([0.1, 0, 0])]
    psnr, ssim = image_metrics(seq, seq, resolution=128)
    assert psnr == PSNR_CAP and ssim == 1.0


def test_empty_frame_lowers_metrics(sphere):
    seq = [sphere, sphere.translated([0.1, 0, 0])]
    psnr, ssim = image_metrics(seq, [seq[0], TriangleMesh.empty()], resolution=128)
    assert psnr < PSNR_CAP and ssim < 1.0


def test_dilated_sphere_lowers_ssim():
    ref = fixtures.icosphere(4, 0.5)
    dilated = fixtures.icosphere(4, 0.5 + 2 * 2 / 63)
    assert image_ssim(render_normal_map(ref, "+z", 256), render_normal_map(dilated, "+z", 256)) < \
        image_ssim(render_normal_map(ref, "+z", 256), render_normal_map(ref, "+z", 256))


def test_frame_count_mismatch(sphere):
    with pytest.raises(ValidationError):
        image_metrics([sphere], [sphere, sphere])


# bitrate ------------------------------------------------------------------------


def test_bitrate_examples():
    assert bitrate(b"\x00" * 1_000_000, frames=60) == pytest.approx(4.0, abs=1e-12)
    assert bitrate(b"\x00" * 1000, frames=10) == pytest.approx(2 * bitrate(b"\x00" * 1000, frames=20))
    with pytest.raises(ValidationError):
        bitrate(b"\x00", frames=0)


def test_bitrate_from_container_and_accounting(tmp_path):
    h = Header("0011223344556677", 64, 4, 64, 16, 60, 4, 2000, 0.1)
    cont = Container(h, {int(Section.CONFIG): b"{}", int(Section.LATENTS): b"\x01" * 999})
    data = cont.to_bytes()
    (tmp_path / "c.n4mc").write_bytes(data)
    assert bitrate(tmp_path / "c.n4mc") == pytest.approx(len(data) * 8 * 30 / 60 / 1e6)
    assert cont.overhead_bytes + sum(ln for _, _, ln in cont.section_table()) == len(data)


def test_report_json(sphere, tmp_path):
    seq = [sphere, sphere]
    rep = evaluate_sequences(seq, [sphere, _noisy(sphere, 0.01)], samples=2000, resolution=64)
    rep.to_json(tmp_path / "r.json")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert set(doc) == {"d1_psnr", "d2_psnr", "image_psnr", "image_ssim", "bitrate_mbps", "frames"}
    assert len(doc["frames"]) == 2 and doc["frames"][0]["d2_psnr"] == PSNR_CAP
    assert all(math.isfinite(doc[k]) for k in ("d1_psnr", "d2_psnr", "image_psnr", "image_ssim"))
