"""Geometry and image quality metrics, plus bitrate accounting."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np
from skimage.metrics import structural_similarity

from .errors import EmptyInputError, ValidationError
from .geometry.bvh import closest_points
from .mesh import TriangleMesh, normalize_sequence, sample_surface
from .voxel import mesh_bvh

PSNR_CAP = 120.0
VIEWS = ("+x", "-x", "+z", "-z")
FRAME_RATE = 30


def _psnr(peak: float, mse: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse)))


def _one_way(src: TriangleMesh, dst: TriangleMesh, samples: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample squared point and normal-projected errors from ``src`` samples to ``dst``."""
    pts, nrm = sample_surface(src, samples, seed=seed)
    b = mesh_bvh(dst)
    _, near, _ = closest_points(b.tris, b.lo, b.hi, b.left, b.right, b.start, b.count,
                                np.ascontiguousarray(pts), np.inf)
    err = near - pts
    d1 = np.einsum("ij,ij->i", err, err)
    d2 = np.einsum("ij,ij->i", err, nrm) ** 2
    return d1, d2


def symmetric_mse(a: TriangleMesh, b: TriangleMesh, samples: int = 50000, seed: int = 0) -> tuple[float, float]:
    """``(point-to-point, point-to-plane)`` MSE, each the max over both directions."""
    if a.is_empty or b.is_empty:
        raise EmptyInputError("geometry metrics need two non-empty meshes")
    d1a, d2a = _one_way(a, b, samples, seed)
    d1b, d2b = _one_way(b, a, samples, seed)
    return max(d1a.mean(), d1b.mean()), max(d2a.mean(), d2b.mean())


def peak_value(reference: TriangleMesh) -> float:
    lo, hi = reference.bounds()
    return float(np.linalg.norm(hi - lo))


def d_psnr(reference: TriangleMesh, test: TriangleMesh, samples: int = 50000, mode: str = "plane",
           seed: int = 0) -> float:
    """D1 (``mode="point"``) or D2 (``mode="plane"``) PSNR with peak = reference bbox diagonal."""
    if mode not in ("point", "plane"):
        raise ValueError(f"mode must be 'point' or 'plane', got '{mode}'")
    mse1, mse2 = symmetric_mse(reference, test, samples, seed)
    return _psnr(peak_value(reference), mse1 if mode == "point" else mse2)


def d_psnr_both(reference: TriangleMesh, test: TriangleMesh, samples: int = 50000, seed: int = 0):
    mse1, mse2 = symmetric_mse(reference, test, samples, seed)
    peak = peak_value(reference)
    return _psnr(peak, mse1), _psnr(peak, mse2)


# ---------------------------------------------------------------------------
# rendering


def _view_axes(view: str) -> tuple[int, float, int, int]:
    """(depth axis, sign, horizontal axis, vertical axis) of an axis-aligned view."""
    if len(view) != 2 or view[0] not in "+-" or view[1] not in "xyz":
        raise ValidationError(f"view must look like '+x' or '-z', got '{view}'")
    a = "xyz".index(view[1])
    s = 1.0 if view[0] == "+" else -1.0
    u, v = [(1, 2), (0, 2), (0, 1)][a]
    return a, s, u, v


@numba.njit(cache=True)
def _raster(px, py, depth, normals, faces, res, image, zbuf):
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        x0, y0, x1, y1, x2, y2 = px[i0], py[i0], px[i1], py[i1], px[i2], py[i2]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        c0 = max(0, int(np.floor(min(x0, x1, x2))))
        c1 = min(res - 1, int(np.ceil(max(x0, x1, x2))))
        r0 = max(0, int(np.floor(min(y0, y1, y2))))
        r1 = min(res - 1, int(np.ceil(max(y0, y1, y2))))
        for r in range(r0, r1 + 1):
            yc = r + 0.5
            for c in range(c0, c1 + 1):
                xc = c + 0.5
                w0 = ((x1 - xc) * (y2 - yc) - (x2 - xc) * (y1 - yc)) / area
                w1 = ((x2 - xc) * (y0 - yc) - (x0 - xc) * (y2 - yc)) / area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                z = w0 * depth[i0] + w1 * depth[i1] + w2 * depth[i2]
                if z <= zbuf[r, c]:
                    continue
                zbuf[r, c] = z
                nx = w0 * normals[i0, 0] + w1 * normals[i1, 0] + w2 * normals[i2, 0]
                ny = w0 * normals[i0, 1] + w1 * normals[i1, 1] + w2 * normals[i2, 1]
                nz = w0 * normals[i0, 2] + w1 * normals[i1, 2] + w2 * normals[i2, 2]
                ln = np.sqrt(nx * nx + ny * ny + nz * nz)
                if ln > 0.0:
                    nx /= ln
                    ny /= ln
                    nz /= ln
                image[r, c, 0] = 0.5 * (nx + 1.0)
                image[r, c, 1] = 0.5 * (ny + 1.0)
                image[r, c, 2] = 0.5 * (nz + 1.0)


def render_normal_map(mesh: TriangleMesh, view: str = "+z", resolution: int = 512) -> np.ndarray:
    """Orthographic normal-color image of the ``[-1, 1]`` square seen from ``view``.

    Returns float64 RGB in [0, 1] with a black background. The camera sits on
    the ``view`` side of the cube, so ``+z`` sees the surface with the largest z.
    """
    img = np.zeros((resolution, resolution, 3))
    if mesh.is_empty:
        return img
    a, s, u, v = _view_axes(view)
    p = mesh.vertices
    # flip the horizontal axis for negative views so images are not mirrored
    px = (s * p[:, u] + 1.0) * 0.5 * resolution if a != 1 else (p[:, u] + 1.0) * 0.5 * resolution
    py = (1.0 - p[:, v]) * 0.5 * resolution
    depth = s * p[:, a]
    zbuf = np.full((resolution, resolution), -np.inf)
    _raster(np.ascontiguousarray(px), np.ascontiguousarray(py), np.ascontiguousarray(depth),
            np.ascontiguousarray(mesh.vertex_normals), mesh.faces, resolution, img, zbuf)
    return img


def image_psnr(a: np.ndarray, b: np.ndarray) -> float:
    return _psnr(1.0, float(np.mean((a - b) ** 2)))


def image_ssim(a: np.ndarray, b: np.ndarray) -> float:
    return float(structural_similarity(a, b, data_range=1.0, channel_axis=2, gaussian_weights=True, sigma=1.5,
                                       use_sample_covariance=False))


def image_metrics(ref_meshes: list[TriangleMesh], test_meshes: list[TriangleMesh], views=VIEWS,
                  resolution: int = 512, per_frame: list | None = None) -> tuple[float, float]:
    """Mean image PSNR and SSIM over frames and views; both sequences share the reference's normalization."""
    if len(ref_meshes) != len(test_meshes):
        raise ValidationError(f"frame counts differ: {len(ref_meshes)} vs {len(test_meshes)}")
    if not ref_meshes:
        raise EmptyInputError("no frames to compare")
    _, xf = normalize_sequence([m for m in ref_meshes if not m.is_empty] or ref_meshes)
    ps, ss = [], []
    for i, (r, t) in enumerate(zip(ref_meshes, test_meshes)):
        rn = xf.apply_mesh(r) if not r.is_empty else r
        tn = xf.apply_mesh(t) if not t.is_empty else t
        fp, fs = [], []
        for view in views:
            ia = render_normal_map(rn, view, resolution)
            ib = render_normal_map(tn, view, resolution)
            fp.append(image_psnr(ia, ib))
            fs.append(image_ssim(ia, ib))
        if per_frame is not None:
            per_frame.append({"frame": i, "image_psnr": float(np.mean(fp)), "image_ssim": float(np.mean(fs))})
        ps += fp
        ss += fs
    return float(np.mean(ps)), float(np.mean(ss))


# ---------------------------------------------------------------------------
# bitrate and reports


def bitrate(container: bytes | str | Path, frames: int | None = None, fps: int = FRAME_RATE) -> float:
    """Megabits per second when the container's frames play at ``fps``."""
    data = container if isinstance(container, (bytes, bytearray)) else Path(container).read_bytes()
    if frames is None:
        from .codec.container import Container
        frames = Container.from_bytes(bytes(data)).header.frames
    if frames < 1:
        raise ValidationError("frame count must be >= 1")
    return len(data) * 8 * fps / frames / 1e6


@dataclass
class MetricReport:
    d1_psnr: float
    d2_psnr: float
    image_psnr: float
    image_ssim: float
    bitrate_mbps: float | None = None
    frames: list = field(default_factory=list)

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def evaluate_sequences(ref_meshes, test_meshes, container=None, samples: int = 50000, resolution: int = 512,
                       seed: int = 0) -> MetricReport:
    if len(ref_meshes) != len(test_meshes):
        raise ValidationError(f"frame counts differ: {len(ref_meshes)} vs {len(test_meshes)}")
    frames = []
    d1s, d2s = [], []
    for i, (r, t) in enumerate(zip(ref_meshes, test_meshes)):
        if t.is_empty:
            d1, d2 = 0.0, 0.0
        else:
            d1, d2 = d_psnr_both(r, t, samples, seed)
        d1s.append(d1)
        d2s.append(d2)
        frames.append({"frame": i, "d1_psnr": d1, "d2_psnr": d2})
    img_frames: list = []
    ip, iss = image_metrics(ref_meshes, test_meshes, resolution=resolution, per_frame=img_frames)
    for f, g in zip(frames, img_frames):
        f.update(image_psnr=g["image_psnr"], image_ssim=g["image_ssim"])
    rate = bitrate(container, len(ref_meshes)) if container is not None else None
    return MetricReport(float(np.mean(d1s)), float(np.mean(d2s)), ip, iss, rate, frames)
