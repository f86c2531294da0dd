"""Synthetic meshes and sequences for tests, scripts and smoke runs."""

from __future__ import annotations

import numpy as np

from .mesh import TriangleMesh


def icosphere(subdivisions: int = 1, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Subdivided icosahedron with ``10 * 4**s + 2`` vertices and ``20 * 4**s`` faces."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = v[a] + v[b]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    vv = np.array(v) * radius + np.asarray(center, dtype=np.float64)
    return TriangleMesh(vv, np.array(faces, dtype=np.int64))


def box(lo=(-0.5, -0.5, -0.5), hi=(0.5, 0.5, 0.5)) -> TriangleMesh:
    """Axis aligned box with outward facing triangles."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array([[hi[0] if i & 1 else lo[0], hi[1] if i & 2 else lo[1], hi[2] if i & 4 else lo[2]]
                        for i in range(8)])
    faces = np.array([
        (0, 2, 1), (1, 2, 3),  # -z
        (4, 5, 6), (5, 7, 6),  # +z
        (0, 1, 4), (1, 5, 4),  # -y
        (2, 6, 3), (3, 6, 7),  # +y
        (0, 4, 2), (2, 4, 6),  # -x
        (1, 3, 5), (3, 7, 5),  # +x
    ], dtype=np.int64)
    return TriangleMesh(corners, faces)


def square(size: float = 1.0, z: float = 0.0) -> TriangleMesh:
    """Unit square in the xy plane facing +z."""
    h = size / 2
    v = np.array([[-h, -h, z], [h, -h, z], [h, h, z], [-h, h, z]], dtype=np.float64)
    return TriangleMesh(v, np.array([(0, 1, 2), (0, 2, 3)], dtype=np.int64))


def grid_plane(n: int = 16, size: float = 1.0, z: float = 0.0) -> TriangleMesh:
    """Tessellated square facing +z with ``2*n*n`` triangles."""
    xs = np.linspace(-size / 2, size / 2, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    v = np.stack([X.ravel(), Y.ravel(), np.full(X.size, z)], axis=1)
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[:-1, 1:].ravel()
    f = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return TriangleMesh(v, f)


def translating_sphere(frames: int, step=(0.05, 0.0, 0.0), radius: float = 0.5,
                       subdivisions: int = 3) -> list[TriangleMesh]:
    base = icosphere(subdivisions, radius)
    step = np.asarray(step, dtype=np.float64)
    return [base.translated(step * i) for i in range(frames)]


def inflating_sphere(frames: int, r0: float = 0.3, r1: float = 0.5, subdivisions: int = 3) -> list[TriangleMesh]:
    return [icosphere(subdivisions, r) for r in np.linspace(r0, r1, frames)]


def oscillating_sphere(frames: int = 12, amplitude: float = 0.25, radius: float = 0.35,
                       subdivisions: int = 3) -> list[TriangleMesh]:
    """Sphere whose x velocity flips sign every two frames.

    With key frames every 4 frames the keys sit at the same position while the
    intermediate frames swing to alternating sides, so the motion cannot be
    recovered from the key frames alone.
    """
    # x offsets: 0, a/2, a, a/2, 0, -a/2, -a, -a/2, 0, ...
    pattern = np.array([0.0, 0.5, 1.0, 0.5, 0.0, -0.5, -1.0, -0.5])
    xs = amplitude * pattern[np.arange(frames) % len(pattern)]
    base = icosphere(subdivisions, radius)
    return [base.translated((x, 0.0, 0.0)) for x in xs]


def deforming_sphere(frames: int = 12, radius: float = 0.45, subdivisions: int = 3,
                     amplitude: float = 0.18) -> list[TriangleMesh]:
    """Sphere that squashes and stretches along z while drifting in x."""
    base = icosphere(subdivisions, 1.0)
    out = []
    for i in range(frames):
        phase = 2 * np.pi * i / max(frames, 1)
        sz = 1.0 + amplitude * np.sin(phase)
        sxy = 1.0 / np.sqrt(sz)
        v = base.vertices * radius * np.array([sxy, sxy, sz])
        v = v + np.array([0.15 * np.sin(0.5 * phase), 0.0, 0.0])
        out.append(TriangleMesh(v, base.faces))
    return out
