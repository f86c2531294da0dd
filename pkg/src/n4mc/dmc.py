"""Deformable marching cubes.

Standard case tables on the TSDF channel at iso level 0, but every lattice
corner is displaced by its deformation vector before edge interpolation.
Edge vertices are shared between neighbouring cells and always interpolated
from the lower lattice endpoint towards the upper one.
"""

from __future__ import annotations

import numpy as np

from .geometry.mc_tables import CORNERS, EDGES, TRIANGLES
from .mesh import TriangleMesh
from .voxel import TsdfDefGrid

_TABLE = np.full((256, 16), -1, dtype=np.int64)
for _case, _tris in enumerate(TRIANGLES):
    _TABLE[_case, :len(_tris)] = _tris

_CORNER_OFF = np.array(CORNERS, dtype=np.int64)
# per cube edge: axis it runs along and the offset of its lower endpoint
_EDGE_AXIS = np.empty(12, dtype=np.int64)
_EDGE_START = np.empty((12, 3), dtype=np.int64)
for _e, (_a, _b) in enumerate(EDGES):
    _d = _CORNER_OFF[_b] - _CORNER_OFF[_a]
    _EDGE_AXIS[_e] = int(np.nonzero(_d)[0][0])
    _EDGE_START[_e] = np.minimum(_CORNER_OFF[_a], _CORNER_OFF[_b])
_AXIS_STEP = np.eye(3, dtype=np.int64)


def mc_topology(values: np.ndarray, iso: float = 0.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Crossed lattice edges and triangles for a scalar field.

    Returns ``(edge_lo, edge_hi, faces)``: flat lattice indices of both
    endpoints of every output vertex (lower endpoint first) and the triangle
    index array into those vertices.
    """
    v = np.asarray(values)
    kx, ky, kz = v.shape
    inside = v < iso
    cases = np.zeros((kx - 1, ky - 1, kz - 1), dtype=np.int64)
    for c, (dx, dy, dz) in enumerate(CORNERS):
        cases |= inside[dx:kx - 1 + dx, dy:ky - 1 + dy, dz:kz - 1 + dz].astype(np.int64) << c
    active = np.nonzero((cases != 0) & (cases != 255))
    if len(active[0]) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros((0, 3), dtype=np.int64)
    cell = np.stack(active, axis=1)
    tri_edges = _TABLE[cases[active], :15].reshape(-1, 5, 3)
    valid = tri_edges[:, :, 0] >= 0
    e = np.where(tri_edges < 0, 0, tri_edges)
    lo = cell[:, None, None, :] + _EDGE_START[e]
    axis = _EDGE_AXIS[e]
    n = kx * ky * kz
    gid = axis * n + (lo[..., 0] * ky + lo[..., 1]) * kz + lo[..., 2]
    face_gid = gid[valid]  # cell-major, then table order
    uniq, inv = np.unique(face_gid, return_inverse=True)
    ax = uniq // n
    start = uniq % n
    step = (_AXIS_STEP[ax] * np.array([ky * kz, kz, 1])).sum(axis=1)
    # table winding is clockwise seen from outside; flip so normals point outwards
    return start, start + step, inv.reshape(-1, 3)[:, ::-1].copy()


def marching_cubes(values: np.ndarray, positions: np.ndarray | None = None, iso: float = 0.0) -> TriangleMesh:
    """Extract the iso-surface of ``values`` with corners placed at ``positions``.

    ``positions`` defaults to the canonical ``[-1, 1]^3`` lattice.
    """
    v = np.asarray(values, dtype=np.float64)
    if positions is None:
        axes = [np.linspace(-1.0, 1.0, s) for s in v.shape]
        positions = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    a, b, faces = mc_topology(v, iso)
    if len(faces) == 0:
        return TriangleMesh.empty()
    flat_v = v.reshape(-1)
    flat_p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    va, vb = flat_v[a], flat_v[b]
    t = (iso - va) / (vb - va)
    pa, pb = flat_p[a], flat_p[b]
    verts = pa + t[:, None] * (pb - pa)
    return TriangleMesh(verts, faces)


def deformable_marching_cubes(grid: TsdfDefGrid) -> TriangleMesh:
    return marching_cubes(grid.values[..., 0], grid.corner_positions(), iso=0.0)
