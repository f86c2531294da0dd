"""Volume centers: Lloyd-relaxed seeds inside the first frame, tracked frame to frame.

Tracking minimizes, per frame,

    E(C) = sum_j |c_j - m_j(C)|^2 + w * sum_j sum_{l in nbr(j)} (|c_j - c_l| - d0_jl)^2

where ``m_j(C)`` is the centroid of the occupied voxels whose nearest center is
``c_j`` (the nearest occupied voxel when that cell is empty), ``nbr`` is a fixed
k-nearest-neighbour graph from the previous frame and ``d0`` its edge lengths.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from .errors import EmptyInputError, ValidationError
from .mesh import TriangleMesh
from .voxel import lattice_inside

VCTR_MAGIC = b"VCTR"


@dataclass(frozen=True)
class TrackingConfig:
    p: int = 2000
    mu: float = 0.5
    lloyd_tol: float = 1e-3
    knn: int = 8
    rigidity_weight: float = 1.0
    max_iters: int = 50
    seed: int = 0
    resolution: int = 64

    def __post_init__(self):
        if self.p < 1:
            raise ValidationError(f"p must be >= 1, got {self.p}")
        if not 0.0 < self.mu < 1.0:
            raise ValidationError(f"mu must lie in (0, 1), got {self.mu}")
        if self.knn < 0 or self.max_iters < 0 or self.resolution < 2:
            raise ValidationError("knn, max_iters must be >= 0 and resolution >= 2")


@dataclass(frozen=True, eq=False)
class VolumeCenters:
    """``positions[i, j]`` is center ``j`` in frame ``i``."""

    positions: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 3 or pos.shape[2] != 3 or pos.shape[0] < 1 or pos.shape[1] < 1:
            raise ValidationError(f"centers must have shape (N, p, 3), got {pos.shape}")
        object.__setattr__(self, "positions", pos)

    @property
    def frames(self) -> int:
        return self.positions.shape[0]

    @property
    def p(self) -> int:
        return self.positions.shape[1]

    def save(self, path) -> None:
        """Little-endian float32 dump behind a 12-byte header (magic, u32 N, u32 p)."""
        with open(Path(path), "wb") as fh:
            fh.write(VCTR_MAGIC + struct.pack("<II", self.frames, self.p))
            fh.write(self.positions.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "VolumeCenters":
        data = Path(path).read_bytes()
        if len(data) < 12 or data[:4] != VCTR_MAGIC:
            raise ValidationError(f"{path}: not a VCTR centers file")
        n, p = struct.unpack_from("<II", data, 4)
        if len(data) != 12 + 12 * n * p:
            raise ValidationError(f"{path}: expected {12 * n * p} payload bytes, found {len(data) - 12}")
        pos = np.frombuffer(data, dtype="<f4", offset=12).reshape(n, p, 3).astype(np.float64)
        return cls(pos)


@dataclass(frozen=True, eq=False)
class OccupiedVoxels:
    centers: np.ndarray  # (M, 3) occupied voxel centers
    spacing: float
    tree: cKDTree
    origin: np.ndarray  # lower corner of the grid
    mask: np.ndarray  # (nx, ny, nz) occupancy

    def contains(self, points: np.ndarray) -> np.ndarray:
        idx = np.floor((np.asarray(points) - self.origin) / self.spacing).astype(np.int64)
        ok = np.all((idx >= 0) & (idx < np.array(self.mask.shape)), axis=1)
        out = np.zeros(len(idx), dtype=bool)
        out[ok] = self.mask[idx[ok, 0], idx[ok, 1], idx[ok, 2]]
        return out


def tracking_voxels(mesh: TriangleMesh, cfg: TrackingConfig) -> OccupiedVoxels:
    """Occupied voxel centers on a grid whose longest bbox axis spans ``cfg.resolution`` cells."""
    if mesh.is_empty:
        raise EmptyInputError("cannot track centers in an empty mesh")
    lo, hi = mesh.bounds()
    h = float((hi - lo).max()) / cfg.resolution
    if not h > 0:
        raise EmptyInputError("mesh has a degenerate bounding box")
    counts = np.maximum(np.ceil((hi - lo) / h - 1e-9).astype(int), 1)
    axes = [lo[a] + (np.arange(counts[a]) + 0.5) * h for a in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    inside = lattice_inside(mesh, grid, h, cfg.mu)
    occ = np.ascontiguousarray(grid[inside])
    if len(occ) == 0:
        raise EmptyInputError("mesh occupancy is empty; is the surface closed?")
    return OccupiedVoxels(occ, h, cKDTree(occ), lo.copy(), inside)


def assign_nearest(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Index of the nearest center per point; exact ties go to the lowest index."""
    if len(centers) == 1:
        return np.zeros(len(points), dtype=np.int64)
    d, idx = cKDTree(centers).query(points, k=2)
    tie = (d[:, 0] == d[:, 1]) & (idx[:, 1] < idx[:, 0])
    return np.where(tie, idx[:, 1], idx[:, 0]).astype(np.int64)


def _cell_targets(centers: np.ndarray, vox: OccupiedVoxels) -> tuple[np.ndarray, np.ndarray]:
    """Per-center cell centroid (nearest voxel for empty cells) and per-center voxel count."""
    owner = assign_nearest(vox.centers, centers)
    p = len(centers)
    cnt = np.bincount(owner, minlength=p).astype(np.float64)
    sums = np.stack([np.bincount(owner, weights=vox.centers[:, a], minlength=p) for a in range(3)], axis=1)
    target = np.empty_like(centers)
    full = cnt > 0
    target[full] = sums[full] / cnt[full, None]
    if not full.all():
        _, nn = vox.tree.query(centers[~full])
        target[~full] = vox.centers[nn]
    return target, cnt


def lloyd_energy(centers: np.ndarray, vox: OccupiedVoxels) -> float:
    owner = assign_nearest(vox.centers, centers)
    return float(((vox.centers - centers[owner]) ** 2).sum())


def seed_centers(mesh: TriangleMesh, cfg: TrackingConfig, voxels: OccupiedVoxels | None = None,
                 history: list | None = None) -> np.ndarray:
    """``cfg.p`` centers at distinct random occupied voxels, then Lloyd-relaxed.

    If ``history`` is given, the Lloyd energy before each relaxation step is appended to it.
    """
    vox = voxels if voxels is not None else tracking_voxels(mesh, cfg)
    m = len(vox.centers)
    if m < cfg.p:
        raise ValidationError(f"only {m} occupied voxels for {cfg.p} centers")
    rng = np.random.default_rng(cfg.seed)
    c = vox.centers[np.sort(rng.choice(m, size=cfg.p, replace=False))].copy()
    for _ in range(cfg.max_iters):
        if history is not None:
            history.append(lloyd_energy(c, vox))
        target, cnt = _cell_targets(c, vox)
        new = np.where(cnt[:, None] > 0, target, c)
        move = np.sqrt(((new - c) ** 2).sum(1)).max()
        c = new
        if move < cfg.lloyd_tol:
            break
    if history is not None:
        history.append(lloyd_energy(c, vox))
    return c


class _Rigidity:
    def __init__(self, prev: np.ndarray, knn: int, weight: float):
        p = len(prev)
        k = min(knn, p - 1)
        self.weight = weight
        if k <= 0 or weight == 0:
            self.i = self.j = np.zeros(0, dtype=np.int64)
            self.d0 = np.zeros(0)
            return
        _, nbr = cKDTree(prev).query(prev, k=k + 1)
        self.i = np.repeat(np.arange(p), k)
        self.j = nbr[:, 1:].reshape(-1).astype(np.int64)
        self.d0 = np.linalg.norm(prev[self.i] - prev[self.j], axis=1)

    def residual(self, c):
        diff = c[self.i] - c[self.j]
        length = np.linalg.norm(diff, axis=1)
        return length - self.d0, diff, length

    def energy(self, c) -> float:
        r, _, _ = self.residual(c)
        return self.weight * float((r ** 2).sum())


def _energy(c, vox, rig):
    target, cnt = _cell_targets(c, vox)
    return float(((c - target) ** 2).sum()) + rig.energy(c), target, cnt


def track_next(prev: np.ndarray, prev2: np.ndarray | None, mesh: TriangleMesh, cfg: TrackingConfig,
               voxels: OccupiedVoxels | None = None) -> np.ndarray:
    """Centers for the next frame: constant-velocity guess refined by Gauss-Newton on the energy."""
    prev = np.asarray(prev, dtype=np.float64)
    vox = voxels if voxels is not None else tracking_voxels(mesh, cfg)
    c = prev + (prev - np.asarray(prev2, dtype=np.float64)) if prev2 is not None else prev.copy()
    p = len(c)
    rig = _Rigidity(prev, cfg.knn, cfg.rigidity_weight)
    e, target, cnt = _energy(c, vox, rig)
    occ_centroid = vox.centers.mean(axis=0)
    n_edges = len(rig.i)
    rows = np.repeat(np.arange(n_edges), 6)
    for _ in range(cfg.max_iters):
        # With targets frozen, interior centers resist rigid motion although a rigid
        # shift leaves their residuals unchanged, so first try the translation that
        # puts the count-weighted center mean on the occupancy centroid.
        shift = occ_centroid - (cnt / cnt.sum()) @ c
        e_start = e
        # That shift underestimates the motion (boundary cells gain voxels), so
        # keep doubling it while the energy drops.
        scale = 1.0
        while np.linalg.norm(scale * shift) > 1e-3 * vox.spacing and scale <= 64:
            cand = c + scale * shift
            e_new, t_new, c_new = _energy(cand, vox, rig)
            if e_new >= e:
                break
            c, e, target, cnt = cand, e_new, t_new, c_new
            scale *= 2.0
        # Gauss-Newton step on the linearization with targets held fixed.
        r, diff, length = rig.residual(c)
        u = diff / np.maximum(length, 1e-12)[:, None]
        cols = np.concatenate([3 * rig.i[:, None] + np.arange(3), 3 * rig.j[:, None] + np.arange(3)], axis=1)
        vals = np.concatenate([u, -u], axis=1)
        J = sp.csr_matrix((vals.reshape(-1), (rows, cols.reshape(-1))), shape=(n_edges, 3 * p))
        w = rig.weight
        A = (sp.identity(3 * p, format="csr") + w * (J.T @ J)).tocsr()
        rhs = -((c - target).reshape(-1) + w * (J.T @ r))
        # A = I + w J^T J is SPD and well conditioned, so CG converges in a few dozen iterations
        delta, _ = spla.cg(A, rhs, rtol=1e-12, atol=0.0, maxiter=10 * p)
        delta = delta.reshape(p, 3)
        step = 1.0
        for _ls in range(8):
            cand = c + step * delta
            e_new, t_new, c_new = _energy(cand, vox, rig)
            if e_new < e:
                c, e, target, cnt = cand, e_new, t_new, c_new
                break
            step *= 0.5
        if e_start - e < 1e-6:
            break
    # centers that drifted out of the volume snap to the nearest occupied voxel
    out = ~vox.contains(c)
    if out.any():
        _, nearest = vox.tree.query(c[out])
        c[out] = vox.centers[nearest]
    return c


def track_sequence(meshes: list[TriangleMesh], cfg: TrackingConfig | None = None,
                   progress=None) -> VolumeCenters:
    cfg = cfg or TrackingConfig()
    if len(meshes) == 0:
        raise EmptyInputError("cannot track an empty sequence")
    rows = [seed_centers(meshes[0], cfg)]
    if progress:
        progress(0, len(meshes))
    for i in range(1, len(meshes)):
        prev2 = rows[i - 2] if i >= 2 else None
        rows.append(track_next(rows[i - 1], prev2, meshes[i], cfg))
        if progress:
            progress(i, len(meshes))
    return VolumeCenters(np.stack(rows))


def containment(centers: np.ndarray, mesh: TriangleMesh, cfg: TrackingConfig) -> float:
    """Fraction of centers whose tracking voxel is occupied."""
    return float(np.mean(tracking_voxels(mesh, cfg).contains(centers)))
