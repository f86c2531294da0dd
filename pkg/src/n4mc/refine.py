"""Fit TSDF-Def deformations (and near-surface TSDF magnitudes) to a target surface.

The marching-cubes case of every cell is frozen from the initial sign pattern,
which makes the extracted vertices a smooth function of the grid values:
deformations are ``0.5 * voxel * tanh(u)`` and band TSDF values keep their sign
as ``sign * sigmoid(v)``. Gradient descent with a backtracking line search
lowers the symmetric chamfer distance between extracted vertices and surface
samples; a step is only taken if it lowers the distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree

from .dmc import mc_topology
from .errors import ValidationError
from .mesh import TriangleMesh, sample_surface
from .voxel import TsdfDefGrid

_EPS = 1e-4


@dataclass
class RefineTrace:
    chamfer: list[float] = field(default_factory=list)  # value after every accepted step (first = initial)


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean squared nearest-neighbour distance between two point sets."""
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(np.mean(da ** 2) + np.mean(db ** 2))


def refine_tsdf_def(grid: TsdfDefGrid, mesh: TriangleMesh, iterations: int = 100, step: float = 1.0,
                    samples: int = 20000, seed: int = 0, trace: RefineTrace | None = None) -> TsdfDefGrid:
    if iterations < 0:
        raise ValidationError("iterations must be >= 0")
    if iterations == 0:
        return grid
    k = grid.k
    tsdf0 = grid.values[..., 0].astype(np.float64)
    lo, hi, _ = mc_topology(tsdf0)
    if len(lo) == 0:
        raise ValidationError("grid has no zero crossing; nothing to refine")
    target, _ = sample_surface(mesh, samples, seed=seed)
    target_t = torch.from_numpy(target)
    tree_target = cKDTree(target)

    half = 0.5 * grid.voxel_size
    lattice = torch.from_numpy(grid.spec.points().reshape(-1, 3))
    d0 = np.clip(grid.values[..., 1:].reshape(-1, 3) / half, -1 + _EPS, 1 - _EPS)
    u = torch.from_numpy(np.arctanh(d0)).requires_grad_(True)
    # only values on crossed edges influence the surface
    band = np.unique(np.concatenate([lo, hi]))
    flat = tsdf0.reshape(-1)
    sign = torch.from_numpy(np.where(flat[band] < 0, -1.0, 1.0))
    mag = np.clip(np.abs(flat[band]), _EPS, 1 - _EPS)
    v = torch.from_numpy(np.log(mag / (1 - mag))).requires_grad_(True)
    pos_in_band = np.full(flat.size, -1)
    pos_in_band[band] = np.arange(len(band))
    ia = torch.from_numpy(pos_in_band[lo])
    ib = torch.from_numpy(pos_in_band[hi])
    lo_t, hi_t = torch.from_numpy(lo), torch.from_numpy(hi)

    def vertices(u_, v_):
        vals = sign * torch.sigmoid(v_)
        va, vb = vals[ia], vals[ib]
        t = (-va / (vb - va))[:, None]
        pa = lattice[lo_t] + half * torch.tanh(u_[lo_t])
        pb = lattice[hi_t] + half * torch.tanh(u_[hi_t])
        return pa + t * (pb - pa)

    def loss(u_, v_):
        verts = vertices(u_, v_)
        vn = verts.detach().numpy()
        _, near_t = tree_target.query(vn)
        _, near_v = cKDTree(vn).query(target)
        val = ((verts - target_t[near_t]) ** 2).sum(1).mean() + ((target_t - verts[near_v]) ** 2).sum(1).mean()
        return val

    tr = trace if trace is not None else RefineTrace()
    cur = loss(u, v)
    tr.chamfer.append(cur.item())
    lr = step
    for _ in range(iterations):
        gu, gv = torch.autograd.grad(cur, (u, v))
        accepted = False
        for _ls in range(20):
            with torch.no_grad():
                u_new = (u - lr * gu).requires_grad_(True)
                v_new = (v - lr * gv).requires_grad_(True)
            new = loss(u_new, v_new)
            if new.item() < cur.item():
                accepted = True
                break
            lr *= 0.5
        if not accepted:
            break
        u, v, cur = u_new, v_new, new
        tr.chamfer.append(cur.item())
        lr *= 1.5
    out = grid.values.copy()
    with torch.no_grad():
        out[..., 1:] = (half * torch.tanh(u)).numpy().reshape(k, k, k, 3).astype(np.float32)
        flat_out = out[..., 0].reshape(-1)
        flat_out[band] = (sign * torch.sigmoid(v)).numpy().astype(np.float32)
        out[..., 0] = flat_out.reshape(k, k, k)
    return grid.with_values(out)
