"""Bounding volume hierarchy over triangles with closest-point and winding-number queries.

The winding-number query follows the hierarchical far-field scheme of fast
winding numbers: clusters far from the query point are replaced by a Taylor
expansion (up to second order) of the solid-angle integrand about the
cluster's area-weighted centroid; near clusters are summed exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

LEAF_SIZE = 8
FOUR_PI = 4.0 * np.pi


@dataclass(frozen=True)
class BVH:
    tris: np.ndarray  # (F, 3, 3) triangle corners, permuted into leaf order
    order: np.ndarray  # original face index of each entry in ``tris``
    lo: np.ndarray
    hi: np.ndarray
    left: np.ndarray  # -1 for leaves
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    center: np.ndarray  # expansion point per node
    radius: np.ndarray
    m0: np.ndarray  # (nodes, 3)       integral of n dA
    m1: np.ndarray  # (nodes, 3, 3)    integral of n (x - c)^T dA
    m2: np.ndarray  # (nodes, 3, 3, 3) integral of n (x - c)(x - c)^T dA


def build_bvh(vertices: np.ndarray, faces: np.ndarray) -> BVH:
    tris = np.ascontiguousarray(vertices[faces], dtype=np.float64).reshape(-1, 3, 3)
    nf = len(tris)
    cent = tris.mean(axis=1)
    order = np.arange(nf)
    lo, hi, left, right, start, count = [], [], [], [], [], []

    def new_node(s, c):
        seg = tris[order[s:s + c]].reshape(-1, 3)
        if c:
            lo.append(seg.min(axis=0))
            hi.append(seg.max(axis=0))
        else:
            lo.append(np.zeros(3))
            hi.append(np.zeros(3))
        left.append(-1)
        right.append(-1)
        start.append(s)
        count.append(c)
        return len(lo) - 1

    new_node(0, nf)
    stack = [0]
    while stack:
        node = stack.pop()
        s, c = start[node], count[node]
        if c <= LEAF_SIZE:
            continue
        idx = order[s:s + c]
        cc = cent[idx]
        axis = int(np.argmax(cc.max(axis=0) - cc.min(axis=0)))
        # stable sort keeps the build deterministic for ties
        srt = np.argsort(cc[:, axis], kind="stable")
        order[s:s + c] = idx[srt]
        half = c // 2
        l_ = new_node(s, half)
        r_ = new_node(s + half, c - half)
        left[node] = l_
        right[node] = r_
        stack += [r_, l_]

    tris_p = np.ascontiguousarray(tris[order])
    start_a = np.array(start, dtype=np.int64)
    count_a = np.array(count, dtype=np.int64)
    center, radius, m0, m1, m2 = _moments(tris_p, start_a, count_a)
    return BVH(
        tris=tris_p, order=order.astype(np.int64),
        lo=np.array(lo, dtype=np.float64).reshape(-1, 3), hi=np.array(hi, dtype=np.float64).reshape(-1, 3),
        left=np.array(left, dtype=np.int64), right=np.array(right, dtype=np.int64),
        start=start_a, count=count_a, center=center, radius=radius, m0=m0, m1=m1, m2=m2,
    )


@nb.njit(cache=True)
def _moments(tris, start, count):
    nn = len(start)
    center = np.zeros((nn, 3))
    radius = np.zeros(nn)
    m0 = np.zeros((nn, 3))
    m1 = np.zeros((nn, 3, 3))
    m2 = np.zeros((nn, 3, 3, 3))
    for node in range(nn):
        s = start[node]
        c = count[node]
        atot = 0.0
        for t in range(s, s + c):
            a = tris[t, 0]
            e1 = tris[t, 1] - a
            e2 = tris[t, 2] - a
            cr = np.cross(e1, e2)
            area = 0.5 * np.sqrt(cr[0] ** 2 + cr[1] ** 2 + cr[2] ** 2)
            atot += area
            for k in range(3):
                center[node, k] += area * (tris[t, 0, k] + tris[t, 1, k] + tris[t, 2, k]) / 3.0
        if atot > 0:
            center[node] /= atot
        elif c > 0:
            for t in range(s, s + c):
                for k in range(3):
                    center[node, k] += (tris[t, 0, k] + tris[t, 1, k] + tris[t, 2, k]) / (3.0 * c)
        p = center[node]
        r2 = 0.0
        for t in range(s, s + c):
            v = tris[t] - p  # corners relative to the expansion point
            for i in range(3):
                d = v[i, 0] ** 2 + v[i, 1] ** 2 + v[i, 2] ** 2
                if d > r2:
                    r2 = d
            an = 0.5 * np.cross(v[1] - v[0], v[2] - v[0])  # area vector
            area = np.sqrt(an[0] ** 2 + an[1] ** 2 + an[2] ** 2)
            if area == 0.0:
                continue
            n = an / area
            sv = v[0] + v[1] + v[2]
            for i in range(3):
                m0[node, i] += an[i]
                for j in range(3):
                    m1[node, i, j] += an[i] * sv[j] / 3.0
            # integral over the triangle of x x^T = A/12 (sum v v^T + s s^T)
            for j in range(3):
                for k in range(3):
                    q = (v[0, j] * v[0, k] + v[1, j] * v[1, k] + v[2, j] * v[2, k] + sv[j] * sv[k]) / 12.0
                    for i in range(3):
                        m2[node, i, j, k] += area * n[i] * q
        radius[node] = np.sqrt(r2)
    return center, radius, m0, m1, m2


@nb.njit(cache=True, inline="always")
def _solid_angle(a0, a1, a2, b0, b1, b2, c0, c1, c2):
    la = np.sqrt(a0 * a0 + a1 * a1 + a2 * a2)
    lb = np.sqrt(b0 * b0 + b1 * b1 + b2 * b2)
    lc = np.sqrt(c0 * c0 + c1 * c1 + c2 * c2)
    det = a0 * (b1 * c2 - b2 * c1) - a1 * (b0 * c2 - b2 * c0) + a2 * (b0 * c1 - b1 * c0)
    den = la * lb * lc + (a0 * b0 + a1 * b1 + a2 * b2) * lc + (a0 * c0 + a1 * c1 + a2 * c2) * lb \
        + (b0 * c0 + b1 * c1 + b2 * c2) * la
    return 2.0 * np.arctan2(det, den)


@nb.njit(cache=True)
def _tri_solid_angle(tri, q):
    return _solid_angle(tri[0, 0] - q[0], tri[0, 1] - q[1], tri[0, 2] - q[2],
                        tri[1, 0] - q[0], tri[1, 1] - q[1], tri[1, 2] - q[2],
                        tri[2, 0] - q[0], tri[2, 1] - q[1], tri[2, 2] - q[2])


@nb.njit(cache=True)
def winding_exact(tris, points):
    out = np.empty(len(points))
    for p in range(len(points)):
        q = points[p]
        acc = 0.0
        for t in range(len(tris)):
            acc += _tri_solid_angle(tris[t], q)
        out[p] = acc / FOUR_PI
    return out


@nb.njit(cache=True)
def _far_field(node, q, center, m0, m1, m2):
    r = center[node] - q
    d2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2]
    d = np.sqrt(d2)
    inv3 = 1.0 / (d2 * d)
    inv5 = inv3 / d2
    inv7 = inv5 / d2
    acc = 0.0
    for i in range(3):
        acc += m0[node, i] * r[i] * inv3
    for i in range(3):
        for j in range(3):
            g = -3.0 * r[i] * r[j] * inv5
            if i == j:
                g += inv3
            acc += m1[node, i, j] * g
    for i in range(3):
        for j in range(3):
            for k in range(3):
                h = 15.0 * r[i] * r[j] * r[k] * inv7
                t = 0.0
                if i == j:
                    t += r[k]
                if i == k:
                    t += r[j]
                if j == k:
                    t += r[i]
                h -= 3.0 * t * inv5
                acc += 0.5 * m2[node, i, j, k] * h
    return acc


@nb.njit(cache=True)
def winding_fast(tris, left, right, start, count, center, radius, m0, m1, m2, points, beta):
    out = np.empty(len(points))
    stack = np.empty(256, dtype=np.int64)
    for p in range(len(points)):
        q = points[p]
        acc = 0.0
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if count[node] == 0:
                continue
            dx = center[node, 0] - q[0]
            dy = center[node, 1] - q[1]
            dz = center[node, 2] - q[2]
            dist = np.sqrt(dx * dx + dy * dy + dz * dz)
            if dist > beta * radius[node] and left[node] >= 0:
                acc += _far_field(node, q, center, m0, m1, m2)
            elif left[node] < 0:
                for t in range(start[node], start[node] + count[node]):
                    acc += _tri_solid_angle(tris[t], q)
            else:
                stack[sp] = left[node]
                stack[sp + 1] = right[node]
                sp += 2
        out[p] = acc / FOUR_PI
    return out


@nb.njit(cache=True)
def closest_on_triangle(p, a, b, c):
    """Closest point to ``p`` on triangle ``abc`` (Ericson, Real-Time Collision Detection 5.1.5)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab @ ap
    d2 = ac @ ap
    if d1 <= 0.0 and d2 <= 0.0:
        return a
    bp = p - b
    d3 = ab @ bp
    d4 = ac @ bp
    if d3 >= 0.0 and d4 <= d3:
        return b
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return a + v * ab
    cp = p - c
    d5 = ab @ cp
    d6 = ac @ cp
    if d6 >= 0.0 and d5 <= d6:
        return c
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return a + w * ac
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + w * (c - b)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return a + ab * v + ac * w


@nb.njit(cache=True)
def _box_dist2(q, lo, hi):
    d = 0.0
    for k in range(3):
        if q[k] < lo[k]:
            d += (lo[k] - q[k]) ** 2
        elif q[k] > hi[k]:
            d += (q[k] - hi[k]) ** 2
    return d


@nb.njit(cache=True)
def closest_points(tris, lo, hi, left, right, start, count, points, max_dist2):
    """Nearest surface point per query; entries beyond ``max_dist2`` keep ``inf`` / ``-1``."""
    n = len(points)
    best_d2 = np.full(n, np.inf)
    best_pt = np.zeros((n, 3))
    best_tri = np.full(n, -1, dtype=np.int64)
    stack = np.empty(256, dtype=np.int64)
    for p in range(n):
        q = points[p]
        bd = max_dist2
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if count[node] == 0 or _box_dist2(q, lo[node], hi[node]) > bd:
                continue
            if left[node] < 0:
                for t in range(start[node], start[node] + count[node]):
                    c = closest_on_triangle(q, tris[t, 0], tris[t, 1], tris[t, 2])
                    d2 = (c[0] - q[0]) ** 2 + (c[1] - q[1]) ** 2 + (c[2] - q[2]) ** 2
                    if d2 < bd or (d2 == bd and best_tri[p] >= 0 and t < best_tri[p]):
                        bd = d2
                        best_d2[p] = d2
                        best_pt[p] = c
                        best_tri[p] = t
            else:
                l_ = left[node]
                r_ = right[node]
                dl = _box_dist2(q, lo[l_], hi[l_])
                dr = _box_dist2(q, lo[r_], hi[r_])
                # visit the nearer child first
                if dl <= dr:
                    stack[sp] = r_
                    stack[sp + 1] = l_
                else:
                    stack[sp] = l_
                    stack[sp + 1] = r_
                sp += 2
    return best_d2, best_pt, best_tri
