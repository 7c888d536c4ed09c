"""Axis-aligned BVH over triangles with numba-compiled traversal.

The brute-force path tests every face with the same primitive test and
tie rule, and serves as the reference the BVH is validated against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

LEAF_SIZE = 4

# Barycentric slack for accepting hits on triangle borders; without it a
# ray exactly through a vertex or edge can be rejected by every incident face.
_BARY_EPS = 1e-10
_DET_EPS = 1e-30


@dataclass
class BvhNodes:
    bmin: np.ndarray   # (n_nodes, 3)
    bmax: np.ndarray   # (n_nodes, 3)
    left: np.ndarray   # (n_nodes,) child index, -1 for leaves
    right: np.ndarray  # (n_nodes,)
    start: np.ndarray  # (n_nodes,) leaf range into prim
    count: np.ndarray  # (n_nodes,)
    prim: np.ndarray   # (n_faces,) permutation of face indices


def build_bvh(a, b, c):
    """Median-split BVH over the triangles (a[i], b[i], c[i])."""
    n = a.shape[0]
    lo = np.minimum(np.minimum(a, b), c)
    hi = np.maximum(np.maximum(a, b), c)
    centroids = (a + b + c) / 3.0
    prim = np.arange(n, dtype=np.int64)

    bmin, bmax, left, right, start, count = [], [], [], [], [], []

    def new_node():
        bmin.append(np.zeros(3))
        bmax.append(np.zeros(3))
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        return len(bmin) - 1

    root = new_node()
    stack = [(root, 0, n)]
    while stack:
        node, s, e = stack.pop()
        idx = prim[s:e]
        bmin[node] = lo[idx].min(axis=0)
        bmax[node] = hi[idx].max(axis=0)
        if e - s <= LEAF_SIZE:
            start[node], count[node] = s, e - s
            continue
        cen = centroids[idx]
        axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
        order = np.argsort(cen[:, axis], kind="stable")
        prim[s:e] = idx[order]
        mid = s + (e - s) // 2
        lchild, rchild = new_node(), new_node()
        left[node], right[node] = lchild, rchild
        stack.append((lchild, s, mid))
        stack.append((rchild, mid, e))

    return BvhNodes(
        bmin=np.ascontiguousarray(bmin, dtype=np.float64),
        bmax=np.ascontiguousarray(bmax, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        start=np.asarray(start, dtype=np.int64),
        count=np.asarray(count, dtype=np.int64),
        prim=prim,
    )


@njit(cache=True, error_model="numpy")
def _tri_hit(ox, oy, oz, dx, dy, dz, v0, v1, v2, eps):
    """Moller-Trumbore. Returns (t, u, v); t < 0 encodes a miss."""
    e1x, e1y, e1z = v1[0] - v0[0], v1[1] - v0[1], v1[2] - v0[2]
    e2x, e2y, e2z = v2[0] - v0[0], v2[1] - v0[1], v2[2] - v0[2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < _DET_EPS:
        return -1.0, 0.0, 0.0
    inv = 1.0 / det
    tx, ty, tz = ox - v0[0], oy - v0[1], oz - v0[2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < -_BARY_EPS or u > 1.0 + _BARY_EPS:
        return -1.0, 0.0, 0.0
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < -_BARY_EPS or u + v > 1.0 + _BARY_EPS:
        return -1.0, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t <= eps:
        return -1.0, 0.0, 0.0
    return t, u, v


@njit(cache=True, error_model="numpy")
def _traverse_one(o, d, bmin, bmax, left, right, start, count, prim,
                  va, vb, vc, eps, tie_eps):
    invx = 1.0 / d[0]
    invy = 1.0 / d[1]
    invz = 1.0 / d[2]
    best_t = np.inf
    best_face = -1
    best_u = 0.0
    best_v = 0.0
    stack = np.empty(128, dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        # slab test
        t1 = (bmin[node, 0] - o[0]) * invx
        t2 = (bmax[node, 0] - o[0]) * invx
        tn = min(t1, t2)
        tf = max(t1, t2)
        t1 = (bmin[node, 1] - o[1]) * invy
        t2 = (bmax[node, 1] - o[1]) * invy
        tn = max(tn, min(t1, t2))
        tf = min(tf, max(t1, t2))
        t1 = (bmin[node, 2] - o[2]) * invz
        t2 = (bmax[node, 2] - o[2]) * invz
        tn = max(tn, min(t1, t2))
        tf = min(tf, max(t1, t2))
        if tf < max(tn, eps) or tn > best_t + 1e-9:
            continue
        if left[node] < 0:
            for k in range(start[node], start[node] + count[node]):
                f = prim[k]
                t, u, v = _tri_hit(o[0], o[1], o[2], d[0], d[1], d[2],
                                   va[f], vb[f], vc[f], eps)
                if t < 0.0:
                    continue
                if t < best_t - tie_eps:
                    best_t, best_face, best_u, best_v = t, f, u, v
                elif t <= best_t + tie_eps and f < best_face:
                    best_t = min(best_t, t)
                    best_face, best_u, best_v = f, u, v
        else:
            stack[top] = left[node]
            top += 1
            stack[top] = right[node]
            top += 1
    return best_face, best_t, best_u, best_v


@njit(cache=True, error_model="numpy")
def _traverse_many(orig, dirs, bmin, bmax, left, right, start, count, prim,
                   va, vb, vc, eps, tie_eps):
    n = orig.shape[0]
    faces = np.full(n, -1, dtype=np.int64)
    ts = np.full(n, np.inf)
    us = np.zeros(n)
    vs = np.zeros(n)
    for i in range(n):
        f, t, u, v = _traverse_one(orig[i], dirs[i], bmin, bmax, left, right,
                                   start, count, prim, va, vb, vc, eps, tie_eps)
        faces[i] = f
        ts[i] = t
        us[i] = u
        vs[i] = v
    return faces, ts, us, vs


def intersect_batch_bvh(origins, directions, bvh: BvhNodes, a, b, c, eps, tie_eps):
    return _traverse_many(
        origins, directions, bvh.bmin, bvh.bmax, bvh.left, bvh.right,
        bvh.start, bvh.count, bvh.prim,
        np.ascontiguousarray(a), np.ascontiguousarray(b), np.ascontiguousarray(c),
        eps, tie_eps,
    )


def intersect_batch_brute(origins, directions, a, b, c, eps, tie_eps):
    """Test every ray against every face (vectorized, no BVH)."""
    n_rays = origins.shape[0]
    faces = np.full(n_rays, -1, dtype=np.int64)
    ts = np.full(n_rays, np.inf)
    us = np.zeros(n_rays)
    vs = np.zeros(n_rays)
    e1 = b - a
    e2 = c - a
    # chunk rays to bound the (rays x faces) temporaries
    chunk = max(1, int(2e6 / max(a.shape[0], 1)))
    for s in range(0, n_rays, chunk):
        o = origins[s:s + chunk][:, None, :]
        d = directions[s:s + chunk][:, None, :]
        p = np.cross(d, e2[None, :, :])
        det = np.einsum("rfk,fk->rf", p, e1)
        safe = np.abs(det) >= _DET_EPS
        inv = np.where(safe, 1.0 / np.where(safe, det, 1.0), 0.0)
        tvec = o - a[None, :, :]
        u = np.einsum("rfk,rfk->rf", tvec, p) * inv
        q = np.cross(tvec, e1[None, :, :])
        v = np.einsum("rk,rfk->rf", directions[s:s + chunk], q) * inv
        t = np.einsum("fk,rfk->rf", e2, q) * inv
        ok = (
            safe
            & (u >= -_BARY_EPS)
            & (u <= 1.0 + _BARY_EPS)
            & (v >= -_BARY_EPS)
            & (u + v <= 1.0 + _BARY_EPS)
            & (t > eps)
        )
        t = np.where(ok, t, np.inf)
        tmin = t.min(axis=1)
        hit = np.isfinite(tmin)
        # ties within tie_eps resolve to the lowest face index
        cand = t <= (tmin[:, None] + tie_eps)
        face = np.argmax(cand, axis=1)
        rows = np.nonzero(hit)[0]
        faces[s + rows] = face[rows]
        ts[s + rows] = t[rows, face[rows]]
        us[s + rows] = u[rows, face[rows]]
        vs[s + rows] = v[rows, face[rows]]
    return faces, ts, us, vs
