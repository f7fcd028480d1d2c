"""Bounding volume hierarchy over a triangle soup.

The tree is stored as flat arrays so traversal can run inside numba
kernels without holding the GIL. Triangles carry a global index ordered by
``(mesh id, triangle id)``; equal-distance hits resolve to the lower index,
which is what a linear scan in that order would return.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import Ray, intersect_triangle

_STACK_SIZE = 128


@dataclass(frozen=True, eq=False)
class Bvh:
    """Flattened AABB tree.

    ``node_child[i]`` is the left child of inner node ``i`` (the right one is
    ``node_child[i] + 1``) or ``-1`` for a leaf, whose triangles are
    ``prims[node_start[i]:node_start[i] + node_count[i]]``.
    """

    v0: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    mesh_ids: np.ndarray
    tri_ids: np.ndarray
    node_lo: np.ndarray
    node_hi: np.ndarray
    node_child: np.ndarray
    node_start: np.ndarray
    node_count: np.ndarray
    prims: np.ndarray
    leaf_size: int

    @property
    def triangle_count(self) -> int:
        return len(self.v0)

    @property
    def node_count_total(self) -> int:
        return len(self.node_lo)

    def leaves(self):
        for i in range(len(self.node_child)):
            if self.node_child[i] < 0:
                yield i


def build_bvh(v0, v1, v2, mesh_ids=None, tri_ids=None, leaf_size: int = 4) -> Bvh:
    """Build a median-split BVH over triangles given by their vertex arrays.

    ``v0``, ``v1``, ``v2`` are ``(N, 3)`` world positions. ``mesh_ids`` and
    ``tri_ids`` default to 0 and ``arange(N)``; rows must already be sorted
    by ``(mesh id, triangle id)`` so the row index doubles as tie-breaker.
    """
    if leaf_size < 1:
        raise ValueError("leaf_size must be positive")
    v0 = np.ascontiguousarray(v0, dtype=np.float64).reshape(-1, 3)
    v1 = np.ascontiguousarray(v1, dtype=np.float64).reshape(-1, 3)
    v2 = np.ascontiguousarray(v2, dtype=np.float64).reshape(-1, 3)
    n = len(v0)
    mesh_ids = np.zeros(n, np.int64) if mesh_ids is None else np.asarray(mesh_ids, np.int64)
    tri_ids = np.arange(n, dtype=np.int64) if tri_ids is None else np.asarray(tri_ids, np.int64)
    if n > 1:
        key = mesh_ids * (int(tri_ids.max()) + 1) + tri_ids
        if np.any(np.diff(key) <= 0):
            raise ValueError("triangles must be sorted by (mesh id, triangle id) without duplicates")

    tri_lo = np.minimum(np.minimum(v0, v1), v2)
    tri_hi = np.maximum(np.maximum(v0, v1), v2)
    # Pad boxes well above rounding error so the slab test stays conservative.
    scale = 1.0 + (np.max(np.abs(np.concatenate([tri_lo, tri_hi]))) if n else 0.0)
    pad = 1e-9 * scale
    centroids = (tri_lo + tri_hi) * 0.5

    node_lo, node_hi, node_child, node_start, node_count = [], [], [], [], []
    prims = np.arange(n, dtype=np.int64)

    def new_node():
        node_lo.append(np.zeros(3))
        node_hi.append(np.zeros(3))
        node_child.append(-1)
        node_start.append(0)
        node_count.append(0)
        return len(node_lo) - 1

    root = new_node()
    stack = [(root, 0, n)]
    while stack:
        node, start, end = stack.pop()
        idx = prims[start:end]
        if end > start:
            node_lo[node] = tri_lo[idx].min(axis=0) - pad
            node_hi[node] = tri_hi[idx].max(axis=0) + pad
        else:
            node_lo[node] = np.full(3, np.inf)
            node_hi[node] = np.full(3, -np.inf)
        count = end - start
        if count <= leaf_size:
            node_start[node] = start
            node_count[node] = count
            continue
        c = centroids[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        order = np.argsort(c[:, axis], kind="stable")
        prims[start:end] = idx[order]
        mid = start + count // 2
        left = new_node()
        new_node()
        node_child[node] = left
        stack.append((left + 1, mid, end))
        stack.append((left, start, mid))

    return Bvh(
        v0=v0, v1=v1, v2=v2,
        mesh_ids=mesh_ids, tri_ids=tri_ids,
        node_lo=np.array(node_lo).reshape(-1, 3),
        node_hi=np.array(node_hi).reshape(-1, 3),
        node_child=np.array(node_child, dtype=np.int64),
        node_start=np.array(node_start, dtype=np.int64),
        node_count=np.array(node_count, dtype=np.int64),
        prims=prims,
        leaf_size=leaf_size,
    )


@njit(nogil=True, cache=True)
def _box_entry(ox, oy, oz, dx, dy, dz, lo, hi, t_far):
    """Entry distance of the ray into the box, or inf if it misses [0, t_far]."""
    tmin = 0.0
    tmax = t_far
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for k in range(3):
        if d[k] == 0.0:
            if o[k] < lo[k] or o[k] > hi[k]:
                return np.inf
        else:
            inv = 1.0 / d[k]
            t1 = (lo[k] - o[k]) * inv
            t2 = (hi[k] - o[k]) * inv
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > tmin:
                tmin = t1
            if t2 < tmax:
                tmax = t2
            if tmin > tmax:
                return np.inf
    return tmin


@njit(nogil=True, cache=True)
def traverse(ox, oy, oz, dx, dy, dz, v0, v1, v2, node_lo, node_hi, node_child, node_start, node_count, prims):
    """Closest hit over the tree: ``(index, t, w0, w1, w2)``, index -1 on a miss."""
    best_i = -1
    best_t = np.inf
    bw0 = 0.0
    bw1 = 0.0
    bw2 = 0.0
    if prims.shape[0] == 0:
        return best_i, best_t, bw0, bw1, bw2
    stack = np.empty(_STACK_SIZE, np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if _box_entry(ox, oy, oz, dx, dy, dz, node_lo[node], node_hi[node], best_t) == np.inf:
            continue
        child = node_child[node]
        if child < 0:
            s = node_start[node]
            for j in range(s, s + node_count[node]):
                i = prims[j]
                t, w0, w1, w2 = intersect_triangle(ox, oy, oz, dx, dy, dz, v0[i], v1[i], v2[i])
                if t < best_t or (t == best_t and t < np.inf and i < best_i):
                    best_i = i
                    best_t = t
                    bw0 = w0
                    bw1 = w1
                    bw2 = w2
        else:
            # Visit the nearer child first; the far one stays on the stack.
            ta = _box_entry(ox, oy, oz, dx, dy, dz, node_lo[child], node_hi[child], best_t)
            tb = _box_entry(ox, oy, oz, dx, dy, dz, node_lo[child + 1], node_hi[child + 1], best_t)
            if ta <= tb:
                stack[sp] = child + 1
                stack[sp + 1] = child
            else:
                stack[sp] = child
                stack[sp + 1] = child + 1
            sp += 2
    return best_i, best_t, bw0, bw1, bw2


@njit(nogil=True, cache=True)
def linear_scan(ox, oy, oz, dx, dy, dz, v0, v1, v2):
    """Reference closest hit by testing every triangle in index order."""
    best_i = -1
    best_t = np.inf
    bw0 = 0.0
    bw1 = 0.0
    bw2 = 0.0
    for i in range(v0.shape[0]):
        t, w0, w1, w2 = intersect_triangle(ox, oy, oz, dx, dy, dz, v0[i], v1[i], v2[i])
        if t < best_t:
            best_i = i
            best_t = t
            bw0 = w0
            bw1 = w1
            bw2 = w2
    return best_i, best_t, bw0, bw1, bw2


@njit(nogil=True, cache=True)
def _batch(origins, directions, v0, v1, v2, node_lo, node_hi, node_child, node_start, node_count, prims, use_tree):
    n = origins.shape[0]
    idx = np.empty(n, np.int64)
    ts = np.empty(n)
    ws = np.empty((n, 3))
    for r in range(n):
        o = origins[r]
        d = directions[r]
        if use_tree:
            i, t, w0, w1, w2 = traverse(o[0], o[1], o[2], d[0], d[1], d[2], v0, v1, v2,
                                        node_lo, node_hi, node_child, node_start, node_count, prims)
        else:
            i, t, w0, w1, w2 = linear_scan(o[0], o[1], o[2], d[0], d[1], d[2], v0, v1, v2)
        idx[r] = i
        ts[r] = t
        ws[r, 0] = w0
        ws[r, 1] = w1
        ws[r, 2] = w2
    return idx, ts, ws


def _args(bvh: Bvh):
    return (bvh.v0, bvh.v1, bvh.v2, bvh.node_lo, bvh.node_hi, bvh.node_child,
            bvh.node_start, bvh.node_count, bvh.prims)


def bvh_intersect(bvh: Bvh, ray: Ray):
    """Closest hit as ``(mesh id, triangle id, t, bary)`` or ``None``."""
    o, d = ray.origin, ray.direction
    i, t, w0, w1, w2 = traverse(o[0], o[1], o[2], d[0], d[1], d[2], *_args(bvh))
    if i < 0:
        return None
    return int(bvh.mesh_ids[i]), int(bvh.tri_ids[i]), float(t), np.array([w0, w1, w2])


def intersect_many(bvh: Bvh, origins, directions, brute_force: bool = False):
    """Vectorized closest hits for ``(N, 3)`` ray arrays.

    Returns ``(index, t, bary)`` where ``index`` is the global triangle row
    (-1 on a miss). ``brute_force`` switches to the linear scan.
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    return _batch(origins, directions, *_args(bvh), not brute_force)
