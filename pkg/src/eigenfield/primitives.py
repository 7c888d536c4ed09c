"""Deterministic test geometry: spheres, tori, loops, and remeshes."""

from __future__ import annotations

import numpy as np
from scipy.spatial import ConvexHull

from .mesh import LOOP, TriMesh


def icosahedron():
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    return verts, faces


def icosphere(subdivisions=3, radius=1.0):
    """Subdivided icosahedron projected onto a sphere.

    Subdivision k has 2 + 10*4^k vertices and 20*4^k faces.
    """
    verts, faces = icosahedron()
    verts = [v for v in verts]
    midpoint = {}

    def mid(i, j):
        key = (min(i, j), max(i, j))
        if key not in midpoint:
            m = verts[i] + verts[j]
            m /= np.linalg.norm(m)
            verts.append(m)
            midpoint[key] = len(verts) - 1
        return midpoint[key]

    for _ in range(subdivisions):
        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.asarray(new_faces, dtype=np.int64)
    v = np.asarray(verts) * radius
    return TriMesh(v, faces)


def torus(nu=48, nv=24, major=1.0, minor=0.35):
    """Triangulated torus; closed and manifold."""
    u = 2 * np.pi * np.arange(nu) / nu
    v = 2 * np.pi * np.arange(nv) / nv
    uu, vv = np.meshgrid(u, v, indexing="ij")
    ring = major + minor * np.cos(vv)
    verts = np.stack(
        [ring * np.cos(uu), ring * np.sin(uu), minor * np.sin(vv)], axis=-1
    ).reshape(-1, 3)
    faces = []
    for i in range(nu):
        for j in range(nv):
            a = i * nv + j
            b = ((i + 1) % nu) * nv + j
            c = ((i + 1) % nu) * nv + (j + 1) % nv
            d = i * nv + (j + 1) % nv
            faces += [[a, b, c], [a, c, d]]
    return TriMesh(verts, np.asarray(faces, dtype=np.int64))


def uniform_circle(n=256, circumference=2 * np.pi):
    """Regular n-gon polyline. The default circumference matches the unit
    circle so eigenvalues land at k^2."""
    # n-gon with edge length c/n has circumradius (c/n) / (2 sin(pi/n))
    r = (circumference / n) / (2 * np.sin(np.pi / n))
    theta = 2 * np.pi * np.arange(n) / n
    verts = np.stack([r * np.cos(theta), r * np.sin(theta), np.zeros(n)], axis=1)
    return TriMesh(verts, None, kind=LOOP)


def irregular_sphere(n=1500, radius=1.0, seed=0):
    """Irregular triangulation of a sphere: convex hull of random points.

    Serves as a rediscretization of the icosphere with the same geometry
    but unrelated sampling.
    """
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((n, 3))
    pts /= np.linalg.norm(pts, axis=1)[:, None]
    hull = ConvexHull(pts)
    faces = hull.simplices.astype(np.int64)
    # orient all faces outward (normal pointing away from the origin)
    a, b, c = pts[faces[:, 0]], pts[faces[:, 1]], pts[faces[:, 2]]
    normals = np.cross(b - a, c - a)
    flip = np.einsum("ij,ij->i", normals, (a + b + c) / 3.0) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return TriMesh(pts * radius, faces)


def dumbbell(subdivisions=3, waist=0.45, stretch=1.3):
    """Non-uniform closed surface: a sphere pinched at the equator and
    stretched along z, giving two lobes joined by a narrow neck."""
    base = icosphere(subdivisions)
    v = base.vertices.copy()
    z = v[:, 2]
    s = waist + (1.0 - waist) * z * z
    v[:, 0] *= s
    v[:, 1] *= s
    v[:, 2] *= stretch
    return TriMesh(v, base.faces)


def tetrahedron(edge=1.0):
    """Regular tetrahedron, the smallest closed triangle mesh."""
    v = np.array(
        [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64
    )
    v *= edge / np.linalg.norm(v[0] - v[1])
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]], dtype=np.int64)
    return TriMesh(v, f)
