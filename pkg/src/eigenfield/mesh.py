"""Discrete manifolds: triangle meshes and closed polylines.

Meshes are immutable after construction. The ray acceleration structure
(an axis-aligned BVH) is built lazily on the first query and shared by
all subsequent read-only queries.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._bvh import BvhNodes, build_bvh, intersect_batch_brute, intersect_batch_bvh

SURFACE = "surface2d"
LOOP = "loop1d"

# Minimum ray-hit distance; hits closer than this are discarded.
RAY_EPS = 1e-6
# Two hits within this distance count as a tie, broken by lower face index.
RAY_TIE_EPS = 1e-12


class MeshError(Exception):
    pass


class ObjParseError(MeshError):
    """Malformed input file. Carries the 1-based line number."""

    def __init__(self, line_no, message):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class DegenerateFaceError(MeshError):
    def __init__(self, faces, message="degenerate (zero-area) faces"):
        self.faces = list(faces)
        super().__init__(f"{message}: {self.faces}")


class NonManifoldError(MeshError):
    def __init__(self, faces, message="non-manifold edges touch faces"):
        self.faces = list(faces)
        super().__init__(f"{message}: {self.faces}")


class PointOffPlaneError(MeshError):
    pass


@dataclass(frozen=True)
class Ray:
    """A ray with unit direction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class SurfacePoint:
    """A point on a mesh, stored as face index plus barycentric weights.

    ``position`` is derived from the host mesh at construction; use
    :meth:`TriMesh.surface_point` rather than building these by hand.
    """

    face: int
    bary: np.ndarray
    position: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bary, dtype=np.float64).reshape(3)
        if b.min() < -1e-9 or abs(b.sum() - 1.0) > 1e-9:
            raise ValueError(f"invalid barycentric coordinates {b}")
        object.__setattr__(self, "bary", b)
        object.__setattr__(
            self, "position", np.asarray(self.position, dtype=np.float64).reshape(3)
        )


class TriMesh:
    """An embedded triangle mesh, or a closed polyline (``kind='loop1d'``).

    Parameters
    ----------
    vertices : (n, 3) array_like
        Vertex positions in world units.
    faces : (m, 3) array_like of int
        Vertex-index triples. Empty for polylines, whose edges connect
        consecutive vertices with implicit closure.
    kind : str
        ``'surface2d'`` or ``'loop1d'``.
    validate : bool
        Run load-time validation (index bounds, degenerate faces,
        edge-manifoldness). Watertightness is only warned about because
        rediscretized meshes may carry tiny boundary defects.
    """

    def __init__(self, vertices, faces=None, kind=SURFACE, validate=True):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64).reshape(-1, 3)
        if faces is None or (hasattr(faces, "__len__") and len(faces) == 0):
            self.faces = np.zeros((0, 3), dtype=np.int32)
        else:
            self.faces = np.ascontiguousarray(faces, dtype=np.int32).reshape(-1, 3)
        if kind not in (SURFACE, LOOP):
            raise ValueError(f"unknown mesh kind {kind!r}")
        self.kind = kind
        self._bvh: BvhNodes | None = None
        self._hash: str | None = None
        if validate:
            self.validate()

    # -- basic properties ---------------------------------------------------

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_faces(self):
        return self.faces.shape[0]

    def face_corners(self):
        """Vertex positions per face as three (m, 3) arrays."""
        v = self.vertices
        f = self.faces
        return v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]

    def face_areas(self):
        a, b, c = self.face_corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def face_normals(self):
        a, b, c = self.face_corners()
        n = np.cross(b - a, c - a)
        lens = np.linalg.norm(n, axis=1)
        lens[lens == 0.0] = 1.0
        return n / lens[:, None]

    def edge_lengths(self):
        """Loop edge lengths; edge i connects vertex i to i+1 (mod n)."""
        if self.kind != LOOP:
            raise MeshError("edge_lengths is defined for loop1d meshes")
        nxt = np.roll(self.vertices, -1, axis=0)
        return np.linalg.norm(nxt - self.vertices, axis=1)

    def total_area(self):
        if self.kind == LOOP:
            return float(self.edge_lengths().sum())
        return float(self.face_areas().sum())

    def content_hash(self):
        """SHA-256 over kind, shapes, and raw vertex/face bytes."""
        if self._hash is None:
            h = hashlib.sha256()
            h.update(self.kind.encode())
            h.update(np.asarray(self.vertices.shape, dtype=np.int64).tobytes())
            h.update(self.vertices.tobytes())
            h.update(self.faces.tobytes())
            self._hash = h.hexdigest()
        return self._hash

    # -- validation ---------------------------------------------------------

    def validate(self):
        if self.kind == LOOP:
            if self.n_vertices < 3:
                raise MeshError("loop1d needs at least 3 vertices")
            if self.n_faces != 0:
                raise MeshError("loop1d stores no faces")
            if np.any(self.edge_lengths() <= 0.0):
                raise MeshError("loop1d has a zero-length edge")
            return
        if self.n_faces == 0:
            raise MeshError("surface2d mesh has no faces")
        if self.faces.min() < 0 or self.faces.max() >= self.n_vertices:
            raise MeshError("face index out of range")
        areas = self.face_areas()
        bad = np.nonzero(areas <= 1e-12 * areas.mean())[0]
        if bad.size:
            raise DegenerateFaceError(bad.tolist())
        # Edge-manifold: every edge on <= 2 faces. Boundary edges are only
        # advisory (rediscretized meshes may have tiny defects).
        edges = np.sort(
            self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1
        )
        uniq, counts = np.unique(edges, axis=0, return_counts=True)
        if np.any(counts > 2):
            over = uniq[counts > 2]
            mask = np.zeros(self.n_faces, dtype=bool)
            for e in over:
                hit = np.any(self.faces == e[0], axis=1) & np.any(
                    self.faces == e[1], axis=1
                )
                mask |= hit
            raise NonManifoldError(np.nonzero(mask)[0].tolist())
        if np.any(counts == 1):
            warnings.warn(
                f"mesh is not watertight ({int((counts == 1).sum())} boundary edges)",
                stacklevel=2,
            )

    # -- geometry queries ---------------------------------------------------

    def vertex_areas(self):
        """Lumped per-vertex areas.

        Each face contributes a third of its area to each of its corners;
        loop vertices get half the sum of their two incident edge lengths.
        The result is strictly positive and sums to the total area.
        """
        if self.kind == LOOP:
            ell = self.edge_lengths()
            return 0.5 * (ell + np.roll(ell, 1))
        areas = self.face_areas()
        if np.any(areas <= 0.0):
            raise DegenerateFaceError(np.nonzero(areas <= 0.0)[0].tolist())
        out = np.zeros(self.n_vertices)
        np.add.at(out, self.faces.ravel(), np.repeat(areas / 3.0, 3))
        return out

    def barycentric(self, face, point):
        """Barycentric coordinates of ``point`` in face ``face``.

        The point must lie in the face plane within 1e-6 of the face
        diameter; otherwise :class:`PointOffPlaneError` is raised.
        """
        p = np.asarray(point, dtype=np.float64).reshape(3)
        v0, v1, v2 = self.vertices[self.faces[face]]
        e1, e2 = v1 - v0, v2 - v0
        # 2x2 Gram solve for the in-plane coefficients
        g11, g12, g22 = e1 @ e1, e1 @ e2, e2 @ e2
        r = p - v0
        b1, b2 = np.linalg.solve([[g11, g12], [g12, g22]], [e1 @ r, e2 @ r])
        diam = max(np.linalg.norm(e1), np.linalg.norm(e2), np.linalg.norm(v2 - v1))
        off = np.linalg.norm(r - b1 * e1 - b2 * e2)
        if off > 1e-6 * diam:
            raise PointOffPlaneError(
                f"point is {off:.3g} off the plane of face {face} (diameter {diam:.3g})"
            )
        return np.array([1.0 - b1 - b2, b1, b2])

    def interpolate(self, face, bary):
        """Position of the barycentric combination of a face's corners."""
        b = np.asarray(bary, dtype=np.float64).reshape(3)
        return b @ self.vertices[self.faces[face]]

    def surface_point(self, face, bary):
        b = np.asarray(bary, dtype=np.float64).reshape(3)
        b = np.clip(b, 0.0, None)
        b = b / b.sum()
        return SurfacePoint(int(face), b, self.interpolate(face, b))

    # -- ray queries ----------------------------------------------------------

    def build_bvh(self):
        """Build the ray acceleration structure now instead of lazily."""
        if self.kind != SURFACE:
            raise MeshError("ray queries need a surface2d mesh")
        if self._bvh is None:
            a, b, c = self.face_corners()
            self._bvh = build_bvh(a, b, c)
        return self._bvh

    def ray_intersect(self, ray: Ray):
        """Nearest ray-mesh intersection.

        Returns ``(SurfacePoint, distance)`` or ``None`` on a miss. Hits
        closer than ``RAY_EPS`` along the ray are ignored; exact ties between
        faces go to the lower face index.
        """
        faces, ts, us, vs = self.ray_intersect_batch(
            ray.origin[None, :], ray.direction[None, :]
        )
        if faces[0] < 0:
            return None
        bary = np.array([1.0 - us[0] - vs[0], us[0], vs[0]])
        return self.surface_point(int(faces[0]), bary), float(ts[0])

    def ray_intersect_batch(self, origins, directions, brute_force=False):
        """Vectorized nearest-hit query.

        Returns ``(faces, t, u, v)`` arrays; ``faces`` is -1 where the ray
        misses. ``brute_force=True`` tests every face and is the reference
        implementation the BVH is checked against.
        """
        if self.kind != SURFACE:
            raise MeshError("ray queries need a surface2d mesh")
        o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        d = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
        if brute_force:
            a, b, c = self.face_corners()
            return intersect_batch_brute(o, d, a, b, c, RAY_EPS, RAY_TIE_EPS)
        bvh = self.build_bvh()
        a, b, c = self.face_corners()
        return intersect_batch_bvh(o, d, bvh, a, b, c, RAY_EPS, RAY_TIE_EPS)


# -- file I/O ----------------------------------------------------------------


def load_obj(path):
    """Read a Wavefront OBJ file into a :class:`TriMesh`.

    Only ``v``, ``f``, and ``l`` records are used; texture and normal
    indices inside face tokens are ignored. Faces must be triangles.
    A file with ``l`` records and no faces loads as a closed polyline.
    """
    vertices = []
    faces = []
    loop = []
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tag, *rest = line.split()
            if tag == "v":
                if len(rest) < 3:
                    raise ObjParseError(line_no, "vertex needs 3 coordinates")
                try:
                    vertices.append([float(x) for x in rest[:3]])
                except ValueError as exc:
                    raise ObjParseError(line_no, f"bad vertex coordinate: {exc}")
            elif tag == "f":
                idx = [_parse_index(tok, len(vertices), line_no) for tok in rest]
                if len(idx) != 3:
                    raise ObjParseError(
                        line_no, f"only triangle faces are supported, got {len(idx)} vertices"
                    )
                faces.append(idx)
            elif tag == "l":
                loop.extend(_parse_index(tok, len(vertices), line_no) for tok in rest)
            # all other record types are ignored
    if not vertices:
        raise ObjParseError(0, "no vertices found")
    if faces and loop:
        raise MeshError("file mixes faces and polyline records")
    if loop:
        if loop[0] == loop[-1]:
            loop = loop[:-1]
        verts = np.asarray(vertices, dtype=np.float64)[loop]
        return TriMesh(verts, None, kind=LOOP)
    return TriMesh(np.asarray(vertices), np.asarray(faces, dtype=np.int64))


def _parse_index(token, n_vertices, line_no):
    head = token.split("/")[0]
    try:
        i = int(head)
    except ValueError:
        raise ObjParseError(line_no, f"bad index token {token!r}")
    if i == 0:
        raise ObjParseError(line_no, "indices are 1-based")
    if i < 0:
        i = n_vertices + i  # relative indexing counts back from latest vertex
    else:
        i = i - 1
    if i < 0 or i >= n_vertices:
        raise ObjParseError(line_no, f"index {token} out of range")
    return i


def load_loop_txt(path):
    """Read a closed polyline from a plain-text list of 3-vectors.

    One ``x y z`` triple per line; the loop closes implicitly from the
    last vertex back to the first.
    """
    rows = []
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 3:
                raise ObjParseError(line_no, "expected 3 coordinates per line")
            try:
                rows.append([float(x) for x in parts])
            except ValueError as exc:
                raise ObjParseError(line_no, f"bad coordinate: {exc}")
    if rows and np.allclose(rows[0], rows[-1]):
        rows = rows[:-1]
    return TriMesh(np.asarray(rows), None, kind=LOOP)


def save_obj(mesh: TriMesh, path):
    """Write a mesh (or loop) back out as OBJ."""
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        if mesh.kind == LOOP:
            idx = " ".join(str(i + 1) for i in range(mesh.n_vertices))
            fh.write(f"l {idx} 1\n")
        else:
            for f in mesh.faces:
                fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
