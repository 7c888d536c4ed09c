"""Functional-map transfer of a trained field onto another shape.

A point-to-point correspondence (target vertex -> source surface point)
induces a sparse matrix P; projecting through the eigenbases gives the
functional map C, and the target-side embedding Phi_T C feeds the source
network unchanged.  Correspondences are inputs; nothing here estimates
them.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .embedding import IntrinsicSpec
from .mesh import SurfacePoint, TriMesh
from .render import render_view
from .spectrum import EigenBasis

P2P_MAGIC = b"INFP2P\x00\x00"


class TransferError(Exception):
    pass


@dataclass
class Correspondence:
    """Per target vertex: a source surface point (face + barycentrics)."""

    faces: np.ndarray   # (n_target,) uint32 into source mesh faces
    barys: np.ndarray   # (n_target, 3)
    source_mesh_hash: str = ""
    target_mesh_hash: str = ""

    def __post_init__(self):
        self.faces = np.asarray(self.faces, np.uint32)
        self.barys = np.asarray(self.barys, np.float64)
        if self.barys.shape != (len(self.faces), 3):
            raise TransferError("barycentric array shape mismatch")
        if np.any(self.barys < -1e-9):
            raise TransferError("negative barycentric weight")
        if np.abs(self.barys.sum(axis=1) - 1.0).max() > 1e-9:
            raise TransferError("barycentric rows must sum to 1")

    @property
    def n_target(self) -> int:
        return len(self.faces)

    def matrix(self, source_mesh: TriMesh) -> sp.csr_matrix:
        """Sparse (n_target, n_source) map with <= 3 entries per row."""
        tri = source_mesh.faces[self.faces]  # (n, 3) vertex ids
        rows = np.repeat(np.arange(self.n_target), 3)
        cols = tri.ravel()
        vals = self.barys.ravel()
        return sp.coo_matrix(
            (vals, (rows, cols)),
            shape=(self.n_target, source_mesh.n_vertices),
        ).tocsr()

    def save(self, path):
        header = json.dumps({
            "count": self.n_target,
            "source_mesh_hash": self.source_mesh_hash,
            "target_mesh_hash": self.target_mesh_hash,
        }).encode("utf-8")
        rec = np.zeros(self.n_target,
                       dtype=[("face", "<u4"), ("bary", "<f8", (3,))])
        rec["face"] = self.faces
        rec["bary"] = self.barys
        with open(path, "wb") as fh:
            fh.write(P2P_MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            fh.write(rec.tobytes())

    @classmethod
    def load(cls, path) -> "Correspondence":
        with open(path, "rb") as fh:
            if fh.read(8) != P2P_MAGIC:
                raise TransferError("not a correspondence file")
            (hlen,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            count = int(header["count"])
            rec = np.frombuffer(
                fh.read(count * 28),
                dtype=[("face", "<u4"), ("bary", "<f8", (3,))],
            )
        return cls(
            rec["face"].copy(), rec["bary"].copy(),
            source_mesh_hash=header.get("source_mesh_hash", ""),
            target_mesh_hash=header.get("target_mesh_hash", ""),
        )


def identity_correspondence(mesh: TriMesh) -> Correspondence:
    """Each vertex mapped to itself via the first face containing it."""
    n = mesh.n_vertices
    verts, first = np.unique(mesh.faces.ravel(), return_index=True)
    if len(verts) != n:
        raise TransferError("isolated vertex has no incident face")
    face_of = np.full(n, -1, np.int64)
    corner_of = np.full(n, -1, np.int64)
    face_of[verts] = first // 3
    corner_of[verts] = first % 3
    barys = np.zeros((n, 3))
    barys[np.arange(n), corner_of] = 1.0
    h = mesh.content_hash()
    return Correspondence(face_of.astype(np.uint32), barys,
                          source_mesh_hash=h, target_mesh_hash=h)


def vertex_map_correspondence(
    source_mesh: TriMesh, target_mesh: TriMesh, vertex_map
) -> Correspondence:
    """Exact bijection: target vertex i corresponds to source vertex
    vertex_map[i]."""
    ident = identity_correspondence(source_mesh)
    vm = np.asarray(vertex_map)
    return Correspondence(
        ident.faces[vm], ident.barys[vm],
        source_mesh_hash=source_mesh.content_hash(),
        target_mesh_hash=target_mesh.content_hash(),
    )


def closest_point_correspondence(
    source_mesh: TriMesh, target_mesh: TriMesh
) -> Correspondence:
    """Map each target vertex to the nearest source surface point.

    Intended for rediscretizations of the same geometry; distances are
    found by projecting onto every face plane (small meshes only).
    """
    a, b, c = source_mesh.face_corners()
    e1 = b - a
    e2 = c - a
    g11 = np.einsum("ij,ij->i", e1, e1)
    g12 = np.einsum("ij,ij->i", e1, e2)
    g22 = np.einsum("ij,ij->i", e2, e2)
    det = np.maximum(g11 * g22 - g12 * g12, 1e-300)
    faces = np.empty(target_mesh.n_vertices, np.uint32)
    barys = np.empty((target_mesh.n_vertices, 3))
    for i, p in enumerate(target_mesh.vertices):
        w = p[None, :] - a
        r1 = np.einsum("ij,ij->i", w, e1)
        r2 = np.einsum("ij,ij->i", w, e2)
        u = (g22 * r1 - g12 * r2) / det
        v = (g11 * r2 - g12 * r1) / det
        u = np.clip(u, 0.0, 1.0)
        v = np.clip(v, 0.0, 1.0)
        over = u + v > 1.0
        scale = np.where(over, u + v, 1.0)
        u /= scale
        v /= scale
        cand = a + u[:, None] * e1 + v[:, None] * e2
        d2 = np.einsum("ij,ij->i", cand - p[None, :], cand - p[None, :])
        f = int(np.argmin(d2))
        faces[i] = f
        barys[i] = (1.0 - u[f] - v[f], u[f], v[f])
    barys = np.clip(barys, 0.0, None)
    barys /= barys.sum(axis=1)[:, None]
    return Correspondence(
        faces, barys,
        source_mesh_hash=source_mesh.content_hash(),
        target_mesh_hash=target_mesh.content_hash(),
    )


@dataclass(frozen=True)
class FunctionalMap:
    """C maps source-basis coefficients to target-basis coefficients."""

    C: np.ndarray  # (d_target, d_source)
    source_basis_hash: str = ""
    target_basis_hash: str = ""

    def save(self, path):
        np.savez(path, C=self.C,
                 source_basis_hash=self.source_basis_hash,
                 target_basis_hash=self.target_basis_hash)

    @classmethod
    def load(cls, path) -> "FunctionalMap":
        z = np.load(path, allow_pickle=False)
        return cls(z["C"],
                   str(z["source_basis_hash"]),
                   str(z["target_basis_hash"]))


def fmap_from_p2p(
    corr: Correspondence,
    source_mesh: TriMesh,
    basis_src: EigenBasis,
    basis_tgt: EigenBasis,
    mass_weighted: bool = True,
) -> FunctionalMap:
    """C = Phi_T^T M_T P Phi_C.

    With mass weighting (default) Phi_T^T M_T is the M-orthonormal left
    inverse of Phi_T; mass_weighted=False gives the literal unweighted
    projection Phi_T^T P Phi_C.
    """
    if corr.source_mesh_hash and basis_src.mesh_hash:
        if corr.source_mesh_hash != basis_src.mesh_hash:
            raise TransferError("correspondence/source basis hash mismatch")
    if corr.target_mesh_hash and basis_tgt.mesh_hash:
        if corr.target_mesh_hash != basis_tgt.mesh_hash:
            raise TransferError("correspondence/target basis hash mismatch")
    if corr.n_target != basis_tgt.n:
        raise TransferError("correspondence rows != target vertex count")
    P = corr.matrix(source_mesh)
    pulled = P @ basis_src.phis  # (n_target, d_source)
    left = basis_tgt.phis * basis_tgt.mass[:, None] if mass_weighted \
        else basis_tgt.phis
    C = left.T @ pulled
    return FunctionalMap(
        C,
        source_basis_hash=basis_src.content_hash(),
        target_basis_hash=basis_tgt.content_hash(),
    )


def transfer_embedding_batch(
    fmap: FunctionalMap,
    basis_tgt: EigenBasis,
    mesh_tgt: TriMesh,
    faces,
    barys,
    spec: IntrinsicSpec | None = None,
) -> np.ndarray:
    """Rows of Phi_T C interpolated at target surface points, scaled by
    the source embedding coefficients."""
    d_src = fmap.C.shape[1]
    spec = spec or IntrinsicSpec(d=d_src)
    if spec.d != d_src:
        raise TransferError(
            f"spec wants d={spec.d} but functional map has d_C={d_src}"
        )
    a = spec.coeffs()
    transported = basis_tgt.phis @ fmap.C  # (n_target, d_source)
    idx = mesh_tgt.faces[np.asarray(faces)]
    vals = np.einsum("nk,nkd->nd", np.asarray(barys), transported[idx])
    return vals * a[None, :]


def transfer_embedding(
    fmap: FunctionalMap,
    basis_tgt: EigenBasis,
    mesh_tgt: TriMesh,
    p: SurfacePoint,
    spec: IntrinsicSpec | None = None,
) -> np.ndarray:
    return transfer_embedding_batch(
        fmap, basis_tgt, mesh_tgt, np.array([p.face]), p.bary[None, :],
        spec=spec,
    )[0]


def transferred_shader(params, config, fmap, basis_tgt, mesh_tgt,
                       spec=None, view_spec=None):
    from . import embedding as emb
    from . import field as fld

    def shade(samples):
        x = transfer_embedding_batch(
            fmap, basis_tgt, mesh_tgt, samples.faces, samples.barys,
            spec=spec,
        )
        view = None
        if view_spec is not None:
            if view_spec.kind == emb.POSENC:
                view = emb.embed_posenc(view_spec, samples.view_dirs)
            else:
                view = samples.view_dirs
        return fld.forward(params, config, x, view)

    return shade


def render_transferred(params, config, fmap, basis_tgt, mesh_tgt, camera,
                       spec=None, view_spec=None):
    """render_view with the transferred embedding in place of the source
    intrinsic embedding; the network is evaluated unchanged."""
    shade = transferred_shader(params, config, fmap, basis_tgt, mesh_tgt,
                               spec=spec, view_spec=view_spec)
    return render_view(mesh_tgt, camera, shade)
