"""Discrete Laplace-Beltrami operators and their low-end eigenbases.

The operator is assembled as a sparse positive semi-definite matrix L with
lumped (diagonal) mass M, and the generalized problem L phi = lambda M phi
is solved for the d smallest eigenpairs by shift-invert Lanczos.  A dense
solver doubles as the brute-force oracle for small problems.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .mesh import LOOP, SURFACE, MeshError, TriMesh

COT_CLAMP = 1e6
DEGENERACY_TOL = 1e-6

BASIS_MAGIC = b"INFBASIS"


class ConvergenceError(Exception):
    """Eigensolver failed to converge; carries the attained residuals."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


def cotan_laplacian(mesh: TriMesh):
    """Cotangent-weighted Laplacian and lumped mass of a triangle mesh.

    Returns
    -------
    L : scipy.sparse.csr_matrix
        Positive semi-definite; off-diagonal entries are
        -(cot alpha + cot beta)/2 over the angles opposite each edge,
        diagonal entries make rows sum to zero.
    m : (n,) float64 array
        Per-vertex lumped mass (one third of incident face areas).
    """
    if mesh.kind != SURFACE:
        raise MeshError("cotan_laplacian requires a surface2d mesh")
    mesh.validate()
    n = mesh.n_vertices
    a, b, c = mesh.face_corners()
    fi = mesh.faces
    data, ii, jj = [], [], []
    # corner k of each face contributes cot(angle at k)/2 to the edge
    # opposite k
    corners = ((a, b, c, 1, 2), (b, c, a, 2, 0), (c, a, b, 0, 1))
    for pk, pi, pj, p, q in corners:
        u = pi - pk
        v = pj - pk
        cross = np.linalg.norm(np.cross(u, v), axis=1)
        cot = np.einsum("ij,ij->i", u, v) / np.maximum(cross, 1e-300)
        w = 0.5 * np.clip(cot, -COT_CLAMP, COT_CLAMP)
        ii += [fi[:, p], fi[:, q]]
        jj += [fi[:, q], fi[:, p]]
        data += [w, w]
    ii = np.concatenate(ii)
    jj = np.concatenate(jj)
    data = np.concatenate(data)
    W = sp.coo_matrix((data, (ii, jj)), shape=(n, n)).tocsr()
    L = sp.diags(np.asarray(W.sum(axis=1)).ravel()) - W
    return L.tocsr(), mesh.vertex_areas()


def polyline_laplacian(mesh: TriMesh):
    """Second-difference Laplacian of a closed polyline.

    Edge i joins vertex i to i+1 (mod n).  Off-diagonals are -1/length,
    masses are the half-sums of the two incident edge lengths.
    """
    if mesh.kind != LOOP:
        raise MeshError("polyline_laplacian requires a loop1d mesh")
    mesh.validate()
    n = mesh.n_vertices
    ell = mesh.edge_lengths()
    if np.any(ell <= 0):
        raise MeshError("zero-length polyline edge")
    w = 1.0 / ell
    nxt = (np.arange(n) + 1) % n
    ii = np.concatenate([np.arange(n), nxt])
    jj = np.concatenate([nxt, np.arange(n)])
    W = sp.coo_matrix((np.concatenate([w, w]), (ii, jj)), shape=(n, n)).tocsr()
    L = sp.diags(np.asarray(W.sum(axis=1)).ravel()) - W
    m = 0.5 * (ell + np.roll(ell, 1))
    return L.tocsr(), m


def laplacian(mesh: TriMesh):
    """Dispatch on mesh kind."""
    if mesh.kind == LOOP:
        return polyline_laplacian(mesh)
    return cotan_laplacian(mesh)


@dataclass(frozen=True)
class EigenBasis:
    """First d generalized eigenpairs of a discrete Laplacian.

    Attributes
    ----------
    lambdas : (d,) float64, non-decreasing, lambdas[0] ~ 0.
    phis : (n, d) float64, column i sampled at the vertices; M-orthonormal.
    mass : (n,) float64, the lumped mass diagonal.
    mesh_hash : content hash of the mesh the basis belongs to.
    meta : free-form solver metadata (persisted in the file trailer).
    """

    lambdas: np.ndarray
    phis: np.ndarray
    mass: np.ndarray
    mesh_hash: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.phis.shape[0]

    @property
    def d(self) -> int:
        return self.phis.shape[1]

    def validate(self, L=None):
        lam, phi, m = self.lambdas, self.phis, self.mass
        if lam.shape != (self.d,) or m.shape != (self.n,):
            raise ValueError("inconsistent EigenBasis shapes")
        if np.any(np.diff(lam) < -1e-12):
            raise ValueError("eigenvalues not sorted")
        if np.any(lam < -1e-10):
            raise ValueError("negative eigenvalue beyond tolerance")
        if self.d > 1 and lam[1] > 0 and abs(lam[0]) >= 1e-6 * lam[1]:
            raise ValueError("lambda_1 not numerically zero")
        const = phi[:, 0]
        if np.ptp(const) > 1e-5 * max(np.abs(const).max(), 1e-300):
            raise ValueError("phi_1 is not constant")
        gram = phi.T @ (m[:, None] * phi)
        if np.abs(gram - np.eye(self.d)).max() > 1e-6:
            raise ValueError("basis is not M-orthonormal")
        if L is not None:
            r = L @ phi - m[:, None] * phi * lam[None, :]
            num = np.linalg.norm(r, axis=0)
            den = np.linalg.norm(L @ phi, axis=0)
            # the kernel column has L phi ~ 0; a relative residual is
            # meaningless there, so require absolute smallness instead
            scale = np.abs(L).sum() / self.n
            kernel = den < 1e-9 * scale
            rel = np.where(kernel, num / scale, num / np.maximum(den, 1e-300))
            if np.any(rel >= 1e-6):
                raise ValueError(
                    f"eigen residual too large: max {rel.max():.3e}"
                )
        return self

    def degenerate_groups(self, tol: float = DEGENERACY_TOL):
        """Indices grouped by repeated eigenvalues.

        Consecutive eigenvalues belong to one group when
        |lambda_i - lambda_j| < tol * (1 + lambda_i).
        """
        groups = []
        start = 0
        for i in range(1, self.d + 1):
            if i == self.d or (
                self.lambdas[i] - self.lambdas[i - 1]
                >= tol * (1.0 + self.lambdas[i - 1])
            ):
                groups.append(np.arange(start, i))
                start = i
        return groups

    def content_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for a in (self.lambdas, self.mass, self.phis):
            h.update(np.ascontiguousarray(a, np.float64).tobytes())
        h.update(self.mesh_hash.encode())
        return h.hexdigest()

    def coefficients(self, f: np.ndarray) -> np.ndarray:
        """Mass-weighted projection <f, phi_i>_M for one or many signals.

        A 1-D signal returns a 1-D coefficient vector; an (n, k) stack
        returns (d, k).
        """
        f = np.asarray(f)
        out = self.phis.T @ (self.mass[:, None] * f.reshape(self.n, -1))
        return out[:, 0] if f.ndim == 1 else out

    def reconstruct(self, coeffs: np.ndarray) -> np.ndarray:
        return self.phis @ coeffs

    def save(self, path):
        n, d = self.n, self.d
        trailer = dict(self.meta)
        trailer["mesh_hash"] = self.mesh_hash
        with open(path, "wb") as fh:
            fh.write(BASIS_MAGIC)
            fh.write(struct.pack("<QQ", n, d))
            fh.write(np.ascontiguousarray(self.lambdas, np.float64).tobytes())
            fh.write(np.ascontiguousarray(self.mass, np.float64).tobytes())
            fh.write(np.ascontiguousarray(self.phis, np.float64).tobytes())
            fh.write(json.dumps(trailer).encode("utf-8"))

    @classmethod
    def load(cls, path) -> "EigenBasis":
        with open(path, "rb") as fh:
            magic = fh.read(8)
            if magic != BASIS_MAGIC:
                raise ValueError(f"not an eigenbasis file: magic {magic!r}")
            n, d = struct.unpack("<QQ", fh.read(16))
            lam = np.frombuffer(fh.read(8 * d), np.float64).copy()
            mass = np.frombuffer(fh.read(8 * n), np.float64).copy()
            phis = np.frombuffer(fh.read(8 * n * d), np.float64)
            phis = phis.reshape(n, d).copy()
            trailer = json.loads(fh.read().decode("utf-8"))
        mesh_hash = trailer.pop("mesh_hash", "")
        return cls(lam, phis, mass, mesh_hash=mesh_hash, meta=trailer)


def _canonical_signs(phis: np.ndarray) -> np.ndarray:
    """Flip columns so the largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(phis), axis=0)
    signs = np.sign(phis[idx, np.arange(phis.shape[1])])
    signs[signs == 0] = 1.0
    return phis * signs[None, :]


def _m_normalize(phis: np.ndarray, m: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.einsum("ij,i,ij->j", phis, m, phis))
    return phis / norms[None, :]


def smallest_eigenpairs(
    L, m, d: int, seed: int = 0, mesh_hash: str = ""
) -> EigenBasis:
    """d smallest eigenpairs of L phi = lambda M phi by shift-invert Lanczos.

    Deterministic for a fixed seed (the Lanczos start vector is drawn from
    it).  Raises ConvergenceError with attained residuals on failure.
    """
    n = L.shape[0]
    if d >= n:
        raise ValueError(f"need d < n, got d={d}, n={n}")
    if d < 1:
        raise ValueError("d must be >= 1")
    M = sp.diags(np.asarray(m, dtype=np.float64))
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(n)
    # Lanczos misses copies of high-multiplicity eigenvalues when k cuts a
    # cluster; compute a padded set with a wide Krylov basis and truncate.
    pad = min(max(8, d // 4), n - 1 - d)
    k = d + pad
    ncv = min(n, max(2 * k + 1, 4 * d, 40))
    try:
        lam, phi = eigsh(
            L.tocsc(),
            k=k,
            M=M.tocsc(),
            sigma=-1e-8,
            which="LM",
            v0=v0,
            ncv=ncv,
            maxiter=50 * k,
            tol=1e-8,
        )
    except ArpackNoConvergence as exc:
        got_lam, got_phi = exc.eigenvalues, exc.eigenvectors
        res = None
        if got_phi is not None and got_phi.size:
            r = L @ got_phi - (m[:, None] * got_phi) * got_lam[None, :]
            res = np.linalg.norm(r, axis=0)
        raise ConvergenceError(
            f"eigensolver did not converge within {50 * k} iterations; "
            f"attained residuals {res}",
            residuals=res,
        ) from exc
    order = np.argsort(lam)[:d]
    lam, phi = lam[order], phi[:, order]
    phi = _canonical_signs(_m_normalize(phi, np.asarray(m)))
    meta = {"solver": "shift-invert-lanczos", "seed": seed, "d": d}
    return EigenBasis(lam, phi, np.asarray(m, np.float64), mesh_hash, meta)


def dense_eigenpairs(L, m, d: int, mesh_hash: str = "") -> EigenBasis:
    """Dense generalized eigensolve; the brute-force oracle for n <= 2000."""
    n = L.shape[0]
    if n > 2000:
        raise ValueError("dense path is limited to n <= 2000")
    if d >= n:
        raise ValueError(f"need d < n, got d={d}, n={n}")
    A = L.toarray() if sp.issparse(L) else np.asarray(L, np.float64)
    B = np.diag(np.asarray(m, dtype=np.float64))
    lam, phi = scipy.linalg.eigh(A, B, subset_by_index=[0, d - 1])
    phi = _canonical_signs(_m_normalize(phi, np.asarray(m)))
    meta = {"solver": "dense", "d": d}
    return EigenBasis(lam, phi, np.asarray(m, np.float64), mesh_hash, meta)


def compute_basis(
    mesh: TriMesh, d: int, seed: int = 0, dense: bool = False
) -> EigenBasis:
    """Assemble the Laplacian for the mesh kind and solve for d pairs."""
    L, m = laplacian(mesh)
    solve = dense_eigenpairs if dense else smallest_eigenpairs
    kwargs = {} if dense else {"seed": seed}
    basis = solve(L, m, d, mesh_hash=mesh.content_hash(), **kwargs)
    return basis.validate(L)


def align_signs(
    reference: EigenBasis, other: EigenBasis, vertex_map=None
) -> EigenBasis:
    """Resolve sign (and degenerate-subspace) ambiguity against a reference.

    vertex_map[i] gives the vertex of `other` corresponding to reference
    vertex i; identity when omitted.  Non-degenerate columns are sign
    flipped to maximize mass-weighted correlation; within each degenerate
    group an orthogonal transform (Procrustes) is applied instead.
    """
    if reference.d != other.d:
        raise ValueError("eigenbasis dimensions differ")
    if vertex_map is None:
        if reference.n != other.n:
            raise ValueError("vertex_map required when vertex counts differ")
        vertex_map = np.arange(reference.n)
    mapped = other.phis[np.asarray(vertex_map)]
    w = reference.mass
    phis = other.phis.copy()
    for group in reference.degenerate_groups():
        corr = mapped[:, group].T @ (w[:, None] * reference.phis[:, group])
        if len(group) == 1:
            s = 1.0 if corr[0, 0] >= 0 else -1.0
            phis[:, group] *= s
        else:
            u, _, vt = np.linalg.svd(corr)
            q = u @ vt
            phis[:, group] = phis[:, group] @ q
    return EigenBasis(
        other.lambdas.copy(), phis, other.mass,
        mesh_hash=other.mesh_hash, meta=dict(other.meta),
    )
