"""Point encodings fed to the field network.

Four kinds: the intrinsic eigenfunction embedding, random Fourier features
of extrinsic coordinates, raw extrinsic coordinates, and a sine/cosine
positional encoding for unit view directions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import SurfacePoint, TriMesh
from .spectrum import DEGENERACY_TOL, EigenBasis

INTRINSIC = "intrinsic"
RFF = "rff"
EXTRINSIC = "extrinsic"
POSENC = "posenc"


class EmbeddingError(Exception):
    pass


@dataclass(frozen=True)
class IntrinsicSpec:
    """gamma(p) = (a_1 phi_1(p), ..., a_d phi_d(p)).

    Coefficients must be equal within eigenvalue-degeneracy groups; the
    default all-ones trivially satisfies that.
    """

    d: int
    coefficients: np.ndarray | None = None
    kind: str = INTRINSIC

    def coeffs(self) -> np.ndarray:
        if self.coefficients is None:
            return np.ones(self.d)
        a = np.asarray(self.coefficients, dtype=np.float64)
        if a.shape != (self.d,):
            raise EmbeddingError("coefficient count must equal d")
        if np.any(a < 0):
            raise EmbeddingError("coefficients must be nonnegative")
        return a

    def to_dict(self):
        out = {"kind": self.kind, "d": self.d}
        if self.coefficients is not None:
            out["coefficients"] = list(np.asarray(self.coefficients, float))
        return out


@dataclass(frozen=True)
class RffSpec:
    """Random Fourier features: interleaved cos/sin of Gaussian projections.

    Rows of B are drawn from N(0, (2 pi sigma)^2 I); the matrix is
    materialized at construction so artifacts can persist it verbatim.
    """

    d: int
    sigma: float = 1.0
    seed: int = 0
    input_dim: int = 3
    B: np.ndarray = field(default=None, compare=False)
    kind: str = RFF

    def __post_init__(self):
        if self.d % 2 != 0:
            raise EmbeddingError("rff dimension must be even")
        if self.sigma <= 0:
            raise EmbeddingError("rff sigma must be positive")
        if self.B is None:
            rng = np.random.default_rng(self.seed)
            B = rng.normal(
                0.0, 2.0 * np.pi * self.sigma, (self.d // 2, self.input_dim)
            )
            object.__setattr__(self, "B", B)
        elif self.B.shape != (self.d // 2, self.input_dim):
            raise EmbeddingError("frequency matrix shape mismatch")

    def to_dict(self):
        return {
            "kind": self.kind,
            "d": self.d,
            "sigma": self.sigma,
            "seed": self.seed,
            "input_dim": self.input_dim,
            "B": [list(row) for row in self.B],
        }


@dataclass(frozen=True)
class ExtrinsicSpec:
    """Raw world coordinates, no encoding."""

    input_dim: int = 3
    kind: str = EXTRINSIC

    @property
    def d(self) -> int:
        return self.input_dim

    def to_dict(self):
        return {"kind": self.kind, "input_dim": self.input_dim}


@dataclass(frozen=True)
class PosencSpec:
    """Octave sine/cosine encoding of a unit 3-vector.

    Band b uses frequency 2^(min_exp + b); output length 6 * num_bands.
    """

    num_bands: int = 4
    min_exp: int = 0
    kind: str = POSENC

    @property
    def d(self) -> int:
        return 6 * self.num_bands

    def to_dict(self):
        return {
            "kind": self.kind,
            "num_bands": self.num_bands,
            "min_exp": self.min_exp,
        }


def spec_from_dict(cfg: dict):
    kind = cfg.get("kind")
    if kind == INTRINSIC:
        coeff = cfg.get("coefficients")
        coeff = None if coeff is None else np.asarray(coeff, float)
        return IntrinsicSpec(d=int(cfg["d"]), coefficients=coeff)
    if kind == RFF:
        B = cfg.get("B")
        B = None if B is None else np.asarray(B, float)
        return RffSpec(
            d=int(cfg["d"]),
            sigma=float(cfg.get("sigma", 1.0)),
            seed=int(cfg.get("seed", 0)),
            input_dim=int(cfg.get("input_dim", 3)),
            B=B,
        )
    if kind == EXTRINSIC:
        return ExtrinsicSpec(input_dim=int(cfg.get("input_dim", 3)))
    if kind == POSENC:
        return PosencSpec(
            num_bands=int(cfg.get("num_bands", 4)),
            min_exp=int(cfg.get("min_exp", 0)),
        )
    raise EmbeddingError(f"unknown embedding kind {kind!r}")


def check_degeneracy_respecting(
    a: np.ndarray, lambdas: np.ndarray, tol: float = DEGENERACY_TOL
):
    """Equal eigenvalues must carry equal coefficients."""
    for i in range(1, len(a)):
        if abs(lambdas[i] - lambdas[i - 1]) < tol * (1.0 + lambdas[i - 1]):
            if abs(a[i] - a[i - 1]) > tol * (1.0 + abs(a[i - 1])):
                raise EmbeddingError(
                    "coefficients differ inside a degenerate eigenvalue "
                    f"group at index {i}"
                )


def embed_intrinsic_batch(
    spec: IntrinsicSpec,
    basis: EigenBasis,
    mesh: TriMesh,
    faces: np.ndarray,
    barys: np.ndarray,
) -> np.ndarray:
    """Barycentric interpolation of the first d eigenfunctions, scaled
    by spec.coeffs().  faces: (N,), barys: (N, 3)."""
    if basis.d < spec.d:
        raise EmbeddingError(f"basis holds {basis.d} pairs, need {spec.d}")
    if basis.mesh_hash and basis.mesh_hash != mesh.content_hash():
        raise EmbeddingError("eigenbasis does not belong to this mesh")
    a = spec.coeffs()
    check_degeneracy_respecting(a, basis.lambdas[: spec.d])
    idx = mesh.faces[np.asarray(faces)]
    phi = basis.phis[:, : spec.d]
    out = np.einsum("nk,nkd->nd", np.asarray(barys), phi[idx])
    return out * a[None, :]


def embed_intrinsic(
    spec: IntrinsicSpec, basis: EigenBasis, mesh: TriMesh, p: SurfacePoint
) -> np.ndarray:
    return embed_intrinsic_batch(
        spec, basis, mesh, np.array([p.face]), p.bary[None, :]
    )[0]


def embed_rff(spec: RffSpec, x: np.ndarray) -> np.ndarray:
    """Interleaved [cos(b_1.x), sin(b_1.x), cos(b_2.x), ...]."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    if pts.shape[1] != spec.input_dim:
        raise EmbeddingError(
            f"expected {spec.input_dim}-vectors, got {pts.shape[1]}"
        )
    proj = pts @ spec.B.T
    out = np.empty((pts.shape[0], spec.d))
    out[:, 0::2] = np.cos(proj)
    out[:, 1::2] = np.sin(proj)
    return out[0] if single else out


def embed_extrinsic(spec: ExtrinsicSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.input_dim:
        raise EmbeddingError("dimension mismatch")
    return x


def embed_posenc(spec: PosencSpec, v: np.ndarray) -> np.ndarray:
    """Per band b and coordinate c: sin(2^b pi v_c), cos(2^b pi v_c)."""
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    vs = np.atleast_2d(v)
    if vs.shape[1] != 3:
        raise EmbeddingError("posenc expects 3-vectors")
    norms = np.linalg.norm(vs, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise EmbeddingError("posenc expects unit vectors")
    freqs = 2.0 ** (spec.min_exp + np.arange(spec.num_bands))
    # (N, bands, 3)
    arg = np.pi * freqs[None, :, None] * vs[:, None, :]
    out = np.empty((vs.shape[0], spec.num_bands, 3, 2))
    out[..., 0] = np.sin(arg)
    out[..., 1] = np.cos(arg)
    out = out.reshape(vs.shape[0], spec.d)
    return out[0] if single else out


def embed_points(spec, pts: np.ndarray) -> np.ndarray:
    """Encode extrinsic positions with an rff or extrinsic spec."""
    if spec.kind == RFF:
        return embed_rff(spec, pts)
    if spec.kind == EXTRINSIC:
        return embed_extrinsic(spec, pts)
    raise EmbeddingError(f"{spec.kind} embedding does not take raw points")
