"""Infinite-width NNGP/NTK for ReLU MLPs and the stationarity diagnostic.

The kernel recursion follows the layer-wise Gaussian-expectation form with
a bias term beta^2 added in both the covariance step and the derivative
covariance step; the arc-cosine closed forms evaluate the ReLU
expectations.  Stationarity of a kernel on a manifold is measured by
projecting the kernel onto the Laplacian eigenbasis and comparing
off-diagonal to diagonal energy.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import field as fld
from .spectrum import EigenBasis

KERNEL_MAGIC = b"INFKERN\x00"
COEFFS_MAGIC = b"INFCIJ\x00\x00"


class NtkError(Exception):
    pass


def relu_duals(sigma_xx, sigma_xy, sigma_yy):
    """Gaussian ReLU expectations E[relu(u) relu(v)] and E[u>0][v>0]
    for (u, v) ~ N(0, [[sxx, sxy], [sxy, syy]]), elementwise on arrays.

    rho is clamped to [-1, 1]; inputs violating PSD beyond 1e-9 relative
    (or negative variances beyond 1e-10) are rejected.
    """
    sxx = np.asarray(sigma_xx, np.float64)
    sxy = np.asarray(sigma_xy, np.float64)
    syy = np.asarray(sigma_yy, np.float64)
    if np.any(sxx < -1e-10) or np.any(syy < -1e-10):
        raise NtkError("negative variance")
    denom = np.sqrt(np.maximum(sxx, 0.0) * np.maximum(syy, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(denom > 0, sxy / np.maximum(denom, 1e-300), 0.0)
    if np.any(np.abs(rho) > 1.0 + 1e-9):
        raise NtkError(
            f"correlation out of range: max |rho| = {np.abs(rho).max()}"
        )
    rho = np.clip(rho, -1.0, 1.0)
    theta = np.arccos(rho)
    e_act = denom / (2.0 * np.pi) * (np.sin(theta) + (np.pi - theta) * rho)
    e_dot = (np.pi - theta) / (2.0 * np.pi)
    return e_act, e_dot


@dataclass(frozen=True)
class KernelMatrix:
    values: np.ndarray
    depth: int
    beta: float
    embedding: str = ""

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def validate(self):
        k = self.values
        if np.abs(k - k.T).max() > 1e-10:
            raise NtkError("kernel not symmetric")
        if np.any(np.diag(k) <= 0):
            raise NtkError("kernel diagonal not positive")
        w = np.linalg.eigvalsh(k)
        if w.min() < -1e-8 * np.trace(k) / self.n:
            raise NtkError(f"kernel not PSD: min eigenvalue {w.min():.3e}")
        return self

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(KERNEL_MAGIC)
            fh.write(struct.pack("<Q", self.n))
            fh.write(np.ascontiguousarray(self.values, np.float64).tobytes())
            fh.write(json.dumps({
                "depth": self.depth,
                "beta": self.beta,
                "embedding": self.embedding,
            }).encode("utf-8"))

    @classmethod
    def load(cls, path) -> "KernelMatrix":
        with open(path, "rb") as fh:
            if fh.read(8) != KERNEL_MAGIC:
                raise NtkError("not a kernel file")
            (n,) = struct.unpack("<Q", fh.read(8))
            vals = np.frombuffer(fh.read(8 * n * n), np.float64)
            vals = vals.reshape(n, n).copy()
            meta = json.loads(fh.read().decode("utf-8"))
        return cls(vals, int(meta["depth"]), float(meta["beta"]),
                   meta.get("embedding", ""))


def nngp_ntk(X: np.ndarray, depth: int, beta: float, n0: int | None = None):
    """Layer recursion over all point pairs at once.

    Sigma_1 = X X^T / n0 + beta^2, Theta_1 = Sigma_1; for each further
    layer: Sigma = E[act act'] + beta^2, Sigma_dot = E[step step'] +
    beta^2 (the bias enters both), Theta = Theta * Sigma_dot + Sigma.
    Returns (Sigma, Theta) as (n, n) arrays after `depth` layers.
    """
    if depth < 1:
        raise NtkError("depth must be >= 1")
    if beta < 0:
        raise NtkError("beta must be nonnegative")
    X = np.asarray(X, np.float64)
    if n0 is None:
        n0 = X.shape[1]
    sigma = X @ X.T / n0 + beta * beta
    theta = sigma.copy()
    for _ in range(1, depth):
        diag = np.diag(sigma)
        e_act, e_dot = relu_duals(diag[:, None], sigma, diag[None, :])
        sigma = e_act + beta * beta
        sigma_dot = e_dot + beta * beta
        theta = theta * sigma_dot + sigma
    return sigma, theta


def ntk_matrix(X: np.ndarray, depth: int, beta: float,
               n0: int | None = None, embedding: str = "") -> KernelMatrix:
    _, theta = nngp_ntk(X, depth, beta, n0)
    theta = 0.5 * (theta + theta.T)
    return KernelMatrix(theta, depth, beta, embedding)


@dataclass(frozen=True)
class StationarityCoeffs:
    """c_ij = phi_i^T M K M phi_j, the kernel in the eigenbasis."""

    values: np.ndarray
    basis_hash: str = ""

    @property
    def d(self) -> int:
        return self.values.shape[0]

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(COEFFS_MAGIC)
            fh.write(struct.pack("<Q", self.d))
            fh.write(np.ascontiguousarray(self.values, np.float64).tobytes())
            fh.write(json.dumps({"basis_hash": self.basis_hash})
                     .encode("utf-8"))

    @classmethod
    def load(cls, path) -> "StationarityCoeffs":
        with open(path, "rb") as fh:
            if fh.read(8) != COEFFS_MAGIC:
                raise NtkError("not a coefficients file")
            (d,) = struct.unpack("<Q", fh.read(8))
            vals = np.frombuffer(fh.read(8 * d * d), np.float64)
            vals = vals.reshape(d, d).copy()
            meta = json.loads(fh.read().decode("utf-8"))
        return cls(vals, meta.get("basis_hash", ""))


def stationarity_coeffs(K, basis: EigenBasis) -> StationarityCoeffs:
    """Project a vertex-sampled kernel onto the eigenbasis with the
    area weights."""
    values = K.values if isinstance(K, KernelMatrix) else np.asarray(K)
    if values.shape[0] != basis.n:
        raise NtkError(
            f"kernel is over {values.shape[0]} points, basis over {basis.n}"
        )
    pm = basis.phis * basis.mass[:, None]  # (n, d)
    c = pm.T @ values @ pm
    return StationarityCoeffs(c, basis_hash=basis.content_hash())


def stationarity_score(c: StationarityCoeffs) -> dict:
    """offdiag_ratio: off-diagonal to diagonal energy of c_ij;
    min_diag: smallest diagonal entry (nonnegative when the kernel is
    stationary with nonnegative spectrum)."""
    v = c.values if isinstance(c, StationarityCoeffs) else np.asarray(c)
    diag = np.diag(v)
    off = v - np.diag(diag)
    return {
        "offdiag_ratio": float((off * off).sum() / (diag * diag).sum()),
        "min_diag": float(diag.min()),
    }


def empirical_ntk(X: np.ndarray, width: int, depth: int, beta: float,
                  seed: int = 0, n_draws: int = 1) -> np.ndarray:
    """Finite-width tangent kernel J J^T of a randomly initialized ReLU
    net, averaged over n_draws initializations.

    The network follows the kernel parametrization: weights N(0, 1/fan_in)
    and biases N(0, beta^2) at initialization, with weight-block Jacobian
    outer products scaled by 1/fan_in and bias blocks by beta^2, computed
    from the field module's backward pass.
    """
    X = np.asarray(X, np.float64)
    n = X.shape[0]
    config_base = dict(
        input_dim=X.shape[1],
        hidden_width=width,
        num_hidden_layers=depth - 1,
        skip_at=None,
        view_dim=None,
        output_dim=1,
        output_sigmoid=False,
    )
    total = np.zeros((n, n))
    dims = None
    for draw in range(n_draws):
        config = fld.MlpConfig(**config_base, init_seed=seed + draw)
        params = fld.init_ntk(config, beta, dtype=np.float64)
        grams = fld.jacobian_grams(params, config, X)
        dims = config.layer_dims()
        k = np.zeros((n, n))
        for (fan_in, _), (dg, ag) in zip(dims, grams):
            k += dg * ag / fan_in + beta * beta * dg
        total += k
    return total / n_draws


def heatmap_png(matrix: np.ndarray, path, cmap: str = "viridis"):
    """Write a colormapped PNG of the matrix plus a JSON sidecar with the
    value range."""
    from matplotlib import colormaps
    from PIL import Image

    m = np.asarray(matrix, np.float64)
    lo = float(m.min())
    hi = float(m.max())
    span = hi - lo if hi > lo else 1.0
    norm = (m - lo) / span
    rgba = colormaps[cmap](norm)
    img = (rgba[..., :3] * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(img).save(path)
    with open(str(path) + ".json", "w") as fh:
        json.dump({"min": lo, "max": hi, "shape": list(m.shape),
                   "cmap": cmap}, fh)
