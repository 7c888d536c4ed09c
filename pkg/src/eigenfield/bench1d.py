"""Signal reconstruction on a closed 1-manifold from sparse samples.

Compares extrinsic, random-Fourier, and intrinsic encodings of a curve
under identical training: a scalar target sampled at a few vertices, a
3-layer MLP trained with L2 loss, dense evaluation on every vertex.  The
pinched preset has two lobes passing close by each other while being far
apart along the curve, the configuration where Euclidean encodings leak
signal between geodesically distant points.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import field as fld
from .embedding import INTRINSIC, IntrinsicSpec, embed_points
from .mesh import LOOP, TriMesh
from .primitives import uniform_circle
from .spectrum import polyline_laplacian, smallest_eigenpairs


class BenchError(Exception):
    pass


@dataclass(frozen=True)
class Curve1D:
    mesh: TriMesh
    arclens: np.ndarray      # per-vertex arc-length position, arclens[0]=0
    total_length: float

    @property
    def n(self) -> int:
        return self.mesh.n_vertices


def _resample_uniform(points: np.ndarray, n: int) -> np.ndarray:
    """Resample a dense closed polyline at n uniform arc-length stations."""
    seg = np.linalg.norm(np.roll(points, -1, axis=0) - points, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    stations = total * np.arange(n) / n
    out = np.empty((n, 3))
    closed = np.vstack([points, points[:1]])
    for k in range(3):
        out[:, k] = np.interp(stations, cum, closed[:, k])
    return out


def make_curve(preset: str = "circle", n: int = 256) -> Curve1D:
    """'circle': regular n-gon of circumference 2 pi.  'pinched': polar
    curve r = 1 + 0.9 cos(2 theta), two lobes pinched near the origin,
    resampled to uniform arc length."""
    if preset == "circle":
        mesh = uniform_circle(n, circumference=2 * np.pi)
    elif preset == "pinched":
        theta = 2 * np.pi * np.arange(20000) / 20000
        r = 1.0 + 0.9 * np.cos(2 * theta)
        dense = np.stack(
            [r * np.cos(theta), r * np.sin(theta), np.zeros_like(theta)],
            axis=1,
        )
        mesh = TriMesh(_resample_uniform(dense, n), None, kind=LOOP)
    else:
        raise BenchError(f"unknown curve preset {preset!r}")
    ell = mesh.edge_lengths()
    arclens = np.concatenate([[0.0], np.cumsum(ell[:-1])])
    return Curve1D(mesh, arclens, float(ell.sum()))


def target_signal(curve: Curve1D, harmonics=((3, 1.0), (7, 0.5))):
    """Sum of sinusoids in normalized arc length: default
    sin(2 pi 3 s/L) + 0.5 sin(2 pi 7 s/L)."""
    s = curve.arclens / curve.total_length
    g = np.zeros(curve.n)
    for freq, amp in harmonics:
        g += amp * np.sin(2 * np.pi * freq * s)
    return g


def near_touch_pair(curve: Curve1D, arc_gap_frac: float = 0.25):
    """The closest vertex pair among those separated by more than
    arc_gap_frac of the total length along the curve."""
    pos = curve.mesh.vertices
    s = curve.arclens
    L = curve.total_length
    diff = pos[:, None, :] - pos[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    gap = np.abs(s[:, None] - s[None, :])
    gap = np.minimum(gap, L - gap)
    d2[gap < arc_gap_frac * L] = np.inf
    i, j = np.unravel_index(np.argmin(d2), d2.shape)
    return int(i), int(j), float(np.sqrt(d2[i, j]))


def near_touch_region(curve: Curve1D, width_frac: float = 0.05,
                      arc_gap_frac: float = 0.25) -> np.ndarray:
    """Boolean vertex mask within width_frac*L of either near-touch
    vertex, measured along the curve."""
    i, j, _ = near_touch_pair(curve, arc_gap_frac)
    s = curve.arclens
    L = curve.total_length
    mask = np.zeros(curve.n, bool)
    for k in (i, j):
        gap = np.abs(s - s[k])
        gap = np.minimum(gap, L - gap)
        mask |= gap <= width_frac * L
    return mask


def default_train_config(seed: int = 0) -> fld.TrainConfig:
    return fld.TrainConfig(
        batch_size=32, lr=1e-3, epochs=1, shuffle_seed=seed,
        loss="l2", max_steps=2000,
    )


def run_benchmark(
    curve: Curve1D,
    embeddings: dict,
    train_count: int = 32,
    tcfg: fld.TrainConfig | None = None,
    hidden_width: int = 1024,
    num_hidden_layers: int = 3,
    init_seed: int = 0,
    basis_seed: int = 0,
):
    """Train one MLP per embedding on train_count evenly spaced samples
    of the target; evaluate densely on every vertex.

    embeddings: name -> spec (IntrinsicSpec, RffSpec, or ExtrinsicSpec).
    Returns {name: {train_mse, dense_mse, prediction, inputs_dim}} plus
    '_meta' with the target, the train indices, and the basis (when an
    intrinsic spec was present).
    """
    if tcfg is None:
        tcfg = default_train_config()
    if tcfg.loss != "l2":
        raise BenchError("this benchmark is defined with the l2 loss")
    target = target_signal(curve)
    n = curve.n
    train_idx = (np.arange(train_count) * n) // train_count

    d_int = max(
        (s.d for s in embeddings.values() if s.kind == INTRINSIC),
        default=0,
    )
    basis = None
    if d_int:
        L, m = polyline_laplacian(curve.mesh)
        basis = smallest_eigenpairs(
            L, m, d_int, seed=basis_seed,
            mesh_hash=curve.mesh.content_hash(),
        )
    results = {
        "_meta": {
            "target": target,
            "train_idx": train_idx,
            "basis": basis,
            "arclens": curve.arclens,
        }
    }
    for name, spec in embeddings.items():
        if spec.kind == INTRINSIC:
            inputs = basis.phis[:, : spec.d] * spec.coeffs()[None, :]
        else:
            inputs = embed_points(spec, curve.mesh.vertices)
        config = fld.MlpConfig(
            input_dim=inputs.shape[1],
            hidden_width=hidden_width,
            num_hidden_layers=num_hidden_layers,
            skip_at=None,
            output_dim=1,
            output_sigmoid=False,
            init_seed=init_seed,
        )
        params = fld.init(config)
        params, history = fld.train(
            params, config,
            inputs[train_idx], target[train_idx, None], tcfg,
        )
        pred = fld.forward(params, config, inputs)[:, 0].astype(np.float64)
        err = pred - target
        results[name] = {
            "train_mse": float(np.mean(err[train_idx] ** 2)),
            "dense_mse": float(np.mean(err ** 2)),
            "prediction": pred,
            "inputs_dim": inputs.shape[1],
            "final_loss": history["step_loss"][-1],
        }
    return results


def write_csv(curve: Curve1D, results: dict, path):
    names = [k for k in results if k != "_meta"]
    target = results["_meta"]["target"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "target"] + names)
        for i in range(curve.n):
            row = [f"{curve.arclens[i]:.9g}", f"{target[i]:.9g}"]
            row += [f"{results[k]['prediction'][i]:.9g}" for k in names]
            w.writerow(row)


def plot_reconstructions(curve: Curve1D, results: dict, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [k for k in results if k != "_meta"]
    meta = results["_meta"]
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(curve.arclens, meta["target"], "k-", lw=2, label="target")
    for name in names:
        ax.plot(curve.arclens, results[name]["prediction"], lw=1,
                label=f"{name} (mse {results[name]['dense_mse']:.2e})")
    ax.scatter(curve.arclens[meta["train_idx"]],
               meta["target"][meta["train_idx"]],
               s=12, c="k", zorder=5, label="samples")
    ax.set_xlabel("arc length")
    ax.set_ylabel("signal")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
