"""Pinhole cameras, ray preprocessing, synthetic textures, rendering,
and masked image metrics (PSNR, DSSIM)."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.ndimage
from PIL import Image

from .embedding import embed_intrinsic_batch
from .mesh import Ray, TriMesh

BACKGROUND = 1.0
PSNR_CAP = 99.0


class RenderError(Exception):
    pass


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a camera-to-world rigid pose.

    Camera space: x right, y down, z forward; pixel (u, v) maps through
    ((u + 0.5 - cx)/fx, (v + 0.5 - cy)/fy, 1).
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray  # (3, 3), columns are the camera axes in world frame
    t: np.ndarray  # (3,) camera center in world frame

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, np.float64))
        object.__setattr__(self, "t", np.asarray(self.t, np.float64))
        if self.fx <= 0 or self.fy <= 0:
            raise RenderError("focal lengths must be positive")
        if np.linalg.norm(self.R.T @ self.R - np.eye(3)) > 1e-9:
            raise RenderError("rotation is not orthonormal")

    @property
    def forward(self) -> np.ndarray:
        return self.R[:, 2]

    def to_dict(self):
        return {
            "width": self.width,
            "height": self.height,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "R": [float(x) for x in self.R.ravel()],
            "t": [float(x) for x in self.t],
        }

    @classmethod
    def from_dict(cls, cfg):
        return cls(
            width=int(cfg["width"]),
            height=int(cfg["height"]),
            fx=float(cfg["fx"]),
            fy=float(cfg["fy"]),
            cx=float(cfg["cx"]),
            cy=float(cfg["cy"]),
            R=np.asarray(cfg["R"], np.float64).reshape(3, 3),
            t=np.asarray(cfg["t"], np.float64),
        )


def look_at(
    eye, target, up=(0.0, 0.0, 1.0), width=128, height=128, focal=None
) -> Camera:
    """Camera at eye looking toward target, image up roughly along up."""
    eye = np.asarray(eye, np.float64)
    f = np.asarray(target, np.float64) - eye
    f = f / np.linalg.norm(f)
    right = np.cross(f, np.asarray(up, np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        raise RenderError("view direction parallel to up vector")
    right /= nr
    down = np.cross(f, right)
    R = np.stack([right, down, f], axis=1)
    if focal is None:
        focal = 1.2 * max(width, height)
    return Camera(
        width=width,
        height=height,
        fx=focal,
        fy=focal,
        cx=width / 2.0,
        cy=height / 2.0,
        R=R,
        t=eye,
    )


def ring_cameras(
    count,
    radius,
    elevation_deg=20.0,
    width=128,
    height=128,
    focal=None,
    phase=0.0,
    target=(0.0, 0.0, 0.0),
):
    """count cameras on a circle of the given elevation, looking at target."""
    cams = []
    el = np.deg2rad(elevation_deg)
    for k in range(count):
        az = phase + 2 * np.pi * k / count
        eye = radius * np.array(
            [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)]
        )
        cams.append(
            look_at(eye + np.asarray(target), target, width=width,
                    height=height, focal=focal)
        )
    return cams


def cover_cameras(
    radius,
    width=128,
    height=128,
    focal=None,
    target=(0.0, 0.0, 0.0),
    phase=0.0,
):
    """Five viewpoints that jointly cover a closed object: both poles
    plus three equatorial directions 120 degrees apart.

    From radius r (in object radii) each camera sees a cap of fraction
    (1 - 1/r)/2 of a sphere, so five caps in this arrangement overlap.
    """
    target = np.asarray(target, np.float64)
    views = [
        (np.array([0.0, 0.0, 1.0]), (1.0, 0.0, 0.0)),
        (np.array([0.0, 0.0, -1.0]), (1.0, 0.0, 0.0)),
    ]
    for k in range(3):
        az = phase + 2 * np.pi * k / 3
        views.append(
            (np.array([np.cos(az), np.sin(az), 0.0]), (0.0, 0.0, 1.0))
        )
    return [
        look_at(target + radius * d, target, up=up, width=width,
                height=height, focal=focal)
        for d, up in views
    ]


class RayGrid:
    """Per-pixel rays of one camera, scanline order (v major, u minor)."""

    def __init__(self, camera: Camera):
        w, h = camera.width, camera.height
        u = np.arange(w) + 0.5
        v = np.arange(h) + 0.5
        uu, vv = np.meshgrid(u, v)  # (h, w)
        d_cam = np.stack(
            [
                (uu - camera.cx) / camera.fx,
                (vv - camera.cy) / camera.fy,
                np.ones_like(uu),
            ],
            axis=-1,
        ).reshape(-1, 3)
        d_world = d_cam @ camera.R.T
        d_world /= np.linalg.norm(d_world, axis=1)[:, None]
        self.directions = d_world
        self.origins = np.broadcast_to(camera.t, d_world.shape).copy()
        self.camera = camera

    def __len__(self):
        return self.directions.shape[0]

    def __getitem__(self, i) -> Ray:
        return Ray(self.origins[i], self.directions[i])


def pixel_rays(camera: Camera) -> RayGrid:
    return RayGrid(camera)


@dataclass
class RaySampleSet:
    """Flat arrays over ray-mesh hits, the unit of training data."""

    faces: np.ndarray       # (N,) int
    barys: np.ndarray       # (N, 3)
    positions: np.ndarray   # (N, 3)
    view_dirs: np.ndarray   # (N, 3), surface -> camera, unit
    colors: np.ndarray      # (N, 3) in [0, 1]
    cam_ids: np.ndarray     # (N,) index into the camera list
    pixel_ids: np.ndarray   # (N,) v * width + u

    @property
    def n(self) -> int:
        return self.faces.shape[0]

    def subset(self, sel) -> "RaySampleSet":
        return RaySampleSet(
            self.faces[sel], self.barys[sel], self.positions[sel],
            self.view_dirs[sel], self.colors[sel], self.cam_ids[sel],
            self.pixel_ids[sel],
        )

    @staticmethod
    def concatenate(parts):
        return RaySampleSet(*[
            np.concatenate([getattr(p, f) for p in parts])
            for f in ("faces", "barys", "positions", "view_dirs",
                      "colors", "cam_ids", "pixel_ids")
        ])


def _intersect_camera(mesh: TriMesh, camera: Camera):
    grid = pixel_rays(camera)
    faces, t, u, v = mesh.ray_intersect_batch(grid.origins, grid.directions)
    hit = faces >= 0
    bary = np.stack([1.0 - u - v, u, v], axis=1)
    pos = grid.origins + t[:, None] * grid.directions
    return grid, hit, faces, bary, pos


def precompute_samples(mesh: TriMesh, cameras, images) -> RaySampleSet:
    """One ray-mesh intersection pass over every pixel of every camera;
    hits become training samples with their ground-truth colors."""
    if len(cameras) != len(images):
        raise RenderError("camera/image count mismatch")
    parts = []
    for ci, (cam, img) in enumerate(zip(cameras, images)):
        img = np.asarray(img, np.float64)
        if img.shape != (cam.height, cam.width, 3):
            raise RenderError(
                f"image {ci} shape {img.shape} does not match camera"
            )
        grid, hit, faces, bary, pos = _intersect_camera(mesh, cam)
        idx = np.nonzero(hit)[0]
        parts.append(RaySampleSet(
            faces=faces[idx].astype(np.int64),
            barys=bary[idx],
            positions=pos[idx],
            view_dirs=-grid.directions[idx],
            colors=img.reshape(-1, 3)[idx],
            cam_ids=np.full(len(idx), ci, np.int64),
            pixel_ids=idx.astype(np.int64),
        ))
    return RaySampleSet.concatenate(parts)


@dataclass(frozen=True)
class SynthTexture:
    """Procedural ground-truth surface color.

    pattern 'checker3d': 3-D checkerboard of the two palette colors with
    cells of side 1/scale.  'stripes': sinusoidal blend along an axis.
    'eigenfunction_rgb': three basis columns rescaled to [0, 1].
    'constant': color_a everywhere.  Setting view_modulated scales the
    color by 0.4 + 0.6 <n, v>_+ (an artifact-defined view-dependent
    benchmark, not a physical shading model).
    """

    pattern: str = "checker3d"
    scale: float = 1.5
    axis: int = 2
    freq: float = 2.0
    eigen_indices: tuple = (1, 2, 3)
    color_a: tuple = (0.9, 0.85, 0.2)
    color_b: tuple = (0.15, 0.25, 0.8)
    view_modulated: bool = False

    def colors(self, mesh, faces, barys, positions, view_dirs=None,
               basis=None):
        p = np.asarray(positions)
        if self.pattern == "constant":
            rgb = np.broadcast_to(
                np.asarray(self.color_a, float)[None, :], (len(p), 3)
            ).copy()
        elif self.pattern == "checker3d":
            cell = np.floor(p * self.scale).sum(axis=1)
            parity = np.mod(cell, 2.0)
            ca = np.asarray(self.color_a)
            cb = np.asarray(self.color_b)
            rgb = np.where(parity[:, None] < 0.5, ca[None, :], cb[None, :])
        elif self.pattern == "stripes":
            s = 0.5 + 0.5 * np.sin(np.pi * self.freq * p[:, self.axis])
            ca = np.asarray(self.color_a)
            cb = np.asarray(self.color_b)
            rgb = s[:, None] * ca[None, :] + (1 - s[:, None]) * cb[None, :]
        elif self.pattern == "eigenfunction_rgb":
            if basis is None:
                raise RenderError("eigenfunction_rgb needs an eigenbasis")
            cols = np.asarray(self.eigen_indices, int)
            phi = basis.phis[:, cols]
            lo = phi.min(axis=0)
            hi = phi.max(axis=0)
            span = np.where(hi > lo, hi - lo, 1.0)
            idx = mesh.faces[np.asarray(faces)]
            vals = np.einsum("nk,nkc->nc", np.asarray(barys), phi[idx])
            rgb = (vals - lo[None, :]) / span[None, :]
        else:
            raise RenderError(f"unknown texture pattern {self.pattern!r}")
        if self.view_modulated:
            if view_dirs is None:
                raise RenderError("view-modulated texture needs view dirs")
            normals = mesh.face_normals()[np.asarray(faces)]
            cosine = np.einsum("ij,ij->i", normals, np.asarray(view_dirs))
            rgb = rgb * (0.4 + 0.6 * np.clip(cosine, 0.0, 1.0))[:, None]
        return np.clip(rgb, 0.0, 1.0)

    def to_dict(self):
        return {
            "pattern": self.pattern,
            "scale": self.scale,
            "axis": self.axis,
            "freq": self.freq,
            "eigen_indices": list(self.eigen_indices),
            "color_a": list(self.color_a),
            "color_b": list(self.color_b),
            "view_modulated": self.view_modulated,
        }

    @classmethod
    def from_dict(cls, cfg):
        cfg = dict(cfg)
        for key in ("eigen_indices", "color_a", "color_b"):
            if key in cfg:
                cfg[key] = tuple(cfg[key])
        return cls(**cfg)


def render_view(mesh: TriMesh, camera: Camera, shade_fn,
                background: float = BACKGROUND):
    """Render one camera: intersect every pixel ray, shade the hits in a
    single batch, scatter into the image.  Returns (image, mask)."""
    grid, hit, faces, bary, pos = _intersect_camera(mesh, camera)
    idx = np.nonzero(hit)[0]
    img = np.full((camera.height * camera.width, 3), background, np.float64)
    if len(idx):
        samples = RaySampleSet(
            faces=faces[idx].astype(np.int64),
            barys=bary[idx],
            positions=pos[idx],
            view_dirs=-grid.directions[idx],
            colors=np.zeros((len(idx), 3)),
            cam_ids=np.zeros(len(idx), np.int64),
            pixel_ids=idx.astype(np.int64),
        )
        img[idx] = np.clip(shade_fn(samples), 0.0, 1.0)
    mask = hit.reshape(camera.height, camera.width)
    return img.reshape(camera.height, camera.width, 3), mask


def texture_shader(texture: SynthTexture, mesh: TriMesh, basis=None):
    def shade(samples: RaySampleSet):
        return texture.colors(
            mesh, samples.faces, samples.barys, samples.positions,
            view_dirs=samples.view_dirs, basis=basis,
        )
    return shade


def model_shader(params, config, spec, mesh, basis=None, view_spec=None):
    """Shade with a trained field.  The point embedding is chosen by the
    spec kind; a view spec adds the view-direction input."""
    from . import embedding as emb
    from . import field as fld

    if spec.kind == emb.INTRINSIC and basis is None:
        raise RenderError("intrinsic shading needs an eigenbasis")
    if basis is not None and basis.mesh_hash:
        if basis.mesh_hash != mesh.content_hash():
            raise RenderError("eigenbasis/mesh hash mismatch")

    def shade(samples: RaySampleSet):
        if spec.kind == emb.INTRINSIC:
            x = embed_intrinsic_batch(
                spec, basis, mesh, samples.faces, samples.barys
            )
        else:
            x = emb.embed_points(spec, samples.positions)
        view = None
        if view_spec is not None:
            if view_spec.kind == emb.POSENC:
                view = emb.embed_posenc(view_spec, samples.view_dirs)
            else:
                view = samples.view_dirs
        return fld.forward(params, config, x, view)

    return shade


def make_dataset(mesh: TriMesh, texture: SynthTexture, cameras,
                 splits=None, basis=None):
    """Ground-truth images for every camera plus per-split sample sets.

    splits maps split name to camera indices; default puts everything in
    'train'.  Returns {images, masks, splits, samples}.
    """
    if len(cameras) == 0:
        raise RenderError("need at least one camera")
    if splits is None:
        splits = {"train": list(range(len(cameras)))}
    shader = texture_shader(texture, mesh, basis=basis)
    images, masks = [], []
    for cam in cameras:
        img, mask = render_view(mesh, cam, shader)
        images.append(img)
        masks.append(mask)
    samples = {}
    for name, idx in splits.items():
        samples[name] = precompute_samples(
            mesh, [cameras[i] for i in idx], [images[i] for i in idx]
        )
    return {
        "images": images,
        "masks": masks,
        "splits": splits,
        "samples": samples,
    }


def psnr(img_a, img_b, mask) -> float:
    """10 log10(1/MSE) over masked pixels, images in [0,1]; capped 99 dB."""
    a = np.asarray(img_a, np.float64)
    b = np.asarray(img_b, np.float64)
    m = np.asarray(mask, bool)
    if a.shape != b.shape:
        raise RenderError("image shapes differ")
    if not m.any():
        raise RenderError("empty mask")
    diff = (a - b)[m]
    mse = float(np.mean(diff * diff))
    if mse <= 0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _gauss_kernel(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def _masked_windows(x, m, k):
    """Weighted local means: conv(x*m) / conv(m) with the separable
    window k, zero padding."""
    num = scipy.ndimage.correlate1d(x * m, k, axis=0, mode="constant")
    num = scipy.ndimage.correlate1d(num, k, axis=1, mode="constant")
    den = scipy.ndimage.correlate1d(m, k, axis=0, mode="constant")
    den = scipy.ndimage.correlate1d(den, k, axis=1, mode="constant")
    return num, den


def ssim(img_a, img_b, mask, k1=0.01, k2=0.03, win=11, sigma=1.5) -> float:
    """Mean SSIM over masked pixels; local statistics use an 11x11
    Gaussian window restricted (reweighted) to the mask."""
    a = np.asarray(img_a, np.float64)
    b = np.asarray(img_b, np.float64)
    m = np.asarray(mask, bool)
    if not m.any():
        raise RenderError("empty mask")
    kern = _gauss_kernel(win, sigma)
    mf = m.astype(np.float64)
    c1 = k1 * k1
    c2 = k2 * k2
    vals = []
    for c in range(a.shape[2]):
        x = a[..., c]
        y = b[..., c]
        sx, den = _masked_windows(x, mf, kern)
        sy, _ = _masked_windows(y, mf, kern)
        sxx, _ = _masked_windows(x * x, mf, kern)
        syy, _ = _masked_windows(y * y, mf, kern)
        sxy, _ = _masked_windows(x * y, mf, kern)
        den = np.maximum(den, 1e-12)
        mx = sx / den
        my = sy / den
        vx = np.maximum(sxx / den - mx * mx, 0.0)
        vy = np.maximum(syy / den - my * my, 0.0)
        cxy = sxy / den - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / (
            (mx * mx + my * my + c1) * (vx + vy + c2)
        )
        vals.append(s[m].mean())
    return float(np.mean(vals))


def dssim(img_a, img_b, mask) -> float:
    return (1.0 - ssim(img_a, img_b, mask)) / 2.0


def save_png(img, path):
    """Round float [0,1] to 8-bit and write a PNG."""
    arr = np.asarray(img)
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q).save(path)


def load_png(path) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.asarray(img, np.float64) / 255.0


def save_cameras(cameras, path):
    with open(path, "w") as fh:
        json.dump([c.to_dict() for c in cameras], fh, indent=1)


def load_cameras(path):
    with open(path) as fh:
        return [Camera.from_dict(c) for c in json.load(fh)]
