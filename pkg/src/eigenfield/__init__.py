"""Neural fields on manifolds via Laplace-Beltrami eigenfunction embeddings."""

__version__ = "0.1.0"

from .embedding import (
    ExtrinsicSpec,
    IntrinsicSpec,
    PosencSpec,
    RffSpec,
    embed_intrinsic_batch,
    embed_points,
    embed_posenc,
    spec_from_dict,
)
from .field import MlpConfig, MlpParams, TrainConfig
from .mesh import Ray, SurfacePoint, TriMesh, load_loop_txt, load_obj, save_obj
from .render import Camera, SynthTexture, dssim, look_at, psnr, ring_cameras
from .spectrum import (
    EigenBasis,
    align_signs,
    compute_basis,
    cotan_laplacian,
    dense_eigenpairs,
    laplacian,
    polyline_laplacian,
    smallest_eigenpairs,
)
from .transfer import Correspondence, FunctionalMap, fmap_from_p2p

__all__ = [
    "Ray",
    "SurfacePoint",
    "TriMesh",
    "load_obj",
    "load_loop_txt",
    "save_obj",
    "EigenBasis",
    "cotan_laplacian",
    "polyline_laplacian",
    "laplacian",
    "smallest_eigenpairs",
    "dense_eigenpairs",
    "compute_basis",
    "align_signs",
    "IntrinsicSpec",
    "RffSpec",
    "ExtrinsicSpec",
    "PosencSpec",
    "spec_from_dict",
    "embed_intrinsic_batch",
    "embed_points",
    "embed_posenc",
    "MlpConfig",
    "MlpParams",
    "TrainConfig",
    "Camera",
    "SynthTexture",
    "look_at",
    "ring_cameras",
    "psnr",
    "dssim",
    "Correspondence",
    "FunctionalMap",
    "fmap_from_p2p",
]
