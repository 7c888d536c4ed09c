"""Batch front-end: one JSON experiment config drives every subcommand.

Config layout (all sections optional, defaults shown in DEFAULT_* below)::

    {
      "output_dir": "out",
      "threads": null,
      "seeds": {"basis": 0, "rff": 0, "init": 0, "shuffle": 0, "ntk": 0},
      "mesh": {"kind": "icosphere", "subdivisions": 4},      # or {"path": "m.obj"}
      "texture": {"pattern": "checker3d", "scale": 1.5},
      "cameras": {"width": 128, "height": 128, "radius": 2.5,
                  "rigs": {"train": {"kind": "cover"},
                           "test": {"kind": "ring", "count": 3,
                                    "elevation_deg": -15.0, "phase": 0.45}}},
      "embedding": {"kind": "intrinsic", "d": 64},
      "view_embedding": {"kind": "posenc", "num_bands": 4},  # only if mlp.view_dim
      "eigens": {"d": 64, "dense": false},
      "mlp": {...},                                          # field.MlpConfig fields
      "train": {...},                                        # field.TrainConfig fields
      "render": {"split": "test"},
      "ntk": {"depth": 3, "beta": 0.1, "empirical_width": null},
      "transfer": {"target_mesh": {...}, "p2p": "closest", "d": null},
      "bench1d": {"curve": "pinched", "embeddings": {...}},
      "manifest": null, "basis": null, "model": null         # artifact path overrides
    }

Relative paths inside the config resolve against the config file's
directory; --out on the command line resolves against the working
directory.  Every subcommand writes its artifacts under
<output_dir>/<subcommand>/ together with a run.json capturing the
resolved config, its hash, the hash of every file read, and library
versions.  run.json carries no timestamps, so identical inputs yield
byte-identical records.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
Structured error reports go to stderr as one-line JSON.
"""

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np
import scipy

from . import __version__
from . import bench1d as b1d
from . import field as fld
from . import ntk as ntk_mod
from . import primitives, render, transfer
from .embedding import (
    INTRINSIC,
    embed_intrinsic_batch,
    embed_points,
    embed_posenc,
    spec_from_dict,
)
from .mesh import LOOP, TriMesh, load_loop_txt, load_obj, save_obj
from .render import SynthTexture
from .spectrum import EigenBasis, compute_basis

SUBCOMMANDS = (
    "gen-data", "eigens", "train", "render", "ntk", "transfer", "bench1d"
)

DEFAULT_SEEDS = {"basis": 0, "rff": 0, "init": 0, "shuffle": 0, "ntk": 0}
# the cover rig (poles + equator) sees the whole object; a single-ring
# train rig leaves the far pole unsupervised
DEFAULT_RIGS = {
    "train": {"kind": "cover"},
    "test": {"count": 3, "elevation_deg": -15.0, "phase": 0.45},
}

MESH_KINDS = {
    "icosphere": primitives.icosphere,
    "torus": primitives.torus,
    "circle": primitives.uniform_circle,
    "irregular_sphere": primitives.irregular_sphere,
    "dumbbell": primitives.dumbbell,
    "tetrahedron": primitives.tetrahedron,
}


class ConfigError(Exception):
    """Malformed or self-inconsistent experiment config."""


# -- config plumbing ---------------------------------------------------------


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _parse_set_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, args) -> dict:
    """Resolved config: --set dotted paths, then --out/--seed/--threads."""
    cfg = json.loads(json.dumps(cfg))  # deep copy, JSON types only
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        dotted, _, raw = item.partition("=")
        keys = dotted.split(".")
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {dotted!r} crosses a non-object")
        node[keys[-1]] = _parse_set_value(raw)
    if args.out is not None:
        cfg["output_dir"] = os.path.abspath(args.out)
    if args.threads is not None:
        cfg["threads"] = args.threads
    seeds = dict(DEFAULT_SEEDS)
    seeds.update(cfg.get("seeds", {}))
    if args.seed is not None:
        seeds = {k: args.seed for k in seeds}
        # stage-local seed fields lose to an explicit --seed
        cfg.setdefault("mlp", {})["init_seed"] = args.seed
        cfg.setdefault("train", {})["shuffle_seed"] = args.seed
        if cfg.get("embedding", {}).get("kind") == "rff":
            cfg["embedding"]["seed"] = args.seed
    cfg["seeds"] = seeds
    return cfg


def set_thread_cap(cfg: dict):
    n = cfg.get("threads")
    if n is None:
        return
    if not isinstance(n, int) or n < 1:
        raise ConfigError("threads must be a positive integer")
    os.environ["OMP_NUM_THREADS"] = str(n)
    try:
        import numba

        numba.set_num_threads(n)
    except (ImportError, ValueError):
        pass


class RunContext:
    """Collects provenance for one subcommand invocation."""

    def __init__(self, subcommand: str, cfg: dict, config_path, argv):
        self.subcommand = subcommand
        self.cfg = cfg
        self.config_path = os.path.abspath(config_path)
        self.argv = list(argv)
        self.base_dir = os.path.dirname(self.config_path)
        self.out_root = self.resolve(cfg.get("output_dir", "out"))
        self.out_dir = os.path.join(self.out_root, subcommand)
        self.inputs = {}
        self.outputs = []

    def resolve(self, path) -> str:
        path = os.fspath(path)
        if os.path.isabs(path):
            return path
        return os.path.normpath(os.path.join(self.base_dir, path))

    def read_input(self, path) -> str:
        path = os.fspath(path)
        if not os.path.exists(path):
            raise ConfigError(f"referenced file does not exist: {path}")
        self.inputs[os.path.abspath(path)] = file_sha256(path)
        return path

    def out_path(self, *names) -> str:
        os.makedirs(self.out_dir, exist_ok=True)
        path = os.path.join(self.out_dir, *names)
        rel = os.path.relpath(path, self.out_dir)
        if rel not in self.outputs:
            self.outputs.append(rel)
        return path

    def artifact(self, key: str, default_rel: str, must_exist=True) -> str:
        """Path of a pipeline artifact: config override or default slot."""
        override = self.cfg.get(key)
        path = self.resolve(override) if override else os.path.join(
            self.out_root, default_rel)
        if must_exist:
            if not os.path.exists(path):
                raise ConfigError(
                    f"missing {key} artifact {path}; run the producing "
                    "subcommand first or set the config key "
                    f"{key!r}"
                )
            self.read_input(path)
        return path

    def write_run_record(self):
        record = {
            "subcommand": self.subcommand,
            "argv": self.argv,
            "config_path": self.config_path,
            "config": self.cfg,
            "config_sha256": config_hash(self.cfg),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": sorted(self.outputs),
            "versions": {
                "eigenfield": __version__,
                "python": sys.version.split()[0],
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
            "threads": self.cfg.get("threads"),
        }
        path = self.out_path("run.json")
        with open(path, "w") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)
            fh.write("\n")


# -- shared resolution helpers ------------------------------------------------


def resolve_mesh(section: dict, ctx: RunContext) -> TriMesh:
    if not isinstance(section, dict):
        raise ConfigError("mesh section must be an object")
    path = section.get("path")
    if path:
        path = ctx.resolve(path)
        ctx.read_input(path)
        if path.endswith(".txt"):
            return load_loop_txt(path)
        return load_obj(path)
    kind = section.get("kind", "icosphere")
    if kind not in MESH_KINDS:
        raise ConfigError(
            f"unknown mesh kind {kind!r}; choose from {sorted(MESH_KINDS)}"
        )
    kwargs = {k: v for k, v in section.items() if k not in ("kind", "path")}
    try:
        return MESH_KINDS[kind](**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for mesh kind {kind!r}: {exc}")


def resolve_cameras(cfg: dict, ctx: RunContext):
    """Per-split camera lists from the 'cameras' section."""
    section = dict(cfg.get("cameras", {}))
    rigs = section.pop("rigs", None) or json.loads(json.dumps(DEFAULT_RIGS))
    out = {}
    for split, rig in rigs.items():
        if "path" in rig:
            path = ctx.resolve(rig["path"])
            ctx.read_input(path)
            out[split] = render.load_cameras(path)
            continue
        merged = dict(section)
        merged.update(rig)
        kind = merged.get("kind", "ring")
        if kind == "cover":
            out[split] = render.cover_cameras(
                radius=merged.get("radius", 2.5),
                width=merged.get("width", 128),
                height=merged.get("height", 128),
                focal=merged.get("focal"),
                phase=merged.get("phase", 0.0),
                target=tuple(merged.get("target", (0.0, 0.0, 0.0))),
            )
        elif kind == "ring":
            out[split] = render.ring_cameras(
                count=merged.get("count", 4),
                radius=merged.get("radius", 2.5),
                elevation_deg=merged.get("elevation_deg", 20.0),
                width=merged.get("width", 128),
                height=merged.get("height", 128),
                focal=merged.get("focal"),
                phase=merged.get("phase", 0.0),
                target=tuple(merged.get("target", (0.0, 0.0, 0.0))),
            )
        else:
            raise ConfigError(
                f"unknown camera rig kind {kind!r}; choose 'ring' or 'cover'"
            )
    return out


def resolve_embedding(cfg: dict, basis: EigenBasis | None):
    section = dict(cfg.get("embedding", {"kind": "intrinsic", "d": 64}))
    if section.get("kind") == "rff":
        section.setdefault("seed", cfg["seeds"]["rff"])
    spec = spec_from_dict(section)
    if spec.kind == INTRINSIC and basis is not None and spec.d > basis.d:
        raise ConfigError(
            f"embedding wants d={spec.d} but the basis holds {basis.d} pairs"
        )
    return spec


def resolve_view_spec(cfg: dict, mlp_cfg: fld.MlpConfig):
    if mlp_cfg.view_dim is None:
        return None
    section = cfg.get("view_embedding", {"kind": "posenc", "num_bands": 4})
    if section.get("kind") == "raw":
        if mlp_cfg.view_dim != 3:
            raise ConfigError("raw view embedding needs mlp.view_dim = 3")
        return None  # model_shader treats None view_spec as raw directions
    spec = spec_from_dict(section)
    if spec.d != mlp_cfg.view_dim:
        raise ConfigError(
            f"view embedding yields {spec.d} dims but mlp.view_dim "
            f"= {mlp_cfg.view_dim}"
        )
    return spec


def embed_surface_samples(spec, basis, mesh, samples):
    if spec.kind == INTRINSIC:
        return embed_intrinsic_batch(
            spec, basis, mesh, samples.faces, samples.barys
        )
    return embed_points(spec, samples.positions)


def load_manifest(ctx: RunContext):
    path = ctx.artifact("manifest", os.path.join("gen-data", "manifest.json"))
    with open(path) as fh:
        manifest = json.load(fh)
    manifest["_dir"] = os.path.dirname(os.path.abspath(path))
    return manifest


def manifest_mesh(manifest: dict, ctx: RunContext) -> TriMesh:
    path = os.path.join(manifest["_dir"], manifest["mesh"])
    ctx.read_input(path)
    mesh = load_obj(path)
    if manifest.get("mesh_hash") and mesh.content_hash() != manifest["mesh_hash"]:
        raise ConfigError("mesh file no longer matches the manifest hash")
    return mesh


def manifest_split(manifest: dict, split: str, ctx: RunContext):
    """Cameras, images, masks of one split."""
    splits = manifest.get("splits", {})
    if split not in splits:
        raise ConfigError(
            f"split {split!r} not in manifest (has {sorted(splits)})"
        )
    entry = splits[split]
    base = manifest["_dir"]
    cams = render.load_cameras(ctx.read_input(os.path.join(base, entry["cameras"])))
    images = [
        render.load_png(ctx.read_input(os.path.join(base, p)))
        for p in entry["images"]
    ]
    masks = [
        render.load_png(ctx.read_input(os.path.join(base, p)))[..., 0] > 0.5
        for p in entry["masks"]
    ]
    return cams, images, masks


def load_basis_artifact(ctx: RunContext, mesh: TriMesh | None) -> EigenBasis:
    path = ctx.artifact("basis", os.path.join("eigens", "basis.bin"))
    basis = EigenBasis.load(path)
    if mesh is not None and basis.mesh_hash != mesh.content_hash():
        raise ConfigError("basis was computed for a different mesh")
    return basis


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# -- subcommands ---------------------------------------------------------------


def cmd_gen_data(ctx: RunContext, args):
    cfg = ctx.cfg
    mesh = resolve_mesh(cfg.get("mesh", {}), ctx)
    mesh_path = ctx.out_path("mesh.obj")
    save_obj(mesh, mesh_path)
    manifest = {
        "mesh": "mesh.obj",
        "mesh_hash": mesh.content_hash(),
        "kind": mesh.kind,
    }

    if mesh.kind != LOOP:
        texture = SynthTexture.from_dict(cfg.get("texture", {}))
        basis = None
        if texture.pattern == "eigenfunction_rgb":
            d = max(texture.eigen_indices) + 1
            basis = compute_basis(mesh, d, seed=cfg["seeds"]["basis"])
        rig_cams = resolve_cameras(cfg, ctx)
        order = []
        cameras = []
        for split, cams in rig_cams.items():
            start = len(cameras)
            cameras.extend(cams)
            order.append((split, list(range(start, len(cameras)))))
        data = render.make_dataset(
            mesh, texture, cameras, splits=dict(order), basis=basis
        )
        manifest["texture"] = texture.to_dict()
        manifest["splits"] = {}
        for split, idx in order:
            render.save_cameras(
                [cameras[i] for i in idx],
                ctx.out_path(f"cameras_{split}.json"),
            )
            images, masks = [], []
            for j, i in enumerate(idx):
                img_name = f"{split}_{j:03d}.png"
                mask_name = f"{split}_{j:03d}_mask.png"
                render.save_png(data["images"][i], ctx.out_path(img_name))
                render.save_png(
                    data["masks"][i].astype(np.float64), ctx.out_path(mask_name)
                )
                images.append(img_name)
                masks.append(mask_name)
            manifest["splits"][split] = {
                "cameras": f"cameras_{split}.json",
                "images": images,
                "masks": masks,
            }
        n_img = sum(len(v["images"]) for v in manifest["splits"].values())
        print(
            f"gen-data: {mesh.n_vertices} vertices, {mesh.n_faces} faces, "
            f"{n_img} views across {len(manifest['splits'])} splits"
        )
    else:
        print(f"gen-data: loop with {mesh.n_vertices} vertices")

    with open(ctx.out_path("manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def cmd_eigens(ctx: RunContext, args):
    cfg = ctx.cfg
    section = cfg.get("eigens", {})
    mesh = resolve_mesh(cfg.get("mesh", {}), ctx)
    d = int(section.get("d", cfg.get("embedding", {}).get("d", 64)))
    basis = compute_basis(
        mesh, d, seed=cfg["seeds"]["basis"], dense=bool(section.get("dense"))
    )
    basis.save(ctx.out_path("basis.bin"))
    _write_csv(
        ctx.out_path("spectrum.csv"),
        ["k", "lambda"],
        [(k, repr(float(val))) for k, val in enumerate(basis.lambdas)],
    )
    groups = basis.degenerate_groups()
    print(f"eigens: n={basis.n} d={basis.d} ({len(groups)} eigenvalue groups)")
    print(f"{'k':>4} {'lambda':>18}")
    for k, val in enumerate(basis.lambdas):
        print(f"{k:>4} {val:>18.9g}")
    return 0


def cmd_train(ctx: RunContext, args):
    cfg = ctx.cfg
    manifest = load_manifest(ctx)
    mesh = manifest_mesh(manifest, ctx)
    spec_section = cfg.get("embedding", {"kind": "intrinsic", "d": 64})
    basis = None
    if spec_section.get("kind", "intrinsic") == "intrinsic":
        basis = load_basis_artifact(ctx, mesh)
    spec = resolve_embedding(cfg, basis)

    split = cfg.get("train_split", "train")
    cams, images, _ = manifest_split(manifest, split, ctx)
    samples = render.precompute_samples(mesh, cams, images)
    inputs = embed_surface_samples(spec, basis, mesh, samples)

    mlp_section = dict(cfg.get("mlp", {}))
    mlp_section.setdefault("init_seed", cfg["seeds"]["init"])
    mlp_section["input_dim"] = spec.d
    mlp_cfg = fld.MlpConfig.from_dict(mlp_section)
    view_spec = resolve_view_spec(cfg, mlp_cfg)
    view = None
    if mlp_cfg.view_dim is not None:
        dirs = samples.view_dirs
        view = embed_posenc(view_spec, dirs) if view_spec is not None else dirs

    train_section = dict(cfg.get("train", {}))
    train_section.setdefault("shuffle_seed", cfg["seeds"]["shuffle"])
    tcfg = fld.TrainConfig.from_dict(train_section)

    params = fld.init(mlp_cfg)
    params, history = fld.train(
        params, mlp_cfg, inputs, samples.colors, tcfg, view=view
    )

    meta = {
        "final_epoch_loss": history["epoch_loss"][-1],
        "steps": int(params.step),
        "train_split": split,
        "n_samples": int(samples.n),
        "seeds": cfg["seeds"],
        "view_embedding": None
        if view_spec is None
        else cfg.get("view_embedding"),
    }
    fld.save_model(
        ctx.out_path("model.bin"),
        params,
        mlp_cfg,
        embedding_spec=spec,
        train_meta=meta,
        mesh_hash=mesh.content_hash(),
        basis_hash="" if basis is None else basis.content_hash(),
    )
    _write_csv(
        ctx.out_path("loss.csv"),
        ["step", "loss"],
        list(enumerate(history["step_loss"], start=1)),
    )
    print(
        f"train: {samples.n} samples, {mlp_cfg.n_params()} params, "
        f"{params.step} steps, final epoch loss {meta['final_epoch_loss']:.6g}"
    )
    return 0


def cmd_render(ctx: RunContext, args):
    cfg = ctx.cfg
    manifest = load_manifest(ctx)
    mesh = manifest_mesh(manifest, ctx)
    model_path = ctx.artifact("model", os.path.join("train", "model.bin"))
    params, mlp_cfg, header = fld.load_model(model_path)
    spec = header.get("embedding_spec")
    if spec is None:
        raise ConfigError("model carries no embedding spec")
    basis = None
    if spec.kind == INTRINSIC:
        basis = load_basis_artifact(ctx, mesh)
    view_spec = resolve_view_spec(cfg, mlp_cfg)

    split = args.split or cfg.get("render", {}).get("split", "test")
    cams, gt_images, gt_masks = manifest_split(manifest, split, ctx)
    indices = list(range(len(cams)))
    if args.camera is not None:
        if not 0 <= args.camera < len(cams):
            raise ConfigError(
                f"--camera {args.camera} out of range for split {split!r} "
                f"({len(cams)} cameras)"
            )
        indices = [args.camera]

    shader = render.model_shader(
        params, mlp_cfg, spec, mesh, basis=basis, view_spec=view_spec
    )
    rows = []
    for k in indices:
        img, mask = render.render_view(mesh, cams[k], shader)
        render.save_png(img, ctx.out_path(f"{split}_{k:03d}.png"))
        p = render.psnr(img, gt_images[k], gt_masks[k])
        d = render.dssim(img, gt_images[k], gt_masks[k])
        rows.append((k, p, d))
    mean_p = float(np.mean([r[1] for r in rows]))
    mean_d = float(np.mean([r[2] for r in rows]))
    _write_csv(
        ctx.out_path(f"metrics_{split}.csv"),
        ["view", "psnr", "dssim"],
        [(k, f"{p:.6f}", f"{d:.8f}") for k, p, d in rows]
        + [("mean", f"{mean_p:.6f}", f"{mean_d:.8f}")],
    )
    print(f"render: split {split!r}, {len(rows)} views")
    for k, p, d in rows:
        print(f"  view {k:>3}  psnr {p:7.3f} dB  dssim {d:.5f}")
    print(f"  mean      psnr {mean_p:7.3f} dB  dssim {mean_d:.5f}")
    return 0


def cmd_ntk(ctx: RunContext, args):
    cfg = ctx.cfg
    section = cfg.get("ntk", {})
    depth = int(section.get("depth", 3))
    beta = float(section.get("beta", 0.1))
    mesh = resolve_mesh(cfg.get("mesh", {}), ctx)

    spec_section = cfg.get("embedding", {"kind": "intrinsic", "d": 16})
    basis = None
    if spec_section.get("kind", "intrinsic") == "intrinsic":
        d = int(spec_section.get("d", 16))
        basis = compute_basis(mesh, d, seed=cfg["seeds"]["basis"])
    else:
        # stationarity coefficients still need a basis to project onto
        basis = compute_basis(
            mesh, int(section.get("basis_d", 16)), seed=cfg["seeds"]["basis"]
        )
    spec = resolve_embedding(cfg, basis)
    if spec.kind == INTRINSIC:
        X = basis.phis[:, : spec.d] * spec.coeffs()[None, :]
    else:
        X = embed_points(spec, mesh.vertices)

    sigma, theta = ntk_mod.nngp_ntk(X, depth, beta)
    sigma = 0.5 * (sigma + sigma.T)
    theta = 0.5 * (theta + theta.T)
    emb_desc = canonical_json(spec.to_dict())
    for name, values in (("sigma", sigma), ("theta", theta)):
        kern = ntk_mod.KernelMatrix(
            values=values, depth=depth, beta=beta, embedding=emb_desc
        )
        kern.validate()
        kern.save(ctx.out_path(f"{name}.bin"))
        ntk_mod.heatmap_png(values, ctx.out_path(f"{name}.png"))

    theta_kern = ntk_mod.KernelMatrix(
        values=theta, depth=depth, beta=beta, embedding=emb_desc
    )
    coeffs = ntk_mod.stationarity_coeffs(theta_kern, basis)
    coeffs.save(ctx.out_path("coeffs.bin"))
    ntk_mod.heatmap_png(np.abs(coeffs.values), ctx.out_path("coeffs.png"))
    scores = ntk_mod.stationarity_score(coeffs)

    width = section.get("empirical_width")
    if width:
        emp = ntk_mod.empirical_ntk(
            X,
            int(width),
            depth,
            beta,
            seed=cfg["seeds"]["ntk"],
            n_draws=int(section.get("empirical_draws", 1)),
        )
        scores["empirical_rel_frobenius"] = float(
            np.linalg.norm(emp - theta) / np.linalg.norm(theta)
        )
    with open(ctx.out_path("scores.json"), "w") as fh:
        json.dump(scores, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"ntk: depth {depth}, beta {beta}, {X.shape[0]} points")
    for key, val in sorted(scores.items()):
        print(f"  {key}: {val:.6g}")
    return 0


def cmd_transfer(ctx: RunContext, args):
    cfg = ctx.cfg
    section = cfg.get("transfer", {})
    manifest = load_manifest(ctx)
    mesh_src = manifest_mesh(manifest, ctx)
    basis_src = load_basis_artifact(ctx, mesh_src)
    model_path = ctx.artifact("model", os.path.join("train", "model.bin"))
    params, mlp_cfg, header = fld.load_model(model_path)
    spec = header.get("embedding_spec")
    if spec is None or spec.kind != INTRINSIC:
        raise ConfigError("transfer needs a model trained on an intrinsic "
                          "embedding")

    target_section = section.get("target_mesh")
    if not target_section:
        raise ConfigError("transfer.target_mesh is required")
    mesh_tgt = resolve_mesh(target_section, ctx)
    d = int(section.get("d", basis_src.d))
    basis_tgt = compute_basis(mesh_tgt, d, seed=cfg["seeds"]["basis"])

    p2p = args.p2p or section.get("p2p", "closest")
    if p2p == "identity":
        corr = transfer.identity_correspondence(mesh_src)
        if mesh_tgt.content_hash() != mesh_src.content_hash():
            corr = transfer.Correspondence(
                faces=corr.faces,
                barys=corr.barys,
                source_mesh_hash=mesh_src.content_hash(),
                target_mesh_hash=mesh_tgt.content_hash(),
            )
    elif p2p == "closest":
        corr = transfer.closest_point_correspondence(mesh_src, mesh_tgt)
    else:
        corr = transfer.Correspondence.load(ctx.read_input(ctx.resolve(p2p)))
    corr.save(ctx.out_path("p2p.bin"))

    fmap = transfer.fmap_from_p2p(
        corr,
        mesh_src,
        basis_src,
        basis_tgt,
        mass_weighted=bool(section.get("mass_weighted", True)),
    )
    fmap.save(ctx.out_path("fmap.npz"))

    view_spec = resolve_view_spec(cfg, mlp_cfg)
    rig_cams = resolve_cameras(cfg, ctx)
    split = section.get("split", "test")
    if split not in rig_cams:
        raise ConfigError(f"no camera rig named {split!r}")
    rows = []
    texture = None
    if "texture" in manifest:
        texture = SynthTexture.from_dict(manifest["texture"])
    for k, cam in enumerate(rig_cams[split]):
        img, mask = transfer.render_transferred(
            params, mlp_cfg, fmap, basis_tgt, mesh_tgt, cam,
            view_spec=view_spec,
        )
        render.save_png(img, ctx.out_path(f"transfer_{k:03d}.png"))
        if texture is not None and texture.pattern != "eigenfunction_rgb":
            gt, _ = render.render_view(
                mesh_tgt, cam, render.texture_shader(texture, mesh_tgt)
            )
            rows.append(
                (k, render.psnr(img, gt, mask), render.dssim(img, gt, mask))
            )
    kmax = abs(fmap.C).max()
    print(
        f"transfer: {mesh_src.n_vertices} -> {mesh_tgt.n_vertices} vertices, "
        f"d={d}, max |C| entry {kmax:.4f}"
    )
    if rows:
        mean_p = float(np.mean([r[1] for r in rows]))
        mean_d = float(np.mean([r[2] for r in rows]))
        _write_csv(
            ctx.out_path("metrics.csv"),
            ["view", "psnr", "dssim"],
            [(k, f"{p:.6f}", f"{s:.8f}") for k, p, s in rows]
            + [("mean", f"{mean_p:.6f}", f"{mean_d:.8f}")],
        )
        print(f"  mean vs texture: psnr {mean_p:7.3f} dB  dssim {mean_d:.5f}")
    return 0


def cmd_bench1d(ctx: RunContext, args):
    cfg = ctx.cfg
    section = dict(cfg.get("bench1d", {}))
    curve = b1d.make_curve(
        section.get("curve", "pinched"), n=int(section.get("n", 256))
    )
    emb_section = section.get(
        "embeddings",
        {
            "intrinsic_d8": {"kind": "intrinsic", "d": 8},
            "intrinsic_d2": {"kind": "intrinsic", "d": 2},
            "rff": {"kind": "rff", "d": 8, "sigma": 0.5},
            "extrinsic": {"kind": "extrinsic"},
        },
    )
    embeddings = {}
    for name, sub in emb_section.items():
        sub = dict(sub)
        if sub.get("kind") == "rff":
            sub.setdefault("seed", cfg["seeds"]["rff"])
        embeddings[name] = spec_from_dict(sub)

    tcfg = b1d.default_train_config(seed=cfg["seeds"]["shuffle"])
    for key in ("batch_size", "lr", "max_steps"):
        if key in section:
            tcfg = fld.TrainConfig.from_dict(
                {**tcfg.to_dict(), key: section[key]}
            )
    results = b1d.run_benchmark(
        curve,
        embeddings,
        train_count=int(section.get("train_count", 32)),
        tcfg=tcfg,
        hidden_width=int(section.get("hidden_width", 1024)),
        num_hidden_layers=int(section.get("num_hidden_layers", 3)),
        init_seed=cfg["seeds"]["init"],
        basis_seed=cfg["seeds"]["basis"],
    )

    b1d.write_csv(curve, results, ctx.out_path("reconstructions.csv"))
    b1d.plot_reconstructions(curve, results, ctx.out_path("reconstructions.png"))
    region = b1d.near_touch_region(curve)
    target = results["_meta"]["target"]
    table = {}
    for name, res in results.items():
        if name == "_meta":
            continue
        nt_err = float(
            np.max(np.abs(res["prediction"][region] - target[region]))
        )
        table[name] = {
            "train_mse": res["train_mse"],
            "dense_mse": res["dense_mse"],
            "near_touch_max_err": nt_err,
        }
    with open(ctx.out_path("metrics.json"), "w") as fh:
        json.dump(table, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"bench1d: {section.get('curve', 'pinched')} curve, "
          f"{curve.n} vertices, {len(table)} embeddings")
    print(f"{'embedding':<16} {'train_mse':>12} {'dense_mse':>12} "
          f"{'near_touch':>12}")
    for name, row in sorted(table.items()):
        print(
            f"{name:<16} {row['train_mse']:>12.3g} {row['dense_mse']:>12.3g} "
            f"{row['near_touch_max_err']:>12.3g}"
        )
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "eigens": cmd_eigens,
    "train": cmd_train,
    "render": cmd_render,
    "ntk": cmd_ntk,
    "transfer": cmd_transfer,
    "bench1d": cmd_bench1d,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eigenfield",
        description="Spectral neural-field toolkit: data synthesis, "
        "eigenbases, training, rendering, kernels, transfer.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=f"{name} stage")
        p.add_argument("--config", required=True, help="experiment JSON")
        p.add_argument("--out", default=None, help="override output_dir")
        p.add_argument(
            "--seed", type=int, default=None,
            help="override every stage seed",
        )
        p.add_argument(
            "--threads", type=int, default=None, help="cap worker threads"
        )
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="override a config field via dotted path "
            "(value parsed as JSON when possible)",
        )
        if name == "render":
            p.add_argument("--camera", type=int, default=None,
                           help="render a single view index")
            p.add_argument("--split", default=None,
                           help="render this dataset split")
        if name == "transfer":
            p.add_argument("--p2p", default=None,
                           help="correspondence file, or 'identity'/'closest'")
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg = apply_overrides(cfg, args)
        set_thread_cap(cfg)
        ctx = RunContext(args.subcommand, cfg, args.config, argv)
        code = COMMANDS[args.subcommand](ctx, args)
        ctx.write_run_record()
        return code
    except ConfigError as exc:
        _report_error(args.subcommand, exc)
        return 2
    except Exception as exc:  # runtime failure: structured report, exit 1
        _report_error(args.subcommand, exc)
        return 1


def _report_error(subcommand, exc):
    report = {
        "subcommand": subcommand,
        "error": type(exc).__name__,
        "message": str(exc),
    }
    print(json.dumps(report), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
