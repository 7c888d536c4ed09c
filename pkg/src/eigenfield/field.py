"""The coordinate MLP: forward, reverse-mode gradients, Adam training.

Two architectures: a plain ReLU trunk with an optional skip concatenation
of the input embedding, and a view-dependent variant that concatenates a
view-direction embedding after the trunk and adds one half-width head
layer before the output.  Parameters are float32; a float64 shadow path
exists for finite-difference gradient checks.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .embedding import spec_from_dict

MODEL_MAGIC = b"INFMODEL"


class FieldError(Exception):
    pass


class DivergenceError(FieldError):
    """Training hit a non-finite loss; carries the last good parameters."""

    def __init__(self, message, params=None, history=None):
        super().__init__(message)
        self.params = params
        self.history = history


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_width: int = 256
    num_hidden_layers: int = 4
    skip_at: int | None = 2
    view_dim: int | None = None
    output_dim: int = 3
    output_sigmoid: bool = True
    init_seed: int = 0

    def __post_init__(self):
        if self.skip_at is not None and not (
            0 < self.skip_at < self.num_hidden_layers
        ):
            raise FieldError("need 0 < skip_at < num_hidden_layers")
        if self.view_dim is not None and self.view_dim <= 0:
            raise FieldError("view_dim must be positive when present")

    @property
    def view_dependent(self) -> bool:
        return self.view_dim is not None

    def layer_dims(self):
        """(fan_in, fan_out) per weight layer, trunk then head."""
        dims = []
        w = self.hidden_width
        for i in range(self.num_hidden_layers):
            fan_in = self.input_dim if i == 0 else w
            if self.skip_at is not None and i == self.skip_at:
                fan_in += self.input_dim
            dims.append((fan_in, w))
        if self.view_dependent:
            dims.append((w + self.view_dim, w // 2))
            dims.append((w // 2, self.output_dim))
        else:
            dims.append((w, self.output_dim))
        return dims

    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims())

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden_width": self.hidden_width,
            "num_hidden_layers": self.num_hidden_layers,
            "skip_at": self.skip_at,
            "view_dim": self.view_dim,
            "output_dim": self.output_dim,
            "output_sigmoid": self.output_sigmoid,
            "init_seed": self.init_seed,
        }

    @classmethod
    def from_dict(cls, cfg):
        return cls(**cfg)


@dataclass
class MlpParams:
    """Weights, biases, and Adam state. weights[l] has shape (in, out)."""

    weights: list
    biases: list
    step: int = 0
    m_w: list = None
    v_w: list = None
    m_b: list = None
    v_b: list = None

    def __post_init__(self):
        if self.m_w is None:
            self.m_w = [np.zeros_like(w) for w in self.weights]
            self.v_w = [np.zeros_like(w) for w in self.weights]
            self.m_b = [np.zeros_like(b) for b in self.biases]
            self.v_b = [np.zeros_like(b) for b in self.biases]

    def copy(self) -> "MlpParams":
        return MlpParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.step,
            [m.copy() for m in self.m_w],
            [v.copy() for v in self.v_w],
            [m.copy() for m in self.m_b],
            [v.copy() for v in self.v_b],
        )

    def astype(self, dtype) -> "MlpParams":
        return MlpParams(
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
            self.step,
        )

    def check_finite(self):
        for a in self.weights + self.biases:
            if not np.all(np.isfinite(a)):
                raise FieldError("non-finite parameter")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4096
    lr: float = 1e-3
    epochs: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shuffle_seed: int = 0
    loss: str = "l1"
    max_steps: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise FieldError("batch_size must be >= 1")
        if self.lr < 0:
            raise FieldError("lr must be nonnegative")
        if self.loss not in ("l1", "l2"):
            raise FieldError("loss must be 'l1' or 'l2'")

    def to_dict(self):
        return {
            "batch_size": self.batch_size,
            "lr": self.lr,
            "epochs": self.epochs,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "shuffle_seed": self.shuffle_seed,
            "loss": self.loss,
            "max_steps": self.max_steps,
        }

    @classmethod
    def from_dict(cls, cfg):
        return cls(**cfg)


def init(config: MlpConfig, dtype=np.float32) -> MlpParams:
    """He-normal weights (std sqrt(2/fan_in)), zero biases, zero Adam
    state; deterministic in config.init_seed."""
    rng = np.random.default_rng(config.init_seed)
    weights, biases = [], []
    for fan_in, fan_out in config.layer_dims():
        std = np.sqrt(2.0 / fan_in)
        weights.append(
            rng.normal(0.0, std, (fan_in, fan_out)).astype(dtype)
        )
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MlpParams(weights, biases)


def init_ntk(config: MlpConfig, beta: float, dtype=np.float64) -> MlpParams:
    """Initialization matching the infinite-width kernel convention:
    W ~ N(0, 1/fan_in), b ~ N(0, beta^2)."""
    rng = np.random.default_rng(config.init_seed)
    weights, biases = [], []
    for fan_in, fan_out in config.layer_dims():
        std = np.sqrt(1.0 / fan_in)
        weights.append(rng.normal(0.0, std, (fan_in, fan_out)).astype(dtype))
        biases.append(rng.normal(0.0, beta, fan_out).astype(dtype))
    return MlpParams(weights, biases)


def _forward_cached(params: MlpParams, config: MlpConfig, x, view=None):
    """Returns (output, caches).  caches holds per-layer inputs and the
    post-ReLU masks needed for the backward pass."""
    dtype = params.weights[0].dtype
    x = np.ascontiguousarray(x, dtype=dtype)
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise FieldError(
            f"expected (N, {config.input_dim}) input, got {x.shape}"
        )
    if config.view_dependent:
        if view is None:
            raise FieldError("view-dependent network needs a view input")
        view = np.ascontiguousarray(view, dtype=dtype)
        if view.shape != (x.shape[0], config.view_dim):
            raise FieldError("view embedding shape mismatch")
    elif view is not None:
        raise FieldError("plain architecture rejects a view input")

    inputs, masks = [], []
    h = x
    n_hidden = config.num_hidden_layers
    for i in range(n_hidden):
        if config.skip_at is not None and i == config.skip_at:
            h = np.concatenate([h, x], axis=1)
        inputs.append(h)
        z = h @ params.weights[i] + params.biases[i]
        mask = z > 0
        masks.append(mask)
        h = np.where(mask, z, 0)
    layer = n_hidden
    if config.view_dependent:
        h = np.concatenate([h, view], axis=1)
        inputs.append(h)
        z = h @ params.weights[layer] + params.biases[layer]
        mask = z > 0
        masks.append(mask)
        h = np.where(mask, z, 0)
        layer += 1
    inputs.append(h)
    z = h @ params.weights[layer] + params.biases[layer]
    out = expit(z) if config.output_sigmoid else z
    caches = (inputs, masks, out, z)
    return out, caches


def forward(params: MlpParams, config: MlpConfig, x, view=None):
    """Batched network evaluation: x is (N, input_dim) (a single vector is
    promoted); output (N, output_dim)."""
    single = np.asarray(x).ndim == 1
    xb = np.atleast_2d(x)
    vb = None
    if view is not None:
        vb = np.atleast_2d(view)
    out, _ = _forward_cached(params, config, xb, vb)
    return out[0] if single else out


def _backward(params: MlpParams, config: MlpConfig, caches, dout):
    """Gradients of sum(dout * output) wrt every weight and bias."""
    inputs, masks, out, _ = caches
    if config.output_sigmoid:
        delta = dout * out * (1.0 - out)
    else:
        delta = np.ascontiguousarray(dout, dtype=out.dtype)
    gw = [None] * len(params.weights)
    gb = [None] * len(params.biases)
    for layer in range(len(params.weights) - 1, -1, -1):
        h = inputs[layer]
        gw[layer] = h.T @ delta
        gb[layer] = delta.sum(axis=0)
        if layer == 0:
            break
        delta = delta @ params.weights[layer].T
        # undo the concatenation that fed this layer, then gate through
        # the previous ReLU
        if config.view_dependent and layer == config.num_hidden_layers:
            delta = delta[:, : config.hidden_width]
        elif config.skip_at is not None and layer == config.skip_at:
            delta = delta[:, : delta.shape[1] - config.input_dim]
        delta = delta * masks[layer - 1]
    return gw, gb


def loss_and_grad(
    params: MlpParams,
    config: MlpConfig,
    x,
    target,
    view=None,
    loss: str = "l1",
):
    """Mean loss over batch and channels plus parameter gradients.

    l1 uses subgradient 0 at the kink; l2 is the plain mean square.
    """
    x = np.atleast_2d(x)
    target = np.atleast_2d(np.asarray(target, dtype=params.weights[0].dtype))
    if x.shape[0] == 0:
        raise FieldError("empty batch")
    out, caches = _forward_cached(params, config, x, view)
    if not np.all(np.isfinite(out)):
        raise FieldError("non-finite forward values")
    r = out - target
    n = r.size
    if loss == "l1":
        value = float(np.abs(r).mean())
        dout = np.sign(r) / n
    elif loss == "l2":
        value = float((r * r).mean())
        dout = 2.0 * r / n
    else:
        raise FieldError(f"unknown loss {loss!r}")
    gw, gb = _backward(params, config, caches, dout.astype(out.dtype))
    return value, (gw, gb)


def adam_step(params: MlpParams, grads, tcfg: TrainConfig):
    """One bias-corrected Adam update, in place."""
    gw, gb = grads
    params.step += 1
    t = params.step
    b1, b2, eps, lr = tcfg.beta1, tcfg.beta2, tcfg.eps, tcfg.lr
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(
        params.weights + params.biases,
        gw + gb,
        params.m_w + params.m_b,
        params.v_w + params.v_b,
    ):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def train(
    params: MlpParams,
    config: MlpConfig,
    x,
    target,
    tcfg: TrainConfig,
    view=None,
    callback=None,
):
    """Adam over shuffled minibatches.

    Runs epochs * ceil(N / batch) steps, or exactly tcfg.max_steps when
    set (cycling through reshuffled epochs as needed).  Returns
    (params, history); history records the mean loss per epoch and every
    step loss.  A non-finite loss aborts with DivergenceError carrying
    the parameters from the last completed epoch.
    """
    x = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float32)
    target = np.ascontiguousarray(np.atleast_2d(target), dtype=np.float32)
    if view is not None:
        view = np.ascontiguousarray(np.atleast_2d(view), dtype=np.float32)
    n = x.shape[0]
    if n == 0:
        raise FieldError("empty dataset")
    rng = np.random.default_rng(tcfg.shuffle_seed)
    history = {"epoch_loss": [], "step_loss": []}
    steps_done = 0
    epoch = 0
    checkpoint = params.copy()
    while True:
        if tcfg.max_steps is not None and steps_done >= tcfg.max_steps:
            break
        if tcfg.max_steps is None and epoch >= tcfg.epochs:
            break
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, tcfg.batch_size):
            if tcfg.max_steps is not None and steps_done >= tcfg.max_steps:
                break
            sel = perm[start : start + tcfg.batch_size]
            vb = None if view is None else view[sel]
            try:
                value, grads = loss_and_grad(
                    params, config, x[sel], target[sel], view=vb,
                    loss=tcfg.loss,
                )
            except DivergenceError:
                raise
            except FieldError as exc:
                # parameters went non-finite between steps
                raise DivergenceError(
                    f"training diverged at step {steps_done}: {exc}",
                    params=checkpoint,
                    history=history,
                )
            if not np.isfinite(value):
                raise DivergenceError(
                    f"loss diverged at step {steps_done}",
                    params=checkpoint,
                    history=history,
                )
            adam_step(params, grads, tcfg)
            losses.append(value)
            history["step_loss"].append(value)
            steps_done += 1
        if losses:
            history["epoch_loss"].append(float(np.mean(losses)))
        checkpoint = params.copy()
        epoch += 1
        if callback is not None:
            callback(epoch, history)
        if tcfg.max_steps is None and epoch >= tcfg.epochs:
            break
    return params, history


def numeric_grad(params, config, x, target, view=None, loss="l1",
                 coords=None, h=1e-3, seed=0):
    """Central finite differences on a float64 shadow of the parameters.

    coords: number of randomly probed parameter coordinates (all when
    None).  Returns (flat_indices, analytic, numeric).
    """
    shadow = params.astype(np.float64)
    x64 = np.atleast_2d(np.asarray(x, np.float64))
    t64 = np.atleast_2d(np.asarray(target, np.float64))
    v64 = None if view is None else np.atleast_2d(np.asarray(view, np.float64))

    value, (gw, gb) = loss_and_grad(
        shadow, config, x64, t64, view=v64, loss=loss
    )
    flat_g = np.concatenate([g.ravel() for g in gw + gb])
    arrays = shadow.weights + shadow.biases
    sizes = [a.size for a in arrays]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    if coords is None or coords >= total:
        idx = np.arange(total)
    else:
        idx = rng.choice(total, size=coords, replace=False)
    offsets = np.cumsum([0] + sizes)

    def poke(flat_index, delta):
        k = np.searchsorted(offsets, flat_index, side="right") - 1
        a = arrays[k]
        a.ravel()[flat_index - offsets[k]] += delta

    numeric = np.empty(len(idx))
    for j, fi in enumerate(idx):
        poke(fi, +h)
        lp, _ = loss_and_grad(shadow, config, x64, t64, view=v64, loss=loss)
        poke(fi, -2 * h)
        lm, _ = loss_and_grad(shadow, config, x64, t64, view=v64, loss=loss)
        poke(fi, +h)
        numeric[j] = (lp - lm) / (2 * h)
    return idx, flat_g[idx], numeric


def jacobian_grams(params: MlpParams, config: MlpConfig, x):
    """Per-layer Gram matrices of per-sample output Jacobians.

    For scalar-output networks: returns a list over weight layers of
    (delta_gram, act_gram) with delta_gram[n, n'] = <delta_l(x_n),
    delta_l(x_n')> and act_gram the same for the layer inputs, so that
    J_W J_W^T = delta_gram * act_gram and J_b J_b^T = delta_gram.
    """
    if config.output_dim != 1:
        raise FieldError("jacobian_grams expects a scalar-output network")
    if config.output_sigmoid:
        raise FieldError("jacobian_grams expects a linear output head")
    if config.view_dependent:
        raise FieldError("jacobian_grams expects the plain architecture")
    x = np.atleast_2d(x)
    out, caches = _forward_cached(params, config, x, None)
    inputs, masks, _, _ = caches
    n = x.shape[0]
    delta = np.ones((n, 1), dtype=out.dtype)
    grams = [None] * len(params.weights)
    for layer in range(len(params.weights) - 1, -1, -1):
        h = inputs[layer]
        grams[layer] = (delta @ delta.T, h @ h.T)
        if layer == 0:
            break
        delta = delta @ params.weights[layer].T
        if config.skip_at is not None and layer == config.skip_at:
            delta = delta[:, : delta.shape[1] - config.input_dim]
        delta = delta * masks[layer - 1]
    return grams


def _tensor_entries(config: MlpConfig):
    names = []
    for i in range(len(config.layer_dims())):
        names += [f"w{i}", f"b{i}"]
    return names


def save_model(
    path,
    params: MlpParams,
    config: MlpConfig,
    embedding_spec=None,
    train_meta=None,
    mesh_hash: str = "",
    basis_hash: str = "",
):
    """Binary model artifact: magic, uint64 header length, JSON header,
    then float32 tensors in header declaration order."""
    tensors = []
    entries = []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        for name, a in ((f"w{i}", w), (f"b{i}", b)):
            a32 = np.ascontiguousarray(a, dtype=np.float32)
            entries.append({"name": name, "shape": list(a32.shape)})
            tensors.append(a32)
    header = {
        "mlp_config": config.to_dict(),
        "embedding": None if embedding_spec is None
        else embedding_spec.to_dict(),
        "train_meta": train_meta or {},
        "mesh_hash": mesh_hash,
        "basis_hash": basis_hash,
        "step": params.step,
        "tensors": entries,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for a in tensors:
            fh.write(a.tobytes())


def load_model(path):
    """Returns (params, config, header)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MODEL_MAGIC:
            raise FieldError(f"not a model file: magic {magic!r}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        config = MlpConfig.from_dict(header["mlp_config"])
        weights, biases = [], []
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape))
            a = np.frombuffer(fh.read(4 * count), np.float32)
            a = a.reshape(shape).copy()
            if entry["name"].startswith("w"):
                weights.append(a)
            else:
                biases.append(a)
    params = MlpParams(weights, biases, step=header.get("step", 0))
    if header.get("embedding") is not None:
        header["embedding_spec"] = spec_from_dict(header["embedding"])
    return params, config, header


def params_hash(params: MlpParams) -> str:
    h = hashlib.sha256()
    for a in params.weights + params.biases:
        h.update(np.ascontiguousarray(a, np.float32).tobytes())
    return h.hexdigest()
