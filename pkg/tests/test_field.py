import numpy as np
import pytest
from scipy.special import expit

from eigenfield import field as fld


def tiny_config(**kw):
    base = dict(
        input_dim=2,
        hidden_width=8,
        num_hidden_layers=2,
        skip_at=None,
        view_dim=None,
        output_dim=3,
        output_sigmoid=True,
        init_seed=0,
    )
    base.update(kw)
    return fld.MlpConfig(**base)


# -- configuration arithmetic -------------------------------------------------


def test_default_layer_dims_and_param_count():
    cfg = fld.MlpConfig(input_dim=64)
    dims = cfg.layer_dims()
    assert dims[0] == (64, 256)
    assert dims[2] == (256 + 64, 256)  # skip concat re-injects the input
    assert dims[-1] == (256, 3)
    # independent arithmetic for the same architecture
    expect = (64 * 256 + 256) + (256 * 256 + 256) + (320 * 256 + 256) \
        + (256 * 256 + 256) + (256 * 3 + 3)
    assert cfg.n_params() == expect == 231171


def test_compact_param_count():
    cfg = fld.MlpConfig(
        input_dim=64, hidden_width=64, num_hidden_layers=3, skip_at=1
    )
    expect = (64 * 64 + 64) + (128 * 64 + 64) + (64 * 64 + 64) + (64 * 3 + 3)
    assert cfg.n_params() == expect == 16771


def test_view_head_dims():
    cfg = fld.MlpConfig(input_dim=16, hidden_width=64, num_hidden_layers=2,
                        skip_at=None, view_dim=24)
    dims = cfg.layer_dims()
    assert dims[-2] == (64 + 24, 32)
    assert dims[-1] == (32, 3)


def test_config_roundtrip():
    cfg = fld.MlpConfig(input_dim=10, hidden_width=32, num_hidden_layers=3,
                        skip_at=1, view_dim=6, output_sigmoid=False,
                        init_seed=7)
    assert fld.MlpConfig.from_dict(cfg.to_dict()) == cfg


def test_train_config_roundtrip():
    tcfg = fld.TrainConfig(batch_size=64, lr=3e-4, loss="l2", max_steps=10)
    assert fld.TrainConfig.from_dict(tcfg.to_dict()) == tcfg


# -- forward ------------------------------------------------------------------


def test_forward_matches_hand_computation():
    cfg = fld.MlpConfig(input_dim=2, hidden_width=2, num_hidden_layers=1,
                        skip_at=None, output_dim=1, output_sigmoid=False,
                        init_seed=0)
    params = fld.init(cfg)
    params.weights[0] = np.array([[1.0, 0.0], [0.0, 1.0]], np.float32)
    params.biases[0] = np.array([0.5, -0.5], np.float32)
    params.weights[1] = np.array([[2.0], [3.0]], np.float32)
    params.biases[1] = np.array([0.25], np.float32)
    x = np.array([1.0, -2.0], np.float32)
    # z = [1.5, -2.5] -> relu -> [1.5, 0] -> 2*1.5 + 0.25
    assert fld.forward(params, cfg, x) == pytest.approx(3.25, abs=1e-6)

    cfg_s = fld.MlpConfig(**{**cfg.to_dict(), "output_sigmoid": True})
    assert fld.forward(params, cfg_s, x) == pytest.approx(
        expit(3.25), abs=1e-6
    )


def test_forward_batch_matches_single(rng):
    cfg = tiny_config(skip_at=1, num_hidden_layers=3)
    params = fld.init(cfg)
    x = rng.normal(size=(20, 2)).astype(np.float32)
    batch = fld.forward(params, cfg, x)
    singles = np.stack([fld.forward(params, cfg, xi) for xi in x])
    assert np.allclose(batch, singles, atol=1e-6)


def test_relu_net_is_positively_homogeneous(rng):
    cfg = tiny_config(output_sigmoid=False)
    params = fld.init(cfg)
    for b in params.biases:
        b[...] = 0.0
    x = rng.normal(size=(5, 2)).astype(np.float32)
    y1 = fld.forward(params, cfg, x)
    y3 = fld.forward(params, cfg, 3.0 * x)
    assert np.allclose(y3, 3.0 * y1, rtol=1e-5, atol=1e-6)


def test_init_is_deterministic():
    a = fld.init(tiny_config())
    b = fld.init(tiny_config())
    c = fld.init(tiny_config(init_seed=1))
    assert fld.params_hash(a) == fld.params_hash(b)
    assert fld.params_hash(a) != fld.params_hash(c)


def test_init_he_scale():
    cfg = fld.MlpConfig(input_dim=256, hidden_width=512,
                        num_hidden_layers=2, skip_at=None)
    params = fld.init(cfg)
    std = params.weights[1].std()
    assert abs(std - np.sqrt(2.0 / 512)) / np.sqrt(2.0 / 512) < 0.05


def test_init_ntk_scale():
    cfg = fld.MlpConfig(input_dim=64, hidden_width=1024,
                        num_hidden_layers=2, skip_at=None, output_dim=1,
                        output_sigmoid=False)
    params = fld.init_ntk(cfg, beta=0.3)
    w_std = params.weights[1].std()
    assert abs(w_std - np.sqrt(1.0 / 1024)) / np.sqrt(1.0 / 1024) < 0.1
    b_std = params.biases[0].std()
    assert abs(b_std - 0.3) < 0.05


# -- gradients ------------------------------------------------------------------


VARIANTS = [
    dict(),
    dict(skip_at=1, num_hidden_layers=3),
    dict(view_dim=6),
    dict(output_sigmoid=False),
    dict(skip_at=1, num_hidden_layers=3, view_dim=6, output_sigmoid=False),
]


@pytest.mark.parametrize("kw", VARIANTS)
@pytest.mark.parametrize("loss", ["l1", "l2"])
def test_gradcheck_variants(kw, loss, rng):
    cfg = tiny_config(**kw)
    params = fld.init(cfg)
    # biases init to zero, which can pin pre-activations of an entirely
    # dead row exactly on the ReLU kink; there a bias poke crosses the
    # kink at any h and central differences are biased.  Randomize the
    # biases so every kink sits a generic distance from the stencil.
    for b in params.biases:
        b[...] = rng.normal(scale=0.05, size=b.shape).astype(b.dtype)
    x = rng.normal(size=(16, 2))
    view = None
    if cfg.view_dim:
        view = rng.normal(size=(16, cfg.view_dim))
    pred = fld.forward(params.astype(np.float64), cfg,
                       x.astype(np.float64),
                       None if view is None else view.astype(np.float64))
    # keep residuals away from zero so the l1 kink cannot sit inside the
    # finite-difference stencil either
    target = pred - 0.3
    idx, analytic, numeric = fld.numeric_grad(
        params, cfg, x, target, view=view, loss=loss, coords=120, h=1e-6,
        seed=3,
    )
    scale = np.maximum(np.abs(numeric), 1e-8)
    rel = np.abs(analytic - numeric) / scale
    live = np.abs(numeric) > 1e-10
    assert rel[live].max() < 1e-4


def test_l2_gradient_formula_output_layer():
    # one hidden layer, one sample: the output-layer gradient is the
    # hidden activation times the residual derivative
    cfg = fld.MlpConfig(input_dim=2, hidden_width=4, num_hidden_layers=1,
                        skip_at=None, output_dim=1, output_sigmoid=False)
    params = fld.init(cfg)
    x = np.array([[1.0, 2.0]], np.float32)
    t = np.array([[0.5]], np.float32)
    value, (gw, gb) = fld.loss_and_grad(params, cfg, x, t, loss="l2")
    h = np.maximum(x @ params.weights[0] + params.biases[0], 0.0)
    r = (h @ params.weights[1] + params.biases[1] - t).item()
    assert value == pytest.approx(r * r, rel=1e-5)
    assert np.allclose(gw[1], 2 * r * h.T, rtol=1e-4)
    assert np.allclose(gb[1], 2 * r, rtol=1e-4)


# -- optimizer / training -------------------------------------------------------


def test_adam_step_matches_reference():
    cfg = fld.MlpConfig(input_dim=1, hidden_width=1, num_hidden_layers=0,
                        skip_at=None, output_dim=1, output_sigmoid=False)
    params = fld.init(cfg)
    w0 = params.weights[0].copy()
    g = np.array([[0.5]], np.float32)
    tcfg = fld.TrainConfig(lr=0.1)
    fld.adam_step(params, ([g], [np.zeros(1, np.float32)]), tcfg)
    # first step: m_hat = g, v_hat = g^2, update = lr * g/(|g| + eps)
    expect = w0 - 0.1 * 0.5 / (0.5 + tcfg.eps)
    assert np.allclose(params.weights[0], expect, rtol=1e-6)
    assert params.step == 1


def test_zero_lr_keeps_params(rng):
    cfg = tiny_config()
    params = fld.init(cfg)
    before = fld.params_hash(params)
    x = rng.normal(size=(64, 2)).astype(np.float32)
    t = rng.random(size=(64, 3)).astype(np.float32)
    tcfg = fld.TrainConfig(batch_size=16, lr=0.0, max_steps=8)
    params, _ = fld.train(params, cfg, x, t, tcfg)
    assert fld.params_hash(params) == before


def test_train_is_deterministic(rng):
    cfg = tiny_config()
    x = rng.normal(size=(128, 2)).astype(np.float32)
    t = rng.random(size=(128, 3)).astype(np.float32)
    tcfg = fld.TrainConfig(batch_size=32, lr=1e-3, max_steps=20,
                           shuffle_seed=5)
    p1, h1 = fld.train(fld.init(cfg), cfg, x, t, tcfg)
    p2, h2 = fld.train(fld.init(cfg), cfg, x, t, tcfg)
    assert fld.params_hash(p1) == fld.params_hash(p2)
    assert h1["step_loss"] == h2["step_loss"]


def test_train_respects_max_steps(rng):
    cfg = tiny_config()
    x = rng.normal(size=(100, 2)).astype(np.float32)
    t = rng.random(size=(100, 3)).astype(np.float32)
    tcfg = fld.TrainConfig(batch_size=32, max_steps=11)
    params, hist = fld.train(fld.init(cfg), cfg, x, t, tcfg)
    assert params.step == 11
    assert len(hist["step_loss"]) == 11


def test_training_reduces_loss(rng):
    cfg = tiny_config()
    x = rng.normal(size=(256, 2)).astype(np.float32)
    t = np.full((256, 3), 0.25, np.float32)
    tcfg = fld.TrainConfig(batch_size=64, lr=3e-3, loss="l2", max_steps=150)
    params, hist = fld.train(fld.init(cfg), cfg, x, t, tcfg)
    assert hist["step_loss"][-1] < 0.05 * hist["step_loss"][0]


def test_divergence_reports_last_checkpoint(rng):
    cfg = tiny_config(output_sigmoid=False)
    x = (rng.normal(size=(64, 2)) * 100).astype(np.float32)
    t = rng.normal(size=(64, 3)).astype(np.float32)
    tcfg = fld.TrainConfig(batch_size=16, lr=1e12, loss="l2", epochs=50)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(fld.DivergenceError) as err:
            fld.train(fld.init(cfg), cfg, x, t, tcfg)
    assert err.value.params is not None
    assert len(err.value.history["step_loss"]) >= 1


# -- tangent-kernel plumbing ----------------------------------------------------


def test_jacobian_grams_match_finite_difference_kernel(rng):
    beta = 0.2
    cfg = fld.MlpConfig(input_dim=2, hidden_width=3, num_hidden_layers=1,
                        skip_at=None, output_dim=1, output_sigmoid=False)
    params = fld.init_ntk(cfg, beta=beta)
    x = rng.normal(size=(4, 2))

    grams = fld.jacobian_grams(params, cfg, x)
    dims = cfg.layer_dims()
    kernel = np.zeros((4, 4))
    for (fan_in, _), (dg, ag) in zip(dims, grams):
        kernel += dg * ag / fan_in + beta * beta * dg

    # reference: explicit Jacobian in the kernel parametrization
    # w_hat = W sqrt(fan_in), b_hat = b / beta
    def eval_net(theta):
        p = params.copy().astype(np.float64)
        k = 0
        for i, (fan_in, _) in enumerate(dims):
            wn = p.weights[i].size
            p.weights[i] = (
                theta[k:k + wn].reshape(p.weights[i].shape)
                / np.sqrt(fan_in)
            )
            k += wn
            bn = p.biases[i].size
            p.biases[i] = beta * theta[k:k + bn]
            k += bn
        return np.asarray(
            [fld.forward(p, cfg, xi).item() for xi in x]
        )

    theta0 = []
    for i, (fan_in, _) in enumerate(dims):
        theta0.append(params.weights[i].ravel() * np.sqrt(fan_in))
        theta0.append(params.biases[i].ravel() / beta)
    theta0 = np.concatenate([np.asarray(t, np.float64) for t in theta0])
    h = 1e-6
    J = np.empty((4, theta0.size))
    for p_i in range(theta0.size):
        tp = theta0.copy()
        tp[p_i] += h
        tm = theta0.copy()
        tm[p_i] -= h
        J[:, p_i] = (eval_net(tp) - eval_net(tm)) / (2 * h)
    ref = J @ J.T
    assert np.allclose(kernel, ref, rtol=1e-4, atol=1e-7)


def test_jacobian_grams_rejects_multi_output():
    cfg = tiny_config(output_sigmoid=False)
    params = fld.init(cfg)
    with pytest.raises(fld.FieldError):
        fld.jacobian_grams(params, cfg, np.zeros((2, 2)))


# -- persistence ------------------------------------------------------------------


def test_model_roundtrip(tmp_path, rng):
    from eigenfield.embedding import RffSpec

    cfg = tiny_config(skip_at=1, num_hidden_layers=3)
    params = fld.init(cfg)
    x = rng.normal(size=(64, 2)).astype(np.float32)
    t = rng.random(size=(64, 3)).astype(np.float32)
    params, _ = fld.train(params, cfg, x, t,
                          fld.TrainConfig(batch_size=16, max_steps=5))
    spec = RffSpec(d=2, sigma=0.5, seed=2, input_dim=3)
    path = tmp_path / "model.bin"
    fld.save_model(path, params, cfg, embedding_spec=spec,
                   train_meta={"note": 1}, mesh_hash="abc", basis_hash="def")
    back_params, back_cfg, header = fld.load_model(path)
    assert back_cfg == cfg
    assert fld.params_hash(back_params) == fld.params_hash(params)
    assert back_params.step == params.step
    assert header["mesh_hash"] == "abc"
    assert header["basis_hash"] == "def"
    assert header["train_meta"] == {"note": 1}
    assert np.array_equal(header["embedding_spec"].B, spec.B)


def test_load_model_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTMODEL" + b"\x00" * 32)
    with pytest.raises(fld.FieldError):
        fld.load_model(path)
