import numpy as np
import pytest

from eigenfield import ntk, primitives
from eigenfield.embedding import IntrinsicSpec, RffSpec, embed_points
from eigenfield.ntk import (
    KernelMatrix, NtkError, StationarityCoeffs, empirical_ntk, heatmap_png,
    nngp_ntk, ntk_matrix, relu_duals, stationarity_coeffs,
    stationarity_score,
)
from eigenfield.spectrum import compute_basis


# -- gaussian relu expectations ---------------------------------------------------


def test_relu_duals_perfect_correlation():
    # (u, v) identical: E[relu(u)^2] = s/2, E[u>0] = 1/2
    e_act, e_dot = relu_duals(2.0, 2.0, 2.0)
    assert e_act == pytest.approx(1.0, abs=1e-12)
    assert e_dot == pytest.approx(0.5, abs=1e-12)


def test_relu_duals_anticorrelated():
    # u = -v: the relus never fire together
    e_act, e_dot = relu_duals(1.0, -1.0, 1.0)
    assert e_act == pytest.approx(0.0, abs=1e-12)
    assert e_dot == pytest.approx(0.0, abs=1e-12)


def test_relu_duals_independent():
    # rho = 0: E[relu(u)] E[relu(v)] = s/(2 pi), step expectation 1/4
    e_act, e_dot = relu_duals(1.0, 0.0, 1.0)
    assert e_act == pytest.approx(1.0 / (2.0 * np.pi), abs=1e-12)
    assert e_dot == pytest.approx(0.25, abs=1e-12)


def test_relu_duals_scale():
    e1, _ = relu_duals(1.0, 0.3, 1.0)
    e4, _ = relu_duals(4.0, 1.2, 4.0)
    assert e4 == pytest.approx(4.0 * e1, rel=1e-12)


def test_relu_duals_monte_carlo():
    sxx, sxy, syy = 1.3, -0.4, 0.8
    rng = np.random.default_rng(7)
    cov = np.array([[sxx, sxy], [sxy, syy]])
    z = rng.multivariate_normal([0.0, 0.0], cov, size=1_000_000)
    u, v = z[:, 0], z[:, 1]
    mc_act = float(np.mean(np.maximum(u, 0) * np.maximum(v, 0)))
    mc_dot = float(np.mean((u > 0) & (v > 0)))
    e_act, e_dot = relu_duals(sxx, sxy, syy)
    assert e_act == pytest.approx(mc_act, rel=0.02)
    assert e_dot == pytest.approx(mc_dot, rel=0.02)


def test_relu_duals_rejects_bad_covariance():
    with pytest.raises(NtkError):
        relu_duals(-1.0, 0.0, 1.0)
    with pytest.raises(NtkError):
        relu_duals(1.0, 2.0, 1.0)  # |rho| = 2


def test_relu_duals_elementwise_arrays():
    sxx = np.array([1.0, 2.0])
    sxy = np.array([0.0, 2.0])
    syy = np.array([1.0, 2.0])
    e_act, e_dot = relu_duals(sxx, sxy, syy)
    assert e_act.shape == (2,)
    assert e_act[0] == pytest.approx(1.0 / (2.0 * np.pi))
    assert e_act[1] == pytest.approx(1.0)


# -- kernel recursion ---------------------------------------------------------


def test_depth_one_is_scaled_gram():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(5, 4))
    beta = 0.3
    sigma, theta = nngp_ntk(X, 1, beta)
    want = X @ X.T / 4 + beta * beta
    assert np.allclose(sigma, want, atol=1e-12)
    assert np.allclose(theta, want, atol=1e-12)


def test_depth_two_diagonal_hand_check():
    # one unit-norm input, n0 = 1: s1 = 1 + b^2, then
    # sigma2 = s1/2 + b^2 and theta2 = s1 (1/2 + b^2) + sigma2
    beta = 0.2
    X = np.array([[1.0]])
    sigma, theta = nngp_ntk(X, 2, beta)
    s1 = 1.0 + beta * beta
    s2 = s1 / 2.0 + beta * beta
    t2 = s1 * (0.5 + beta * beta) + s2
    assert sigma[0, 0] == pytest.approx(s2, rel=1e-12)
    assert theta[0, 0] == pytest.approx(t2, rel=1e-12)


def test_theta_diag_grows_from_depth_one_to_two():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(6, 8))
    _, t1 = nngp_ntk(X, 1, 0.5)
    _, t2 = nngp_ntk(X, 2, 0.5)
    assert np.all(np.diag(t2) > np.diag(t1))


def test_kernel_rotation_invariance():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(6, 5))
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    s_a, t_a = nngp_ntk(X, 3, 0.4)
    s_b, t_b = nngp_ntk(X @ q, 3, 0.4)
    assert np.allclose(t_a, t_b, atol=1e-10)
    assert np.allclose(s_a, s_b, atol=1e-10)


def test_explicit_n0_rescales_first_layer():
    X = np.eye(3)
    sigma, _ = nngp_ntk(X, 1, 0.0, n0=1)
    assert np.allclose(sigma, np.eye(3))


def test_recursion_validates_arguments():
    X = np.ones((2, 2))
    with pytest.raises(NtkError):
        nngp_ntk(X, 0, 0.1)
    with pytest.raises(NtkError):
        nngp_ntk(X, 2, -0.1)


# -- kernel container -----------------------------------------------------------


def test_kernel_validate_passes_psd():
    rng = np.random.default_rng(4)
    A = rng.normal(size=(6, 6))
    K = KernelMatrix(A @ A.T + 1e-6 * np.eye(6), depth=2, beta=0.1)
    assert K.validate() is K
    assert K.n == 6


def test_kernel_validate_rejects_asymmetry():
    v = np.eye(3)
    v[0, 1] = 1e-6
    with pytest.raises(NtkError):
        KernelMatrix(v, 1, 0.0).validate()


def test_kernel_validate_rejects_indefinite():
    v = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(NtkError):
        KernelMatrix(v, 1, 0.0).validate()


def test_kernel_validate_rejects_nonpositive_diagonal():
    v = np.diag([1.0, 0.0])
    with pytest.raises(NtkError):
        KernelMatrix(v, 1, 0.0).validate()


def test_kernel_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    A = rng.normal(size=(4, 4))
    K = KernelMatrix(A @ A.T, depth=3, beta=0.25, embedding="{\"d\": 4}")
    path = tmp_path / "k.bin"
    K.save(path)
    back = KernelMatrix.load(path)
    assert np.array_equal(back.values, K.values)
    assert back.depth == 3 and back.beta == 0.25
    assert back.embedding == K.embedding


def test_kernel_load_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTKERN\x00" + b"\x00" * 64)
    with pytest.raises(NtkError):
        KernelMatrix.load(path)


def test_coeffs_save_load_roundtrip(tmp_path):
    c = StationarityCoeffs(np.arange(9.0).reshape(3, 3), basis_hash="abc")
    path = tmp_path / "c.bin"
    c.save(path)
    back = StationarityCoeffs.load(path)
    assert np.array_equal(back.values, c.values)
    assert back.basis_hash == "abc"
    assert back.d == 3
    path.write_bytes(b"XXXXXXXX")
    with pytest.raises(NtkError):
        StationarityCoeffs.load(path)


# -- stationarity diagnostic ------------------------------------------------------


def test_stationarity_score_hand_values():
    c = StationarityCoeffs(np.array([[2.0, 0.0], [1.0, 1.0]]))
    out = stationarity_score(c)
    # off energy 0^2 + 1^2, diag energy 2^2 + 1^2
    assert out["offdiag_ratio"] == pytest.approx(1.0 / 5.0)
    assert out["min_diag"] == pytest.approx(1.0)


def test_stationarity_coeffs_shape_guard(circle256):
    basis = compute_basis(circle256, 4, seed=0)
    with pytest.raises(NtkError):
        stationarity_coeffs(np.eye(7), basis)


def test_constant_kernel_probes_only_the_constant_mode(circle256):
    # K = c 11^T concentrates on phi_0, so off-diagonal energy vanishes
    basis = compute_basis(circle256, 4, seed=0)
    K = np.full((basis.n, basis.n), 2.5)
    c = stationarity_coeffs(K, basis).values
    total_mass = basis.mass.sum()
    assert c[0, 0] == pytest.approx(2.5 * total_mass, rel=1e-9)
    assert np.abs(c - np.diag(np.diag(c))).max() < 1e-12
    assert np.abs(np.diag(c)[1:]).max() < 1e-12


def test_intrinsic_ntk_on_circle_is_stationary(circle256):
    d = 8
    basis = compute_basis(circle256, d, seed=0)
    X = basis.phis * IntrinsicSpec(d=d).coeffs()[None, :]
    K = ntk_matrix(X, depth=3, beta=0.5)
    score = stationarity_score(stationarity_coeffs(K, basis))
    assert score["offdiag_ratio"] < 1e-3
    assert score["min_diag"] >= -1e-8


def test_degenerate_pair_diagonal_equality(circle256):
    # equal coefficients inside a degenerate pair keep the kernel
    # isotropic there, so the paired diagonal entries match
    d = 5
    basis = compute_basis(circle256, d, seed=0)
    X = basis.phis
    K = ntk_matrix(X, depth=3, beta=0.5)
    c = np.diag(stationarity_coeffs(K, basis).values)
    assert abs(c[1] - c[2]) < 1e-6 * abs(c[1])
    assert abs(c[3] - c[4]) < 1e-6 * abs(c[3])


def test_extrinsic_rff_less_stationary_than_intrinsic():
    mesh = primitives.irregular_sphere(n=300, seed=2)
    basis = compute_basis(mesh, 8, seed=0)
    Xi = basis.phis
    Ki = ntk_matrix(Xi, depth=3, beta=0.5)
    ri = stationarity_score(stationarity_coeffs(Ki, basis))["offdiag_ratio"]
    spec = RffSpec(d=16, sigma=1.0, seed=0)
    Xr = embed_points(spec, mesh.vertices)
    Kr = ntk_matrix(Xr, depth=3, beta=0.5)
    rr = stationarity_score(stationarity_coeffs(Kr, basis))["offdiag_ratio"]
    assert rr > 10.0 * ri


# -- finite width ---------------------------------------------------------------


def test_empirical_ntk_deterministic():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(5, 4))
    a = empirical_ntk(X, width=64, depth=2, beta=0.3, seed=0)
    b = empirical_ntk(X, width=64, depth=2, beta=0.3, seed=0)
    c = empirical_ntk(X, width=64, depth=2, beta=0.3, seed=1)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_empirical_ntk_approaches_analytic(circle256):
    basis = compute_basis(circle256, 8, seed=0)
    X = basis.phis[::32]  # 8 points
    beta = 0.2
    analytic = ntk_matrix(X, depth=2, beta=beta).values
    emp = empirical_ntk(X, width=1024, depth=2, beta=beta, seed=0,
                        n_draws=4)
    rel = np.linalg.norm(emp - analytic) / np.linalg.norm(analytic)
    assert rel < 0.1


# -- plots ----------------------------------------------------------------------


def test_heatmap_png_sidecar(tmp_path):
    m = np.linspace(0.0, 3.0, 16).reshape(4, 4)
    path = tmp_path / "m.png"
    heatmap_png(m, path)
    from eigenfield.render import load_png
    import json
    img = load_png(path)
    assert img.shape == (4, 4, 3)
    meta = json.loads((tmp_path / "m.png.json").read_text())
    assert meta["min"] == 0.0 and meta["max"] == 3.0
    # extremes map to different colors
    assert not np.allclose(img[0, 0], img[3, 3])
